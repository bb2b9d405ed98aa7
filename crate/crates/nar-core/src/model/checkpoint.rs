//! Checkpoint serialization.
//!
//! Binary weights: magic "NARF", u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u8 rank, u32 dims and
//! little-endian f32 data. A JSON sidecar at `<path>.json` carries the
//! model config, encoder spec and any caller extras (vocabulary, target
//! transform).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NarError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Scalar;
use crate::tokenizer::EncoderSpec;

pub const NARF_MAGIC: &[u8; 4] = b"NARF";
pub const NARF_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub encoder: EncoderSpec,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes weights plus the JSON sidecar. Training runs in f32, so the
/// on-disk f32 payload round-trips bit-exactly.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(NARF_MAGIC)?;
    w.write_all(&NARF_VERSION.to_le_bytes())?;
    w.write_all(&(params.n_tensors() as u32).to_le_bytes())?;
    let mut result = Ok(());
    params.visit(&mut |name, t| {
        if result.is_err() {
            return;
        }
        result = (|| -> Result<()> {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(NarError::Checkpoint(format!(
                    "tensor name too long: {name}"
                )));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[2u8])?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
            Ok(())
        })();
    });
    result?;
    w.flush()?;
    let sidecar = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| NarError::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

/// Loads weights and sidecar, validating magic, version, tensor count and
/// per-tensor shapes against the configuration stored alongside.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, CheckpointMeta)> {
    let meta_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        NarError::Checkpoint(format!("missing sidecar for {}: {e}", path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    meta.model.validate()?;

    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    read_exact_or(&mut r, &mut header, "header")?;
    if &header[..4] != NARF_MAGIC {
        return Err(NarError::Checkpoint("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != NARF_VERSION {
        return Err(NarError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {NARF_VERSION})"
        )));
    }
    let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;

    let mut tensors: BTreeMap<String, (usize, usize, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        read_exact_or(&mut r, &mut len2, "tensor name length")?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| NarError::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact_or(&mut r, &mut rank, "tensor rank")?;
        if rank[0] == 0 || rank[0] > 2 {
            return Err(NarError::Checkpoint(format!(
                "unsupported tensor rank {}",
                rank[0]
            )));
        }
        let mut dims = [1usize; 2];
        for d in dims.iter_mut().take(rank[0] as usize) {
            let mut dim = [0u8; 4];
            read_exact_or(&mut r, &mut dim, "tensor dim")?;
            *d = u32::from_le_bytes(dim) as usize;
        }
        let (rows, cols) = if rank[0] == 1 {
            (1, dims[0])
        } else {
            (dims[0], dims[1])
        };
        let mut data = vec![0u8; rows * cols * 4];
        read_exact_or(&mut r, &mut data, &format!("data of {name}"))?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (rows, cols, values)).is_some() {
            return Err(NarError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NarError::Checkpoint(
            "trailing bytes after last tensor".into(),
        ));
    }

    let mut params: ModelParams<T> = ModelParams::init(&meta.model, 0)?;
    if params.n_tensors() != count {
        return Err(NarError::Checkpoint(format!(
            "tensor count {count} does not match configuration ({} expected)",
            params.n_tensors()
        )));
    }
    let mut fill = Ok(());
    params.visit_mut(&mut |name, t| {
        if fill.is_err() {
            return;
        }
        fill = (|| -> Result<()> {
            let (rows, cols, values) = tensors
                .remove(&name)
                .ok_or_else(|| NarError::Checkpoint(format!("missing tensor {name}")))?;
            if (rows, cols) != (t.rows(), t.cols()) {
                return Err(NarError::Checkpoint(format!(
                    "tensor {name}: shape {rows}x{cols} does not match {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            for (dst, v) in t.data_mut().iter_mut().zip(values) {
                *dst = T::from_f64(v as f64);
            }
            Ok(())
        })();
    });
    fill?;
    Ok((params, meta))
}
