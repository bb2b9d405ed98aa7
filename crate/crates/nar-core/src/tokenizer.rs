//! Graph-to-sequence encoding.
//!
//! Each node becomes one fixed-width token built from sinusoidal encodings
//! of real numbers: its operation index, its own position, and the summed
//! encodings of its predecessor positions. Two sentinel rows follow the
//! node tokens: an end token and a raw depth encoding. The result is an
//! (N+2)xD matrix whose storage is linear in N — no adjacency matrix is
//! ever materialized.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{NarError, Result};
use crate::graph::{ArchGraph, MAX_ATTRS, MAX_SHAPE};

/// Sentinel scalar encoded into every block of the end token.
pub const END_TOKEN_VALUE: f64 = 1e5;

/// How the self-position encoding is combined with the operation encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelfEncoding {
    /// Concatenate op, self and source blocks (the default layout).
    #[default]
    Concat,
    /// Add the self encoding elementwise into the op block (ablation mode;
    /// requires matching half-lengths).
    Add,
}

/// Half-lengths of each sub-encoding plus the extended-mode switches.
/// The token width D is derived, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(default = "default_l")]
    pub l_op: usize,
    #[serde(default = "default_l")]
    pub l_self: usize,
    #[serde(default = "default_l")]
    pub l_sour: usize,
    /// Half-length of the depth encoding; defaults to D/2 so the raw depth
    /// row is already D wide.
    #[serde(default)]
    pub l_dep: Option<usize>,
    /// When set, each token also carries 8 attribute and 4 output-shape
    /// encodings (latency prediction needs them).
    #[serde(default)]
    pub extended: bool,
    #[serde(default = "default_l_ext")]
    pub l_attr: usize,
    #[serde(default = "default_l_ext")]
    pub l_shape: usize,
    #[serde(default)]
    pub self_encoding: SelfEncoding,
}

fn default_l() -> usize {
    32
}

fn default_l_ext() -> usize {
    4
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            l_op: 32,
            l_self: 32,
            l_sour: 32,
            l_dep: None,
            extended: false,
            l_attr: 4,
            l_shape: 4,
            self_encoding: SelfEncoding::Concat,
        }
    }
}

impl EncoderSpec {
    /// Base-mode spec with equal half-lengths for op/self/source blocks.
    pub fn with_l(l: usize) -> Self {
        EncoderSpec {
            l_op: l,
            l_self: l,
            l_sour: l,
            ..Default::default()
        }
    }

    /// Extended-mode spec (attribute and shape blocks included).
    pub fn extended(l: usize, l_attr: usize, l_shape: usize) -> Self {
        EncoderSpec {
            l_op: l,
            l_self: l,
            l_sour: l,
            extended: true,
            l_attr,
            l_shape,
            ..Default::default()
        }
    }

    /// Token width D implied by the block layout.
    pub fn token_width(&self) -> usize {
        let self_part = match self.self_encoding {
            SelfEncoding::Concat => self.l_self,
            SelfEncoding::Add => 0,
        };
        let mut d = 2 * (self.l_op + self_part + self.l_sour);
        if self.extended {
            d += 2 * (MAX_ATTRS * self.l_attr + MAX_SHAPE * self.l_shape);
        }
        d
    }

    /// Effective depth half-length (defaults to D/2).
    pub fn l_dep(&self) -> usize {
        self.l_dep.unwrap_or(self.token_width() / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.l_op, self.l_self, self.l_sour];
        if ls.iter().any(|&l| l < 2) {
            return Err(NarError::InvalidSpec(
                "all half-lengths must be >= 2".into(),
            ));
        }
        if self.extended && (self.l_attr < 2 || self.l_shape < 2) {
            return Err(NarError::InvalidSpec(
                "extended half-lengths must be >= 2".into(),
            ));
        }
        if self.self_encoding == SelfEncoding::Add && self.l_op != self.l_self {
            return Err(NarError::InvalidSpec(
                "self_encoding=add requires l_op == l_self".into(),
            ));
        }
        let l_dep = self.l_dep();
        if l_dep < 2 {
            return Err(NarError::InvalidSpec("l_dep must be >= 2".into()));
        }
        if 2 * l_dep > self.token_width() {
            return Err(NarError::InvalidSpec(format!(
                "depth encoding of width {} exceeds token width {}",
                2 * l_dep,
                self.token_width()
            )));
        }
        Ok(())
    }
}

/// The (N+2)xD encoding of one architecture. Stored row-major in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub n_nodes: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Interpolated frequencies b_1..b_L spanning [2^0, 2^(L-1)] with uniform
/// step (2^(L-1) - 1) / (L - 1). Endpoints are pinned exactly.
pub fn freq_vector(l: usize) -> Result<Vec<f64>> {
    if l < 2 {
        return Err(NarError::InvalidSpec(format!("frequency count {l} < 2")));
    }
    let top = (2f64).powi(l as i32 - 1);
    let step = (top - 1.0) / (l as f64 - 1.0);
    let mut b: Vec<f64> = (0..l).map(|i| 1.0 + i as f64 * step).collect();
    b[l - 1] = top;
    Ok(b)
}

/// Maps a real number p to [sin(b1*p*pi), cos(b1*p*pi), ..., sin(bL*p*pi), cos(bL*p*pi)].
pub fn encode_scalar(p: f64, l: usize) -> Result<Vec<f64>> {
    let freqs = freq_vector(l)?;
    let mut out = vec![0.0; 2 * l];
    encode_scalar_into(p, &freqs, &mut out)?;
    Ok(out)
}

fn encode_scalar_into(p: f64, freqs: &[f64], out: &mut [f64]) -> Result<()> {
    if !p.is_finite() {
        return Err(NarError::NonFinite {
            op: "encode_scalar",
        });
    }
    debug_assert_eq!(out.len(), 2 * freqs.len());
    for (i, &b) in freqs.iter().enumerate() {
        let (s, c) = (b * p * std::f64::consts::PI).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Ok(())
}

fn add_scalar_encoding(p: f64, freqs: &[f64], out: &mut [f64]) -> Result<()> {
    if !p.is_finite() {
        return Err(NarError::NonFinite {
            op: "encode_scalar",
        });
    }
    for (i, &b) in freqs.iter().enumerate() {
        let (s, c) = (b * p * std::f64::consts::PI).sin_cos();
        out[2 * i] += s;
        out[2 * i + 1] += c;
    }
    Ok(())
}

/// Precomputed frequency tables for one spec.
struct FreqTables {
    op: Vec<f64>,
    self_pos: Vec<f64>,
    sour: Vec<f64>,
    attr: Vec<f64>,
    shape: Vec<f64>,
    dep: Vec<f64>,
}

impl FreqTables {
    fn new(spec: &EncoderSpec) -> Result<Self> {
        Ok(FreqTables {
            op: freq_vector(spec.l_op)?,
            self_pos: freq_vector(spec.l_self)?,
            sour: freq_vector(spec.l_sour)?,
            attr: if spec.extended {
                freq_vector(spec.l_attr)?
            } else {
                Vec::new()
            },
            shape: if spec.extended {
                freq_vector(spec.l_shape)?
            } else {
                Vec::new()
            },
            dep: freq_vector(spec.l_dep())?,
        })
    }
}

fn encode_node_into(
    g: &ArchGraph,
    i: usize,
    spec: &EncoderSpec,
    tables: &FreqTables,
    out: &mut [f64],
) -> Result<()> {
    let node = &g.nodes()[i];
    let mut cursor;

    let op_width = 2 * spec.l_op;
    encode_scalar_into(node.op_index as f64, &tables.op, &mut out[..op_width])?;
    match spec.self_encoding {
        SelfEncoding::Concat => {
            let w = 2 * spec.l_self;
            encode_scalar_into(i as f64, &tables.self_pos, &mut out[op_width..op_width + w])?;
            cursor = op_width + w;
        }
        SelfEncoding::Add => {
            add_scalar_encoding(i as f64, &tables.self_pos, &mut out[..op_width])?;
            cursor = op_width;
        }
    }

    let sour_width = 2 * spec.l_sour;
    let sour = &mut out[cursor..cursor + sour_width];
    sour.fill(0.0);
    for j in g.predecessors(i)? {
        add_scalar_encoding(j as f64, &tables.sour, sour)?;
    }
    cursor += sour_width;

    if spec.extended {
        let aw = 2 * spec.l_attr;
        for k in 0..MAX_ATTRS {
            let v = node.attrs.get(k).copied().unwrap_or(0.0);
            encode_scalar_into(v, &tables.attr, &mut out[cursor..cursor + aw])?;
            cursor += aw;
        }
        let sw = 2 * spec.l_shape;
        for k in 0..MAX_SHAPE {
            let v = node.output_shape.get(k).copied().unwrap_or(0) as f64;
            encode_scalar_into(v, &tables.shape, &mut out[cursor..cursor + sw])?;
            cursor += sw;
        }
    }
    debug_assert_eq!(cursor, out.len());
    Ok(())
}

fn encode_end_into(spec: &EncoderSpec, tables: &FreqTables, out: &mut [f64]) -> Result<()> {
    let mut cursor;
    let op_width = 2 * spec.l_op;
    encode_scalar_into(END_TOKEN_VALUE, &tables.op, &mut out[..op_width])?;
    match spec.self_encoding {
        SelfEncoding::Concat => {
            let w = 2 * spec.l_self;
            encode_scalar_into(
                END_TOKEN_VALUE,
                &tables.self_pos,
                &mut out[op_width..op_width + w],
            )?;
            cursor = op_width + w;
        }
        SelfEncoding::Add => {
            add_scalar_encoding(END_TOKEN_VALUE, &tables.self_pos, &mut out[..op_width])?;
            cursor = op_width;
        }
    }
    let sour_width = 2 * spec.l_sour;
    encode_scalar_into(
        END_TOKEN_VALUE,
        &tables.sour,
        &mut out[cursor..cursor + sour_width],
    )?;
    cursor += sour_width;
    if spec.extended {
        let aw = 2 * spec.l_attr;
        for _ in 0..MAX_ATTRS {
            encode_scalar_into(END_TOKEN_VALUE, &tables.attr, &mut out[cursor..cursor + aw])?;
            cursor += aw;
        }
        let sw = 2 * spec.l_shape;
        for _ in 0..MAX_SHAPE {
            encode_scalar_into(
                END_TOKEN_VALUE,
                &tables.shape,
                &mut out[cursor..cursor + sw],
            )?;
            cursor += sw;
        }
    }
    Ok(())
}

/// Token for node `i`: op block, self block, summed source block, and in
/// extended mode the attribute/shape blocks (missing slots encode 0).
pub fn encode_node(g: &ArchGraph, i: usize, spec: &EncoderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if i >= g.n_nodes() {
        return Err(NarError::NodeIndexOutOfRange {
            index: i,
            n_nodes: g.n_nodes(),
        });
    }
    let tables = FreqTables::new(spec)?;
    let mut out = vec![0.0; spec.token_width()];
    encode_node_into(g, i, spec, &tables, &mut out)?;
    Ok(out)
}

/// End token: every block encodes the sentinel value 1e5.
pub fn encode_end(spec: &EncoderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let tables = FreqTables::new(spec)?;
    let mut out = vec![0.0; spec.token_width()];
    encode_end_into(spec, &tables, &mut out)?;
    Ok(out)
}

/// Raw depth encoding f_Dep(N) of length 2*l_dep. The learnable affine and
/// ReLU that complete the depth token live in the model, keeping this
/// function pure.
pub fn encode_depth_raw(n: usize, spec: &EncoderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if n < 1 {
        return Err(NarError::InvalidSpec("depth must be >= 1".into()));
    }
    encode_scalar(n as f64, spec.l_dep())
}

/// Encodes a full graph: N node tokens in encoding order, the end token,
/// then the raw depth row (zero-padded to width D when 2*l_dep < D).
pub fn tokenize(g: &ArchGraph, spec: &EncoderSpec) -> Result<TokenSequence> {
    spec.validate()?;
    let tables = FreqTables::new(spec)?;
    let n = g.n_nodes();
    let d = spec.token_width();
    let rows = n + 2;
    let mut data = vec![0.0; rows * d];
    for i in 0..n {
        encode_node_into(g, i, spec, &tables, &mut data[i * d..(i + 1) * d])?;
    }
    encode_end_into(spec, &tables, &mut data[n * d..(n + 1) * d])?;
    let dep_width = 2 * spec.l_dep();
    let dep_row = &mut data[(n + 1) * d..(n + 1) * d + dep_width];
    encode_scalar_into(n as f64, &tables.dep, dep_row)?;
    Ok(TokenSequence {
        n_nodes: n,
        rows,
        cols: d,
        data,
    })
}

// --- binary emit format -------------------------------------------------

pub const NART_MAGIC: &[u8; 4] = b"NART";

/// Writes the token matrix as little-endian f32 with a 16-byte header:
/// magic "NART", u32 rows, u32 cols, u32 reserved.
pub fn write_nart<W: Write>(seq: &TokenSequence, w: &mut W) -> Result<()> {
    w.write_all(NART_MAGIC)?;
    w.write_all(&(seq.rows() as u32).to_le_bytes())?;
    w.write_all(&(seq.cols() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for &v in seq.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads the binary token format back as (rows, cols, data).
pub fn read_nart<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != NART_MAGIC {
        return Err(NarError::Checkpoint("bad token matrix magic".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}
