//! End-to-end training and evaluation pipeline.
//!
//! A training step tokenizes the batch (originals plus freshly sampled
//! augmented partners), runs one forward tape per sample in parallel,
//! couples the collected predictions through the loss on a small separate
//! tape, then backpropagates each sample seeded with its share of the loss
//! gradient. Per-sample gradients are reduced over a fixed chunk grid so
//! results are bit-identical for any worker count, including none.

pub mod synth;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augmented, AugMode};
use crate::error::{NarError, Result};
use crate::graph::{self, ArchGraph, OpVocab};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::adam::{adam_step, AdamHyper, AdamState};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::Scalar;
use crate::objectives::{self, SrVariant};
use crate::par;
use crate::tokenizer::{tokenize, EncoderSpec, TokenSequence};

/// Fixed reduction grid for per-sample gradients; independent of the
/// worker count so summation order never changes.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = NarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(NarError::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataItem {
    pub graph: ArchGraph,
    pub target: f64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub vocab: OpVocab,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Maps raw targets into model space and back for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetTransform {
    Identity,
    /// Min-max over the train split: raw range maps onto [0, 1].
    MinMax {
        min: f64,
        max: f64,
    },
    /// Natural log; latency targets span orders of magnitude.
    Log,
}

impl TargetTransform {
    pub fn apply(&self, y: f64) -> f64 {
        match self {
            TargetTransform::Identity => y,
            TargetTransform::MinMax { min, max } => (y - min) / (max - min),
            TargetTransform::Log => y.ln(),
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        match self {
            TargetTransform::Identity => y,
            TargetTransform::MinMax { min, max } => y * (max - min) + min,
            TargetTransform::Log => y.exp(),
        }
    }
}

/// Min-max statistics from the train split. Errors when the train targets
/// are constant (the map would be degenerate) or the split is empty.
pub fn normalize_targets(dataset: &Dataset) -> Result<TargetTransform> {
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(NarError::Dataset("empty train split".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &i in &train {
        let t = dataset.items[i].target;
        min = min.min(t);
        max = max.max(t);
    }
    if !(max - min).is_finite() || max == min {
        return Err(NarError::Dataset(
            "train targets are constant; min-max normalization undefined".into(),
        ));
    }
    Ok(TargetTransform::MinMax { min, max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Tau,
    Mape,
}

impl std::str::FromStr for EvalMetric {
    type Err = NarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(EvalMetric::Tau),
            "mape" => Ok(EvalMetric::Mape),
            other => Err(NarError::InvalidSpec(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub normalize_targets: bool,
    /// None disables augmentation entirely.
    #[serde(default)]
    pub aug_mode: Option<AugMode>,
    #[serde(default = "default_aug_per_graph")]
    pub aug_per_graph: usize,
    #[serde(default)]
    pub weights: objectives::LossWeights,
    #[serde(default)]
    pub sr_variant: SrVariant,
    #[serde(default)]
    pub mse_mean: bool,
    #[serde(default = "default_metric")]
    pub eval_metric: EvalMetric,
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

fn default_aug_per_graph() -> usize {
    1
}

fn default_metric() -> EvalMetric {
    EvalMetric::Tau
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(NarError::InvalidSpec("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(NarError::InvalidSpec("batch size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(NarError::InvalidSpec(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub mse: f64,
    pub sr: f64,
    pub ac: f64,
    pub total: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug)]
pub struct FitResult {
    pub params: ModelParams<f32>,
    pub transform: TargetTransform,
    pub history: Vec<HistoryRow>,
    pub best_val_metric: Option<f64>,
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,step,mse,sr,ac,total,val_metric")?;
    for r in rows {
        let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.mse, r.sr, r.ac, r.total, val
        )?;
    }
    w.flush()?;
    Ok(())
}

fn mix64(mut a: u64, b: u64) -> u64 {
    a = a
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    a ^= a >> 30;
    a = a.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    a ^= a >> 27;
    a.wrapping_mul(0x94d0_49bb_1331_11eb) ^ (a >> 31)
}

struct SampleRun<'p> {
    tape: Tape<'p, f32>,
    pred: Var,
    flat: Vec<Var>,
    value: f64,
}

fn run_forward<'p>(
    params: &'p ModelParams<f32>,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
) -> Result<SampleRun<'p>> {
    let mut tape = Tape::new();
    let bound = model::bind(&mut tape, params)?;
    let t = model::tokens_leaf(&mut tape, tokens)?;
    let pred = model::forward(&mut tape, &bound, cfg, t)?;
    let value = tape.scalar_value(pred)?.to_f64();
    Ok(SampleRun {
        tape,
        pred,
        flat: bound.flat,
        value,
    })
}

/// One optimizer step over a prepared batch. `ac_pairs` lists positions of
/// (original, augmented) prediction pairs inside the batch. Returns the
/// (mse, sr, ac, total) loss values.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams<f32>,
    states: &mut [AdamState<f32>],
    hyper: &AdamHyper,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    batch_tokens: &[&TokenSequence],
    batch_targets: &[f64],
    ac_pairs: &(Vec<usize>, Vec<usize>),
    step_seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let m = batch_tokens.len();
    debug_assert_eq!(m, batch_targets.len());

    // Phase A: independent forward tapes, in parallel, order preserved.
    let frozen: &ModelParams<f32> = params;
    let runs = par::map_slice(batch_tokens, |tok| run_forward(frozen, cfg, tok));
    let mut samples = Vec::with_capacity(m);
    for run in runs {
        samples.push(run?);
    }

    // Phase B: couple the predictions through the loss on a small tape.
    let preds: Vec<f32> = samples.iter().map(|s| s.value as f32).collect();
    let targets: Vec<f32> = batch_targets.iter().map(|&t| t as f32).collect();
    let mut loss_tape: Tape<'_, f32> = Tape::new();
    let pred_var = loss_tape.leaf_owned(m, 1, preds, true)?;
    let target_var = loss_tape.leaf_owned(m, 1, targets, false)?;
    let mut shuffle: Vec<usize> = (0..m).collect();
    shuffle.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(step_seed, 0xdead)));
    let ac_pair = if ac_pairs.0.is_empty() {
        None
    } else {
        let orig = loss_tape.gather_rows(pred_var, &ac_pairs.0)?;
        let aug = loss_tape.gather_rows(pred_var, &ac_pairs.1)?;
        Some((orig, aug))
    };
    let mse = objectives::mse_loss(&mut loss_tape, pred_var, target_var, train_cfg.mse_mean)?;
    let sr = objectives::sr_loss_with(
        &mut loss_tape,
        pred_var,
        target_var,
        &shuffle,
        train_cfg.sr_variant,
    )?;
    let ac_value = match ac_pair {
        Some((o, a)) => {
            let l = objectives::ac_loss(&mut loss_tape, o, a)?;
            loss_tape.scalar_value(l)?.to_f64()
        }
        None => 0.0,
    };
    let loss = objectives::total_loss(
        &mut loss_tape,
        pred_var,
        target_var,
        &shuffle,
        ac_pair,
        &train_cfg.weights,
        train_cfg.sr_variant,
        train_cfg.mse_mean,
    )?;
    let terms = (
        loss_tape.scalar_value(mse)?.to_f64(),
        loss_tape.scalar_value(sr)?.to_f64(),
        ac_value,
        loss_tape.scalar_value(loss)?.to_f64(),
    );
    if !terms.3.is_finite() {
        return Err(NarError::Diverged(format!(
            "non-finite loss (mse {}, sr {}, ac {})",
            terms.0, terms.1, terms.2
        )));
    }
    loss_tape.backward(loss)?;
    let pred_grads: Vec<f32> = loss_tape
        .grad(pred_var)
        .ok_or_else(|| NarError::Diverged("loss did not reach predictions".into()))?
        .to_vec();

    // Phase C: per-sample backward over a fixed chunk grid, then an ordered
    // serial reduction. Chunk boundaries never depend on the worker count.
    let mut shapes = Vec::new();
    params.visit(&mut |_, t| shapes.push(t.len()));
    let chunk_size = m.div_ceil(GRAD_CHUNKS);
    let mut chunks: Vec<Vec<(SampleRun<'_>, f32)>> = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if i % chunk_size == 0 {
            chunks.push(Vec::with_capacity(chunk_size));
        }
        chunks.last_mut().unwrap().push((s, pred_grads[i]));
    }
    let chunk_grads = par::map_vec(chunks, |chunk| -> Result<Vec<Vec<f32>>> {
        let mut acc: Vec<Vec<f32>> = shapes.iter().map(|&len| vec![0.0; len]).collect();
        for (mut sample, seed) in chunk {
            sample.tape.backward_seeded(sample.pred, &[seed])?;
            for (buf, &var) in acc.iter_mut().zip(&sample.flat) {
                let g = sample
                    .tape
                    .grad(var)
                    .ok_or_else(|| NarError::Diverged("missing parameter gradient".into()))?;
                for (a, &gi) in buf.iter_mut().zip(g) {
                    *a += gi;
                }
            }
        }
        Ok(acc)
    });
    let mut total: Vec<Vec<f32>> = shapes.iter().map(|&len| vec![0.0; len]).collect();
    for chunk in chunk_grads {
        for (t, c) in total.iter_mut().zip(chunk?) {
            for (a, b) in t.iter_mut().zip(c) {
                *a += b;
            }
        }
    }

    let mut k = 0;
    let mut adam_result = Ok(());
    params.visit_mut(&mut |_, t| {
        if adam_result.is_err() {
            return;
        }
        t.set_grad(total[k].clone())
            .expect("aligned by construction");
        adam_result = adam_step(t, &total[k], &mut states[k], hyper);
        k += 1;
    });
    adam_result?;
    Ok(terms)
}

fn eval_tokens(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    tokens: &[&TokenSequence],
) -> Result<Vec<f64>> {
    let preds = par::map_slice(tokens, |tok| model::predict_one(params, cfg, tok));
    preds.into_iter().collect()
}

fn metric_value(
    metric: EvalMetric,
    preds_model_space: &[f64],
    raw_targets: &[f64],
    transform: &TargetTransform,
) -> Result<f64> {
    match metric {
        EvalMetric::Tau => objectives::kendall_tau(preds_model_space, raw_targets),
        EvalMetric::Mape => {
            let raw_preds: Vec<f64> = preds_model_space
                .iter()
                .map(|&p| transform.invert(p))
                .collect();
            objectives::mape(&raw_preds, raw_targets)
        }
    }
}

fn better(metric: EvalMetric, candidate: f64, best: f64) -> bool {
    match metric {
        EvalMetric::Tau => candidate > best,
        EvalMetric::Mape => candidate < best,
    }
}

/// The parameter initialization a [`fit`] call with this config starts from.
pub fn initial_params(cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(cfg, mix64(train_cfg.seed, 0x1417))
}

/// Trains from a fresh initialization. See [`fit_from`] for the warm-start
/// variant the search loop uses.
pub fn fit(
    dataset: &Dataset,
    encoder: &EncoderSpec,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FitResult> {
    let params = initial_params(cfg, train_cfg)?;
    fit_from(params, dataset, encoder, cfg, train_cfg)
}

/// Runs the optimization loop starting from the given parameters and
/// returns the best-on-validation set (final parameters when the dataset
/// has no validation split).
pub fn fit_from(
    mut params: ModelParams<f32>,
    dataset: &Dataset,
    encoder: &EncoderSpec,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    encoder.validate()?;
    train_cfg.validate()?;
    if encoder.token_width() != cfg.token_width {
        return Err(NarError::InvalidSpec(format!(
            "encoder width {} vs model width {}",
            encoder.token_width(),
            cfg.token_width
        )));
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(NarError::Dataset("empty train split".into()));
    }
    let val_idx = dataset.indices(Split::Val);

    let transform = match (train_cfg.normalize_targets, train_cfg.eval_metric) {
        (true, EvalMetric::Tau) => normalize_targets(dataset)?,
        (true, EvalMetric::Mape) => {
            if dataset.items.iter().any(|i| i.target <= 0.0) {
                return Err(NarError::Dataset(
                    "log transform requires positive targets".into(),
                ));
            }
            TargetTransform::Log
        }
        (false, _) => TargetTransform::Identity,
    };

    // Tokenize everything once; graphs are immutable and tokenization is pure.
    let all_tokens = {
        let results = par::map_slice(&dataset.items, |item| tokenize(&item.graph, encoder));
        let mut toks = Vec::with_capacity(results.len());
        for r in results {
            toks.push(r?);
        }
        toks
    };

    let mut states: Vec<AdamState<f32>> = Vec::new();
    params.visit(&mut |_, t| states.push(AdamState::new(t.len())));
    let hyper = AdamHyper::with_lr(train_cfg.lr)?;

    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(
            train_cfg.seed,
            epoch as u64,
        )));

        for batch in order.chunks(train_cfg.batch_size) {
            // Assemble originals plus augmented partners.
            let mut tokens: Vec<&TokenSequence> = batch.iter().map(|&i| &all_tokens[i]).collect();
            let mut targets: Vec<f64> = batch
                .iter()
                .map(|&i| transform.apply(dataset.items[i].target))
                .collect();
            let mut aug_tokens: Vec<TokenSequence> = Vec::new();
            let mut pair_orig = Vec::new();
            let mut pair_aug = Vec::new();
            if let Some(mode) = train_cfg.aug_mode {
                for (pos, &i) in batch.iter().enumerate() {
                    let seed = mix64(mix64(train_cfg.seed, step as u64), i as u64);
                    let partners = sample_augmented(
                        &dataset.items[i].graph,
                        train_cfg.aug_per_graph,
                        mode,
                        seed,
                    )?;
                    for partner in partners {
                        aug_tokens.push(tokenize(&partner, encoder)?);
                        pair_orig.push(pos);
                        targets.push(transform.apply(dataset.items[i].target));
                    }
                }
                let base = batch.len();
                pair_aug.extend(base..base + aug_tokens.len());
                // borrow of aug_tokens must outlive tokens extension below
            }
            for t in &aug_tokens {
                tokens.push(t);
            }

            let terms = train_step(
                &mut params,
                &mut states,
                &hyper,
                cfg,
                train_cfg,
                &tokens,
                &targets,
                &(pair_orig, pair_aug),
                mix64(train_cfg.seed, 0x57e9_0000 + step as u64),
            )?;
            history.push(HistoryRow {
                epoch,
                step,
                mse: terms.0,
                sr: terms.1,
                ac: terms.2,
                total: terms.3,
                val_metric: None,
            });
            step += 1;
        }

        if !val_idx.is_empty() {
            let val_tokens: Vec<&TokenSequence> = val_idx.iter().map(|&i| &all_tokens[i]).collect();
            let val_targets: Vec<f64> = val_idx.iter().map(|&i| dataset.items[i].target).collect();
            let preds = eval_tokens(&params, cfg, &val_tokens)?;
            let metric = metric_value(train_cfg.eval_metric, &preds, &val_targets, &transform)?;
            if let Some(row) = history.last_mut() {
                row.val_metric = Some(metric);
            }
            let improved = match &best {
                Some((b, _)) => better(train_cfg.eval_metric, metric, *b),
                None => true,
            };
            if improved {
                best = Some((metric, params.clone()));
            }
            log::info!(
                "epoch {epoch}: train loss {:.5}, val {:?} {metric:.5}{}",
                history.last().map(|r| r.total).unwrap_or(f64::NAN),
                train_cfg.eval_metric,
                if improved { " (best so far)" } else { "" }
            );
        } else {
            log::info!(
                "epoch {epoch}: train loss {:.5}",
                history.last().map(|r| r.total).unwrap_or(f64::NAN)
            );
        }
    }

    let (best_val_metric, final_params) = match best {
        Some((metric, p)) => (Some(metric), p),
        None => (None, params),
    };
    Ok(FitResult {
        params: final_params,
        transform,
        history,
        best_val_metric,
    })
}

/// Inference over a split in insertion order; returns the metric value.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    encoder: &EncoderSpec,
    dataset: &Dataset,
    split: Split,
    metric: EvalMetric,
    transform: &TargetTransform,
) -> Result<f64> {
    let (preds, targets) = predict_split(params, cfg, encoder, dataset, split)?;
    metric_value(metric, &preds, &targets, transform)
}

/// Model-space predictions and raw targets for a split, in insertion order.
pub fn predict_split(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    encoder: &EncoderSpec,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(NarError::Dataset(format!("empty {split} split")));
    }
    let graphs: Vec<&ArchGraph> = idx.iter().map(|&i| &dataset.items[i].graph).collect();
    let tokens = {
        let results = par::map_slice(&graphs, |g| tokenize(g, encoder));
        let mut toks = Vec::with_capacity(results.len());
        for r in results {
            toks.push(r?);
        }
        toks
    };
    let refs: Vec<&TokenSequence> = tokens.iter().collect();
    let preds = eval_tokens(params, cfg, &refs)?;
    let targets = idx.iter().map(|&i| dataset.items[i].target).collect();
    Ok((preds, targets))
}

// --- dataset files -----------------------------------------------------------

#[derive(Debug, Deserialize)]
struct DatasetLine {
    arch: serde_json::Value,
    target: f64,
    split: String,
}

/// Loads a JSON Lines dataset. Each line holds an architecture (inline
/// object or a path relative to the dataset file), a numeric target and a
/// split tag. Without an explicit vocabulary, op names across the whole
/// file are collected and indexed in sorted order.
pub fn load_dataset(path: &Path, vocab: Option<OpVocab>) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| NarError::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(&line)
            .map_err(|e| NarError::Dataset(format!("line {}: {e}", lineno + 1)))?;
        if !parsed.target.is_finite() {
            return Err(NarError::Dataset(format!(
                "line {}: non-finite target",
                lineno + 1
            )));
        }
        let arch_value = match &parsed.arch {
            serde_json::Value::String(rel) => {
                let text = std::fs::read_to_string(base.join(rel)).map_err(|e| {
                    NarError::Dataset(format!("line {}: cannot read {rel}: {e}", lineno + 1))
                })?;
                serde_json::from_str(&text)?
            }
            other => other.clone(),
        };
        lines.push((arch_value, parsed.target, parsed.split.parse::<Split>()?));
    }
    if lines.is_empty() {
        return Err(NarError::Dataset("dataset file has no entries".into()));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let mut names = BTreeSet::new();
            for (arch, _, _) in &lines {
                graph::collect_op_names(arch, &mut names);
            }
            OpVocab::from_names(names)?
        }
    };
    let mut items = Vec::with_capacity(lines.len());
    for (arch, target, split) in lines {
        items.push(DataItem {
            graph: graph::parse_arch_value(&arch, &vocab)?,
            target,
            split,
        });
    }
    Ok(Dataset { items, vocab })
}

/// Writes a dataset as JSON Lines with inline architecture objects.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in &dataset.items {
        let line = serde_json::json!({
            "arch": graph::arch_to_json(&item.graph, &dataset.vocab)?,
            "target": item.target,
            "split": item.split.to_string(),
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_heads: Some(2),
            n_stage1_blocks: 1,
            fusion_stages: vec![2, 1],
            ..ModelConfig::for_width(24)
        }
    }

    fn small_encoder() -> EncoderSpec {
        EncoderSpec::with_l(4)
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn normalize_targets_examples() {
        let mut d = synth::synth_benchmark(1, 12, 5, 3);
        for (i, t) in [(0usize, 90.0), (1, 95.0), (2, 100.0)] {
            d.items[i].target = t;
            d.items[i].split = Split::Train;
        }
        for item in d.items.iter_mut().skip(3) {
            item.split = Split::Test;
        }
        let tr = normalize_targets(&d).unwrap();
        assert_eq!(tr.apply(90.0), 0.0);
        assert_eq!(tr.apply(95.0), 0.5);
        assert_eq!(tr.apply(100.0), 1.0);
        for y in [90.0, 93.3, 100.0] {
            assert!((tr.invert(tr.apply(y)) - y).abs() < 1e-6);
        }
        // constant targets are rejected
        for item in d.items.iter_mut() {
            item.target = 1.0;
        }
        assert!(normalize_targets(&d).is_err());
    }

    #[test]
    fn loss_strictly_decreases_on_fixed_tiny_batch() {
        let mut d = synth::synth_benchmark(23, 8, 6, 4);
        for item in d.items.iter_mut() {
            item.split = Split::Train;
        }
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            seed: 1,
            weights: objectives::LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            },
            aug_mode: None,
            ..TrainConfig::default()
        };
        let result = fit(&d, &small_encoder(), &small_cfg(), &tc).unwrap();
        let losses: Vec<f64> = result.history.iter().map(|r| r.total).collect();
        assert_eq!(losses.len(), 10);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {losses:?}");
        }
    }

    #[test]
    fn no_augmentation_zeroes_consistency_term() {
        let d = synth::synth_benchmark(9, 24, 6, 4);
        let tc = TrainConfig {
            aug_mode: None,
            ..quick_train_cfg()
        };
        let result = fit(&d, &small_encoder(), &small_cfg(), &tc).unwrap();
        assert!(result.history.iter().all(|r| r.ac == 0.0));
    }

    #[test]
    fn augmentation_contributes_and_stays_in_train() {
        let d = synth::synth_benchmark(9, 24, 6, 4);
        let tc = TrainConfig {
            aug_mode: Some(AugMode::Flow),
            ..quick_train_cfg()
        };
        let result = fit(&d, &small_encoder(), &small_cfg(), &tc).unwrap();
        assert!(result.history.iter().any(|r| r.ac > 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let d = synth::synth_benchmark(17, 30, 6, 4);
        let tc = quick_train_cfg();
        let a = fit(&d, &small_encoder(), &small_cfg(), &tc).unwrap();
        let b = fit(&d, &small_encoder(), &small_cfg(), &tc).unwrap();
        assert_eq!(a.best_val_metric, b.best_val_metric);
        let last_a: Vec<f64> = a.history.iter().map(|r| r.total).collect();
        let last_b: Vec<f64> = b.history.iter().map(|r| r.total).collect();
        assert_eq!(last_a, last_b);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let mut d = synth::synth_benchmark(3, 10, 5, 3);
        let tc = quick_train_cfg();
        // width mismatch
        assert!(fit(&d, &EncoderSpec::with_l(6), &small_cfg(), &tc).is_err());
        // empty train split
        for item in d.items.iter_mut() {
            item.split = Split::Test;
        }
        assert!(fit(&d, &small_encoder(), &small_cfg(), &tc).is_err());
    }

    #[test]
    fn evaluate_contracts() {
        let d = synth::synth_benchmark(31, 30, 6, 4);
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let v = evaluate(
            &params,
            &cfg,
            &small_encoder(),
            &d,
            Split::Val,
            EvalMetric::Tau,
            &TargetTransform::Identity,
        );
        assert!(v.is_ok());
        let empty = {
            let mut d2 = d.clone();
            for item in d2.items.iter_mut() {
                item.split = Split::Train;
            }
            evaluate(
                &params,
                &cfg,
                &small_encoder(),
                &d2,
                Split::Test,
                EvalMetric::Tau,
                &TargetTransform::Identity,
            )
        };
        assert!(empty.is_err());
    }

    #[test]
    fn evaluating_against_own_predictions_gives_perfect_tau() {
        let mut d = synth::synth_benchmark(47, 24, 6, 4);
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 8).unwrap();
        // replace targets with the model's own predictions
        for item in d.items.iter_mut() {
            let t = tokenize(&item.graph, &small_encoder()).unwrap();
            item.target = crate::model::predict_one(&params, &cfg, &t).unwrap();
        }
        let tau = evaluate(
            &params,
            &cfg,
            &small_encoder(),
            &d,
            Split::Val,
            EvalMetric::Tau,
            &TargetTransform::Identity,
        )
        .unwrap();
        assert!((tau - 1.0).abs() < 1e-12, "tau {tau}");
    }

    #[test]
    fn tau_unchanged_by_target_normalization() {
        let d = synth::synth_benchmark(53, 30, 6, 4);
        let tr = normalize_targets(&d).unwrap();
        let preds: Vec<f64> = d.items.iter().map(|i| i.target * 0.3 + 0.1).collect();
        let raw: Vec<f64> = d.items.iter().map(|i| i.target).collect();
        let normed: Vec<f64> = raw.iter().map(|&t| tr.apply(t)).collect();
        let a = crate::objectives::kendall_tau(&preds, &raw).unwrap();
        let b = crate::objectives::kendall_tau(&preds, &normed).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dataset_roundtrip_and_path_refs() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth::synth_benchmark(41, 12, 5, 3);
        let path = dir.path().join("data.jsonl");
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path, None).unwrap();
        assert_eq!(loaded.items.len(), d.items.len());
        for (a, b) in d.items.iter().zip(&loaded.items) {
            assert_eq!(a.graph, b.graph);
            assert_eq!(a.target, b.target);
            assert_eq!(a.split, b.split);
        }

        // arch as file reference
        let arch_path = dir.path().join("arch.json");
        std::fs::write(
            &arch_path,
            r#"{"nodes":[{"op":"op0"},{"op":"op1"}],"edges":[[0,1]]}"#,
        )
        .unwrap();
        let jsonl = dir.path().join("ref.jsonl");
        std::fs::write(
            &jsonl,
            "{\"arch\":\"arch.json\",\"target\":1.5,\"split\":\"train\"}\n",
        )
        .unwrap();
        let refd = load_dataset(&jsonl, None).unwrap();
        assert_eq!(refd.items.len(), 1);
        assert_eq!(refd.items[0].graph.n_nodes(), 2);

        // malformed split and non-finite target
        std::fs::write(
            &jsonl,
            "{\"arch\":\"arch.json\",\"target\":1.5,\"split\":\"dev\"}\n",
        )
        .unwrap();
        assert!(load_dataset(&jsonl, None).is_err());
        std::fs::write(
            &jsonl,
            "{\"arch\":\"arch.json\",\"target\":1e999,\"split\":\"train\"}\n",
        )
        .unwrap();
        assert!(load_dataset(&jsonl, None).is_err());
    }

    #[test]
    fn history_csv_written() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![HistoryRow {
            epoch: 0,
            step: 0,
            mse: 1.0,
            sr: 0.5,
            ac: 0.0,
            total: 1.05,
            val_metric: Some(0.4),
        }];
        let path = dir.path().join("history.csv");
        write_history_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,step,"));
        assert!(text.contains("1.05"));
    }
}
