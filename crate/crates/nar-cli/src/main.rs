//! Command-line entry point: encode, augment, synth, train, predict, eval,
//! search. Data goes to stdout, diagnostics to stderr. Exit codes: 0
//! success, 1 usage, 2 data/validation error, 3 numeric failure.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use nar_core::augment::{sample_augmented, AugMode};
use nar_core::graph::{self, ArchGraph, OpVocab};
use nar_core::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use nar_core::model::ModelConfig;
use nar_core::objectives;
use nar_core::search::{
    run_search, CandidatePool, Oracle, PredictorConfig, SearchConfig, SearchSpace,
};
use nar_core::tokenizer::{tokenize, write_nart, EncoderSpec};
use nar_core::trainer::synth::{synth_benchmark, synth_vocab};
use nar_core::trainer::{
    self, evaluate, load_dataset, predict_split, save_dataset, write_history_csv, EvalMetric,
    Split, TargetTransform, TrainConfig,
};
use nar_core::NarError;

#[derive(Parser)]
#[command(
    name = "nar",
    version,
    about = "Neural architecture representation toolkit"
)]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodeFormat {
    Json,
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Flow,
    Iso,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Tau,
    Mape,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an architecture file into its token matrix.
    Encode {
        arch: PathBuf,
        /// Encoder spec JSON (half-lengths, extended mode).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: EncodeFormat,
        /// Op vocabulary JSON; derived from the file when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit relabeled variants of an architecture as JSON Lines.
    Augment {
        arch: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        max_nodes: usize,
        #[arg(long, default_value_t = 5)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor on a JSONL dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config: {"encoder": {...}, "model": {...}, "train": {...}}.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// none | flow | iso
        #[arg(long)]
        aug_mode: Option<String>,
        #[arg(long)]
        aug_per_graph: Option<usize>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Predict the attribute of one architecture with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "tau")]
        metric: MetricArg,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predictor-guided evolutionary search under an oracle query budget.
    Search {
        /// Space config JSON ({"min_nodes", "max_nodes", "vocab_size"});
        /// required for synthetic oracles.
        #[arg(long)]
        space: Option<PathBuf>,
        /// "synthetic:<seed>" or "table:<dataset path>".
        #[arg(long)]
        oracle: String,
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        init_size: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_t = 100)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Predictor overrides (JSON, PredictorConfig fields).
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Audit log JSONL destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the best architecture JSON here.
        #[arg(long)]
        arch_out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAR_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        nar_core::par::configure_threads(n);
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<NarError>() {
                Some(e) if e.is_numeric() => 3,
                _ => 2,
            }
        }
    }
}

fn load_vocab(path: &Path) -> anyhow::Result<OpVocab> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read vocabulary {}", path.display()))?;
    Ok(OpVocab::from_json(&text)?)
}

/// Loads an architecture file; the vocabulary comes from the given file or,
/// failing that, from the op names in the architecture itself (sorted).
fn load_arch(path: &Path, vocab: Option<&Path>) -> anyhow::Result<(ArchGraph, OpVocab)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read architecture {}", path.display()))?;
    let vocab = match vocab {
        Some(p) => load_vocab(p)?,
        None => {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(NarError::from)?;
            let mut names = BTreeSet::new();
            graph::collect_op_names(&value, &mut names);
            OpVocab::from_names(names)?
        }
    };
    let g = graph::parse_arch(&text, &vocab)?;
    Ok((g, vocab))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(NarError::from)?)
}

#[derive(Debug, Default, Deserialize)]
struct TrainFileConfig {
    #[serde(default)]
    encoder: Option<EncoderSpec>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

#[derive(Debug, Deserialize)]
struct SpaceFileConfig {
    #[serde(default = "default_min_nodes")]
    min_nodes: usize,
    #[serde(default = "default_max_nodes")]
    max_nodes: usize,
    #[serde(default)]
    vocab_size: Option<usize>,
    #[serde(default)]
    vocab: Option<serde_json::Value>,
}

fn default_min_nodes() -> usize {
    2
}

fn default_max_nodes() -> usize {
    8
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Encode {
            arch,
            spec,
            format,
            vocab,
            out,
        } => {
            let (g, _) = load_arch(&arch, vocab.as_deref())?;
            let spec: EncoderSpec = match spec {
                Some(p) => read_json(&p)?,
                None => EncoderSpec::default(),
            };
            let tokens = tokenize(&g, &spec)?;
            match (format, out) {
                (EncodeFormat::Json, out) => {
                    let rows: Vec<Vec<f64>> =
                        (0..tokens.rows()).map(|r| tokens.row(r).to_vec()).collect();
                    let text = serde_json::to_string(&rows).map_err(NarError::from)?;
                    write_output(out.as_deref(), text.as_bytes())?;
                }
                (EncodeFormat::Bin, Some(path)) => {
                    let mut buf = Vec::new();
                    write_nart(&tokens, &mut buf)?;
                    std::fs::write(&path, buf)?;
                }
                (EncodeFormat::Bin, None) => {
                    let mut buf = Vec::new();
                    write_nart(&tokens, &mut buf)?;
                    std::io::stdout().write_all(&buf)?;
                }
            }
            Ok(())
        }
        Command::Augment {
            arch,
            mode,
            count,
            seed,
            vocab,
        } => {
            let (g, vocab) = load_arch(&arch, vocab.as_deref())?;
            let mode = match mode {
                ModeArg::Flow => AugMode::Flow,
                ModeArg::Iso => AugMode::Isomorphic,
            };
            let variants = sample_augmented(&g, count, mode, seed)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for v in &variants {
                let line = graph::arch_to_json(v, &vocab)?;
                writeln!(w, "{line}")?;
            }
            log::info!("{} of {count} requested variants emitted", variants.len());
            Ok(())
        }
        Command::Synth {
            seed,
            n,
            max_nodes,
            vocab_size,
            out,
        } => {
            let dataset = synth_benchmark(seed, n, max_nodes, vocab_size);
            save_dataset(&dataset, &out)?;
            log::info!("wrote {} graphs to {}", dataset.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            history,
            vocab,
            epochs,
            batch_size,
            lr,
            seed,
            aug_mode,
            aug_per_graph,
            lambda1,
            lambda2,
            metric,
        } => {
            let vocab = vocab.as_deref().map(load_vocab).transpose()?;
            let dataset = load_dataset(&data, vocab)?;
            let file_cfg: TrainFileConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainFileConfig::default(),
            };
            let encoder = file_cfg.encoder.unwrap_or_default();
            let mut train_cfg = file_cfg.train.unwrap_or_default();
            if let Some(v) = epochs {
                train_cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                train_cfg.batch_size = v;
            }
            if let Some(v) = lr {
                train_cfg.lr = v;
            }
            if let Some(v) = seed {
                train_cfg.seed = v;
            }
            if let Some(v) = aug_mode {
                train_cfg.aug_mode = match v.as_str() {
                    "none" => None,
                    other => Some(other.parse::<AugMode>()?),
                };
            }
            if let Some(v) = aug_per_graph {
                train_cfg.aug_per_graph = v;
            }
            if let Some(v) = lambda1 {
                train_cfg.weights.lambda1 = v;
            }
            if let Some(v) = lambda2 {
                train_cfg.weights.lambda2 = v;
            }
            if let Some(v) = metric {
                train_cfg.eval_metric = match v {
                    MetricArg::Tau => EvalMetric::Tau,
                    MetricArg::Mape => EvalMetric::Mape,
                };
            }
            let model = file_cfg.model.unwrap_or_else(|| ModelConfig {
                sigmoid_output: train_cfg.eval_metric == EvalMetric::Tau,
                ..ModelConfig::for_width(encoder.token_width())
            });
            let result = trainer::fit(&dataset, &encoder, &model, &train_cfg)?;
            let mut extra = serde_json::Map::new();
            extra.insert("vocab".into(), dataset.vocab.to_json());
            extra.insert(
                "target_transform".into(),
                serde_json::to_value(result.transform).map_err(NarError::from)?,
            );
            extra.insert(
                "eval_metric".into(),
                serde_json::to_value(train_cfg.eval_metric).map_err(NarError::from)?,
            );
            let meta = CheckpointMeta {
                model,
                encoder,
                extra,
            };
            save_checkpoint(&result.params, &meta, &out)?;
            if let Some(h) = history {
                write_history_csv(&result.history, &h)?;
            }
            if let Some(best) = result.best_val_metric {
                println!("{best}");
            }
            Ok(())
        }
        Command::Predict { ckpt, arch } => {
            let (params, meta) = load_checkpoint::<f32>(&ckpt)?;
            let (vocab, transform) = sidecar_extras(&meta)?;
            let text = std::fs::read_to_string(&arch)
                .with_context(|| format!("cannot read architecture {}", arch.display()))?;
            let g = graph::parse_arch(&text, &vocab)?;
            let tokens = tokenize(&g, &meta.encoder)?;
            let y = nar_core::model::predict_one(&params, &meta.model, &tokens)?;
            println!("{}", transform.invert(y));
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            metric,
            delta,
            split,
        } => {
            let (params, meta) = load_checkpoint::<f32>(&ckpt)?;
            let (vocab, transform) = sidecar_extras(&meta)?;
            let dataset = load_dataset(&data, Some(vocab))?;
            let split: Split = split.parse()?;
            match metric {
                MetricArg::Tau => {
                    let v = evaluate(
                        &params,
                        &meta.model,
                        &meta.encoder,
                        &dataset,
                        split,
                        EvalMetric::Tau,
                        &transform,
                    )?;
                    println!("{v}");
                }
                MetricArg::Mape => {
                    let (preds, targets) =
                        predict_split(&params, &meta.model, &meta.encoder, &dataset, split)?;
                    let raw: Vec<f64> = preds.iter().map(|&p| transform.invert(p)).collect();
                    println!("{}", objectives::mape(&raw, &targets)?);
                    if let Some(d) = delta {
                        println!("{}", objectives::acc_delta(&raw, &targets, d)?);
                    }
                }
            }
            Ok(())
        }
        Command::Search {
            space,
            oracle,
            budget,
            init_size,
            topk,
            candidates,
            seed,
            predictor,
            out,
            arch_out,
        } => {
            let predictor: PredictorConfig = match predictor {
                Some(p) => read_json(&p)?,
                None => PredictorConfig::default(),
            };
            let cfg = SearchConfig {
                budget,
                init_size,
                topk,
                candidates_per_round: candidates,
                seed,
                predictor,
            };
            let (pool, oracle) = build_problem(space.as_deref(), &oracle)?;
            let outcome = run_search(&pool, &oracle, &cfg)?;
            let mut log_text = String::new();
            for rec in &outcome.log {
                log_text.push_str(&serde_json::to_string(rec).map_err(NarError::from)?);
                log_text.push('\n');
            }
            match out {
                Some(path) => std::fs::write(&path, log_text)?,
                None => print!("{log_text}"),
            }
            if let Some(path) = arch_out {
                let arch = graph::arch_to_json(&outcome.best, pool.vocab())?;
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&arch).map_err(NarError::from)?,
                )?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "best_digest": outcome.best.canonical_hash(),
                    "best_value": outcome.best_value,
                    "queries": outcome.log.len(),
                })
            );
            Ok(())
        }
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            let mut stdout = std::io::stdout();
            stdout.write_all(bytes)?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn sidecar_extras(meta: &CheckpointMeta) -> anyhow::Result<(OpVocab, TargetTransform)> {
    let vocab = match meta.extra.get("vocab") {
        Some(v) => serde_json::from_value(v.clone()).map_err(NarError::from)?,
        None => bail!("checkpoint sidecar is missing the vocabulary"),
    };
    let transform = match meta.extra.get("target_transform") {
        Some(v) => serde_json::from_value(v.clone()).map_err(NarError::from)?,
        None => TargetTransform::Identity,
    };
    Ok((vocab, transform))
}

fn build_problem(space: Option<&Path>, oracle: &str) -> anyhow::Result<(CandidatePool, Oracle)> {
    if let Some(seed_text) = oracle.strip_prefix("synthetic:") {
        let seed: u64 = seed_text.parse().map_err(|_| {
            NarError::InvalidSpec(format!("bad synthetic oracle seed {seed_text:?}"))
        })?;
        let space_path =
            space.ok_or_else(|| NarError::InvalidSpec("synthetic oracle needs --space".into()))?;
        let file: SpaceFileConfig = read_json(space_path)?;
        let vocab = match (file.vocab, file.vocab_size) {
            (Some(v), _) => serde_json::from_value(v).map_err(NarError::from)?,
            (None, Some(n)) => synth_vocab(n),
            (None, None) => synth_vocab(5),
        };
        let vocab_size = vocab.len();
        let space = SearchSpace {
            min_nodes: file.min_nodes,
            max_nodes: file.max_nodes,
            vocab,
        };
        Ok((
            CandidatePool::Generative(space),
            Oracle::synthetic(seed, vocab_size),
        ))
    } else if let Some(path) = oracle.strip_prefix("table:") {
        let dataset = load_dataset(Path::new(path), None)?;
        let oracle = Oracle::from_dataset(&dataset);
        let graphs = dataset.items.iter().map(|i| i.graph.clone()).collect();
        Ok((
            CandidatePool::Table {
                graphs,
                vocab: dataset.vocab,
            },
            oracle,
        ))
    } else {
        bail!("oracle must be \"synthetic:<seed>\" or \"table:<path>\"");
    }
}
