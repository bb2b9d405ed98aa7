//! End-to-end checks of the binary: flag parsing, exit codes, output
//! formats, and a miniature train/predict/eval/search round trip.

use std::path::Path;
use std::process::{Command, Output};

fn nar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nar"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const CHAIN: &str =
    r#"{"nodes":[{"op":"input"},{"op":"conv3x3"},{"op":"output"}],"edges":[[0,1],[1,2]]}"#;

const SMALL_CFG: &str = r#"{
  "encoder": {"l_op": 4, "l_self": 4, "l_sour": 4},
  "model": {"token_width": 24, "n_stage1_blocks": 1, "n_heads": 2, "fusion_stages": [2, 1]},
  "train": {"epochs": 4, "batch_size": 16, "lr": 0.001, "seed": 3}
}"#;

#[test]
fn encode_chain_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "chain.json", CHAIN);
    let out = nar(&["encode", "chain.json"], dir.path());
    assert!(out.status.success());
    let rows: Vec<Vec<f64>> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].len(), 192);

    // binary format carries the documented header
    let out = nar(
        &["encode", "chain.json", "--format", "bin", "--out", "t.nart"],
        dir.path(),
    );
    assert!(out.status.success());
    let bytes = std::fs::read(dir.path().join("t.nart")).unwrap();
    assert_eq!(&bytes[..4], b"NART");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 192);
    assert_eq!(bytes.len(), 16 + 5 * 192 * 4);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = nar(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = nar(&["encode"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = nar(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "loop.json",
        r#"{"nodes":[{"op":"x"}],"edges":[[0,0]]}"#,
    );
    let out = nar(&["encode", "loop.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("self-loop"));

    write(
        dir.path(),
        "cycle.json",
        r#"{"nodes":[{"op":"x"},{"op":"y"}],"edges":[[0,1],[1,0]]}"#,
    );
    let out = nar(&["encode", "cycle.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = nar(&["encode", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = nar(
        &[
            "synth",
            "--seed",
            "11",
            "--n",
            "80",
            "--max-nodes",
            "6",
            "--vocab-size",
            "4",
            "--out",
            "d.jsonl",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    write(dir.path(), "cfg.json", SMALL_CFG);
    let out = nar(
        &[
            "train",
            "--data",
            "d.jsonl",
            "--config",
            "cfg.json",
            "--out",
            "m.narf",
            "--history",
            "h.csv",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("m.narf").exists());
    assert!(dir.path().join("m.narf.json").exists());
    assert!(std::fs::read_to_string(dir.path().join("h.csv"))
        .unwrap()
        .starts_with("epoch,step"));

    write(
        dir.path(),
        "probe.json",
        r#"{"nodes":[{"op":"op0"},{"op":"op2"}],"edges":[[0,1]]}"#,
    );
    let out = nar(
        &["predict", "--ckpt", "m.narf", "--arch", "probe.json"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let value: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(value.is_finite());

    // deterministic across invocations
    let again = nar(
        &["predict", "--ckpt", "m.narf", "--arch", "probe.json"],
        dir.path(),
    );
    assert_eq!(out.stdout, again.stdout);

    let out = nar(
        &[
            "eval", "--ckpt", "m.narf", "--data", "d.jsonl", "--metric", "tau",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let tau: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((-1.0..=1.0).contains(&tau));

    // unknown op in the probe architecture is a data error
    write(
        dir.path(),
        "bad.json",
        r#"{"nodes":[{"op":"mystery"}],"edges":[]}"#,
    );
    let out = nar(
        &["predict", "--ckpt", "m.narf", "--arch", "bad.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_rejects_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = nar(
        &[
            "synth",
            "--seed",
            "5",
            "--n",
            "40",
            "--max-nodes",
            "5",
            "--vocab-size",
            "3",
            "--out",
            "d.jsonl",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    write(dir.path(), "cfg.json", SMALL_CFG);
    let out = nar(
        &[
            "train", "--data", "d.jsonl", "--config", "cfg.json", "--out", "m.narf",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // rewrite the sidecar to a wider model: tensor shapes no longer match
    let sidecar = dir.path().join("m.narf.json");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    let mut meta: serde_json::Value = serde_json::from_str(&text).unwrap();
    meta["model"]["token_width"] = serde_json::json!(48);
    meta["encoder"]["l_op"] = serde_json::json!(12);
    std::fs::write(&sidecar, meta.to_string()).unwrap();
    write(
        dir.path(),
        "probe.json",
        r#"{"nodes":[{"op":"op0"}],"edges":[]}"#,
    );
    let out = nar(
        &["predict", "--ckpt", "m.narf", "--arch", "probe.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn augment_modes_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "diamond.json",
        r#"{"nodes":[{"op":"a"},{"op":"b"},{"op":"c"},{"op":"d"}],"edges":[[0,1],[0,2],[1,3],[2,3]]}"#,
    );
    let out = nar(
        &[
            "augment",
            "diamond.json",
            "--mode",
            "flow",
            "--count",
            "5",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout)
        .unwrap()
        .trim()
        .lines()
        .collect();
    assert_eq!(
        lines.len(),
        1,
        "diamond has exactly one flow-consistent relabeling"
    );
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 4);

    let out = nar(
        &[
            "augment",
            "diamond.json",
            "--mode",
            "iso",
            "--count",
            "5",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    let lines = String::from_utf8(out.stdout).unwrap();
    assert_eq!(lines.trim().lines().count(), 5);
}

#[test]
fn search_audit_log_contract() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "space.json",
        r#"{"min_nodes": 2, "max_nodes": 6, "vocab_size": 4}"#,
    );
    write(
        dir.path(),
        "pred.json",
        r#"{"encoder": {"l_op": 4, "l_self": 4, "l_sour": 4},
            "model": {"token_width": 24, "n_stage1_blocks": 1, "n_heads": 1, "fusion_stages": [1]},
            "epochs_first": 3, "epochs_round": 2, "lr": 0.001, "batch_size": 8, "warm_start": true}"#,
    );
    let out = nar(
        &[
            "search",
            "--space",
            "space.json",
            "--oracle",
            "synthetic:9",
            "--budget",
            "20",
            "--init-size",
            "5",
            "--topk",
            "5",
            "--candidates",
            "20",
            "--seed",
            "4",
            "--predictor",
            "pred.json",
            "--out",
            "log.jsonl",
            "--arch-out",
            "best.json",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log
        .trim()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 20);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["queries"].as_u64().unwrap() as usize, i + 1);
        assert!(r["digest"].is_string());
        assert!(r["oracle"].is_number());
    }
    let summary: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(summary["queries"], 20);
    assert!(dir.path().join("best.json").exists());

    // bad oracle spec is a usage-level data error
    let out = nar(&["search", "--oracle", "mystery:1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
