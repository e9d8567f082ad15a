//! End-to-end CLI smoke tests against the bundled 120-row fixture.

use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_ml.csv")
}

fn write_config(dir: &Path, dataset: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset": dataset,
        "format": "movielens-csv",
        "arch": "mf",
        "k": 4,
        "blocks": 2,
        "split_seed": 1,
        "search": { "batch_size": 16, "max_epochs": 3, "seed": 5 }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn dnis(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dnis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn val_mse(report: &Path) -> f64 {
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    v["metrics"]["mse"].as_f64().unwrap()
}

#[test]
fn train_prune_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixture());
    let train_out = dir.path().join("train");

    let out = dnis(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "vocab.bin", "train_log.jsonl", "report.json", "manifest.json"] {
        assert!(train_out.join(f).exists(), "missing {f}");
    }

    // Determinism: a rerun lands on the same test metric.
    let rerun = dir.path().join("train2");
    let out2 = dnis(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        rerun.to_str().unwrap(),
    ]);
    assert!(out2.status.success());
    assert_eq!(
        val_mse(&train_out.join("report.json")).to_bits(),
        val_mse(&rerun.join("report.json")).to_bits()
    );

    // Lossless prune at epsilon 0, then eval through the COO path.
    let prune_out = dir.path().join("prune");
    let out = dnis(&[
        "prune",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.bin").to_str().unwrap(),
        "--epsilon",
        "0",
        "--out",
        prune_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(prune_out.join("embedding.coo").exists());
    assert!(prune_out.join("scheme_summary.json").exists());
    assert_eq!(
        val_mse(&prune_out.join("report.json")),
        val_mse(&train_out.join("report.json"))
    );

    let eval_out = dir.path().join("eval");
    let out = dnis(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.bin").to_str().unwrap(),
        "--split",
        "test",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        val_mse(&eval_out.join("report.json")),
        val_mse(&train_out.join("report.json"))
    );
}

#[test]
fn missing_dataset_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("absent.csv"));
    let out = dnis(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stderr was: {err}");
}

#[test]
fn epsilon_and_cr_are_mutually_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixture());
    let out = dnis(&[
        "prune",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "whatever.bin",
        "--epsilon",
        "0.1",
        "--cr",
        "2",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mutually exclusive"));

    // Prune with neither flag (and no config prune mode) also fails.
    let out = dnis(&[
        "prune",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "whatever.bin",
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn sweep_over_cr_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixture());
    let sweep_out = dir.path().join("sweep");
    let out = dnis(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "cr",
        "--values",
        "1,2",
        "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(sweep_out.join("sweep.json").exists());
    assert!(sweep_out.join("sweep.txt").exists());
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sweep_out.join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn baseline_flag_selects_comparison_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixture());
    let out = dnis(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--baseline",
        "mde",
        "--out",
        dir.path().join("mde").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("mde/report.json").exists());
}
