use std::process::{Command, Output};

use profagent::zoo::fixtures;

fn profagent(args: &[&str], runs: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_profagent"))
        .args(args)
        .arg("--runs-dir")
        .arg(runs)
        .output()
        .expect("binary runs")
}

#[test]
fn unknown_model_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = profagent(&["profile", "--model", "no-such-model"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-model"));
}

#[test]
fn bad_ratio_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = profagent(&["baseline", "--model", fixtures::TINY_CNN, "--method", "l1", "--ratio", "1.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "baseline", "--model", fixtures::TINY_CNN, "--method", "l2", "--ratio", "0.25", "--samples", "8", "--timing",
        "modeled", "--run-id", "cli",
    ];
    let out = profagent(&args, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline  ok"), "{stdout}");
    assert!(stdout.contains("l2@25%"), "{stdout}");
    let out = Command::new(env!("CARGO_BIN_EXE_profagent"))
        .args(["report", "--run-id", "cli", "--runs-dir"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("dataset: synthetic-2class"));
}

#[test]
fn failed_stage_exits_with_stage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = profagent(&["prune", "--model", fixtures::TINY_CNN, "--run-id", "bare"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("failed"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "model_id = \"no-such-model\"\nstages = [\"profile\"]\nrun_id = \"fromfile\"\n").unwrap();
    let out = profagent(&["run", "--config", cfg.to_str().unwrap(), "--model", fixtures::TINY_CNN], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("fromfile/profile.json").exists());
    assert!(!tmp.path().join("fromfile/analysis_0.json").exists());
}
