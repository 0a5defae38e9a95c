//! End-to-end runs of the `gcta` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcta(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcta"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small dataset and a quick config, written into `dir`.
fn small_setup(dir: &Path) {
    fs::write(dir.join("spec.json"), r#"{"num_domains": 4, "nodes_per_domain": 45, "seed": 2}"#).unwrap();
    fs::write(
        dir.join("cfg.json"),
        r#"{"seed": 4, "pretrain_epochs": 20, "lr_pretrain": 0.01, "gen": {"outer_epochs": 4, "k_ratio": 0.1}}"#,
    )
    .unwrap();
    ok(&gcta(&["synth", "--spec", "spec.json", "--out", "data"], dir));
    ok(&gcta(&["pretrain", "--data", "data", "--config", "cfg.json", "--out", "ckpt.json"], dir));
}

#[test]
fn default_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), "{}").unwrap();
    ok(&gcta(&["synth", "--out", "data"], dir));
    ok(&gcta(&["pretrain", "--data", "data", "--config", "cfg.json", "--out", "ckpt.json"], dir));
    ok(&gcta(&["run", "--data", "data", "--config", "cfg.json", "--ckpt", "ckpt.json", "--out", "run"], dir));
    let out = gcta(&["report", "--run", "run"], dir);
    ok(&out);

    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["metric"], "accuracy");
    assert_eq!(report["matrix"].as_array().unwrap().len(), 5);
    assert!(report["af"].is_number());
    for sub in ["params/step_5.json", "ema/step_5.json", "memory/d5.json", "trace.jsonl", "matrix.csv"] {
        assert!(dir.join("run").join(sub).exists(), "missing {sub}");
    }
    let csv = gcta(&["report", "--run", "run", "--format", "csv"], dir);
    ok(&csv);
    assert_eq!(String::from_utf8(csv.stdout).unwrap(), fs::read_to_string(dir.join("run/matrix.csv")).unwrap());
}

#[test]
fn test_only_mode_keeps_the_checkpoint_and_an_empty_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    let args = ["run", "--data", "data", "--config", "cfg.json", "--ckpt", "ckpt.json", "--out", "run", "--test-only"];
    ok(&gcta(&args, dir));
    assert_eq!(fs::read_dir(dir.join("run/memory")).unwrap().count(), 0);
    assert_eq!(fs::read_to_string(dir.join("run/matrix.csv")).unwrap().lines().count(), 3);
    let ckpt = fs::read_to_string(dir.join("ckpt.json")).unwrap();
    assert_eq!(fs::read_to_string(dir.join("run/ema/step_3.json")).unwrap(), ckpt);
    assert_eq!(fs::read_to_string(dir.join("run/params/step_3.json")).unwrap(), ckpt);
}

#[test]
fn identical_runs_write_identical_matrices_and_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    let run = |out: &str| {
        let o = gcta(
            &["-v", "run", "--data", "data", "--config", "cfg.json", "--ckpt", "ckpt.json", "--out", out],
            dir,
        );
        ok(&o);
        o
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(fs::read(dir.join("a/matrix.csv")).unwrap(), fs::read(dir.join("b/matrix.csv")).unwrap());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stderr, b.stderr);
    let log = String::from_utf8(a.stderr).unwrap();
    assert!(log.contains("seed 4") && log.contains("config sha256"), "{log}");
}

#[test]
fn reports_aggregate_several_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    for (out, flag) in [("on", None), ("off", Some("--no-replay"))] {
        let mut args = vec!["run", "--data", "data", "--config", "cfg.json", "--ckpt", "ckpt.json", "--out", out];
        args.extend(flag);
        ok(&gcta(&args, dir));
    }
    let out = gcta(&["report", "--run", "on", "--run", "off"], dir);
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["runs"], 2);
    assert!(summary["ap_mean"].is_number() && summary["af_std"].is_number());
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gcta(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn load_and_config_errors_exit_1_naming_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);

    fs::write(dir.join("typo.json"), r#"{"sede": 1}"#).unwrap();
    let out = gcta(&["pretrain", "--data", "data", "--config", "typo.json", "--out", "x.json"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    fs::write(dir.join("data/d2/edges.csv"), "0,1\n1,45\n").unwrap();
    let out = gcta(&["run", "--data", "data", "--config", "cfg.json", "--ckpt", "ckpt.json", "--out", "run"], dir);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("load_dataset") && err.contains("edges.csv:2"), "{err}");
}

#[test]
fn diverging_adaptation_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    fs::write(
        dir.join("wild.json"),
        r#"{"seed": 4, "adapt": {"lr_adapt": 1e300}, "gen": {"outer_epochs": 2}}"#,
    )
    .unwrap();
    let out = gcta(&["run", "--data", "data", "--config", "wild.json", "--ckpt", "ckpt.json", "--out", "run"], dir);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn plot_option_writes_a_png() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    fs::write(dir.join("plot.json"), r#"{"seed": 4, "plot": true, "gen": {"outer_epochs": 1}}"#).unwrap();
    ok(&gcta(&["run", "--data", "data", "--config", "plot.json", "--ckpt", "ckpt.json", "--out", "run", "--test-only"], dir));
    let png = fs::read(dir.join("run/matrix.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
}
