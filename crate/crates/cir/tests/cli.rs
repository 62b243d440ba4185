//! End-to-end exercises of the `cir` binary: the full
//! synth -> prep -> train -> eval -> ensemble pipeline on a small dataset,
//! plus exit codes and the config-hash gate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cir")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cir")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "cir {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cir-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        format!(
            r#"{{
  "seed": 11,
  "data": {{
    "features": "{0}/features.tsv",
    "ir_features": "{0}/ir_features.tsv",
    "triplets": "{0}/triplets.jsonl",
    "vocab": "{0}/vocab.tsv"
  }}{extra}
}}"#,
            data.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = workdir("pipeline");
    let data = dir.join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(), "--seed", "11", "--items", "120",
        "--triplets", "120", "--val-frac", "0.25", "--misspell", "0.2",
    ]);
    for file in ["features.tsv", "ir_features.tsv", "triplets.jsonl", "vocab.tsv"] {
        assert!(data.join(file).exists(), "{file} missing");
    }

    let config = write_config(
        &dir,
        &data,
        r#",
  "train": { "epochs": 2, "batch_size": 16 }"#,
    );

    // prep: corrections for the injected misspellings.
    let prep = dir.join("prep");
    let stdout = run_ok(&["prep", "--config", config.to_str().unwrap(), "--out", prep.to_str().unwrap()]);
    assert!(stdout.contains("->"), "no corrections reported:\n{stdout}");
    let report = fs::read_to_string(prep.join("corrections.tsv")).unwrap();
    assert!(report.lines().skip(1).next().is_some(), "empty corrections report");

    // train: checkpoint + metrics log with a config-hash header.
    let train = dir.join("train");
    run_ok(&["train", "--config", config.to_str().unwrap(), "--out", train.to_str().unwrap()]);
    let ckpt = train.join("checkpoint.ckpt");
    let metrics = fs::read_to_string(train.join("metrics.jsonl")).unwrap();
    assert!(metrics.starts_with("{\"config_hash\":"));
    let steps = metrics.lines().skip(1).count();
    // 90 train triplets at batch 16 -> 5 full batches per epoch, 2 epochs.
    assert_eq!(steps, 10);

    // eval: scores, truth, report; table on stdout.
    let eval = dir.join("eval");
    let stdout = run_ok(&[
        "eval", "--config", config.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--out", eval.to_str().unwrap(),
    ]);
    assert!(stdout.contains("category"));
    assert!(stdout.contains("average"));
    for file in ["scores.tsv", "truth.tsv", "report.json"] {
        assert!(eval.join(file).exists(), "{file} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report.get("categories").is_some());
    assert!(report.get("average").is_some());

    // ensemble over a single matrix: the fused objective equals eval's.
    let eval_objective = {
        let table = stdout.lines().find(|l| l.starts_with("objective")).unwrap();
        table.split_whitespace().nth(1).unwrap().parse::<f64>().unwrap()
    };
    let manifest = dir.join("manifest.json");
    fs::write(
        &manifest,
        format!(
            r#"{{
  "matrices": [{{"name": "solo", "path": "{0}/scores.tsv"}}],
  "truth": "{0}/truth.tsv",
  "seed": 4,
  "ensemble": {{ "rounds": 1, "n_trials": 25 }}
}}"#,
            eval.display()
        ),
    )
    .unwrap();
    let ens = dir.join("ens");
    let stdout = run_ok(&["ensemble", "--manifest", manifest.to_str().unwrap(), "--out", ens.to_str().unwrap()]);
    let ens_objective = stdout
        .lines()
        .find(|l| l.starts_with("ensemble:"))
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!(
        (ens_objective - eval_objective).abs() <= 6e-3,
        "single-matrix ensemble objective {ens_objective} vs eval {eval_objective}"
    );
    for file in ["weights.json", "fused.tsv", "history.jsonl"] {
        assert!(ens.join(file).exists(), "{file} missing");
    }
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_refuses_checkpoint_with_foreign_config_hash() {
    let dir = workdir("hashgate");
    let data = dir.join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(), "--seed", "2", "--items", "80",
        "--triplets", "60",
    ]);
    let config = write_config(&dir, &data, r#",
  "train": { "epochs": 1, "batch_size": 16 }"#);
    let train = dir.join("train");
    run_ok(&["train", "--config", config.to_str().unwrap(), "--out", train.to_str().unwrap()]);

    // Same data, different seed: the config hash changes.
    let other = dir.join("other.json");
    let text = fs::read_to_string(&config).unwrap().replace("\"seed\": 11", "\"seed\": 12");
    fs::write(&other, text).unwrap();
    let out = run(&[
        "eval", "--config", other.to_str().unwrap(), "--checkpoint",
        train.join("checkpoint.ckpt").to_str().unwrap(), "--out", dir.join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config"), "unexpected error: {stderr}");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn validation_errors_exit_one() {
    let dir = workdir("exit1");
    // Unknown subcommand and missing flags are usage errors.
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));

    // Config with unknown keys is a validation error naming the field.
    let bad = dir.join("bad.json");
    fs::write(
        &bad,
        r#"{ "seed": 1, "data": { "features": "f", "triplets": "t" }, "wat": 3 }"#,
    )
    .unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap(), "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wat"));

    // Missing input files surface as validation errors, not panics.
    let cfg = dir.join("missing.json");
    fs::write(
        &cfg,
        r#"{ "seed": 1, "data": { "features": "/nonexistent/f.tsv", "triplets": "/nonexistent/t.jsonl" } }"#,
    )
    .unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_subcommand_reports_and_exits_zero() {
    let stdout = run_ok(&["gradcheck", "--seed", "1"]);
    assert!(stdout.contains("component"));
    assert!(stdout.contains("pass"));
    assert!(!stdout.contains("FAIL"), "gradcheck reported a failure:\n{stdout}");
}

#[test]
fn synth_is_idempotent_across_invocations() {
    let dir = workdir("idem");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        run_ok(&["synth", "--out", out.to_str().unwrap(), "--seed", "9", "--items", "60", "--triplets", "40"]);
    }
    for file in ["features.tsv", "ir_features.tsv", "triplets.jsonl", "vocab.tsv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
    fs::remove_dir_all(&dir).ok();
}
