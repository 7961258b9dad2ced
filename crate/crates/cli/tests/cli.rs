//! End-to-end checks of the `pllvi` binary: subcommand plumbing, file
//! formats and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn pllvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pllvi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "train": {"t": 8, "t_w": 4, "hidden": 16, "m": 2, "n_m": 128, "b": 2, "b_prime": 2},
            "gen": {"probe_hidden": 16, "probe_epochs": 10, "tail_base": 0.3},
            "eval": {"n_seeds": 2}
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_generate_train_eval_cooc() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("blobs.pll");

    let out = pllvi(&[
        "generate",
        "--blobs",
        "--n",
        "240",
        "--k",
        "3",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "11",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n"], 240);
    assert!(summary["avg_candidates"].as_f64().unwrap() > 1.0);

    let out = pllvi(&["prior", "--data", data.to_str().unwrap(), "--delta", "0.5"]);
    assert!(out.status.success());
    let prior: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pi = prior["pi"].as_array().unwrap();
    assert_eq!(pi.len(), 3);
    let total: f64 = pi.iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let run_dir = dir.path().join("run");
    let out = pllvi(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("model.json").exists());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,generative_term,candidate_term,kl_term,total,wall_ms"));
    assert_eq!(metrics.lines().count(), 9); // header + 8 epochs

    // saved model scores on the dataset
    let out = pllvi(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        run_dir.join("model.json").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let score: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(score["accuracy"].as_f64().unwrap() >= 0.0);

    // multi-method experiment writes report.json
    let eval_dir = dir.path().join("eval");
    let out = pllvi(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--methods",
        "plknn",
        "--config",
        config.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["reports"][0]["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["not_significantly_worse_than_best"][0], true);

    let cooc = dir.path().join("cooc.csv");
    let out = pllvi(&["cooc", "--data", data.to_str().unwrap(), "--out", cooc.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&cooc).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // missing dataset file
    let out = pllvi(&["prior", "--data", dir.path().join("nope.pll").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // malformed dataset: empty candidate mask
    let bad = dir.path().join("bad.pll");
    std::fs::write(&bad, "1 1 3\n0.5 000 -1\n").unwrap();
    let out = pllvi(&["prior", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    // invalid config value
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"beta": 7.0}}"#).unwrap();
    let ok = dir.path().join("ok.pll");
    std::fs::write(&ok, "1 1 2\n0.5 11 0\n").unwrap();
    let out = pllvi(&[
        "train",
        "--data",
        ok.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // unknown method
    let out = pllvi(&["eval", "--data", ok.to_str().unwrap(), "--methods", "magic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // features are finite but large enough that the squared reconstruction
    // error overflows on the first warm-up batch
    let huge = dir.path().join("huge.pll");
    std::fs::write(&huge, "2 1 2\n1e200 11 0\n-1e200 11 1\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"t": 1, "t_w": 1, "hidden": 4, "m": 2, "b": 1, "b_prime": 1}}"#)
        .unwrap();
    let out = pllvi(&[
        "train",
        "--data",
        huge.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generated_dataset_roundtrips_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let a = dir.path().join("a.pll");
    let out = pllvi(&[
        "generate",
        "--blobs",
        "--n",
        "60",
        "--k",
        "3",
        "--clean",
        "--out",
        a.to_str().unwrap(),
        "--seed",
        "5",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // identical invocation writes identical bytes
    let b = dir.path().join("b.pll");
    let out = pllvi(&[
        "generate",
        "--blobs",
        "--n",
        "60",
        "--k",
        "3",
        "--clean",
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "5",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
