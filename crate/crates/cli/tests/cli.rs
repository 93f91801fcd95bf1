use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_moe-health");

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Small dimensions and model so a full train finishes in about a second.
fn tiny_config(dir: &Path) -> PathBuf {
    let dims = json!({"static_dim": 3, "series_len": 5, "series_dim": 2, "vocab_size": 20, "image_dim": 4});
    let cfg = json!({
        "generator": {"dims": dims, "min_tokens": 2, "max_tokens": 5},
        "train": {
            "max_epochs": 2,
            "pretrain_epochs": 1,
            "batch_size": 16,
            "model": {
                "encoder": {"d_h": 4, "rnn_hidden": 3, "token_dim": 4, "image_hidden": 4},
                "moe": {"expert_hidden": 6, "gate_hidden": 6}
            }
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn tiny_dataset(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let cfg = tiny_config(dir);
    let data = dir.join("data.json");
    ok(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    (cfg, data)
}

#[test]
fn generate_is_reproducible_and_summarised() {
    let dir = workdir("generate");
    let a = dir.join("a.json");
    let b = dir.join("b.json");
    let out = ok(&["generate", "--n", "300", "--seed", "5", "--out", a.to_str().unwrap()]);
    ok(&["generate", "--n", "300", "--seed", "5", "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n_samples"], 300);
    let total: f64 = summary["combination_fractions"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);

    let c = dir.join("c.json");
    ok(&["generate", "--n", "300", "--seed", "6", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn invalid_inputs_map_to_exit_codes() {
    let dir = workdir("errors");
    let out = dir.join("x.json");
    assert_eq!(run(&["generate", "--n", "0", "--out", out.to_str().unwrap()]).status.code(), Some(4));

    let missing = dir.join("nope.json");
    let code = run(&["train", "--data", missing.to_str().unwrap(), "--out", dir.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(3));

    let bad_cfg = dir.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"train": {"learning_rte": 0.1}}"#).unwrap();
    let code = run(&[
        "generate",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(4));

    let garbage = dir.join("garbage.json");
    std::fs::write(&garbage, "not a dataset\n").unwrap();
    let code = run(&["train", "--data", garbage.to_str().unwrap(), "--out", dir.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(4));

    assert_eq!(run(&["train", "--ablation", "bogus"]).status.code(), Some(2));
}

#[test]
fn train_then_evaluate_reproduces_test_metrics() {
    let dir = workdir("train");
    let (cfg, data) = tiny_dataset(&dir, 240);
    let run_dir = dir.join("run");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    let report = read_json(&run_dir.join("report.json"));
    let metrics = read_json(&run_dir.join("metrics.json"));
    assert_eq!(metrics["test"], report["report"]["test"]);
    assert_eq!(report["meta"]["seed"], 1);
    assert!(report["meta"]["dataset_digest"].as_str().unwrap().len() == 64);

    let eval_out = dir.join("eval");
    ok(&[
        "evaluate",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    let evaluated = read_json(&eval_out.join("evaluation.json"));
    assert_eq!(evaluated["metrics"], report["report"]["test"]);

    let code = run(&[
        "evaluate",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "nonsense",
    ])
    .status
    .code();
    assert_eq!(code, Some(4));
}

#[test]
fn ablate_writes_a_row_per_mode() {
    let dir = workdir("ablate");
    let (cfg, data) = tiny_dataset(&dir, 200);
    let out = dir.join("ablation");
    let stdout = ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1",
        "--epochs",
        "1",
    ])
    .stdout;
    let table = read_json(&out.join("ablation.json"));
    let rows = table["rows"].as_array().unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(
        modes,
        ["none", "no_missing_indicator", "no_specialization", "no_dynamic_gating", "top1"]
    );
    assert_eq!(rows[0]["mean_delta"], 0.0);
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.contains("| Full model |"));
    assert!(String::from_utf8(stdout).unwrap().contains("w/o Expert Specialization"));
    for mode in modes {
        assert!(out.join(format!("{mode}-seed0")).join("checkpoint.json").exists());
    }
}

#[test]
fn gradcheck_reports_success() {
    let dir = workdir("gradcheck");
    ok(&["gradcheck", "--out", dir.to_str().unwrap()]);
    let report = &read_json(&dir.join("gradcheck.json"))["report"];
    assert_eq!(report["passed"], true);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}
