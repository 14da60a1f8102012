use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctesret::model::RetrievalModel;
use ctesret::seq::Dataset;

const TINY: &str = r#"{
  "seed": 3,
  "k": 4,
  "data": {"benchmark": {"generators": 6, "windows": [3, 4], "window_len": [4, 7], "num_marks": 3}},
  "model": {"mtpp": {"dim": 6}, "umnn": {"hidden": [6, 6], "nodes": 8}, "gamma": 0.05},
  "train": {"epochs": 2, "negatives": 5, "batch": 2, "val_negatives": 20, "lr": 0.01},
  "hash": {"bits": 8, "tables": 2, "bits_per_table": 4},
  "hash_train": {"steps": 20},
  "eval": {"negatives": 50, "runs": 2}
}"#;

fn ctesret(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctesret"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("CTESRET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], config: &Path, out: &Path) -> String {
    let o = ctesret(args, config, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.path().join("run");
    (dir, cfg, out)
}

fn pipeline(cfg: &Path, out: &Path) {
    ok(&["synth"], cfg, out);
    ok(&["train", "--model", "self"], cfg, out);
    ok(&["train", "--model", "cross"], cfg, out);
    ok(&["hash-train"], cfg, out);
    ok(&["index"], cfg, out);
    ok(&["query"], cfg, out);
    ok(&["evaluate", "--hashed"], cfg, out);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let (_dir, cfg, out) = setup(TINY);
    pipeline(&cfg, &out);
    for f in [
        "data/queries.jsonl",
        "data/corpus.jsonl",
        "data/labels.jsonl",
        "data/splits.json",
        "model-self.json",
        "model-cross.json",
        "trace-cross.csv",
        "fisher.jsonl",
        "hashnet.json",
        "index.json",
        "results.jsonl",
        "report.json",
        "manifest-synth.json",
        "manifest-evaluate.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    for line in results.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["ranked"].as_array().unwrap().len() <= 4);
        assert!(v["comparisons"].as_u64().unwrap() >= 1);
    }
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let at: Vec<usize> = ["\"MAP\"", "\"NDCG@10\"", "\"NDCG@20\"", "\"MRR\"", "\"reduction_factor\"", "\"runs\""]
        .iter()
        .map(|k| text.find(k).unwrap())
        .collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]));
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(report["MAP"].as_f64().unwrap() <= 1.0);
    assert_eq!(report["runs"], 2);

    let trace = std::fs::read_to_string(out.join("trace-cross.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,train_loss,val_MAP"));
    assert_eq!(trace.lines().count(), 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-train.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"]["train"], 3);
    assert!(manifest["versions"]["ctesret"].is_string());

    ok(&["query", "--exhaustive"], &cfg, &out);
    let exhaustive = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(exhaustive.lines().next().unwrap()).unwrap();
    let ds = Dataset::load(&out.join("data")).unwrap();
    assert_eq!(first["comparisons"].as_u64().unwrap() as usize, ds.corpus.len());
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let (_a, cfg_a, out_a) = setup(TINY);
    let (_b, cfg_b, out_b) = setup(TINY);
    pipeline(&cfg_a, &out_a);
    pipeline(&cfg_b, &out_b);
    for f in ["model-cross.json", "model-self.json", "index.json", "report.json", "manifest-evaluate.json"] {
        if f.starts_with("manifest") {
            // Manifests name their output directory only through the config.
            let strip = |p: &Path| {
                let mut v: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
                v["config"]["out"] = serde_json::Value::Null;
                v["config_hash"] = serde_json::Value::Null;
                v
            };
            assert_eq!(strip(&out_a.join(f)), strip(&out_b.join(f)));
        } else {
            assert_eq!(
                std::fs::read(out_a.join(f)).unwrap(),
                std::fs::read(out_b.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }
}

#[test]
fn zero_learning_rate_checkpoint_equals_init() {
    let config = TINY.replace("\"lr\": 0.01", "\"lr\": 0.0, \"l2\": 0.0");
    let (_dir, cfg, out) = setup(&config);
    ok(&["synth"], &cfg, &out);
    ok(&["train", "--model", "cross"], &cfg, &out);
    let trained = RetrievalModel::load(&out.join("model-cross.json")).unwrap();
    let ds = Dataset::load(&out.join("data")).unwrap();
    let init = RetrievalModel::new(trained.config.clone(), ds.time_scale(), 3).unwrap();
    assert_eq!(trained.params.values, init.params.values);
}

#[test]
fn ablate_emits_six_rows() {
    let (_dir, cfg, out) = setup(TINY);
    ok(&["synth"], &cfg, &out);
    ok(&["train", "--model", "self"], &cfg, &out);
    let stdout = ok(&["ablate", "--model", "self"], &cfg, &out);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["i", "ii", "iii", "iv", "v", "vi"]);
    assert!(out.join("model-self-nounwarp.json").exists());
    assert_eq!(stdout.lines().filter(|l| l.starts_with("variant")).count(), 6);
}

#[test]
fn seed_flag_overrides_config() {
    let (_dir, cfg, out) = setup(TINY);
    ok(&["synth", "--seed", "9"], &cfg, &out);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-synth.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["master"], 9);
    assert_eq!(manifest["config"]["data"]["benchmark"]["seed"], 9);
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let (_dir, cfg, out) = setup(TINY);
    // Stages out of order.
    let o = ctesret(&["train"], &cfg, &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run synth first"));

    let (_bad, bad_cfg, bad_out) = setup(r#"{"train": {"margin": -1.0}}"#);
    let o = ctesret(&["synth"], &bad_cfg, &bad_out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("margin"));

    let o = ctesret(&["frobnicate"], &cfg, &out);
    assert!(!o.status.success());

    let o = Command::new(env!("CARGO_BIN_EXE_ctesret"))
        .args(["synth", "--out"])
        .arg(&out)
        .env("CTESRET_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("CTESRET_THREADS"));
}
