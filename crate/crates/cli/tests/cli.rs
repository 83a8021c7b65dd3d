use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use xcdiff_core::actstore::{write_shard, TokenMeta};

const BIN: &str = env!("CARGO_BIN_EXE_xcdiff");

fn small_config() -> Value {
    json!({
        "seed": 11,
        "synth": {"n_tokens": 6000, "rows_per_shard": 2500},
        "train": {"total_steps": 60, "log_every": 10, "batch_size": 64},
        "ablate": {"eval_tokens": 2000, "n_targets": 20},
        "steer": {"prompt_len": 8, "max_steps": 4}
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), serde_json::to_string(config).unwrap()).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("config.json");
        Command::new(BIN)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(self.out())
            .args(["--deterministic", "--no-timestamp"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "xcdiff {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn report(&self, name: &str) -> Value {
        let text = std::fs::read_to_string(self.out().join(name)).unwrap();
        serde_json::from_str::<Value>(&text).unwrap()["report"].clone()
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.out().join(name)).unwrap()
    }

    fn trained(config: &Value) -> Self {
        let ws = Self::new(config);
        ws.ok(&["synth"]);
        ws.ok(&["train"]);
        ws
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_is_deterministic_across_output_directories() {
    let a = Workspace::new(&small_config());
    let b = Workspace::new(&small_config());
    a.ok(&["synth"]);
    b.ok(&["synth"]);
    assert_eq!(a.bytes("synth_report.json"), b.bytes("synth_report.json"));
    let r = a.report("synth_report.json");
    assert_eq!(r["n_tokens"], 6000);
    let rows: u64 = r["shards"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["rows"].as_u64().unwrap())
        .sum();
    assert_eq!(rows, 6000);
    for s in r["shards"].as_array().unwrap() {
        let p = s["path"].as_str().unwrap();
        assert!(Path::new(p).is_relative());
        assert_eq!(a.bytes(p), b.bytes(p));
    }
}

#[test]
fn synth_with_zero_tokens_writes_no_rows() {
    let mut cfg = small_config();
    cfg["synth"]["n_tokens"] = json!(0);
    let ws = Workspace::new(&cfg);
    ws.ok(&["synth"]);
    let r = ws.report("synth_report.json");
    assert_eq!(r["n_tokens"], 0);
    assert_eq!(r["n_docs"], 0);
    let rows: u64 = r["shards"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["rows"].as_u64().unwrap())
        .sum();
    assert_eq!(rows, 0);
}

#[test]
fn missing_shard_file_fails_and_names_the_path() {
    let mut cfg = small_config();
    cfg["paths"] = json!({"shards": ["/nonexistent/shard-x.bin"]});
    let ws = Workspace::new(&cfg);
    let out = ws.run(&["train"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("/nonexistent/shard-x.bin"), "{err}");
    assert!(err.contains("train"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new(&json!({"sed": 3}));
    let out = ws.run(&["synth"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));

    let ws = Workspace::new(&json!({"train": {"stepz": 3}}));
    assert!(!ws.run(&["synth"]).status.success());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = Command::new(BIN).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN)
        .args(["ablate", "--top-percent", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_logs_one_metrics_row_per_interval_and_is_deterministic() {
    let a = Workspace::trained(&small_config());
    let b = Workspace::trained(&small_config());
    let r = a.report("train_report.json");
    assert_eq!(r["steps"], 60);
    assert_eq!(r["metrics_rows"], 6);
    let metrics = String::from_utf8(a.bytes("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![10, 20, 30, 40, 50, 60]);
    assert_eq!(a.bytes("checkpoint.bin"), b.bytes("checkpoint.bin"));
    assert_eq!(
        r["checkpoint_sha256"],
        b.report("train_report.json")["checkpoint_sha256"]
    );
    assert!(r["recovery"]["recovered_fraction"].is_number());
}

#[test]
fn seed_flag_changes_the_run() {
    let a = Workspace::new(&small_config());
    let b = Workspace::new(&small_config());
    a.ok(&["synth"]);
    b.ok(&["--seed", "12", "synth"]);
    assert_ne!(
        a.report("synth_report.json")["world_sha256"],
        b.report("synth_report.json")["world_sha256"]
    );
    let env: Value = serde_json::from_slice(&b.bytes("synth_report.json")).unwrap();
    assert_eq!(env["seed"], 12);
    assert!(env.get("generated_at_unix").is_none());
}

#[test]
fn resume_with_a_changed_config_fails() {
    let ws = Workspace::trained(&small_config());
    let ckpt = ws.out().join("checkpoint.bin");
    let mut cfg = small_config();
    cfg["train"]["learning_rate"] = json!(0.5);
    let other = Workspace::new(&cfg);
    other.ok(&["synth"]);
    let out = other.run(&["train", "--resume", ckpt.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn diff_lists_every_feature_and_swap_mirrors_nrn() {
    let ws = Workspace::trained(&small_config());
    ws.ok(&["diff"]);
    let plain = ws.report("diff_report.json");
    assert_eq!(plain["diff"]["n_features"], 96);
    let feats = plain["diff"]["features"].as_array().unwrap().clone();
    assert_eq!(feats.len(), 96);
    let csv = String::from_utf8(ws.bytes("diff_features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 97);

    ws.ok(&["diff", "--swap-sides"]);
    let swapped = ws.report("diff_report.json");
    assert_eq!(swapped["swapped_sides"], true);
    for (a, b) in feats.iter().zip(swapped["diff"]["features"].as_array().unwrap()) {
        let (x, y) = (a["nrn"].as_f64().unwrap(), b["nrn"].as_f64().unwrap());
        assert!((x + y - 1.0).abs() < 1e-12, "{x} {y}");
    }
}

#[test]
fn ablate_echoes_the_grid_and_empty_sets_change_nothing() {
    let mut cfg = small_config();
    cfg["ablate"]["nrn_threshold"] = json!(1.5);
    let ws = Workspace::trained(&cfg);
    ws.ok(&["ablate", "--top-percent", "0.5,20"]);
    let r = ws.report("ablate_report.json");
    assert_eq!(r["top_percent_grid"], json!([0.5, 20.0]));
    let rows = r["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row["features"], json!([]));
        assert_eq!(row["distilled_mean_delta"], 0.0);
        assert_eq!(row["base_mean_abs_delta"], 0.0);
    }
    assert_eq!(r["pooled"].as_array().unwrap().len(), 2);
}

#[test]
fn steering_at_zero_matches_the_baseline() {
    let ws = Workspace::trained(&small_config());
    ws.ok(&["steer", "--feature", "3", "--alpha", "-1,0,2"]);
    let r = ws.report("steer_report.json");
    assert_eq!(r["feature"], 3);
    let t = r["transcripts"].as_array().unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(t[1]["alpha"], 0.0);
    assert_eq!(t[1]["matches_baseline"], true);
    let base: Value = serde_json::from_slice(&ws.bytes("steer_baseline.json")).unwrap();
    assert_eq!(base["report"]["generated"], t[1]["generated"]);
}

#[test]
fn steer_without_a_checkpoint_fails() {
    let ws = Workspace::new(&small_config());
    ws.ok(&["synth"]);
    let out = ws.run(&["steer"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checkpoint"), "{}", stderr(&out));
}

#[test]
fn geometry_respects_dims_override_on_exact_parallelograms() {
    let mut cfg = small_config();
    cfg["geometry"] = json!({"synthetic": {"n_classes": 3, "entries": 12, "dim": 24, "sigma": 0.0}});
    let ws = Workspace::new(&cfg);
    ws.ok(&["geometry", "--dims", "20"]);
    let r = ws.report("geometry_report.json");
    assert_eq!(r["source"], "synthetic");
    let results = r["geometry"]["results"].as_array().unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0]["dim"], 20);
    for class in results[0]["classes"].as_array().unwrap() {
        for l in class["losses"].as_array().unwrap() {
            assert!(l.as_f64().unwrap() < 1e-9);
        }
    }
}

#[test]
fn geometry_skips_classes_with_too_few_single_token_entries() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = json!({
        "good": [
            {"a": "x0", "b": "y0", "a_tokens": [0], "b_tokens": [1]},
            {"a": "x1", "b": "y1", "a_tokens": [2], "b_tokens": [3]},
            {"a": "x2", "b": "y2", "a_tokens": [4], "b_tokens": [5]}
        ],
        "thin": [
            {"a": "p", "b": "q", "a_tokens": [6], "b_tokens": [7]},
            {"a": "long", "b": "r", "a_tokens": [6, 7], "b_tokens": [1]}
        ]
    });
    let dpath = dir.path().join("classes.json");
    std::fs::write(&dpath, dataset.to_string()).unwrap();
    let epath = dir.path().join("emb.bin");
    let rows: Vec<Vec<Vec<f32>>> = (0..8)
        .map(|i| vec![vec![i as f32, (i * i) as f32 * 0.1, 1.0]])
        .collect();
    let meta = (0..8u32).map(|i| TokenMeta {
        doc_id: 0,
        position: i as u64,
        token_id: i,
        token_text: format!("w{i}"),
    });
    write_shard(&epath, &[3], rows, meta).unwrap();

    let mut cfg = small_config();
    cfg["geometry"] = json!({"dataset": dpath, "embeddings": epath, "dims": [2]});
    let ws = Workspace::new(&cfg);
    ws.ok(&["geometry"]);
    let r = ws.report("geometry_report.json");
    let dim = &r["geometry"]["results"][0];
    assert_eq!(dim["classes"][0]["class"], "good");
    assert_eq!(dim["skipped"][0]["class"], "thin");
    assert_eq!(r["geometry"]["dropped_multi_token"]["thin"], 1);
}

#[test]
fn geometry_requires_dataset_and_embeddings_together() {
    let mut cfg = small_config();
    cfg["geometry"] = json!({"dataset": "/tmp/only-a-dataset.json"});
    let ws = Workspace::new(&cfg);
    assert!(!ws.run(&["geometry"]).status.success());
}
