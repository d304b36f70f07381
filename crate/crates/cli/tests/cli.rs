use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn tvcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvcd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// A fast configuration: 32x32 images and a few steps.
fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "image_size": 32,
        "generator": {
            "height": 32,
            "width": 32,
            "land_size": [7, 18],
            "building_size": [3, 6]
        },
        "optimizer": { "steps": 4, "batch_size": 2, "lr": 1e-3 },
        "compare": { "pool_size": 8, "batch_size": 4 }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path(&p).to_string()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&tvcd(&["generate", "--config", &cfg, "--seed", "5", "--n", "6", "--out", path(out)]));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 6 * 5 + 1);
    assert!(ta == tb);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 5);
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 6);

    let c = dir.path().join("c");
    ok(&tvcd(&["generate", "--config", &cfg, "--seed", "6", "--n", "6", "--out", path(&c)]));
    assert!(tree(&c) != ta);
}

#[test]
fn invalid_class_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"model": {"num_classes": 1}, "generator": {"num_classes": 1}}"#).unwrap();
    let out = tvcd(&["generate", "--config", path(&p), "--out", path(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_classes"));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"optimizer": {"learning_rate": 0.1}}"#).unwrap();
    let out = tvcd(&["compare-pairing", "--config", path(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let missing = dir.path().join("nowhere");
    let out = tvcd(&["eval", "--config", &cfg, "--oracle", "--data", path(&missing)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&tvcd(&["generate", "--config", &cfg, "--n", "6", "--out", path(&data)]));
    ok(&tvcd(&[
        "train", "--config", &cfg, "--data", path(&data), "--eval-data", path(&data), "--out", path(&run),
    ]));
    for f in ["config.json", "checkpoint.bin", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["step", "step", "step", "step", "eval"]);

    // resuming with a larger step budget appends to the same log
    ok(&tvcd(&[
        "train", "--config", &cfg, "--data", path(&data), "--resume", path(&run.join("checkpoint.bin")),
        "--steps", "6", "--out", path(&run),
    ]));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 7);

    // config is taken from beside the checkpoint
    let report_a = dir.path().join("eval_a.json");
    let report_b = dir.path().join("eval_b.json");
    let ckpt = run.join("checkpoint.bin");
    for r in [&report_a, &report_b] {
        ok(&tvcd(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(r)]));
    }
    let a = std::fs::read_to_string(&report_a).unwrap();
    assert_eq!(a, std::fs::read_to_string(&report_b).unwrap());
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    let c = &report["counts"];
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 6 * 32 * 32);
    assert!(report["f1"].as_str().unwrap().split('.').nth(1).unwrap().len() == 4);

    let oracle = dir.path().join("oracle.json");
    ok(&tvcd(&["eval", "--config", &cfg, "--oracle", "--data", path(&data), "--out", path(&oracle)]));
    let o: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!(o["f1"], "1.0000");

    let mask = dir.path().join("mask.png");
    let id = "00000";
    ok(&tvcd(&[
        "predict",
        "--checkpoint",
        path(&ckpt),
        "--before",
        path(&data.join("pairs").join(format!("{id}_a.png"))),
        "--after",
        path(&data.join("pairs").join(format!("{id}_b.png"))),
        "--out",
        path(&mask),
    ]));
    assert!(mask.exists());
}

#[test]
fn compare_pairing_reports_both_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("cmp.json");
    ok(&tvcd(&["compare-pairing", "--config", &cfg, "--out", path(&out)]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["random_pairing"]["count"], 8);
    assert_eq!(r["edit_pairing"]["max"], 0.0);
    assert!(r["random_pairing"]["mean"].as_f64().unwrap() > 0.0);
}
