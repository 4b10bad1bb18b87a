use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn d2k(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2k")).args(args).output().expect("failed to launch d2k")
}

fn ok_json(args: &[&str]) -> Value {
    let out = d2k(args);
    assert!(
        out.status.success(),
        "d2k {args:?} exited with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("d2k {args:?} printed invalid JSON: {e}"))
}

fn gen_small(dir: &Path) {
    gen_samples(dir, "3000");
}

fn gen_samples(dir: &Path, samples: &str) {
    let out = d2k(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--samples",
        samples,
        "--users",
        "30",
        "--items",
        "30",
        "--contexts",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_from_logs_to_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_samples(&data, "20000");
    for f in ["schema.txt", "logs.tsv", "vocab.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let (enc, kb, model) = (tmp.path().join("enc.bin"), tmp.path().join("base.kb"), tmp.path().join("rec.bin"));

    let history = ok_json(&["train-encoder", "--data", p(&data), "--out", p(&enc), "--epochs", "3"]);
    assert!(!history.as_array().unwrap().is_empty());

    let built = ok_json(&["kb", "build", "--data", p(&data), "--encoder", p(&enc), "--out", p(&kb)]);
    let entries = built["entries"].as_u64().unwrap();
    assert!(entries > 0);
    assert_eq!(ok_json(&["kb", "stats", "--kb", p(&kb)])["entries"].as_u64().unwrap(), entries);

    ok_json(&[
        "train-rec",
        "--data",
        p(&data),
        "--kb",
        p(&kb),
        "--out",
        p(&model),
        "--injection",
        "tower_lr",
        "--adaptation",
        "share",
        "--epochs",
        "3",
    ]);
    let metrics = ok_json(&["eval", "--data", p(&data), "--model", p(&model), "--kb", p(&kb)]);
    let auc = metrics["auc"].as_f64().unwrap();
    assert!(metrics["logloss"].as_f64().unwrap() > 0.0);

    let plain = tmp.path().join("plain.bin");
    ok_json(&["train-rec", "--data", p(&data), "--out", p(&plain), "--epochs", "3"]);
    let plain_auc = ok_json(&["eval", "--data", p(&data), "--model", p(&plain)])["auc"].as_f64().unwrap();
    assert!(auc > plain_auc && plain_auc > 0.5, "knowledge {auc:.4} vs plain {plain_auc:.4}");

    // a model trained with knowledge cannot be evaluated without it
    let out = d2k(&["eval", "--data", p(&data), "--model", p(&model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn update_keeps_old_keys_and_adds_new_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let (enc, newer, kb, merged) = (
        tmp.path().join("enc.bin"),
        tmp.path().join("enc2.bin"),
        tmp.path().join("a.kb"),
        tmp.path().join("b.kb"),
    );
    ok_json(&["train-encoder", "--data", p(&data), "--out", p(&enc), "--epochs", "1", "--blocks", "1-2"]);
    ok_json(&["train-encoder", "--data", p(&data), "--out", p(&newer), "--epochs", "1", "--blocks", "3-5"]);
    let before = ok_json(&["kb", "build", "--data", p(&data), "--encoder", p(&enc), "--out", p(&kb), "--blocks", "1-2"]);
    let after = ok_json(&[
        "kb",
        "update",
        "--data",
        p(&data),
        "--kb",
        p(&kb),
        "--encoder",
        p(&newer),
        "--policy",
        "ap",
        "--blocks",
        "3-5",
        "--out",
        p(&merged),
    ]);
    assert!(after["entries"].as_u64().unwrap() > before["entries"].as_u64().unwrap());
}

#[test]
fn reduced_feature_set_builds_a_smaller_base() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let enc = tmp.path().join("enc.bin");
    ok_json(&["train-encoder", "--data", p(&data), "--out", p(&enc), "--epochs", "1"]);
    let full = ok_json(&["kb", "build", "--data", p(&data), "--encoder", p(&enc), "--out", p(&tmp.path().join("f.kb"))]);
    let small = ok_json(&[
        "kb",
        "build",
        "--data",
        p(&data),
        "--encoder",
        p(&enc),
        "--out",
        p(&tmp.path().join("s.kb")),
        "--kb-fields",
        "user_segment,item_cat,ctx",
    ]);
    assert!(small["entries"].as_u64().unwrap() < full["entries"].as_u64().unwrap());
}

#[test]
fn bench_pads_the_base() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let b = ok_json(&["bench", "--data", p(&data), "--pad-to", "5000", "--batch", "256"]);
    assert_eq!(b["kb_entries"].as_u64(), Some(5000));
    assert_eq!(b["queries_per_sample"].as_u64(), Some(9));
    assert!(b["median_ms"].as_f64().unwrap() >= 0.0);
}

const TINY_EXPERIMENT: &str = r#"{
    "methods": ["fixed_r", "d2k_base"],
    "seeds": [1],
    "encoder": {"dim": 4, "knowledge_dim": 2, "ffn_hidden": 8, "knowledge_hidden": 8, "train": {"epochs": 1}},
    "backbone": {"dim": 4, "hidden": [8], "train": {"epochs": 1}}
}"#;

#[test]
fn experiment_writes_records_and_reports_failures_in_the_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, TINY_EXPERIMENT).unwrap();
    let records = tmp.path().join("cells.jsonl");

    let out = d2k(&["experiment", "--config", p(&cfg), "--data", p(&data), "--records", p(&records)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("d2k_base"));
    let cells: Vec<Value> = std::fs::read_to_string(&records)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c["auc"].is_f64()));

    // an encoder step size this large diverges, so only the knowledge cell fails
    let diverging = tmp.path().join("diverging.json");
    let mut v: Value = serde_json::from_str(TINY_EXPERIMENT).unwrap();
    v["encoder"]["train"]["lr"] = serde_json::json!(1e300);
    std::fs::write(&diverging, v.to_string()).unwrap();
    let out = d2k(&["experiment", "--config", p(&diverging), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d2k_base"));
}

#[test]
fn bad_input_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(d2k(&["kb", "stats", "--kb", p(&missing)]).status.code(), Some(2));
    let garbage = tmp.path().join("garbage.kb");
    std::fs::write(&garbage, b"D2K1 not really a base").unwrap();
    let out = d2k(&["kb", "stats", "--kb", p(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(d2k(&["experiment", "--methods", "no_such_method"]).status.code(), Some(2));
}
