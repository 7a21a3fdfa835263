//! End-to-end runs of the `didigan` binary on a small phantom dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn didigan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didigan")).args(args).env("RUST_LOG", "warn").env_remove("DIDIGAN_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = didigan(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// One dataset and a three-step checkpoint shared by the tests that need them.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        ok(&["synth-data", "--n", "10", "--seed", "3", "--out", p(&data)]);
        ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "3", "--set", "val_interval=3"]);
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn two_way_ratios_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = didigan(&["synth-data", "--ratios", "0.5,0.5", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train,val,test"));
}

#[test]
fn synth_data_splits_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-data", "--n", "10", "--ratios", "0.6,0.2,0.2", "--seed", "9", "--out", p(d)]);
    }
    let manifest = |d: &Path| std::fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    let rows: Vec<Value> = String::from_utf8(manifest(&a)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let count = |s: &str| rows.iter().filter(|r| r["split"] == s).count();
    // Anatomies split 6/2/2, two slices each.
    assert_eq!((count("train"), count("val"), count("test")), (12, 4, 4));
    assert_eq!(json(&a.join("resolved_config.json"))["command"], "synth-data");
}

#[test]
fn train_writes_checkpoint_log_and_snapshot() {
    let f = fixture();
    assert!(f.run.join("checkpoint/manifest.json").is_file());
    let log = std::fs::read_to_string(f.run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 3);
    let snap = json(&f.run.join("resolved_config.json"));
    assert_eq!(snap["config"]["train"]["total_steps"], 3);
    assert_eq!(snap["config"]["train"]["val_interval"], 3);
    assert_eq!(snap["config"]["train"]["generator"]["antialias"], true);
}

#[test]
fn no_antialias_only_touches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    ok(&["synth-data", "--n", "5", "--ratios", "0.6,0.2,0.2", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--out", p(&out), "--steps", "1", "--no-antialias"]);
    let cfg = &json(&out.join("resolved_config.json"))["config"]["train"];
    assert_eq!(cfg["generator"]["antialias"], false);
    assert_eq!(cfg["critic"]["antialias"], true);
}

#[test]
fn unknown_override_is_a_usage_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = didigan(&["train", "--data", p(&f.data), "--out", p(dir.path()), "--set", "weights.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_bitwise() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (half, whole) = (dir.path().join("half"), dir.path().join("whole"));
    ok(&["train", "--data", p(&f.data), "--out", p(&whole), "--steps", "4", "--set", "val_interval=2"]);
    ok(&["train", "--data", p(&f.data), "--out", p(&half), "--steps", "2", "--set", "val_interval=2"]);
    let resumed = dir.path().join("resumed");
    ok(&["train", "--data", p(&f.data), "--out", p(&resumed), "--resume", p(&half.join("checkpoint")), "--steps", "4"]);
    for file in ["g.bin", "g_ema.bin", "d.bin", "d_adam_v.bin"] {
        let a = std::fs::read(whole.join("checkpoint").join(file)).unwrap();
        let b = std::fs::read(resumed.join("checkpoint").join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn generate_writes_pairs_deterministically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--ckpt", p(&ck), "--constraints", p(&f.data), "--n", "6", "--seed", "4", "--out", p(d)]);
    }
    let index = json(&a.join("pairs.json"));
    assert_eq!(index.as_array().unwrap().len(), 6);
    for k in 0..6 {
        let id = format!("pair-{k:03}");
        for file in ["ad.png", "cn.png", "provenance.json", "constraint.bin"] {
            let x = std::fs::read(a.join(&id).join(file)).unwrap();
            assert_eq!(x, std::fs::read(b.join(&id).join(file)).unwrap(), "{id}/{file}");
        }
        assert!(a.join("rois").join(&id).join("ventricle.png").is_file());
    }
}

#[test]
fn missing_checkpoint_exits_with_usage() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = didigan(&["generate", "--ckpt", p(&dir.path().join("absent")), "--constraints", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = didigan(&["fine-tune", "--ckpt", p(&dir.path().join("absent")), "--data", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_skips_corrupt_pairs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    ok(&["generate", "--ckpt", p(&f.run.join("checkpoint")), "--constraints", p(&f.data), "--n", "3", "--out", p(&pairs)]);
    std::fs::write(pairs.join("pair-001/ad.png"), b"not a png").unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--pairs", p(&pairs), "--rois", p(&pairs.join("rois")), "--out", p(&out)]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["pairs_evaluated"], 2);
    assert_eq!(report["skipped"][0]["pair_id"], "pair-001");
    assert!(out.join("roi_report.json").is_file());
    assert!(out.join("figures/pairs.png").is_file());
}

#[test]
fn evaluate_needs_something_to_do() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(didigan(&["evaluate", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(didigan(&["evaluate", "--styles", "10", "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn fine_tune_and_model_reports() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint");
    let ft = dir.path().join("ft");
    ok(&["fine-tune", "--ckpt", p(&ck), "--data", p(&f.data), "--out", p(&ft), "--n", "20", "--epochs", "1", "--pool-anatomies", "10"]);
    let m = json(&ft.join("metrics.json"));
    assert_eq!(m["n"], 20);
    assert!(m["accuracy_after"].as_f64().unwrap() >= 0.0);
    let o = didigan(&["fine-tune", "--ckpt", p(&ck), "--data", p(&f.data), "--out", p(&ft), "--n", "21", "--pool-anatomies", "10"]);
    assert_eq!(o.status.code(), Some(2));

    let ev = dir.path().join("ev");
    ok(&["evaluate", "--ckpt", p(&ck), "--styles", "20", "--data", p(&f.data), "--out", p(&ev)]);
    let r = json(&ev.join("report.json"));
    assert!(r["manifold"]["silhouette"].as_f64().unwrap().is_finite());
    assert_eq!(r["classification"]["n"], 4);
    assert!(ev.join("figures/manifold.png").is_file());
}
