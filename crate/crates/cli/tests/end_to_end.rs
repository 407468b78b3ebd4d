//! Drives the binary through the toy workflow.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hunter-forge"));
    c.env("HUNTER_WORKERS", "2");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_toy(dir: &Path) {
    ok(&run(
        &["toy-dataset", "--out", "toy", "--sequences", "2", "--frames-per-sequence", "12", "--seed", "3"],
        dir,
    ));
}

#[test]
fn toy_workflow_composes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_toy(d);
    let cfg = ["--config", "toy/config.toml"];

    ok(&run(&[&cfg[..], &["segment-ground", "--out", "seg"]].concat(), d));
    assert_eq!(fs::read_dir(d.join("seg/masks")).unwrap().count(), 24);

    let out = ok(&run(&[&cfg[..], &["filter", "--detections", "toy/detections.jsonl", "--out", "filt.jsonl"]].concat(), d));
    assert!(out.contains("kept"));
    let raw = fs::read_to_string(d.join("toy/detections.jsonl")).unwrap();
    let kept = fs::read_to_string(d.join("filt.jsonl")).unwrap();
    let count = |s: &str| -> usize {
        s.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["boxes"].as_array().unwrap().len())
            .sum()
    };
    assert!(count(&kept) < count(&raw));

    ok(&run(&[&cfg[..], &["update-mask", "--masks", "seg/masks", "--labels", "filt.jsonl", "--out", "mprime"]].concat(), d));
    assert!(d.join("mprime/seq0_0000.mask").exists());

    let table = ok(&run(&[&cfg[..], &["eval", "--detections", "filt.jsonl", "--gt", "toy/gt.jsonl", "--out", "report.json"]].concat(), d));
    assert!(table.contains("mAP") && table.contains("AP(0.25)"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let m_ap = report["report"]["m_ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m_ap));
    assert_eq!(report["seed"], 3);

    let perfect = ok(&run(&[&cfg[..], &["eval", "--detections", "toy/gt.jsonl", "--gt", "toy/gt.jsonl", "--out", "self.json"]].concat(), d));
    assert!(perfect.contains("100.00"));
}

#[test]
fn forge_is_content_addressed_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_toy(d);
    let args = ["--config", "toy/config.toml", "--seed", "7", "forge", "--frames", "20"];
    let a = ok(&run(&[&args[..], &["--out", "a"]].concat(), d));
    let b = ok(&run(&[&args[..], &["--out", "b"]].concat(), d));
    let name = |s: &str| s.lines().next().unwrap().rsplit('/').next().unwrap().to_string();
    assert_eq!(name(&a), name(&b));
    let corpus = d.join("a").join(name(&a));
    assert_eq!(fs::read_dir(corpus.join("frames")).unwrap().count(), 20);
    for f in ["frames/000007.bin", "labels/000007.json", "masks/000007.mstar.mask", "heatmaps/000007.hm"] {
        assert_eq!(fs::read(corpus.join(f)).unwrap(), fs::read(d.join("b").join(name(&b)).join(f)).unwrap(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(corpus.join("corpus.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);

    // Same output folder again: the existing corpus is reused.
    let again = ok(&run(&[&args[..], &["--out", "a"]].concat(), d));
    assert_eq!(name(&again), name(&a));
    assert_eq!(fs::read_dir(d.join("a")).unwrap().count(), 1);

    let other = ok(&run(&["--config", "toy/config.toml", "--seed", "8", "forge", "--frames", "20", "--out", "a"], d));
    assert_ne!(name(&other), name(&a));

    // The same inputs in another folder give the same corpus.
    let moved = tempfile::tempdir().unwrap();
    small_toy(moved.path());
    let there = ok(&run(&[&args[..], &["--out", "c"]].concat(), moved.path()));
    assert_eq!(name(&there), name(&a));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_toy(d);
    // A frame that cannot be read is a warning.
    fs::remove_file(d.join("toy/frames/seq1/0003.bin")).unwrap();
    let o = run(&["--config", "toy/config.toml", "segment-ground", "--out", "seg"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seq1_0003"));

    // An empty asset pool is fatal.
    fs::create_dir(d.join("no-assets")).unwrap();
    let o = run(&["--config", "toy/config.toml", "forge", "--frames", "2", "--assets", "no-assets", "--out", "c"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("asset"));

    let o = run(&["--config", "missing.toml", "filter", "--detections", "x"], d);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn losscheck_dumps_values_and_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("t.json"),
        r#"{"align":{"synthetic":[[2.0]],"real":[[0.0]]},"bbox":{"pred":[[1.0,2.0]],"gt":[[1.0,0.0]]}}"#,
    )
    .unwrap();
    fs::write(d.join("c.toml"), "[loss]\ndelta_var = 0.0\n").unwrap();
    let out = ok(&run(&["--config", "c.toml", "losscheck", "--tensors", "t.json", "--out", "l.json"], d));
    assert!(out.contains("align: 6"));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("l.json")).unwrap()).unwrap();
    assert_eq!(dump["align"]["s2r"], 4.0);
    assert_eq!(dump["bbox"]["value"], 4.0);
    assert!(dump["heatmap"].is_null());
}
