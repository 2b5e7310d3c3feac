mod common;

use std::path::Path;
use std::process::{Command, Output};

fn dpta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpta")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, common::SMALL).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn check_grads_passes() {
    let o = dpta(&["check-grads", "--configs", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn run_report_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = dpta(&["run", "--config", &cfg, "--out", out_s, "--method", "dpta", "--k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["results.json", "curves.csv", "manifest.txt", "weights.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let r = dpta::harness::RunResult::load(out.join("results.json")).unwrap();
    assert_eq!(r.k, 3);
    assert_eq!(r.seed, 7);

    let o = dpta(&["report", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| dpta |"));

    let emb = dir.path().join("emb.csv");
    let weights = out.join("weights.txt");
    let o = dpta(&[
        "dump-embeddings", "--config", &cfg, "--weights", weights.to_str().unwrap(),
        "--source", "adapter:1", "--output", emb.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&emb).unwrap();
    assert!(text.starts_with("sample_id,task_id,label,f0,"));
    assert_eq!(text.lines().count(), 1 + 4 * 3 * 10);
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("abl");
    let o = dpta(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("comparison.md").is_file());
    assert!(out.join("topk-oracle").join("results.json").is_file());
}

#[test]
fn pretrain_writes_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("pre");
    let o = dpta(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dpta::model::weights::load_checkpoint(out.join("backbone.txt")).unwrap();
    assert!(ck.backbone.is_frozen());
    assert!(ck.adapters.is_empty());
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "k = 0\n").unwrap();
    let o = dpta(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error: config: "), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1);

    let o = dpta(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: io: "), "{}", stderr(&o));

    let o = dpta(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dpta(&["run", "--method", "nope"]).status.code(), Some(2));
    assert_eq!(dpta(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dpta(&[]).status.code(), Some(2));
}
