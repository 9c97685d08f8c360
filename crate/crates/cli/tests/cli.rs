//! End-to-end runs of the `bitctx` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bitctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitctx")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn count_ops_totals_row_matches_the_table() {
    let o = bitctx(&["count-ops", "--preset", "bcdnet-a-like", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let total = text.lines().last().unwrap();
    let bops = header.iter().position(|h| *h == "bops").unwrap();
    let value: f64 = total.split(',').nth(bops).unwrap().parse().unwrap();
    assert!((value / 4.82e9 - 1.0).abs() < 0.02, "{value}");
    let summed: f64 = text
        .lines()
        .skip(1)
        .take_while(|l| *l != total)
        .map(|l| l.split(',').nth(bops).unwrap().parse::<f64>().unwrap())
        .sum();
    assert_eq!(summed, value);
}

#[test]
fn zero_iterations_reproduce_the_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bctx");
    let b = dir.path().join("b.bctx");
    let o = bitctx(&["train", "--seed", "3", "--set", "train.iterations=0", "--set", "train.dataset=synthetic:40", "-o", path(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let init = format!("init={:?}", path(&a));
    let o = bitctx(&[
        "train",
        "--set",
        "train.step=2",
        "--set",
        "train.iterations=0",
        "--set",
        "train.dataset=synthetic:40",
        "--set",
        &init,
        "-o",
        path(&b),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("b.bctx.manifest.toml").exists());
}

#[test]
fn analyzer_emits_three_rows_per_mlp_block() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.bctx");
    let o = bitctx(&["train", "--set", "train.iterations=2", "--set", "train.dataset=synthetic:40", "--set", "train.batch_size=4", "-o", path(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bitctx(&["analyze-binerr", "--checkpoint", path(&ckpt)]);
    assert!(o.status.success());
    let rows = stdout(&o).lines().skip(1).filter(|l| !l.is_empty()).count();
    // desk-tiny has three MLP blocks
    assert_eq!(rows, 9);
    let o = bitctx(&["analyze-binerr", "--checkpoint", path(&ckpt), "--mode", "literal"]);
    assert!(o.status.success());
}

#[test]
fn manifests_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ops.csv");
    let manifest = dir.path().join("ops.csv.manifest.toml");
    let mut seen = Vec::new();
    for _ in 0..2 {
        let o = bitctx(&["count-ops", "--preset", "desk-tiny", "--format", "csv", "-o", path(&out)]);
        assert!(o.status.success());
        seen.push(std::fs::read_to_string(&manifest).unwrap());
    }
    assert_eq!(seen[0], seen[1]);
    assert!(seen[0].contains("artifact_sha256"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    assert_eq!(bitctx(&["--help"]).status.code(), Some(0));
    assert_eq!(bitctx(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bitctx(&["count-ops", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(bitctx(&["count-ops", "--mac-factor", "3"]).status.code(), Some(1));
    let o = bitctx(&["train", "--set", "train.iteratons=1", "-o", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.iteratons"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bctx");
    std::fs::write(&bad, b"BCTX garbage").unwrap();
    let o = bitctx(&["eval", "--checkpoint", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
    assert_eq!(bitctx(&["eval", "--checkpoint", "/nonexistent.bctx"]).status.code(), Some(2));
}

#[test]
fn sweep_and_export_run() {
    let o = bitctx(&["sweep", "--points", "0,1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
    let o = bitctx(&["export-spec", "--preset", "desk-tiny"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("desk-tiny"));
}
