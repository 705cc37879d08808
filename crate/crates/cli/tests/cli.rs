//! Drives the binary end to end: generate, replay, census, calibrate, gantt.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_chunkcache"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_replay_census_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let report = dir.path().join("report.csv");
    let store = dir.path().join("store");
    run(&[
        "gen",
        "--chunks",
        "30",
        "--k",
        "3",
        "--requests",
        "40",
        "--seed",
        "2",
        "--out",
        s(&trace),
    ]);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 40);

    run(&[
        "replay",
        "--trace",
        s(&trace),
        "--policy",
        "cachecraft",
        "--alpha",
        "1",
        "--out",
        s(&report),
        "--save-store",
        s(&store),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.lines().next().unwrap().contains("tokens_computed"));
    assert!(store.join("manifest.json").exists());

    let census = String::from_utf8(run(&["census", "--store", s(&store)]).stdout).unwrap();
    assert!(census.lines().count() >= 2);

    let cal = String::from_utf8(
        run(&[
            "calibrate",
            "--trace",
            s(&trace),
            "--grid",
            "0.5,2",
            "--target",
            "0",
        ])
        .stdout,
    )
    .unwrap();
    assert_eq!(cal.lines().count(), 3);
}

#[test]
fn gantt_and_bad_input() {
    let out = String::from_utf8(
        run(&[
            "gantt",
            "--layers",
            "6",
            "--t-prefill",
            "0.1",
            "--t-load",
            "0.2",
        ])
        .stdout,
    )
    .unwrap();
    assert_eq!(out.lines().count(), 7);
    let json = String::from_utf8(
        run(&[
            "gantt",
            "--layers",
            "3",
            "--t-prefill",
            "0.1",
            "--t-load",
            "0.1",
            "--json",
        ])
        .stdout,
    )
    .unwrap();
    assert!(json.trim_start().starts_with('{'));

    let bad = Command::new(env!("CARGO_BIN_EXE_chunkcache"))
        .args([
            "replay",
            "--trace",
            "/nonexistent.jsonl",
            "--out",
            "/tmp/x.csv",
            "--policy",
            "bogus",
        ])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
