//! End-to-end CLI runs on tiny budgets: exit codes, artifacts, resume.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctrlsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrlsplit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = ctrlsplit(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    ctrlsplit(args).status.code().unwrap()
}

fn collect(dir: &Path) -> String {
    let out = dir.join("collect");
    ok(&["collect", "--env", "quadmaze", "--out", out.to_str().unwrap(), "--set", "collect_transitions=200"]);
    out.join("buffer.ducf").display().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let buffer = collect(dir.path());
    let out = |name: &str| dir.path().join(name).display().to_string();
    // usage and configuration errors
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["pretrain", "--env", "quadmaze", "--buffer", &buffer, "--out", &out("a"), "--set", "bogus=1"]), 2);
    assert_eq!(code(&["pretrain", "--buffer", &buffer, "--out", &out("b")]), 2);
    // divergence
    let diverge = [
        "pretrain", "--env", "quadmaze", "--buffer", &buffer, "--out", &out("c"), "--set", "pretrain_iterations=20",
        "--set", "lr.enc=1e38", "--set", "lr.tc=1e38", "--set", "lr.tu=1e38",
    ];
    assert_eq!(code(&diverge), 3);
    // anything else
    assert_eq!(code(&["pretrain", "--env", "quadmaze", "--buffer", &out("missing.ducf"), "--out", &out("d")]), 1);
    assert_eq!(code(&["train-rl", "--env", "quadmaze", "--mode", "end-to-end", "--out", &out("e")]), 1);
}

#[test]
fn pretrain_resume_is_bitwise_identical_to_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let buffer = collect(dir.path());
    let run = |name: &str, iterations: u64| {
        let out = dir.path().join(name).display().to_string();
        let n = format!("pretrain_iterations={}", iterations);
        ok(&["pretrain", "--env", "quadmaze", "--buffer", &buffer, "--out", &out, "--set", &n, "--set", "checkpoint_every=5"]);
        dir.path().join(name)
    };
    let straight = run("straight", 12);
    run("resumed", 7);
    let resumed = dir.path().join("resumed");
    ok(&[
        "pretrain", "--env", "quadmaze", "--buffer", &buffer, "--out", resumed.to_str().unwrap(), "--resume",
        "--set", "pretrain_iterations=12", "--set", "checkpoint_every=5",
    ]);
    for f in ["params.ducf", "optim.ducf", "metrics.csv", "state.json"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{}", f);
    }
    assert!(fs::read_to_string(straight.join("manifest.json")).unwrap().contains("\"argv\""));
}

#[test]
fn probe_and_export_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let buffer = collect(dir.path());
    let ck = dir.path().join("p");
    ok(&["pretrain", "--env", "quadmaze", "--buffer", &buffer, "--out", ck.to_str().unwrap(), "--set", "pretrain_iterations=3"]);
    let probes = dir.path().join("probes");
    ok(&["probe", "--checkpoint", ck.to_str().unwrap(), "--metric", "purity,zc-std", "--out", probes.to_str().unwrap()]);
    let csv = fs::read_to_string(probes.join("probes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{}", csv);
    let latents = dir.path().join("latents");
    ok(&["export-latents", "--checkpoint", ck.to_str().unwrap(), "--out", latents.to_str().unwrap()]);
    let rows = fs::read_to_string(latents.join("latents.csv")).unwrap();
    // every reachable state of the four mazes, plus the header
    assert_eq!(rows.lines().count(), 120);
    assert!(fs::read_to_string(latents.join("latents.svg")).unwrap().starts_with("<svg"));
}
