use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynphase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynphase")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dynphase(&["lowpass-real-demo", "--d", "4", "--trials", "6", "--noise", "1e-8", "--seed", "11", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("results.csv")).unwrap());
    assert!(ra.starts_with(b"trial,seed,label,status"));
    for f in ["summary.json", "plot.gp", "timings.csv"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(fs::read_dir(a.join("plotdata")).unwrap().count() > 0);
}

#[test]
fn different_seeds_give_different_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let o = dynphase(&["prony-bench", "--k", "3", "--trials", "5", "--seed", seed, "--out", path(out)]);
        assert!(o.status.success());
    }
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn toml_config_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    fs::write(&cfg, format!("d = 3\ntrials = 4\nseed = 5\nout = \"{}\"\n", path(&out))).unwrap();
    let o = dynphase(&["roundtrip", "--config", path(&cfg), "--trials", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["d"], 3);
    assert_eq!(summary["config"]["trials"], 2);
    assert_eq!(summary["config"]["seed"], 5);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "dimension = 3\n").unwrap();
    let o = dynphase(&["roundtrip", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn width_two_sampling_vectors_fail_with_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynphase(&["multivector-demo", "--d", "6", "--window", "2", "--seed", "3", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seed 3"), "{err}");
}

#[test]
fn sensitivity_check_passes_on_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynphase(&["sensitivity-check", "--trials", "50", "--seed", "9", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    for c in summary["checks"].as_array().unwrap() {
        assert_eq!(c["violations"], 0, "{c}");
    }
}

#[test]
fn invalid_arguments_are_rejected() {
    assert_eq!(dynphase(&["prony-bench", "--k", "0"]).status.code(), Some(2));
    assert!(!dynphase(&["no-such-command"]).status.success());
}
