//! End-to-end tests of the `covdet` binary.

use std::path::Path;
use std::process::{Command, Output};

fn covdet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covdet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to launch covdet")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY_CONFIG: &str = r#"{
    "n": 24, "q": 2, "l": 12, "m": 64, "k": 3,
    "sigma_w_sq": 0.5, "gain": 1.0, "seed": 0
}"#;

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"][..], &["solve", "--help"][..]] {
        let out = covdet(args, dir.path());
        assert!(out.status.success(), "{args:?} exited nonzero");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["frobnicate"],
        &["solve"],
        &["solve", "--instance", "missing.covd", "--solver", "bogus"],
    ];
    for args in cases {
        let out = covdet(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?} should exit 1");
        assert!(!out.stderr.is_empty(), "{args:?} should print to stderr");
    }
}

#[test]
fn simulate_solve_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = covdet(
        &["simulate", "--config", &config, "--out", "inst.covd", "--gamma-csv", "truth.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "simulate failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("inst.covd").exists());
    let csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert!(csv.starts_with("device,sequence,gamma"));
    assert_eq!(csv.lines().count(), 4, "3 active devices + header");

    for solver in ["active-set-pg", "random-cd", "ideal-pg", "ideal-cd"] {
        let out = covdet(&["solve", "--instance", "inst.covd", "--solver", solver], dir.path());
        assert!(
            out.status.success(),
            "solve --solver {solver} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(json["solver"], solver);
        assert_eq!(json["converged"], true);
        assert!(json["objective"].as_f64().unwrap().is_finite());
        assert!(json["kkt"].as_f64().unwrap() < 1e-3);
    }
}

#[test]
fn solve_trace_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    assert!(covdet(&["simulate", "--config", &config, "--out", "inst.covd"], dir.path())
        .status
        .success());
    let out = covdet(&["solve", "--instance", "inst.covd", "--trace"], dir.path());
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("outer,active_set_size,objective,kkt,elapsed"));
    // stdout stays pure JSON.
    assert!(serde_json::from_slice::<serde_json::Value>(&out.stdout).is_ok());
}

#[test]
fn solve_nonconvergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    assert!(covdet(&["simulate", "--config", &config, "--out", "inst.covd"], dir.path())
        .status
        .success());
    // An unattainable tolerance forces a non-converged exit.
    let out = covdet(
        &["solve", "--instance", "inst.covd", "--solver", "random-cd", "--eps", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_rejects_corrupt_instance() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.covd"), b"NOTCOVD-at-all").unwrap();
    let out = covdet(&["solve", "--instance", "junk.covd"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "sweep_n": [24, 40], "k_ratio": 0.125, "q": 2, "l": 12, "m": 64,
            "sigma_w_sq": 0.5, "trials": 2, "master_seed": 5,
            "solvers": ["active-set-pg", "random-cd"]
        }"#,
    );
    let out = covdet(&["bench", "--config", &config, "--out-dir", "results"], dir.path());
    assert!(out.status.success(), "bench failed: {}", String::from_utf8_lossy(&out.stderr));
    for file in ["trials.csv", "aggregate.csv", "trials.json", "aggregate.json"] {
        assert!(dir.path().join("results").join(file).exists(), "missing {file}");
    }
    let trials = std::fs::read_to_string(dir.path().join("results/trials.csv")).unwrap();
    // Header + 2 sizes x 2 trials x 2 solvers.
    assert_eq!(trials.lines().count(), 9);
}

#[test]
fn validate_runs_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let out = covdet(
        &["validate", "--gradient-instances", "3", "--cd-coords", "40", "--seed", "7"],
        dir.path(),
    );
    assert!(out.status.success(), "validate failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 2, "expected two PASS lines: {stdout}");
}
