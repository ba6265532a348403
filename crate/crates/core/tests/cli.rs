//! End-to-end runs of the `optstop` binary.
//!
//! Golden outputs live in `fixtures/expected/<name>/`; set `UPDATE_GOLDEN=1`
//! to rewrite them.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{fixtures_dir, SOLVED};

fn optstop(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optstop"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

/// Copies a fixture config into a fresh directory and returns its path.
fn staged(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let dst = dir.path().join(format!("{name}.json"));
    fs::copy(fixtures_dir().join(format!("{name}.json")), &dst).unwrap();
    (dir, dst)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn solve_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for name in SOLVED {
        let (dir, cfg) = staged(name);
        let out = optstop(&["solve", cfg.to_str().unwrap()], dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let produced = dir.path().join("out").join(name);
        let expected = fixtures_dir().join("expected").join(name);
        for file in ["solution.json", "smoothfit.json"] {
            let got = fs::read_to_string(produced.join(file)).unwrap();
            if update {
                fs::create_dir_all(&expected).unwrap();
                fs::write(expected.join(file), &got).unwrap();
                continue;
            }
            let want = fs::read_to_string(expected.join(file)).unwrap();
            assert_eq!(got, want, "{name}/{file} differs from golden");
        }
        let csv = fs::read_to_string(produced.join("value.csv")).unwrap();
        assert!(csv.starts_with("x,f,f_bar,phi,psi,v,in_stopping_set\n"));
        assert!(!csv.contains('\r'));
    }
}

#[test]
fn solve_is_deterministic() {
    let (dir, cfg) = staged("ex5");
    let cfg = cfg.to_str().unwrap();
    let p = dir.path().join("out/ex5/value.csv");
    optstop(&["solve", cfg], dir.path());
    let first = fs::read(&p).unwrap();
    optstop(&["solve", cfg], dir.path());
    assert_eq!(first, fs::read(&p).unwrap());
}

#[test]
fn invalid_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": {"interval": [0, 2], "left": "absorbing", "right": "absorbing",
            "drift": "0", "sigma": "x - 1", "rate": "1", "reward": "1"},
            "grid": {"n_nodes": 101}}"#,
    );
    let out = optstop(&["solve", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn infinite_value_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"problem": {"interval": ["-inf", "inf"], "left": "inaccessible", "right": "inaccessible",
            "drift": "0", "sigma": "1", "rate": "0.5", "reward": "exp(2*x)"},
            "grid": {"n_nodes": 401, "trunc": {"lo": -6, "hi": 6}}}"#,
    );
    let out = optstop(&["solve", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/solution.json")).unwrap()).unwrap();
    assert_eq!(doc["finite"], serde_json::json!(false));
}

#[test]
fn simulate_needs_solve_artifacts() {
    let (dir, cfg) = staged("ex3");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(optstop(&["simulate", cfg], dir.path()).status.code(), Some(4));
    assert_eq!(optstop(&["simulate", cfg, "--strategy", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(optstop(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn simulate_immediate_and_tau_star() {
    let (dir, cfg) = staged("ex3");
    let cfg = cfg.to_str().unwrap();
    let out = optstop(&["simulate", cfg, "--strategy", "immediate", "--paths", "50"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let est: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ex3/estimate.json")).unwrap()).unwrap();
    // f(0) = 0 for this reward
    assert_eq!(est["mean"], serde_json::json!(0.0));
    assert_eq!(est["std_error"], serde_json::json!(0.0));

    assert_eq!(optstop(&["solve", cfg], dir.path()).status.code(), Some(0));
    let out = optstop(&["simulate", cfg, "--paths", "4000", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let est: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ex3/estimate.json")).unwrap()).unwrap();
    let (m, se) = (est["mean"].as_f64().unwrap(), est["std_error"].as_f64().unwrap());
    assert!((m - (-1f64).exp()).abs() <= 4.0 * se, "{m} ± {se}");
}
