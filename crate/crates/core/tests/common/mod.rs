#![allow(dead_code)]

use std::path::PathBuf;

use optstop::config::RunConfig;
use optstop::run::{prepare, Prepared};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> RunConfig {
    RunConfig::load(&fixtures_dir().join(format!("{name}.json"))).unwrap()
}

pub fn setup(name: &str) -> Prepared {
    prepare(&fixture(name)).unwrap()
}

/// Brownian motion with constant rate on an explicit span.
pub fn brownian(rate: f64, lo: f64, hi: f64, n: usize, reward: &str) -> Prepared {
    let text = format!(
        r#"{{"problem": {{"interval": ["-inf", "inf"], "left": "inaccessible", "right": "inaccessible",
            "drift": "0", "sigma": "1", "rate": "{rate}", "reward": "{reward}"}},
            "grid": {{"n_nodes": {n}, "trunc": {{"lo": {lo}, "hi": {hi}}}}}}}"#
    );
    prepare(&RunConfig::from_json(&text).unwrap()).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub const SOLVED: [&str; 6] = ["ex1", "ex2", "ex2plus", "ex3", "ex5", "call"];
