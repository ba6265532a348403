//! CSV and JSON emission.
//!
//! JSON files are canonical: keys sorted, floats rounded to 12 significant
//! digits, infinities written as the strings `"inf"` / `"-inf"`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{json, Map, Number, Value};
use thiserror::Error;

use crate::config::Bound;
use crate::ode::FundamentalPair;
use crate::solver::{Finiteness, SmoothFitPoint, ValueSolution};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes infinities as `"inf"` / `"-inf"` and NaN as `null`.
pub fn ser_extended<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        Bound(*v).serialize(s)
    }
}

/// Rounds to 12 significant digits.
pub fn round12(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.11e}").parse().unwrap_or(v)
}

fn bound(v: f64) -> Value {
    if v == f64::INFINITY {
        Value::from("inf")
    } else if v == f64::NEG_INFINITY {
        Value::from("-inf")
    } else {
        Number::from_f64(v).map_or(Value::Null, Value::Number)
    }
}

/// Canonical form of a JSON value.
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            let x = round12(n.as_f64().unwrap_or(f64::NAN));
            // drop the sign of zero so that −0 and 0 compare equal
            bound(if x == 0.0 { 0.0 } else { x })
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, canonicalize(v))).collect::<Map<_, _>>()),
        other => other,
    }
}

pub fn to_canonical_string<T: Serialize>(v: &T) -> Result<String, serde_json::Error> {
    let mut s = serde_json::to_string_pretty(&canonicalize(serde_json::to_value(v)?))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), IoError> {
    fs::write(path, to_canonical_string(v)?).map_err(io_err(path))
}

fn intervals(iv: &[(f64, f64)]) -> Value {
    Value::Array(iv.iter().map(|&(a, b)| json!([bound(a), bound(b)])).collect())
}

/// The `solution.json` document; `csv_name` is the value table it refers to.
pub fn solution_json(sol: &ValueSolution, csv_name: Option<&str>) -> Result<Value, serde_json::Error> {
    let g = &sol.v.grid;
    Ok(json!({
        "finite": sol.finite,
        "limA": bound(sol.lim_a),
        "limB": bound(sol.lim_b),
        "waiting": serde_json::to_value(&sol.waiting)?,
        "stopping_intervals": intervals(&sol.stopping_intervals),
        "tau_star_region": intervals(&sol.tau_star_region),
        "v_at_left": sol.v_at_left,
        "v_at_right": sol.v_at_right,
        "diagnostics": serde_json::to_value(&sol.diagnostics)?,
        "grid": {"n_nodes": g.len(), "lo": g.x(0), "hi": g.x(g.len() - 1)},
        "v": csv_name,
    }))
}

/// `solution.json` when the value is infinite.
pub fn infinite_json(fin: &Finiteness) -> Value {
    json!({"finite": false, "limA": bound(fin.lim_a), "limB": bound(fin.lim_b)})
}

pub fn smooth_fit_json(points: &[SmoothFitPoint]) -> Result<Value, serde_json::Error> {
    serde_json::to_value(points)
}

/// `x, f, f_bar, phi, psi, v, in_stopping_set` per node.
pub fn write_value_csv(path: &Path, fp: &FundamentalPair, sol: &ValueSolution) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["x", "f", "f_bar", "phi", "psi", "v", "in_stopping_set"])?;
    let n = fp.len();
    for i in 0..n {
        let mut v = sol.v.values[i];
        if i == 0 {
            v = sol.v_at_left.unwrap_or(v);
        }
        if i == n - 1 {
            v = sol.v_at_right.unwrap_or(v);
        }
        let num = |y: f64| format!("{}", round12(y));
        w.write_record([
            num(fp.grid.x(i)),
            num(sol.f[i]),
            num(sol.f_bar.values[i]),
            num(fp.phi.values[i]),
            num(fp.psi.values[i]),
            num(v),
            u8::from(sol.stopping[i]).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
struct SolutionFile {
    finite: bool,
    tau_star_region: Vec<(Bound, Bound)>,
}

/// τ* region recorded in a `solution.json`; `None` if the value was infinite.
pub fn read_tau_star_region(path: &Path) -> Result<Option<Vec<(f64, f64)>>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let v: Value = serde_json::from_str(&text)?;
    if v.get("finite") == Some(&Value::Bool(false)) {
        return Ok(None);
    }
    let s: SolutionFile = serde_json::from_value(v)?;
    Ok(s.finite.then(|| s.tau_star_region.into_iter().map(|(a, b)| (a.0, b.0)).collect()))
}
