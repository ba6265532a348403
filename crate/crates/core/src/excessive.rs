//! Analytic tests for r(·)-excessivity.
//!
//! Two independent decisions: the sign of the measure `ℒF`, and concavity of
//! `F/φ` as a function of `s = ψ/φ`. They are related by
//! `ℒF(dx) = (Cσ²p'/(2φ)) d[D_s(F/φ)]`, so the concavity test weighs every
//! increase of the chord slope by the same factor and the two masses are
//! comparable against one tolerance.

use serde::Serialize;
use thiserror::Error;

use crate::calculus::apply_l;
use crate::grid::GridFunction;
use crate::model::{BoundaryKind, DiffusionProblem};
use crate::ode::FundamentalPair;

/// Default relative tolerance on the positive mass of `ℒF`.
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExcessiveError {
    #[error("candidate is negative at x = {x} ({value})")]
    NegativeCandidate { x: f64, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub location: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcessivityReport {
    pub dc_ok: bool,
    pub measure_ok: bool,
    /// Positive mass of `ℒF`.
    pub positive_mass: f64,
    pub worst_violation: Violation,
    pub boundary_ok: bool,
    pub concave_test_ok: bool,
    pub verdict: bool,
    /// Set when the two analytic tests disagree.
    pub disagreement: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcavityReport {
    pub increasing_ok: bool,
    /// Weighted positive variation of the chord slopes.
    pub positive_mass: f64,
    /// Largest single weighted increase.
    pub worst_drop: f64,
    pub location: f64,
}

/// Endpoint values `F(α)`, `F(β)` at absorbing ends, when they differ from
/// the interior limit stored on the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EndpointValues {
    pub left: Option<f64>,
    pub right: Option<f64>,
}

fn scale(f: &GridFunction) -> f64 {
    f.values.iter().fold(0.0f64, |m, v| m.max(*v))
}

pub fn check_excessive(
    prob: &DiffusionProblem,
    fp: &FundamentalPair,
    f: &GridFunction,
    at_absorbing: EndpointValues,
) -> Result<ExcessivityReport, ExcessiveError> {
    check_excessive_tol(prob, fp, f, at_absorbing, DEFAULT_TOL)
}

pub fn check_excessive_tol(
    prob: &DiffusionProblem,
    fp: &FundamentalPair,
    f: &GridFunction,
    at_absorbing: EndpointValues,
    tol: f64,
) -> Result<ExcessivityReport, ExcessiveError> {
    let norm = scale(f);
    for (i, v) in f.values.iter().enumerate() {
        if *v < -1e-12 * norm.max(1e-300) {
            return Err(ExcessiveError::NegativeCandidate {
                x: f.grid.x(i),
                value: *v,
            });
        }
    }
    let dc_ok = f
        .values
        .iter()
        .chain(&f.left_slope)
        .chain(&f.right_slope)
        .all(|v| v.is_finite());
    let mu = apply_l(fp, f);
    let positive_mass = mu.positive_mass();
    let measure_ok = positive_mass <= tol * norm;
    let (location, magnitude) = mu.worst_positive();

    let n = f.len();
    let mut boundary_ok = true;
    if prob.left == BoundaryKind::Absorbing {
        if let Some(fa) = at_absorbing.left {
            boundary_ok &= fa <= f.values[0] + tol * norm;
        }
    }
    if prob.right == BoundaryKind::Absorbing {
        if let Some(fb) = at_absorbing.right {
            boundary_ok &= fb <= f.values[n - 1] + tol * norm;
        }
    }

    let conc = concavity_with_tol(fp, f, tol);
    let verdict = dc_ok && measure_ok && boundary_ok;
    Ok(ExcessivityReport {
        dc_ok,
        measure_ok,
        positive_mass,
        worst_violation: Violation { location, magnitude },
        boundary_ok,
        concave_test_ok: conc.increasing_ok,
        verdict,
        disagreement: conc.increasing_ok != measure_ok,
    })
}

/// Chord slopes of `F/φ` against `s = ψ/φ`; their increases, weighted by
/// `Cσ²p'/(2φ)` at the node between, must have small total mass.
pub fn transformed_concavity_check(fp: &FundamentalPair, f: &GridFunction) -> ConcavityReport {
    concavity_with_tol(fp, f, DEFAULT_TOL)
}

pub fn concavity_with_tol(fp: &FundamentalPair, f: &GridFunction, tol: f64) -> ConcavityReport {
    let fine = fp.fine();
    let n = f.len();
    let g: Vec<f64> = (0..n).map(|i| f.values[i] / fp.phi.values[i]).collect();
    let s: Vec<f64> = (0..n).map(|i| fp.s(i)).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (g[i + 1] - g[i]) / (s[i + 1] - s[i])).collect();
    let mut mass = 0.0;
    let mut worst = (f64::NAN, 0.0);
    for j in 1..n - 1 {
        let k = 2 * j;
        let w = fp.c * fine.sigma2[k] * fine.dp[k] / (2.0 * fine.phi[k]);
        let rise = w * (slope[j] - slope[j - 1]);
        if rise > 0.0 {
            mass += rise;
            if rise > worst.1 {
                worst = (f.grid.x(j), rise);
            }
        }
    }
    ConcavityReport {
        increasing_ok: mass <= tol * scale(f),
        positive_mass: mass,
        worst_drop: worst.1,
        location: worst.0,
    }
}
