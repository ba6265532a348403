//! Value function by the least concave majorant of `f̄/φ` in `s = ψ/φ`.

mod hull;
mod verify;

pub use hull::{majorant, Edge, Hull, HullError};
pub use verify::{
    smooth_fit_report, solve_with_running_reward, verify_solution, RunningRewardSolution, SmoothFitPoint,
    VerifyReport,
};

use serde::Serialize;
use thiserror::Error;

use crate::calculus::CalculusError;
use crate::expr::{one_sided_limits, Breakpoints, EvalError, Expr, Side};
use crate::grid::{Grid, GridFunction};
use crate::model::{BoundaryKind, DiffusionProblem};
use crate::ode::FundamentalPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("the value function is infinite (lim f/φ at α = {lim_a}, lim f/ψ at β = {lim_b})")]
    InfiniteValue { lim_a: f64, lim_b: f64 },
    #[error("degenerate hull: {0}")]
    HullDegeneracy(#[from] HullError),
    #[error("reward evaluation failed at x = {x}: {source}")]
    Eval { x: f64, source: EvalError },
    #[error("reward missing at absorbing endpoint {0}")]
    AbsorbingValueMissing(f64),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
}

/// Reward data on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Reward {
    pub expr: Option<Expr>,
    pub breakpoints: Option<Breakpoints>,
    /// `f` at the nodes.
    pub f: Vec<f64>,
    /// Upper semicontinuous envelope, with branch slopes.
    pub f_bar: GridFunction,
    /// `f(α+)`, `f(β−)` at absorbing ends.
    pub inner_left: Option<f64>,
    pub inner_right: Option<f64>,
}

impl Reward {
    /// Grid-only reward; `f = f̄` at the nodes.
    pub fn from_grid(f_bar: GridFunction, inner_left: Option<f64>, inner_right: Option<f64>) -> Reward {
        Reward {
            expr: None,
            breakpoints: None,
            f: f_bar.values.clone(),
            f_bar,
            inner_left,
            inner_right,
        }
    }

    pub fn scale(&self, c: f64) -> Reward {
        Reward {
            expr: self.expr.as_ref().map(|e| e.scaled(c)),
            breakpoints: self.breakpoints.clone(),
            f: self.f.iter().map(|v| c * v).collect(),
            f_bar: self.f_bar.scale(c),
            inner_left: self.inner_left.map(|v| c * v),
            inner_right: self.inner_right.map(|v| c * v),
        }
    }

    fn grid(&self) -> &Grid {
        &self.f_bar.grid
    }

    /// `f(x)` off the nodes, from the expression when there is one.
    pub fn f_at(&self, x: f64) -> f64 {
        match &self.expr {
            Some(e) => e.eval(x).unwrap_or(f64::NAN),
            None => self.f_bar.eval(x),
        }
    }

    /// One-sided derivative of `f` at `x`.
    pub fn derivative(&self, x: f64, side: Side) -> f64 {
        let g = self.grid();
        let i = g.cell(x);
        let step = 1e-3 * (g.x(i + 1) - g.x(i));
        match &self.expr {
            Some(e) => e.derivative(x, side, step).unwrap_or(f64::NAN),
            None => {
                let j = g.nearest(x);
                if (g.x(j) - x).abs() <= 1e-12 * (1.0 + x.abs()) {
                    match side {
                        Side::Left => self.f_bar.left_slope[j],
                        _ => self.f_bar.right_slope[j],
                    }
                } else {
                    let h = 1e-6 * (g.x(i + 1) - g.x(i));
                    (self.f_bar.eval(x + h) - self.f_bar.eval(x - h)) / (2.0 * h)
                }
            }
        }
    }

    /// Whether `f` is continuous and differentiable at node `j`.
    pub fn smooth_at(&self, j: usize) -> bool {
        let g = self.grid();
        if !g.is_breakpoint(j) {
            return true;
        }
        let x = g.x(j);
        let (l, r) = (self.f_bar.left_slope[j], self.f_bar.right_slope[j]);
        let slopes = (l - r).abs() <= 1e-6 * (1.0 + l.abs().max(r.abs()));
        match (&self.expr, &self.breakpoints) {
            (Some(e), Some(bp)) => match one_sided_limits(e, bp, x) {
                Ok(lim) => {
                    let tol = 1e-12 * (1.0 + lim.value.abs());
                    slopes && (lim.left - lim.value).abs() <= tol && (lim.right - lim.value).abs() <= tol
                }
                Err(_) => false,
            },
            _ => slopes,
        }
    }
}

/// `f̄` on the grid: `f` off breakpoints, the largest of value and one-sided
/// limits on them, the declared value at absorbing endpoints.
pub fn usc_envelope(prob: &DiffusionProblem, grid: std::sync::Arc<Grid>) -> Result<Reward, SolveError> {
    let n = grid.len();
    let e = &prob.reward;
    let bp = &prob.breakpoints;
    let mut f = vec![0.0; n];
    let mut fb = vec![0.0; n];
    let mut dl = vec![0.0; n];
    let mut dr = vec![0.0; n];
    let err = |x: f64| move |source| SolveError::Eval { x, source };
    for i in 0..n {
        let x = grid.x(i);
        let cell = if i + 1 < n { grid.x(i + 1) - x } else { x - grid.x(i - 1) };
        let cell = if i > 0 { cell.min(x - grid.x(i - 1)) } else { cell };
        let step = 1e-3 * cell;
        let absorbing = (i == 0 && grid.left_absorbing()) || (i == n - 1 && grid.right_absorbing());
        if absorbing {
            let declared = if i == 0 { prob.reward_at_left } else { prob.reward_at_right };
            let v = declared.ok_or(SolveError::AbsorbingValueMissing(x))?;
            f[i] = v;
            fb[i] = v;
            let side = if i == 0 { Side::Right } else { Side::Left };
            let d = e.derivative(x, side, step).map_err(err(x))?;
            dl[i] = d;
            dr[i] = d;
            continue;
        }
        let lim = one_sided_limits(e, bp, x).map_err(err(x))?;
        f[i] = lim.value;
        fb[i] = lim.envelope();
        dl[i] = e.derivative(x, Side::Left, step).map_err(err(x))?;
        dr[i] = e.derivative(x, Side::Right, step).map_err(err(x))?;
    }
    let inner = |x: f64, side: Side| e.limit(x, side).map_err(err(x));
    let inner_left = if grid.left_absorbing() {
        Some(inner(grid.x(0), Side::Right)?)
    } else {
        None
    };
    let inner_right = if grid.right_absorbing() {
        Some(inner(grid.x(n - 1), Side::Left)?)
    } else {
        None
    };
    Ok(Reward {
        expr: Some(e.clone()),
        breakpoints: Some(bp.clone()),
        f,
        f_bar: GridFunction::new(grid, fb, dl, dr),
        inner_left,
        inner_right,
    })
}

/// Limit of a sequence of ratios ordered towards the boundary: Aitken
/// extrapolation of the last three, `limsup` over the window when they
/// oscillate, `∞` when the increments do not shrink.
pub fn tail_limit(q: &[f64]) -> f64 {
    let k = q.len();
    if q.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    if k < 3 {
        return q.last().copied().unwrap_or(0.0).max(0.0);
    }
    let (q1, q2, q3) = (q[k - 3], q[k - 2], q[k - 1]);
    let (d1, d2) = (q2 - q1, q3 - q2);
    if d2 == 0.0 {
        return q3.max(0.0);
    }
    if d1 * d2 < 0.0 {
        return q.iter().fold(0.0f64, |m, v| m.max(*v));
    }
    if d2.abs() >= d1.abs() * (1.0 - 1e-9) {
        return if d2 > 0.0 && d2.abs() > 1e-9 * (1.0 + q3.abs()) {
            f64::INFINITY
        } else {
            q3.max(0.0)
        };
    }
    (q3 - d2 * d2 / (d2 - d1)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Finiteness {
    pub finite: bool,
    #[serde(rename = "limA", serialize_with = "crate::io::ser_extended")]
    pub lim_a: f64,
    #[serde(rename = "limB", serialize_with = "crate::io::ser_extended")]
    pub lim_b: f64,
}

/// `limsup f/φ` at α and `limsup f/ψ` at β, and whether `v < ∞`.
pub fn check_finiteness(fp: &FundamentalPair, rew: &Reward) -> Finiteness {
    let n = fp.len();
    let fb = &rew.f_bar.values;
    let window = (n / 20).max(3);
    let lim_a = if fp.grid.left_absorbing() {
        fb[0].max(rew.inner_left.unwrap_or(fb[0])) / fp.phi.values[0]
    } else {
        let q: Vec<f64> = (0..window).rev().map(|i| fb[i] / fp.phi.values[i]).collect();
        tail_limit(&q)
    };
    let lim_b = if fp.grid.right_absorbing() {
        fb[n - 1].max(rew.inner_right.unwrap_or(fb[n - 1])) / fp.psi.values[n - 1]
    } else {
        let q: Vec<f64> = (n - window..n).map(|i| fb[i] / fp.psi.values[i]).collect();
        tail_limit(&q)
    };
    let finite = lim_a.is_finite() && lim_b.is_finite() && fb.iter().all(|v| v.is_finite());
    Finiteness { finite, lim_a, lim_b }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaitingInterval {
    #[serde(serialize_with = "crate::io::ser_extended")]
    pub c: f64,
    #[serde(serialize_with = "crate::io::ser_extended")]
    pub d: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    /// Node indices of the waiting run.
    #[serde(skip)]
    pub nodes: (usize, usize),
}

/// Whether the first hitting time of the τ* region is known to be optimal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauStarDiagnostics {
    pub f_is_usc: bool,
    /// `limsup f/φ = 0` at an inaccessible α, `None` when absorbing.
    pub left_ratio_vanishes: Option<bool>,
    pub right_ratio_vanishes: Option<bool>,
    /// `f(α) = limsup f(α+)` at an absorbing α.
    pub left_endpoint_usc: Option<bool>,
    pub right_endpoint_usc: Option<bool>,
    pub optimal: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    /// `v` at the nodes; at an absorbing node the interior limit.
    pub v: GridFunction,
    pub lim_a: f64,
    pub lim_b: f64,
    /// `v(α)`, `v(β)` at absorbing ends.
    pub v_at_left: Option<f64>,
    pub v_at_right: Option<f64>,
    pub waiting: Vec<WaitingInterval>,
    /// Per node: `v = f̄`.
    pub stopping: Vec<bool>,
    pub stopping_intervals: Vec<(f64, f64)>,
    /// Closed set whose first hitting time is τ*.
    pub tau_star_region: Vec<(f64, f64)>,
    pub finite: bool,
    pub diagnostics: TauStarDiagnostics,
    pub hull: Hull,
    /// Node index of every hull point.
    pub points: Vec<usize>,
    pub f_bar: GridFunction,
    pub f: Vec<f64>,
}

fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if flags[i] {
            let j0 = i;
            while i + 1 < flags.len() && flags[i + 1] {
                i += 1;
            }
            out.push((j0, i));
        }
        i += 1;
    }
    out
}

pub fn solve(prob: &DiffusionProblem, fp: &FundamentalPair, rew: &Reward, tol_contact: f64) -> Result<ValueSolution, SolveError> {
    let fin = check_finiteness(fp, rew);
    if !fin.finite {
        return Err(SolveError::InfiniteValue {
            lim_a: fin.lim_a,
            lim_b: fin.lim_b,
        });
    }
    let (lim_a, lim_b) = (fin.lim_a, fin.lim_b);
    let g = &fp.grid;
    let n = g.len();
    let fb = &rew.f_bar.values;
    let (phi, psi) = (&fp.phi.values, &fp.psi.values);
    let lo = usize::from(g.left_absorbing());
    let hi = if g.right_absorbing() { n - 1 } else { n };
    let points: Vec<usize> = (lo..hi).collect();
    let s: Vec<f64> = points.iter().map(|&i| psi[i] / phi[i]).collect();
    let gv: Vec<f64> = points.iter().map(|&i| fb[i] / phi[i]).collect();
    let hull = majorant(&s, &gv, lim_a, lim_b)?;

    let mut vertex = vec![false; n];
    for k in hull.vertices.iter().flatten() {
        vertex[points[*k]] = true;
    }
    let mut v = vec![0.0; n];
    let mut edge_of = vec![0usize; n];
    for (k, &i) in points.iter().enumerate() {
        let e = hull.edge_index(s[k]);
        edge_of[i] = e;
        let ed = &hull.edges[e];
        v[i] = if vertex[i] { fb[i] } else { ed.a * phi[i] + ed.b * psi[i] };
    }
    if lo == 1 {
        edge_of[0] = 0;
        v[0] = lim_a * phi[0];
    }
    if hi == n - 1 {
        let last = hull.edges.len() - 1;
        edge_of[n - 1] = last;
        v[n - 1] = hull.edges[last].a * phi[n - 1] + lim_b * psi[n - 1];
    }

    let mut stopping: Vec<bool> = (0..n).map(|i| v[i] - fb[i] <= tol_contact * (1.0 + v[i].abs())).collect();
    if lo == 1 {
        stopping[0] = true;
    }
    if hi == n - 1 {
        stopping[n - 1] = true;
    }

    let fine = fp.fine();
    let harmonic = |e: usize, i: usize| {
        let ed = &hull.edges[e];
        ed.a * fine.dphi[2 * i] + ed.b * fine.dpsi[2 * i]
    };
    let mut dl = vec![0.0; n];
    let mut dr = vec![0.0; n];
    for i in 0..n {
        if !stopping[i] {
            dl[i] = harmonic(edge_of[i], i);
            dr[i] = dl[i];
            continue;
        }
        dl[i] = if i > 0 && !stopping[i - 1] {
            harmonic(edge_of[i - 1], i)
        } else {
            rew.f_bar.left_slope[i]
        };
        dr[i] = if i + 1 < n && !stopping[i + 1] {
            harmonic(edge_of[i + 1], i)
        } else {
            rew.f_bar.right_slope[i]
        };
    }
    if lo == 1 {
        // interior limit at α: the first piece continues to the endpoint
        dl[0] = dr[0];
    }
    if hi == n - 1 {
        dr[n - 1] = dl[n - 1];
    }
    let vf = GridFunction::new(g.clone(), v.clone(), dl, dr);

    let mut waiting = Vec::new();
    for (i0, i1) in runs(&stopping.iter().map(|b| !b).collect::<Vec<_>>()) {
        let ed = &hull.edges[edge_of[i0]];
        waiting.push(WaitingInterval {
            c: if i0 == 0 { prob.alpha } else { g.x(i0 - 1) },
            d: if i1 == n - 1 { prob.beta } else { g.x(i1 + 1) },
            a: ed.a,
            b: ed.b,
            nodes: (i0, i1),
        });
    }
    let closed = |(i0, i1): (usize, usize)| {
        (
            if i0 == 0 && !g.left_absorbing() { prob.alpha } else { g.x(i0) },
            if i1 == n - 1 && !g.right_absorbing() { prob.beta } else { g.x(i1) },
        )
    };
    let stop_runs = runs(&stopping);
    let stopping_intervals = stop_runs.iter().map(|r| closed(*r)).collect();
    let on_f = |i: usize| {
        if (i == 0 && lo == 1) || (i == n - 1 && hi == n - 1) {
            return true;
        }
        v[i] - rew.f[i] <= tol_contact * (1.0 + v[i].abs())
    };
    let tau_star_region = stop_runs
        .iter()
        .filter(|(i0, i1)| (*i0..=*i1).any(on_f))
        .map(|r| closed(*r))
        .collect();

    let diagnostics = diagnose(prob, fp, rew, lim_a, lim_b);
    Ok(ValueSolution {
        v: vf,
        lim_a,
        lim_b,
        v_at_left: (lo == 1).then(|| rew.f_bar.values[0]),
        v_at_right: (hi == n - 1).then(|| rew.f_bar.values[n - 1]),
        waiting,
        stopping,
        stopping_intervals,
        tau_star_region,
        finite: true,
        diagnostics,
        hull,
        points,
        f_bar: rew.f_bar.clone(),
        f: rew.f.clone(),
    })
}

fn diagnose(prob: &DiffusionProblem, fp: &FundamentalPair, rew: &Reward, lim_a: f64, lim_b: f64) -> TauStarDiagnostics {
    let n = fp.len();
    let scale = 1.0 + rew.f_bar.sup_norm();
    let f_is_usc = (0..n).all(|i| (rew.f_bar.values[i] - rew.f[i]).abs() <= 1e-12 * (1.0 + rew.f[i].abs()));
    let mut warnings = Vec::new();
    let vanish = |lim: f64, edge: f64| lim * edge <= 1e-9 * scale;
    let left_ratio_vanishes = (prob.left == BoundaryKind::Inaccessible).then(|| vanish(lim_a, fp.phi.values[0]));
    let right_ratio_vanishes = (prob.right == BoundaryKind::Inaccessible).then(|| vanish(lim_b, fp.psi.values[n - 1]));
    let usc_end = |at: f64, inner: Option<f64>| inner.is_none_or(|l| (at - l).abs() <= 1e-12 * (1.0 + l.abs()) || at > l);
    let left_endpoint_usc = fp.grid.left_absorbing().then(|| usc_end(rew.f_bar.values[0], rew.inner_left));
    let right_endpoint_usc = fp.grid.right_absorbing().then(|| usc_end(rew.f_bar.values[n - 1], rew.inner_right));
    if !f_is_usc {
        warnings.push("f is not upper semicontinuous; τ* may not be optimal".to_string());
    }
    if left_ratio_vanishes == Some(false) {
        warnings.push("limsup f/φ at the left end is positive; τ* may not be optimal".to_string());
    }
    if right_ratio_vanishes == Some(false) {
        warnings.push("limsup f/ψ at the right end is positive; τ* may not be optimal".to_string());
    }
    if left_endpoint_usc == Some(false) {
        warnings.push("f(α) is below its limit from the interior; τ* may not be optimal".to_string());
    }
    if right_endpoint_usc == Some(false) {
        warnings.push("f(β) is below its limit from the interior; τ* may not be optimal".to_string());
    }
    TauStarDiagnostics {
        f_is_usc,
        left_ratio_vanishes,
        right_ratio_vanishes,
        left_endpoint_usc,
        right_endpoint_usc,
        optimal: warnings.is_empty(),
        warnings,
    }
}

/// Point value of the linear program at `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointValue {
    pub v: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub contacts: Vec<f64>,
}

impl ValueSolution {
    /// `min Aφ(x) + Bψ(x)` over majorants of `f̄` on the nodes, from the
    /// supporting line of the hull at `s(x)`.
    pub fn value_at(&self, fp: &FundamentalPair, x: f64) -> PointValue {
        let g = &fp.grid;
        let n = g.len();
        if g.left_absorbing() && x <= g.x(0) {
            return PointValue {
                v: self.v_at_left.unwrap_or(self.v.values[0]),
                a: self.lim_a,
                b: self.hull.edges[0].b,
                contacts: vec![g.x(0)],
            };
        }
        if g.right_absorbing() && x >= g.x(n - 1) {
            let e = self.hull.edges.last().unwrap();
            return PointValue {
                v: self.v_at_right.unwrap_or(self.v.values[n - 1]),
                a: e.a,
                b: e.b,
                contacts: vec![g.x(n - 1)],
            };
        }
        let (ph, ps) = (fp.phi_at(x).0, fp.psi_at(x).0);
        let sx = ps / ph;
        let k = self.hull.edge_index(sx);
        let mut ed = self.hull.edges[k];
        let j = g.nearest(x);
        let at_vertex = (g.x(j) - x).abs() <= 1e-12 * (1.0 + x.abs())
            && k > 0
            && self.hull.vertices[k].is_some_and(|p| self.points[p] == j);
        if at_vertex {
            // tangent at a vertex: average the two adjacent slopes
            let b = 0.5 * (self.hull.edges[k - 1].b + ed.b);
            let gj = self.f_bar.values[j] / fp.phi.values[j];
            ed.b = b;
            ed.a = gj - b * fp.s(j);
        }
        let v = if at_vertex { self.f_bar.values[j] } else { ed.a * ph + ed.b * ps };
        let contacts = self
            .points
            .iter()
            .filter(|&&i| {
                let line = ed.a * fp.phi.values[i] + ed.b * fp.psi.values[i];
                (self.f_bar.values[i] - line).abs() <= 1e-9 * (1.0 + line.abs())
            })
            .map(|&i| g.x(i))
            .collect();
        PointValue {
            v,
            a: ed.a,
            b: ed.b,
            contacts,
        }
    }
}

/// `value_at` as a free function; solves the whole problem first.
pub fn value_at(
    prob: &DiffusionProblem,
    fp: &FundamentalPair,
    rew: &Reward,
    x: f64,
    tol_contact: f64,
) -> Result<PointValue, SolveError> {
    Ok(solve(prob, fp, rew, tol_contact)?.value_at(fp, x))
}

#[cfg(test)]
pub(crate) mod tests;
