//! Scale, speed and the fundamental solutions of `½σ²g'' + bg' − rg = 0`.
//!
//! ψ is obtained by integrating the Riccati equation for its logarithmic
//! derivative `u = ψ'/ψ`,
//!
//! ```text
//! u' = 2r/σ² − (2b/σ²) u − u²,
//! ```
//!
//! forward from the left end, where the increasing solution is the
//! attracting one; φ is the same equation integrated backward from the right.
//! Amplitudes are carried in log space.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{hermite, Grid, GridFunction, GridLayout, Spacing};
use crate::model::{BoundaryKind, DiffusionProblem, End, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("exponent overflow near x = {x}; shrink the truncation")]
    OverflowInExponent { x: f64 },
    #[error("sweep did not converge: {0}")]
    NonConvergence(String),
    #[error("fundamental solution lost monotonicity near x = {x}")]
    MonotonicityViolation { x: f64 },
    #[error("automatic truncation failed: {0}")]
    TruncationFailure(String),
    #[error("x = {x} is outside the grid span [{lo}, {hi}]")]
    OutOfSpan { x: f64, lo: f64, hi: f64 },
    #[error("degenerate bracket [{lo}, {hi}]")]
    DegenerateBracket { lo: f64, hi: f64 },
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the state interval is cut down to a finite span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncPolicy {
    /// Extend until ψ/φ at the left end and φ/ψ at the right end fall
    /// below `tail_tol` (relative to their value at the reference point).
    Auto { tail_tol: f64 },
    Explicit { lo: f64, hi: f64 },
}

/// Relative step bound `h·(|Q| + 2|u| + √P)` for the Riccati RK4 substeps.
const STEP_BOUND: f64 = 0.01;
/// Damping accumulated across the start-up pad of an inaccessible end.
const PAD_DAMPING: f64 = 20.0;

/// Default node placement: logarithmic toward a finite inaccessible left end.
pub fn default_spacing(prob: &DiffusionProblem) -> Spacing {
    if prob.alpha.is_finite() && prob.left == BoundaryKind::Inaccessible {
        Spacing::Log
    } else {
        Spacing::Uniform
    }
}

fn layout(prob: &DiffusionProblem, lo: f64, hi: f64, n: usize, spacing: Spacing) -> GridLayout {
    GridLayout {
        lo,
        hi,
        n_nodes: n,
        spacing,
        log_origin: if prob.alpha.is_finite() { prob.alpha } else { 0.0 },
        breakpoints: prob.breakpoints.points().to_vec(),
        left_absorbing: prob.left == BoundaryKind::Absorbing && lo == prob.alpha,
        right_absorbing: prob.right == BoundaryKind::Absorbing && hi == prob.beta,
    }
}

/// Builds the working grid. Absorbing endpoints are always part of it.
pub fn build_grid(
    prob: &DiffusionProblem,
    n_nodes: usize,
    policy: TruncPolicy,
    spacing: Option<Spacing>,
) -> Result<Grid, OdeError> {
    if n_nodes < 64 {
        return Err(OdeError::Grid(format!("n_nodes must be at least 64, got {n_nodes}")));
    }
    let spacing = spacing.unwrap_or_else(|| default_spacing(prob));
    let (lo, hi) = match policy {
        TruncPolicy::Explicit { lo, hi } => {
            let lo = if prob.left == BoundaryKind::Absorbing { prob.alpha } else { lo };
            let hi = if prob.right == BoundaryKind::Absorbing { prob.beta } else { hi };
            if !(lo >= prob.alpha && hi <= prob.beta && lo < hi) {
                return Err(OdeError::Grid(format!(
                    "truncation [{lo}, {hi}] must lie inside [{}, {}]",
                    prob.alpha, prob.beta
                )));
            }
            if (lo == prob.alpha && prob.left == BoundaryKind::Inaccessible)
                || (hi == prob.beta && prob.right == BoundaryKind::Inaccessible)
            {
                return Err(OdeError::Grid("an inaccessible endpoint cannot be a grid node".into()));
            }
            (lo, hi)
        }
        TruncPolicy::Auto { tail_tol } => auto_span(prob, spacing, tail_tol)?,
    };
    Grid::layout(&layout(prob, lo, hi, n_nodes, spacing)).map_err(OdeError::Grid)
}

fn auto_span(prob: &DiffusionProblem, spacing: Spacing, tail_tol: f64) -> Result<(f64, f64), OdeError> {
    let (a, b) = (prob.alpha, prob.beta);
    let center = match (a.is_finite(), b.is_finite()) {
        (true, true) => 0.5 * (a + b),
        (true, false) => a + a.abs().max(1.0),
        (false, true) => b - b.abs().max(1.0),
        (false, false) => 0.0,
    };
    let start = |end: f64, absorbing: bool, dir: f64| {
        if absorbing {
            end
        } else if end.is_finite() {
            end + 0.5 * (center - end)
        } else {
            center + dir
        }
    };
    let left_abs = prob.left == BoundaryKind::Absorbing;
    let right_abs = prob.right == BoundaryKind::Absorbing;
    let mut lo = start(a, left_abs, -1.0);
    let mut hi = start(b, right_abs, 1.0);
    for _ in 0..60 {
        let grid = Arc::new(Grid::layout(&layout(prob, lo, hi, 257, spacing)).map_err(OdeError::Grid)?);
        let fp = fundamental_pair(prob, grid.clone(), Some(center))?;
        let n = grid.len();
        let left_ok = left_abs || fp.psi.values[0] / fp.phi.values[0] < tail_tol;
        let right_ok = right_abs || fp.phi.values[n - 1] / fp.psi.values[n - 1] < tail_tol;
        if left_ok && right_ok {
            return Ok((lo, hi));
        }
        let grow = |x: f64, end: f64| {
            if end.is_finite() {
                end + (x - end) / 8.0
            } else {
                center + 2.0 * (x - center)
            }
        };
        if !left_ok {
            lo = grow(lo, a);
        }
        if !right_ok {
            hi = grow(hi, b);
        }
    }
    Err(OdeError::TruncationFailure(format!(
        "tails above {tail_tol} after 60 extensions, span [{lo}, {hi}]"
    )))
}

/// Sampled scale, speed and fundamental solutions on a grid.
///
/// Internally every quantity is also kept at cell midpoints ("fine points"),
/// which the quadratures of the calculus module use.
#[derive(Debug, Clone)]
pub struct FundamentalPair {
    pub grid: Arc<Grid>,
    pub p: GridFunction,
    pub m_density: GridFunction,
    pub phi: GridFunction,
    pub psi: GridFunction,
    /// Wronskian constant: `φψ' − φ'ψ = C p'`.
    pub c: f64,
    pub ref_point: f64,
    pub ref_index: usize,
    fine: Fine,
}

/// Values at nodes and midpoints; index `2i` is node `i`.
#[derive(Debug, Clone)]
pub(crate) struct Fine {
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub r: Vec<f64>,
    pub dp: Vec<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub psi: Vec<f64>,
    pub dpsi: Vec<f64>,
    log_phi: Vec<f64>,
    log_psi: Vec<f64>,
}

struct Coef<'a> {
    prob: &'a DiffusionProblem,
}

impl Coef<'_> {
    /// `(P, Q) = (2r/σ², 2b/σ²)`.
    fn pq(&self, x: f64) -> Result<(f64, f64), OdeError> {
        let c = self.prob.coefficients(x)?;
        Ok((2.0 * c.r / c.sigma2, 2.0 * c.b / c.sigma2))
    }
}

fn riccati_rhs(p: f64, q: f64, u: f64) -> f64 {
    p - q * u - u * u
}

/// Integrates `(u, L)` from `x0` to `x1` (either direction); returns the end
/// state `u1` and the increment of `L = ∫u`.
fn riccati_step(c: &Coef, x0: f64, x1: f64, u0: f64) -> Result<(f64, f64), OdeError> {
    let (p0, q0) = c.pq(x0)?;
    let (p1, q1) = c.pq(x1)?;
    let rate = (q0.abs().max(q1.abs()) + 2.0 * u0.abs() + p0.max(p1).sqrt()).max(1e-300);
    let span = x1 - x0;
    let m = ((span.abs() * rate / STEP_BOUND).ceil() as usize).max(1);
    if m > 50_000_000 {
        return Err(OdeError::NonConvergence(format!("step budget exceeded near x = {x0}")));
    }
    let h = span / m as f64;
    let (mut u, mut l) = (u0, 0.0);
    let mut x = x0;
    let (mut pa, mut qa) = (p0, q0);
    for k in 0..m {
        let xm = x + 0.5 * h;
        let xe = if k + 1 == m { x1 } else { x + h };
        let (pm, qm) = c.pq(xm)?;
        let (pe, qe) = if k + 1 == m { (p1, q1) } else { c.pq(xe)? };
        let k1 = riccati_rhs(pa, qa, u);
        let u2 = u + 0.5 * h * k1;
        let k2 = riccati_rhs(pm, qm, u2);
        let u3 = u + 0.5 * h * k2;
        let k3 = riccati_rhs(pm, qm, u3);
        let u4 = u + h * k3;
        let k4 = riccati_rhs(pe, qe, u4);
        l += h / 6.0 * (u + 2.0 * u2 + 2.0 * u3 + u4);
        u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !u.is_finite() {
            return Err(OdeError::NonConvergence(format!("Riccati blow-up near x = {x}")));
        }
        x = xe;
        pa = pe;
        qa = qe;
    }
    Ok((u, l))
}

/// Linear ODE `y'' = P y − Q y'` by RK4; returns `(y, y')` at `x1`.
fn linear_step(c: &Coef, x0: f64, x1: f64, y0: f64, d0: f64) -> Result<(f64, f64), OdeError> {
    let (p0, q0) = c.pq(x0)?;
    let rate = q0.abs() + p0.sqrt() + 1e-300;
    let span = x1 - x0;
    let m = ((span.abs() * rate / STEP_BOUND).ceil() as usize).max(4);
    let h = span / m as f64;
    let (mut y, mut d) = (y0, d0);
    let mut x = x0;
    let f = |x: f64, y: f64, d: f64| -> Result<(f64, f64), OdeError> {
        let (p, q) = c.pq(x)?;
        Ok((d, p * y - q * d))
    };
    for _ in 0..m {
        let (a1, b1) = f(x, y, d)?;
        let (a2, b2) = f(x + 0.5 * h, y + 0.5 * h * a1, d + 0.5 * h * b1)?;
        let (a3, b3) = f(x + 0.5 * h, y + 0.5 * h * a2, d + 0.5 * h * b2)?;
        let (a4, b4) = f(x + h, y + h * a3, d + h * b3)?;
        y += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        d += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        x += h;
    }
    Ok((y, d))
}

/// One directional sweep. Returns per fine point `(u, L)` and, for an
/// absorbing start, the unnormalized slope there.
fn sweep(
    c: &Coef,
    xf: &[f64],
    forward: bool,
    start_kind: BoundaryKind,
    outer_limit: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64), OdeError> {
    let nf = xf.len();
    let order: Vec<usize> = if forward { (0..nf).collect() } else { (0..nf).rev().collect() };
    let dir = if forward { 1.0 } else { -1.0 };
    let mut u = vec![0.0; nf];
    let mut l = vec![0.0; nf];
    let mut start_slope = f64::NAN;
    let first;
    match start_kind {
        BoundaryKind::Inaccessible => {
            // start-up pad beyond the truncation, begun at the local
            // equilibrium of the Riccati equation
            let x_end = xf[order[0]];
            let mut xs = x_end;
            let mut pad = vec![x_end];
            let mut damping = 0.0;
            let mut steps = 0;
            while damping < PAD_DAMPING && steps < 10_000 {
                let (p, q) = c.pq(xs)?;
                let gap = (q * q + 4.0 * p).sqrt();
                let mut step = 1.0 / gap;
                if outer_limit.is_finite() {
                    step = step.min(0.5 * (xs - outer_limit).abs());
                }
                let next = xs - dir * step;
                if c.pq(next).is_err() {
                    break;
                }
                damping += gap * step;
                xs = next;
                pad.push(xs);
                steps += 1;
            }
            let (p, q) = c.pq(xs)?;
            let root = (q * q + 4.0 * p).sqrt();
            let mut u_end = 0.5 * (-q + dir * root);
            for w in pad.windows(2).rev() {
                u_end = riccati_step(c, w[1], w[0], u_end)?.0;
            }
            u[order[0]] = u_end;
            l[order[0]] = 0.0;
            first = 0;
        }
        BoundaryKind::Absorbing => {
            // the solution vanishing at the endpoint, started with unit slope
            // pointing into the interval
            let (i0, i1, i2) = (order[0], order[1], order[2]);
            start_slope = dir;
            u[i0] = dir * f64::INFINITY;
            l[i0] = f64::NEG_INFINITY;
            let (y1, d1) = linear_step(c, xf[i0], xf[i1], 0.0, dir)?;
            let (y2, d2) = linear_step(c, xf[i1], xf[i2], y1, d1)?;
            if !(y1 > 0.0 && y2 > 0.0) {
                return Err(OdeError::MonotonicityViolation { x: xf[i1] });
            }
            u[i1] = d1 / y1;
            l[i1] = y1.ln();
            u[i2] = d2 / y2;
            l[i2] = y2.ln();
            first = 2;
        }
    }
    for k in first..nf - 1 {
        let (a, b) = (order[k], order[k + 1]);
        let (u1, dl) = riccati_step(c, xf[a], xf[b], u[a])?;
        u[b] = u1;
        l[b] = l[a] + dl;
    }
    Ok((u, l, start_slope))
}

/// Computes φ, ψ, p, m and C on `grid`, normalized at the node nearest to
/// `ref_point` (default: the middle node).
pub fn fundamental_pair(
    prob: &DiffusionProblem,
    grid: Arc<Grid>,
    ref_point: Option<f64>,
) -> Result<FundamentalPair, OdeError> {
    let n = grid.len();
    let nodes = grid.nodes();
    let nf = 2 * n - 1;
    let mut xf = Vec::with_capacity(nf);
    for i in 0..n {
        xf.push(nodes[i]);
        if i + 1 < n {
            xf.push(0.5 * (nodes[i] + nodes[i + 1]));
        }
    }
    // coefficients; σ at an absorbing endpoint node is taken as given
    let mut b = Vec::with_capacity(nf);
    let mut s2 = Vec::with_capacity(nf);
    let mut r = Vec::with_capacity(nf);
    for &x in &xf {
        let c = prob.coefficients(x)?;
        if !(c.sigma2 > 0.0) {
            return Err(ModelError::NonPositiveSigma(x).into());
        }
        b.push(c.b);
        s2.push(c.sigma2);
        r.push(c.r);
    }
    let ref_index = match ref_point {
        Some(x) if grid.contains(x) => grid.nearest(x),
        _ => n / 2,
    };
    let kc = 2 * ref_index;

    // scale density via Simpson per cell of q = b/σ²
    let q: Vec<f64> = b.iter().zip(&s2).map(|(b, s)| b / s).collect();
    let mut log_dp = vec![0.0; nf];
    for i in ref_index..n - 1 {
        let (a, m, e) = (2 * i, 2 * i + 1, 2 * i + 2);
        let h = xf[e] - xf[a];
        log_dp[m] = log_dp[a] - 2.0 * h / 24.0 * (5.0 * q[a] + 8.0 * q[m] - q[e]);
        log_dp[e] = log_dp[a] - 2.0 * h / 6.0 * (q[a] + 4.0 * q[m] + q[e]);
    }
    for i in (0..ref_index).rev() {
        let (a, m, e) = (2 * i, 2 * i + 1, 2 * i + 2);
        let h = xf[e] - xf[a];
        log_dp[a] = log_dp[e] + 2.0 * h / 6.0 * (q[a] + 4.0 * q[m] + q[e]);
        log_dp[m] = log_dp[e] + 2.0 * h / 24.0 * (5.0 * q[e] + 8.0 * q[m] - q[a]);
    }
    if let Some(k) = log_dp.iter().position(|v| v.abs() > 700.0) {
        return Err(OdeError::OverflowInExponent { x: xf[k] });
    }
    let dp: Vec<f64> = log_dp.iter().map(|v| v.exp()).collect();
    let mut pvals = vec![0.0; n];
    for i in ref_index..n - 1 {
        let h = nodes[i + 1] - nodes[i];
        pvals[i + 1] = pvals[i] + h / 6.0 * (dp[2 * i] + 4.0 * dp[2 * i + 1] + dp[2 * i + 2]);
    }
    for i in (0..ref_index).rev() {
        let h = nodes[i + 1] - nodes[i];
        pvals[i] = pvals[i + 1] - h / 6.0 * (dp[2 * i] + 4.0 * dp[2 * i + 1] + dp[2 * i + 2]);
    }

    let coef = Coef { prob };
    let (u, lpsi, psi_start) = sweep(&coef, &xf, true, prob.left_kind(&grid), prob.alpha)?;
    let (w, lphi, phi_start) = sweep(&coef, &xf, false, prob.right_kind(&grid), prob.beta)?;

    let (lpc, lfc) = (lpsi[kc], lphi[kc]);
    let mut psi = vec![0.0; nf];
    let mut dpsi = vec![0.0; nf];
    let mut phi = vec![0.0; nf];
    let mut dphi = vec![0.0; nf];
    for k in 0..nf {
        let (a, e) = (lpsi[k] - lpc, lphi[k] - lfc);
        if a > 700.0 || e > 700.0 || (a.is_finite() && a < -700.0) || (e.is_finite() && e < -700.0) {
            return Err(OdeError::OverflowInExponent { x: xf[k] });
        }
        psi[k] = a.exp();
        phi[k] = e.exp();
        dpsi[k] = if a.is_finite() { u[k] * psi[k] } else { psi_start * (-lpc).exp() };
        dphi[k] = if e.is_finite() { w[k] * phi[k] } else { phi_start * (-lfc).exp() };
    }
    for k in 0..nf {
        let interior_psi = lpsi[k].is_finite();
        let interior_phi = lphi[k].is_finite();
        if (interior_psi && !(u[k] > 0.0)) || (interior_phi && !(w[k] < 0.0)) {
            return Err(OdeError::MonotonicityViolation { x: xf[k] });
        }
    }
    let c = u[kc] - w[kc];

    let node = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[2 * i]).collect() };
    let phi_f = GridFunction::new(grid.clone(), node(&phi), node(&dphi), node(&dphi));
    let psi_f = GridFunction::new(grid.clone(), node(&psi), node(&dpsi), node(&dpsi));
    let p_f = GridFunction::new(grid.clone(), pvals, node(&dp), node(&dp));
    let m_vals: Vec<f64> = (0..n).map(|i| 2.0 / (s2[2 * i] * dp[2 * i])).collect();
    let m_f = GridFunction::from_values(grid.clone(), m_vals, &[]);
    Ok(FundamentalPair {
        ref_point: grid.x(ref_index),
        grid,
        p: p_f,
        m_density: m_f,
        phi: phi_f,
        psi: psi_f,
        c,
        ref_index,
        fine: Fine {
            x: xf,
            b,
            sigma2: s2,
            r,
            dp,
            phi,
            dphi,
            psi,
            dpsi,
            log_phi: lphi.iter().map(|v| v - lfc).collect(),
            log_psi: lpsi.iter().map(|v| v - lpc).collect(),
        },
    })
}

impl DiffusionProblem {
    fn left_kind(&self, g: &Grid) -> BoundaryKind {
        if g.left_absorbing() {
            BoundaryKind::Absorbing
        } else {
            BoundaryKind::Inaccessible
        }
    }

    fn right_kind(&self, g: &Grid) -> BoundaryKind {
        if g.right_absorbing() {
            BoundaryKind::Absorbing
        } else {
            BoundaryKind::Inaccessible
        }
    }
}

impl FundamentalPair {
    pub(crate) fn fine(&self) -> &Fine {
        &self.fine
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    fn check_span(&self, x: f64) -> Result<(), OdeError> {
        if self.grid.contains(x) {
            Ok(())
        } else {
            Err(OdeError::OutOfSpan {
                x,
                lo: self.grid.left_trunc(),
                hi: self.grid.right_trunc(),
            })
        }
    }

    /// Fine interval `[k, k+1]` containing `x`.
    fn fine_cell(&self, x: f64) -> usize {
        let i = self.grid.cell(x);
        let mid = self.fine.x[2 * i + 1];
        if x < mid {
            2 * i
        } else {
            2 * i + 1
        }
    }

    fn interp(&self, x: f64, logs: &[f64], vals: &[f64], slopes: &[f64]) -> (f64, f64) {
        let k = self.fine_cell(x);
        let (x0, x1) = (self.fine.x[k], self.fine.x[k + 1]);
        if logs[k].is_finite() && logs[k + 1].is_finite() {
            // Hermite on the logarithm keeps exponential profiles accurate
            let d0 = slopes[k] / vals[k];
            let d1 = slopes[k + 1] / vals[k + 1];
            let (lv, ld) = hermite(x0, x1, logs[k], logs[k + 1], d0, d1, x);
            let v = lv.exp();
            (v, ld * v)
        } else {
            hermite(x0, x1, vals[k], vals[k + 1], slopes[k], slopes[k + 1], x)
        }
    }

    /// `(φ(x), φ'(x))` anywhere in the span.
    pub fn phi_at(&self, x: f64) -> (f64, f64) {
        self.interp(x, &self.fine.log_phi, &self.fine.phi, &self.fine.dphi)
    }

    pub fn psi_at(&self, x: f64) -> (f64, f64) {
        self.interp(x, &self.fine.log_psi, &self.fine.psi, &self.fine.dpsi)
    }

    /// Scale density `p'(x)`, Hermite on `ln p'` whose slope is `−2b/σ²`.
    pub fn dp_at(&self, x: f64) -> f64 {
        let f = &self.fine;
        let k = self.fine_cell(x);
        let q = |j: usize| -2.0 * f.b[j] / f.sigma2[j];
        let (lv, _) = hermite(f.x[k], f.x[k + 1], f.dp[k].ln(), f.dp[k + 1].ln(), q(k), q(k + 1), x);
        lv.exp()
    }

    /// `s = ψ/φ` at node `i`.
    pub fn s(&self, i: usize) -> f64 {
        self.psi.values[i] / self.phi.values[i]
    }

    /// Largest relative deviation of `φψ' − φ'ψ` from `C p'` over the nodes.
    pub fn wronskian_error(&self) -> f64 {
        let f = &self.fine;
        (0..self.len())
            .map(|i| {
                let k = 2 * i;
                let w = f.phi[k] * f.dpsi[k] - f.dphi[k] * f.psi[k];
                let target = self.c * f.dp[k];
                ((w - target) / target).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative three-point residual `|½σ²D²g + bDg − rg| / (r|g|)`
    /// of φ and ψ over nodes with smoothly varying spacing, away from the
    /// outer tenth of the grid on each side.
    pub fn ode_residual(&self) -> f64 {
        let x = self.grid.nodes();
        let n = x.len();
        let f = &self.fine;
        let skip = n / 10;
        let mut worst = 0.0f64;
        for i in skip.max(1)..n - skip.max(1) {
            let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            if (h1 - h0).abs() > 0.1 * h0.min(h1) {
                continue;
            }
            let k = 2 * i;
            for g in [&self.phi.values, &self.psi.values] {
                let d1 = crate::grid::three_point(x[i - 1], x[i], x[i + 1], g[i - 1], g[i], g[i + 1], x[i]);
                let d2 = 2.0 * (h0 * g[i + 1] - (h0 + h1) * g[i] + h1 * g[i - 1]) / (h0 * h1 * (h0 + h1));
                let res = 0.5 * f.sigma2[k] * d2 + f.b[k] * d1 - f.r[k] * g[i];
                worst = worst.max((res / (f.r[k] * g[i])).abs());
            }
        }
        worst
    }

    /// `E_x[exp(−Λ_{T_y})]`.
    pub fn hitting_transform(&self, x: f64, y: f64) -> Result<f64, OdeError> {
        self.check_span(x)?;
        self.check_span(y)?;
        Ok(if y < x {
            self.phi_at(x).0 / self.phi_at(y).0
        } else if y > x {
            self.psi_at(x).0 / self.psi_at(y).0
        } else {
            1.0
        })
    }

    /// Two-sided discounted exit functionals `(to_lo, to_hi)` of `]lo, hi[`.
    pub fn laplace_hitting(&self, x: f64, lo: f64, hi: f64) -> Result<(f64, f64), OdeError> {
        for v in [x, lo, hi] {
            self.check_span(v)?;
        }
        if !(lo <= x && x <= hi && lo < hi) {
            return Err(OdeError::DegenerateBracket { lo, hi });
        }
        let (fl, fh, fx) = (self.phi_at(lo).0, self.phi_at(hi).0, self.phi_at(x).0);
        let (gl, gh, gx) = (self.psi_at(lo).0, self.psi_at(hi).0, self.psi_at(x).0);
        let den = fh * gl - fl * gh;
        if !den.is_finite() || den.abs() <= 1e-300 * (fh * gl).abs().max(fl * gh) {
            return Err(OdeError::DegenerateBracket { lo, hi });
        }
        Ok(((fh * gx - fx * gh) / den, (fx * gl - fl * gx) / den))
    }

    /// Rows `(x, p, m_density, phi, psi, dphi, dpsi)` for CSV output.
    pub fn rows(&self) -> Vec<[f64; 7]> {
        (0..self.len())
            .map(|i| {
                [
                    self.grid.x(i),
                    self.p.values[i],
                    self.m_density.values[i],
                    self.phi.values[i],
                    self.psi.values[i],
                    self.phi.right_slope[i],
                    self.psi.right_slope[i],
                ]
            })
            .collect()
    }
}

/// Observed order of the three-point ODE residual on grids of `n`, `2n−1`
/// and `4n−3` nodes over the same span; returns the smaller of the two
/// successive orders and the three residuals.
pub fn refinement_order(
    prob: &DiffusionProblem,
    lo: f64,
    hi: f64,
    n: usize,
    spacing: Spacing,
) -> Result<(f64, [f64; 3]), OdeError> {
    let mut res = [0.0; 3];
    for (j, m) in [n, 2 * n - 1, 4 * n - 3].into_iter().enumerate() {
        let mut l = layout(prob, lo, hi, m, spacing);
        l.breakpoints.clear();
        let g = Arc::new(Grid::layout(&l).map_err(OdeError::Grid)?);
        res[j] = fundamental_pair(prob, g, None)?.ode_residual();
    }
    let o1 = (res[0] / res[1]).log2();
    let o2 = (res[1] / res[2]).log2();
    Ok((o1.min(o2), res))
}

/// Feller check started from the reference point of a computed pair.
pub fn feller_on_grid(prob: &DiffusionProblem, fp: &FundamentalPair, end: End) -> crate::model::FellerReport {
    crate::model::feller_boundary_check(prob, end, fp.ref_point)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{Bound, ProblemConfig};
    use crate::model::build_problem;
    use std::collections::BTreeMap;

    const INF: f64 = f64::INFINITY;

    pub(crate) fn problem(lo: f64, hi: f64, left: BoundaryKind, b: &str, s: &str, r: &str) -> DiffusionProblem {
        build_problem(&ProblemConfig {
            interval: [Bound(lo), Bound(hi)],
            left,
            right: BoundaryKind::Inaccessible,
            constants: BTreeMap::new(),
            drift: b.into(),
            sigma: s.into(),
            rate: r.into(),
            reward: "1".into(),
            breakpoints: vec![],
            reward_at_left: None,
            reward_at_right: None,
            r_floor: 1e-8,
            running_reward: None,
        })
        .unwrap()
    }

    fn pair(p: &DiffusionProblem, lo: f64, hi: f64, n: usize) -> FundamentalPair {
        let g = build_grid(p, n, TruncPolicy::Explicit { lo, hi }, None).unwrap();
        fundamental_pair(p, Arc::new(g), None).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn brownian_pair_matches_exponentials() {
        let p = problem(-INF, INF, BoundaryKind::Inaccessible, "0", "1", "0.5");
        let fp = pair(&p, -8.0, 8.0, 1601);
        let c = fp.ref_point;
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            if x.abs() <= 4.0 {
                assert!(rel(fp.phi.values[i], (-(x - c)).exp()) < 1e-6, "phi at {x}");
                assert!(rel(fp.psi.values[i], (x - c).exp()) < 1e-6, "psi at {x}");
            }
        }
        assert!(rel(fp.c, 2.0) < 1e-8);
        assert!(fp.wronskian_error() < 1e-6);
    }

    #[test]
    fn scale_and_speed_closed_forms() {
        let bm = problem(-INF, INF, BoundaryKind::Inaccessible, "0", "1", "0.5");
        let fp = pair(&bm, -4.0, 4.0, 201);
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            assert!((fp.p.values[i] - x).abs() < 1e-14);
            assert!((fp.m_density.values[i] - 2.0).abs() < 1e-14);
        }

        let ou = problem(-INF, INF, BoundaryKind::Inaccessible, "-x", "1", "0.5");
        let fp = pair(&ou, -3.0, 3.0, 601);
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            assert!(rel(fp.p.left_slope[i], (x * x).exp()) < 1e-8, "p' at {x}");
            assert!(rel(fp.m_density.values[i], 2.0 * (-x * x).exp()) < 1e-8);
        }

        let gbm = problem(0.0, INF, BoundaryKind::Inaccessible, "0", "x", "1");
        let g = build_grid(&gbm, 401, TruncPolicy::Explicit { lo: 0.01, hi: 100.0 }, None).unwrap();
        let fp = fundamental_pair(&gbm, Arc::new(g), Some(1.0)).unwrap();
        assert!((fp.ref_point - 1.0).abs() < 1e-2);
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            assert!((fp.p.values[i] - (x - fp.ref_point)).abs() < 1e-10);
            assert!(rel(fp.m_density.values[i], 2.0 / (x * x)) < 1e-12);
        }
    }

    #[test]
    fn gbm_pair_is_power_law() {
        let gbm = problem(0.0, INF, BoundaryKind::Inaccessible, "0", "x", "1");
        let g = build_grid(&gbm, 2001, TruncPolicy::Explicit { lo: 1e-4, hi: 1e4 }, None).unwrap();
        let fp = fundamental_pair(&gbm, Arc::new(g), Some(1.0)).unwrap();
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            if (1e-2..=1e2).contains(&x) {
                assert!(rel(fp.phi.values[i], 1.0 / x) < 1e-6, "phi at {x}");
                assert!(rel(fp.psi.values[i], x * x) < 1e-6, "psi at {x}");
            }
        }
        assert!(rel(fp.c, 3.0) < 1e-6);
        assert!(fp.wronskian_error() < 1e-6);
    }

    #[test]
    fn absorbed_brownian_pair() {
        let p = problem(0.0, INF, BoundaryKind::Absorbing, "0", "1", "0.5");
        let fp = pair(&p, 0.0, 10.0, 2001);
        let c = fp.ref_point;
        let psi_c = c.exp() - (-c).exp();
        assert_eq!(fp.psi.values[0], 0.0);
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            if x <= 6.0 {
                assert!(rel(fp.phi.values[i], (c - x).exp()) < 1e-6, "phi at {x}");
                let want = (x.exp() - (-x).exp()) / psi_c;
                assert!((fp.psi.values[i] - want).abs() < 1e-6 * want.max(1e-3), "psi at {x}");
            }
        }
        assert!(fp.wronskian_error() < 1e-6);
    }

    #[test]
    fn hitting_transforms_brownian() {
        let p = problem(-INF, INF, BoundaryKind::Inaccessible, "0", "1", "0.5");
        let fp = pair(&p, -8.0, 8.0, 1601);
        let e1 = (-1.0f64).exp();
        assert!(rel(fp.hitting_transform(1.0, 0.0).unwrap(), e1) < 1e-7);
        assert!(rel(fp.hitting_transform(0.0, 1.0).unwrap(), e1) < 1e-7);
        assert_eq!(fp.hitting_transform(0.3, 0.3).unwrap(), 1.0);
        let e = std::f64::consts::E;
        let want = (e - 1.0 / e) / (e * e - 1.0 / (e * e));
        let (lo, hi) = fp.laplace_hitting(0.0, -1.0, 1.0).unwrap();
        assert!(rel(lo, want) < 1e-7 && rel(hi, want) < 1e-7);
        assert!((want - 0.324028).abs() < 1e-6);
        let (lo, _) = fp.laplace_hitting(-1.0, -1.0, 1.0).unwrap();
        assert!((lo - 1.0).abs() < 1e-12);
        let x = 0.37;
        let (a, b) = fp.laplace_hitting(x, -0.9, 1.3).unwrap();
        let lhs = a * fp.phi_at(-0.9).0 + b * fp.phi_at(1.3).0;
        assert!(rel(lhs, fp.phi_at(x).0) < 1e-8);
        assert!(matches!(fp.hitting_transform(9.0, 0.0), Err(OdeError::OutOfSpan { .. })));
    }

    #[test]
    fn residual_is_second_order() {
        let p = problem(-INF, INF, BoundaryKind::Inaccessible, "0", "1", "0.5");
        let (order, res) = refinement_order(&p, -8.0, 8.0, 201, Spacing::Uniform).unwrap();
        assert!(order >= 1.9, "{order} {res:?}");
        let gbm = problem(0.0, INF, BoundaryKind::Inaccessible, "0.5*x", "x", "1");
        let (order, res) = refinement_order(&gbm, 1e-4, 1e4, 201, Spacing::Log).unwrap();
        assert!(order >= 1.9, "{order} {res:?}");
    }

    #[test]
    fn auto_truncation_reaches_tail_tolerance() {
        let p = problem(-INF, INF, BoundaryKind::Inaccessible, "0", "1", "0.5");
        let g = build_grid(&p, 401, TruncPolicy::Auto { tail_tol: 1e-8 }, None).unwrap();
        assert!(g.left_trunc() <= -9.2 && g.right_trunc() >= 9.2);
        let fp = fundamental_pair(&p, Arc::new(g), Some(0.0)).unwrap();
        let n = fp.len();
        assert!(fp.s(0) < 1e-8 && 1.0 / fp.s(n - 1) < 1e-8);
    }

    #[test]
    fn s_is_increasing() {
        let p = problem(-INF, INF, BoundaryKind::Inaccessible, "-x", "1", "0.5 + 0.1*x^2");
        let fp = pair(&p, -4.0, 4.0, 401);
        assert!((1..fp.len()).all(|i| fp.s(i) > fp.s(i - 1)));
        assert!(fp.wronskian_error() < 1e-6);
    }
}
