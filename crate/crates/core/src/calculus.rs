//! The operator ℒ, r(·)-potentials and the Green kernel.
//!
//! Measures are piecewise quadratic densities (left end, midpoint and right
//! end of every cell) plus atoms at nodes. The potential of `μ` is
//!
//! ```text
//! R(x) = (2/C) [ φ(x) ∫_{]α,x[} ψ/(σ²p') dμ + ψ(x) ∫_{[x,β[} φ/(σ²p') dμ ]
//! ```
//!
//! evaluated with prefix sums, so an atom at `x` enters through the second
//! integral.

use std::sync::Arc;

use thiserror::Error;

use crate::expr::{Expr, Side};
use crate::grid::{hermite, Grid, GridFunction};
use crate::model::{BoundaryKind, DiffusionProblem};
use crate::ode::{FundamentalPair, OdeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalculusError {
    #[error("potential integrals diverge on the truncated span")]
    IntegrabilityFailure,
    #[error("F/φ or F/ψ is unbounded at the truncation")]
    UnboundedRatio,
    #[error("running reward undefined at the absorbing endpoint {0}")]
    AbsorbingValueMissing(f64),
    #[error("cannot evaluate `{expr}` at x = {x}")]
    Eval { expr: String, x: f64 },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// A signed measure on the truncated span.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    pub grid: Arc<Grid>,
    /// Density at `x_i+`, at the midpoint and at `x_{i+1}−` of cell `i`.
    pub left: Vec<f64>,
    pub mid: Vec<f64>,
    pub right: Vec<f64>,
    /// Atom mass per node.
    pub atoms: Vec<f64>,
}

impl SignedMeasure {
    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        SignedMeasure {
            grid,
            left: vec![0.0; n - 1],
            mid: vec![0.0; n - 1],
            right: vec![0.0; n - 1],
            atoms: vec![0.0; n],
        }
    }

    /// Density from a function returning the value approached from a side.
    pub fn from_density(grid: Arc<Grid>, mut density: impl FnMut(f64, Side) -> f64) -> Self {
        let mut m = SignedMeasure::zero(grid);
        let x = m.grid.nodes().to_vec();
        for i in 0..x.len() - 1 {
            m.left[i] = density(x[i], Side::Right);
            m.mid[i] = density(0.5 * (x[i] + x[i + 1]), Side::At);
            m.right[i] = density(x[i + 1], Side::Left);
        }
        m
    }

    /// Density given by an expression, with branch-correct cell ends.
    pub fn from_expr(grid: Arc<Grid>, h: &Expr) -> Result<Self, CalculusError> {
        let mut err = None;
        let m = Self::from_density(grid, |x, side| match h.limit(x, side) {
            Ok(v) => v,
            Err(_) => {
                err.get_or_insert(CalculusError::Eval {
                    expr: h.to_string(),
                    x,
                });
                f64::NAN
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(m),
        }
    }

    pub fn with_atom(mut self, node: usize, mass: f64) -> Self {
        self.atoms[node] += mass;
        self
    }

    pub fn scale(&self, c: f64) -> SignedMeasure {
        let s = |v: &[f64]| v.iter().map(|x| c * x).collect();
        SignedMeasure {
            grid: self.grid.clone(),
            left: s(&self.left),
            mid: s(&self.mid),
            right: s(&self.right),
            atoms: s(&self.atoms),
        }
    }

    pub fn add(&self, other: &SignedMeasure) -> SignedMeasure {
        let s = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        SignedMeasure {
            grid: self.grid.clone(),
            left: s(&self.left, &other.left),
            mid: s(&self.mid, &other.mid),
            right: s(&self.right, &other.right),
            atoms: s(&self.atoms, &other.atoms),
        }
    }

    fn h(&self, i: usize) -> f64 {
        self.grid.x(i + 1) - self.grid.x(i)
    }

    /// Simpson mass of cell `i` under `g`.
    fn cell_mass(&self, i: usize, g: impl Fn(f64) -> f64) -> f64 {
        self.h(i) / 6.0 * (g(self.left[i]) + 4.0 * g(self.mid[i]) + g(self.right[i]))
    }

    /// Mass of the positive part.
    pub fn positive_mass(&self) -> f64 {
        let cells: f64 = (0..self.left.len()).map(|i| self.cell_mass(i, |d| d.max(0.0))).sum();
        cells + self.atoms.iter().map(|a| a.max(0.0)).sum::<f64>()
    }

    pub fn total_variation(&self) -> f64 {
        let cells: f64 = (0..self.left.len()).map(|i| self.cell_mass(i, f64::abs)).sum();
        cells + self.atoms.iter().map(|a| a.abs()).sum::<f64>()
    }

    /// `μ([a, b])`, cells counted when their midpoint lies in the interval.
    pub fn mass_on(&self, a: f64, b: f64) -> f64 {
        let x = self.grid.nodes();
        let mut m = 0.0;
        for i in 0..self.left.len() {
            let c = 0.5 * (x[i] + x[i + 1]);
            if c >= a && c <= b {
                m += self.cell_mass(i, |d| d);
            }
        }
        for (i, at) in self.atoms.iter().enumerate() {
            if x[i] >= a && x[i] <= b {
                m += at;
            }
        }
        m
    }

    /// L¹ distance of the absolutely continuous parts.
    pub fn density_l1(&self, other: &SignedMeasure) -> f64 {
        (0..self.left.len())
            .map(|i| {
                self.h(i) / 6.0
                    * ((self.left[i] - other.left[i]).abs()
                        + 4.0 * (self.mid[i] - other.mid[i]).abs()
                        + (self.right[i] - other.right[i]).abs())
            })
            .sum()
    }

    /// Largest positive excursion `(location, value)` of the density or of
    /// an atom.
    pub fn worst_positive(&self) -> (f64, f64) {
        let x = self.grid.nodes();
        let mut best = (f64::NAN, 0.0);
        for i in 0..self.left.len() {
            for (pos, v) in [
                (x[i], self.left[i]),
                (0.5 * (x[i] + x[i + 1]), self.mid[i]),
                (x[i + 1], self.right[i]),
            ] {
                if v > best.1 {
                    best = (pos, v);
                }
            }
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if *a > best.1 {
                best = (x[i], *a);
            }
        }
        best
    }
}

/// Node `j` separates smooth pieces: a declared breakpoint or a slope jump.
fn is_barrier(f: &GridFunction, j: usize) -> bool {
    let (l, r) = (f.left_slope[j], f.right_slope[j]);
    f.grid.is_breakpoint(j) || (l - r).abs() > 1e-12 * (1.0 + l.abs().max(r.abs()))
}

/// Degree-five polynomial through values and slopes at three nodes, in the
/// scaled coordinate `t = (x − x_c)/h`.
struct Quintic {
    xc: f64,
    h: f64,
    a: [f64; 6],
}

impl Quintic {
    fn fit(xs: [f64; 3], ys: [f64; 3], ds: [f64; 3]) -> Option<Quintic> {
        let xc = xs[1];
        let h = 0.5 * (xs[2] - xs[0]);
        let mut m = [[0.0f64; 7]; 6];
        for k in 0..3 {
            let t = (xs[k] - xc) / h;
            for p in 0..6 {
                m[2 * k][p] = t.powi(p as i32);
                m[2 * k + 1][p] = if p == 0 { 0.0 } else { p as f64 * t.powi(p as i32 - 1) };
            }
            m[2 * k][6] = ys[k];
            m[2 * k + 1][6] = ds[k] * h;
        }
        // Gaussian elimination with partial pivoting
        for col in 0..6 {
            let piv = (col..6).max_by(|a, b| m[*a][col].abs().total_cmp(&m[*b][col].abs()))?;
            m.swap(col, piv);
            if m[col][col].abs() < 1e-14 {
                return None;
            }
            for row in 0..6 {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    if f != 0.0 {
                        for k in col..7 {
                            m[row][k] -= f * m[col][k];
                        }
                    }
                }
            }
        }
        let mut a = [0.0; 6];
        for k in 0..6 {
            a[k] = m[k][6] / m[k][k];
        }
        Some(Quintic { xc, h, a })
    }

    /// `(value, first, second)` derivatives at `x`.
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let t = (x - self.xc) / self.h;
        let a = &self.a;
        let v = a[0] + t * (a[1] + t * (a[2] + t * (a[3] + t * (a[4] + t * a[5]))));
        let d = a[1] + t * (2.0 * a[2] + t * (3.0 * a[3] + t * (4.0 * a[4] + t * 5.0 * a[5])));
        let s = 2.0 * a[2] + t * (6.0 * a[3] + t * (12.0 * a[4] + t * 20.0 * a[5]));
        (v, d / self.h, s / (self.h * self.h))
    }
}

/// `(F, F', F'')` at the left end, midpoint and right end of cell `i`,
/// from a local polynomial that does not cross a barrier.
fn cell_jets(f: &GridFunction, barrier: &[bool], i: usize) -> [(f64, f64, f64); 3] {
    let g = &f.grid;
    let n = g.len();
    let (x0, x1) = (g.x(i), g.x(i + 1));
    let xm = 0.5 * (x0 + x1);
    let window = if i >= 1 && !barrier[i] {
        Some(i - 1)
    } else if i + 2 < n && !barrier[i + 1] {
        Some(i)
    } else {
        None
    };
    if let Some(j) = window {
        let idx = [j, j + 1, j + 2];
        // slopes facing into the window
        let ds = [f.right_slope[j], f.right_slope[j + 1], f.left_slope[j + 2]];
        let xs = idx.map(|k| g.x(k));
        let ys = idx.map(|k| f.values[k]);
        if let Some(q) = Quintic::fit(xs, ys, ds) {
            let (_, _, s0) = q.eval(x0);
            let (_, _, s1) = q.eval(x1);
            return [
                (f.values[i], f.right_slope[i], s0),
                q.eval(xm),
                (f.values[i + 1], f.left_slope[i + 1], s1),
            ];
        }
    }
    // cubic Hermite on the cell alone
    let h = x1 - x0;
    let (y0, y1) = (f.values[i], f.values[i + 1]);
    let (d0, d1) = (f.right_slope[i], f.left_slope[i + 1]);
    let delta = (y1 - y0) / h;
    let s0 = (6.0 * delta - 4.0 * d0 - 2.0 * d1) / h;
    let s1 = (-6.0 * delta + 2.0 * d0 + 4.0 * d1) / h;
    let (vm, dm) = hermite(x0, x1, y0, y1, d0, d1, xm);
    [(y0, d0, s0), (vm, dm, 0.5 * (s0 + s1)), (y1, d1, s1)]
}

/// The measure `ℒF = ½σ²F'' + bF' − rF`, with atoms `½σ²(F'_+ − F'_−)` at
/// nodes where the slope jumps.
pub fn apply_l(fp: &FundamentalPair, f: &GridFunction) -> SignedMeasure {
    let fine = fp.fine();
    let n = f.grid.len();
    let barrier: Vec<bool> = (0..n).map(|j| is_barrier(f, j)).collect();
    let mut mu = SignedMeasure::zero(f.grid.clone());
    let op = |k: usize, jet: (f64, f64, f64)| {
        0.5 * fine.sigma2[k] * jet.2 + fine.b[k] * jet.1 - fine.r[k] * jet.0
    };
    for i in 0..n - 1 {
        let jets = cell_jets(f, &barrier, i);
        mu.left[i] = op(2 * i, jets[0]);
        mu.mid[i] = op(2 * i + 1, jets[1]);
        mu.right[i] = op(2 * i + 2, jets[2]);
    }
    for j in 1..n - 1 {
        mu.atoms[j] = 0.5 * fine.sigma2[2 * j] * (f.right_slope[j] - f.left_slope[j]);
    }
    mu
}

/// A potential together with its tail ratios at the truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub r: GridFunction,
    /// `R/φ` at the left truncation node.
    pub left_ratio_residual: f64,
    /// `R/ψ` at the right truncation node.
    pub right_ratio_residual: f64,
}

/// `R_μ` at every node, with one-sided slopes.
pub fn potential(fp: &FundamentalPair, mu: &SignedMeasure) -> Result<Potential, CalculusError> {
    let fine = fp.fine();
    let n = fp.len();
    let w = |k: usize| 1.0 / (fine.sigma2[k] * fine.dp[k]);
    let cell = |i: usize, g: &[f64]| {
        let h = fp.grid.x(i + 1) - fp.grid.x(i);
        let (a, m, e) = (2 * i, 2 * i + 1, 2 * i + 2);
        h / 6.0 * (g[a] * w(a) * mu.left[i] + 4.0 * g[m] * w(m) * mu.mid[i] + g[e] * w(e) * mu.right[i])
    };
    // psi_int[j] = ∫_{]α, x_j[} ψ w dμ ; phi_int[j] = ∫_{[x_j, β[} φ w dμ
    let mut psi_int = vec![0.0; n];
    for j in 1..n {
        psi_int[j] = psi_int[j - 1] + cell(j - 1, &fine.psi) + fine.psi[2 * (j - 1)] * w(2 * (j - 1)) * mu.atoms[j - 1];
    }
    let mut phi_int = vec![0.0; n];
    phi_int[n - 1] = fine.phi[2 * (n - 1)] * w(2 * (n - 1)) * mu.atoms[n - 1];
    for j in (0..n - 1).rev() {
        phi_int[j] = phi_int[j + 1] + cell(j, &fine.phi) + fine.phi[2 * j] * w(2 * j) * mu.atoms[j];
    }
    if psi_int.iter().chain(&phi_int).any(|v| !v.is_finite()) {
        return Err(CalculusError::IntegrabilityFailure);
    }
    let k2 = 2.0 / fp.c;
    let mut vals = vec![0.0; n];
    let mut dl = vec![0.0; n];
    let mut dr = vec![0.0; n];
    for j in 0..n {
        let k = 2 * j;
        let (ph, dph, ps, dps) = (fine.phi[k], fine.dphi[k], fine.psi[k], fine.dpsi[k]);
        vals[j] = k2 * (ph * psi_int[j] + ps * phi_int[j]);
        dl[j] = k2 * (dph * psi_int[j] + dps * phi_int[j]);
        let a = mu.atoms[j] * w(k);
        dr[j] = k2 * (dph * (psi_int[j] + ps * a) + dps * (phi_int[j] - ph * a));
    }
    let r = GridFunction::new(fp.grid.clone(), vals, dl, dr);
    Ok(potential_from(fp, r))
}

fn potential_from(fp: &FundamentalPair, r: GridFunction) -> Potential {
    let n = fp.len();
    Potential {
        left_ratio_residual: r.values[0] / fp.phi.values[0],
        right_ratio_residual: r.values[n - 1] / fp.psi.values[n - 1],
        r,
    }
}

/// Potential of the density `h(x) dx`.
pub fn potential_ac(fp: &FundamentalPair, h: &Expr) -> Result<Potential, CalculusError> {
    let mu = SignedMeasure::from_expr(fp.grid.clone(), h)?;
    potential(fp, &mu)
}

/// `potential_ac` plus the contribution of a running reward that keeps
/// accruing after absorption: `(h(α)/r(α)) φ/φ(α)` and its mirror image.
pub fn potential_tilde(prob: &DiffusionProblem, fp: &FundamentalPair, h: &Expr) -> Result<Potential, CalculusError> {
    let base = potential_ac(fp, h)?;
    let mut r = base.r;
    let n = fp.len();
    if prob.left == BoundaryKind::Absorbing && fp.grid.left_absorbing() {
        let a = prob.alpha;
        let ha = h.eval(a).map_err(|_| CalculusError::AbsorbingValueMissing(a))?;
        let ra = prob.r.eval(a).map_err(|_| CalculusError::AbsorbingValueMissing(a))?;
        if ha != 0.0 {
            r = r.combine(1.0, &fp.phi, ha / ra / fp.phi.values[0]);
        }
    }
    if prob.right == BoundaryKind::Absorbing && fp.grid.right_absorbing() {
        let b = prob.beta;
        let hb = h.eval(b).map_err(|_| CalculusError::AbsorbingValueMissing(b))?;
        let rb = prob.r.eval(b).map_err(|_| CalculusError::AbsorbingValueMissing(b))?;
        if hb != 0.0 {
            r = r.combine(1.0, &fp.psi, hb / rb / fp.psi.values[n - 1]);
        }
    }
    Ok(potential_from(fp, r))
}

/// Resolvent density `u(x, s) = 2/(Cσ²(s)p'(s)) · φ(x∨s) ψ(x∧s)`.
pub fn greens_kernel(prob: &DiffusionProblem, fp: &FundamentalPair, x: f64, s: f64) -> Result<f64, CalculusError> {
    for v in [x, s] {
        if !fp.grid.contains(v) {
            return Err(OdeError::OutOfSpan {
                x: v,
                lo: fp.grid.left_trunc(),
                hi: fp.grid.right_trunc(),
            }
            .into());
        }
    }
    let c = prob.coefficients(s).map_err(OdeError::from)?;
    let phi = fp.phi_at(x.max(s)).0;
    let psi = fp.psi_at(x.min(s)).0;
    Ok(2.0 / (fp.c * c.sigma2 * fp.dp_at(s)) * phi * psi)
}

/// `F = Aφ + R_{−ℒF} + Bψ` on the truncated span.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub a: f64,
    pub b: f64,
    pub potential: Potential,
    /// `sup |F − (Aφ + R + Bψ)|` over the nodes.
    pub residual: f64,
}

/// Splits `F` into its harmonic part and the potential of `−ℒF`. `A`, `B`
/// are fixed by matching `F` at the two truncation nodes.
pub fn represent(fp: &FundamentalPair, f: &GridFunction) -> Result<Representation, CalculusError> {
    let mu = apply_l(fp, f).scale(-1.0);
    let pot = potential(fp, &mu)?;
    let n = fp.len();
    let (f0, f1) = (f.values[0] - pot.r.values[0], f.values[n - 1] - pot.r.values[n - 1]);
    let (p0, p1) = (fp.phi.values[0], fp.phi.values[n - 1]);
    let (q0, q1) = (fp.psi.values[0], fp.psi.values[n - 1]);
    let det = p0 * q1 - p1 * q0;
    let a = (f0 * q1 - f1 * q0) / det;
    let b = (p0 * f1 - p1 * f0) / det;
    if !a.is_finite() || !b.is_finite() {
        return Err(CalculusError::UnboundedRatio);
    }
    let residual = (0..n)
        .map(|i| (f.values[i] - (a * fp.phi.values[i] + pot.r.values[i] + b * fp.psi.values[i])).abs())
        .fold(0.0, f64::max);
    Ok(Representation {
        a,
        b,
        potential: pot,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Bound, ProblemConfig};
    use crate::model::build_problem;
    use crate::ode::{build_grid, fundamental_pair, TruncPolicy};
    use std::collections::BTreeMap;

    const INF: f64 = f64::INFINITY;

    fn bm(r: &str, lo: f64, hi: f64, n: usize) -> (DiffusionProblem, FundamentalPair) {
        let p = build_problem(&ProblemConfig {
            interval: [Bound(-INF), Bound(INF)],
            left: BoundaryKind::Inaccessible,
            right: BoundaryKind::Inaccessible,
            constants: BTreeMap::new(),
            drift: "0".into(),
            sigma: "1".into(),
            rate: r.into(),
            reward: "1".into(),
            breakpoints: vec![],
            reward_at_left: None,
            reward_at_right: None,
            r_floor: 1e-8,
            running_reward: None,
        })
        .unwrap();
        let g = build_grid(&p, n, TruncPolicy::Explicit { lo, hi }, None).unwrap();
        let fp = fundamental_pair(&p, Arc::new(g), Some(0.0)).unwrap();
        (p, fp)
    }

    #[test]
    fn l_of_phi_vanishes() {
        let (_, fp) = bm("0.5", -8.0, 8.0, 1601);
        let mu = apply_l(&fp, &fp.phi);
        let scale = fp.phi.sup_norm();
        let sup = mu.left.iter().chain(&mu.mid).chain(&mu.right).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sup <= 1e-6 * scale, "{sup} vs {scale}");
        assert!(mu.atoms.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn l_of_abs() {
        let (_, fp) = bm("0.5", -4.0, 4.0, 801);
        let f = GridFunction::from_fn(fp.grid.clone(), |x| {
            let s = if x > 0.0 { 1.0 } else { -1.0 };
            if x == 0.0 {
                (0.0, -1.0, 1.0)
            } else {
                (x.abs(), s, s)
            }
        });
        let mu = apply_l(&fp, &f);
        let i0 = fp.grid.nearest(0.0);
        assert!((mu.atoms[i0] - 1.0).abs() < 1e-12);
        for i in 0..mu.left.len() {
            let x = fp.grid.x(i);
            assert!((mu.left[i] + 0.5 * x.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn kernel_of_point_mass() {
        let (p, fp) = bm("0.5", -10.0, 10.0, 2001);
        let i0 = fp.grid.nearest(0.0);
        let mu = SignedMeasure::zero(fp.grid.clone()).with_atom(i0, 1.0);
        let pot = potential(&fp, &mu).unwrap();
        let i1 = fp.grid.nearest(1.0);
        assert!((pot.r.values[i1] - (-1.0f64).exp()).abs() < 1e-7);
        assert!((greens_kernel(&p, &fp, 0.0, 0.0).unwrap() - 1.0).abs() < 1e-7);
        let (x, s) = (0.3, -1.7);
        let u1 = greens_kernel(&p, &fp, x, s).unwrap();
        let u2 = greens_kernel(&p, &fp, s, x).unwrap();
        assert!((u1 - u2).abs() < 1e-10);
        assert!((u1 - (-2.0f64).exp()).abs() < 1e-7);
        assert!(pot.left_ratio_residual.abs() < 1e-8 && pot.right_ratio_residual.abs() < 1e-8);
    }

    #[test]
    fn constant_running_reward() {
        let (_, fp) = bm("0.5", -20.0, 20.0, 2001);
        let pot = potential_ac(&fp, &Expr::parse("1").unwrap()).unwrap();
        for i in 0..fp.len() {
            let x = fp.grid.x(i);
            if x.abs() < 5.0 {
                assert!((pot.r.values[i] - 2.0).abs() < 1e-6, "{x}");
            }
        }
        let zero = potential(&fp, &SignedMeasure::zero(fp.grid.clone())).unwrap();
        assert!(zero.r.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bump_against_kernel_quadrature() {
        let (p, fp) = bm("0.5", -12.0, 12.0, 2401);
        let h = Expr::parse("exp(-x^2)").unwrap();
        let pot = potential_ac(&fp, &h).unwrap();
        // oracle: ∫ e^{-|x-s|} e^{-s²} ds by composite Simpson on a fine mesh
        for &x in &[-1.0, 0.0, 0.5, 2.0] {
            let m = 40_000;
            let (a, b) = (-12.0, 12.0);
            let hh = (b - a) / m as f64;
            let mut acc = 0.0;
            for k in 0..=m {
                let s = a + hh * k as f64;
                let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * (-(x - s as f64).abs()).exp() * (-s * s).exp();
            }
            acc *= hh / 3.0;
            let i = fp.grid.nearest(x);
            assert!((pot.r.values[i] - acc).abs() < 1e-4 * acc, "{x}: {} vs {acc}", pot.r.values[i]);
        }
        let _ = p;
    }

    #[test]
    fn tilde_with_absorption() {
        let p = build_problem(&ProblemConfig {
            interval: [Bound(0.0), Bound(INF)],
            left: BoundaryKind::Absorbing,
            right: BoundaryKind::Inaccessible,
            constants: BTreeMap::new(),
            drift: "0".into(),
            sigma: "1".into(),
            rate: "0.5".into(),
            reward: "1".into(),
            breakpoints: vec![],
            reward_at_left: Some(0.0),
            reward_at_right: None,
            r_floor: 1e-8,
            running_reward: None,
        })
        .unwrap();
        let g = build_grid(&p, 2001, TruncPolicy::Explicit { lo: 0.0, hi: 20.0 }, None).unwrap();
        let fp = fundamental_pair(&p, Arc::new(g), None).unwrap();
        let one = Expr::parse("1").unwrap();
        let t = potential_tilde(&p, &fp, &one).unwrap();
        for i in 0..fp.len() {
            if fp.grid.x(i) < 5.0 {
                assert!((t.r.values[i] - 2.0).abs() < 1e-6, "{} {}", fp.grid.x(i), t.r.values[i]);
            }
        }
        let vanishing = Expr::parse("x*exp(-x)").unwrap();
        let a = potential_tilde(&p, &fp, &vanishing).unwrap();
        let b = potential_ac(&fp, &vanishing).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn represent_harmonic_combination() {
        let (_, fp) = bm("0.5", -8.0, 8.0, 801);
        let f = fp.phi.combine(3.0, &fp.psi, 5.0);
        let rep = represent(&fp, &f).unwrap();
        assert!((rep.a - 3.0).abs() < 1e-8 && (rep.b - 5.0).abs() < 1e-8);
        assert!(rep.residual <= 1e-8 * f.sup_norm());
        assert!(rep.potential.r.sup_norm() <= 1e-6 * f.sup_norm());
    }

    #[test]
    fn linearity() {
        let (_, fp) = bm("1", -6.0, 6.0, 601);
        let g = fp.grid.clone();
        let m1 = SignedMeasure::from_expr(g.clone(), &Expr::parse("exp(-x^2)").unwrap())
            .unwrap()
            .with_atom(200, 0.7);
        let m2 = SignedMeasure::from_expr(g.clone(), &Expr::parse("x^2*exp(-abs(x))").unwrap())
            .unwrap()
            .with_atom(400, -0.3);
        let r1 = potential(&fp, &m1).unwrap().r;
        let r2 = potential(&fp, &m2).unwrap().r;
        let r12 = potential(&fp, &m1.scale(2.0).add(&m2.scale(-0.5))).unwrap().r;
        for i in 0..g.len() {
            assert!((r12.values[i] - (2.0 * r1.values[i] - 0.5 * r2.values[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_recovers_measure() {
        let (_, fp) = bm("0.5", -10.0, 10.0, 2001);
        let g = fp.grid.clone();
        let mu = SignedMeasure::from_expr(g.clone(), &Expr::parse("exp(-(x-1)^2) - 0.5*exp(-x^2)").unwrap())
            .unwrap()
            .with_atom(900, 0.8)
            .with_atom(1100, -0.4);
        let pot = potential(&fp, &mu).unwrap();
        let back = apply_l(&fp, &pot.r).scale(-1.0);
        assert!((back.atoms[900] - 0.8).abs() < 1e-4 * 0.8);
        assert!((back.atoms[1100] + 0.4).abs() < 1e-4 * 0.4);
        assert!(back.density_l1(&mu) < 1e-4, "{}", back.density_l1(&mu));
    }
}
