use serde::Serialize;

use super::{solve, tail_limit, Reward, SolveError, ValueSolution};
use crate::calculus::{apply_l, potential_ac};
use crate::excessive::DEFAULT_TOL;
use crate::expr::{Expr, Side};
use crate::grid::GridFunction;
use crate::model::DiffusionProblem;
use crate::ode::FundamentalPair;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    /// `w ≥ f̄`.
    pub majorant_ok: bool,
    pub worst_majorant: (f64, f64),
    /// `−ℒw ≥ 0`.
    pub excessive_ok: bool,
    pub positive_mass: f64,
    pub worst_positive: (f64, f64),
    /// `ℒw` does not charge `{w > f̄}`.
    pub no_charge_ok: bool,
    pub charge_on_waiting: f64,
    pub left_limit_ok: bool,
    pub left_ratio: f64,
    pub right_limit_ok: bool,
    pub right_ratio: f64,
    /// `w = f` at absorbing endpoints.
    pub absorbing_ok: bool,
    pub all_ok: bool,
}

/// Checks that `w` solves the variational inequality with boundary ratio
/// limits `(A, B)`; passing every check identifies `w` with `v`.
pub fn verify_solution(
    fp: &FundamentalPair,
    rew: &Reward,
    w: &GridFunction,
    limits: (f64, f64),
    w_at_ends: (Option<f64>, Option<f64>),
) -> VerifyReport {
    let g = &fp.grid;
    let n = g.len();
    let scale = w.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fb = &rew.f_bar.values;

    let mut worst_majorant = (f64::NAN, 0.0);
    for i in 0..n {
        let gap = w.values[i] - fb[i];
        if gap < worst_majorant.1 {
            worst_majorant = (g.x(i), gap);
        }
    }
    let majorant_ok = worst_majorant.1 >= -1e-9 * (1.0 + scale);

    let mu = apply_l(fp, w);
    let positive_mass = mu.positive_mass();
    let excessive_ok = positive_mass <= DEFAULT_TOL * scale;

    let above: Vec<bool> = (0..n).map(|i| w.values[i] - fb[i] > 1e-6 * (1.0 + w.values[i].abs())).collect();
    let mut charge = 0.0;
    for i in 0..n - 1 {
        if above[i] && above[i + 1] {
            let h = g.x(i + 1) - g.x(i);
            charge += h / 6.0 * (mu.left[i].abs() + 4.0 * mu.mid[i].abs() + mu.right[i].abs());
        }
    }
    for i in 0..n {
        if above[i] {
            charge += mu.atoms[i].abs();
        }
    }
    let no_charge_ok = charge <= DEFAULT_TOL * scale;

    let window = (n / 20).max(3);
    let left_ratio = if g.left_absorbing() {
        w.values[0] / fp.phi.values[0]
    } else {
        tail_limit(&(0..window).rev().map(|i| w.values[i] / fp.phi.values[i]).collect::<Vec<_>>())
    };
    let right_ratio = if g.right_absorbing() {
        w.values[n - 1] / fp.psi.values[n - 1]
    } else {
        tail_limit(&(n - window..n).map(|i| w.values[i] / fp.psi.values[i]).collect::<Vec<_>>())
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()));
    let left_limit_ok = close(left_ratio, limits.0);
    let right_limit_ok = close(right_ratio, limits.1);

    let mut absorbing_ok = true;
    if g.left_absorbing() {
        absorbing_ok &= w_at_ends.0.is_none_or(|v| close(v, fb[0]));
    }
    if g.right_absorbing() {
        absorbing_ok &= w_at_ends.1.is_none_or(|v| close(v, fb[n - 1]));
    }
    let all_ok = majorant_ok && excessive_ok && no_charge_ok && left_limit_ok && right_limit_ok && absorbing_ok;
    VerifyReport {
        majorant_ok,
        worst_majorant,
        excessive_ok,
        positive_mass,
        worst_positive: mu.worst_positive(),
        no_charge_ok,
        charge_on_waiting: charge,
        left_limit_ok,
        left_ratio,
        right_limit_ok,
        right_ratio,
        absorbing_ok,
        all_ok,
    }
}

/// One-sided slopes at a boundary of the stopping region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothFitPoint {
    /// Boundary location, refined between nodes when `f` is smooth there.
    pub x: f64,
    pub node: f64,
    pub f_plus: f64,
    pub v_plus: f64,
    pub v_minus: f64,
    pub f_minus: f64,
    pub differentiable: bool,
    /// `f'_+ ≤ v'_+ ≤ v'_− ≤ f'_−` up to tolerance; `None` when `f` has a
    /// jump or a kink at the point.
    pub ok: Option<bool>,
    /// All four slopes agree.
    pub equality: bool,
}

fn golden_min(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

pub fn smooth_fit_report(fp: &FundamentalPair, rew: &Reward, sol: &ValueSolution) -> Vec<SmoothFitPoint> {
    let g = &fp.grid;
    let n = g.len();
    let mut nodes: Vec<usize> = Vec::new();
    for w in &sol.waiting {
        let (i0, i1) = w.nodes;
        if i0 > 0 {
            nodes.push(i0 - 1);
        }
        if i1 + 1 < n {
            nodes.push(i1 + 1);
        }
    }
    nodes.sort_unstable();
    nodes.dedup();
    // absorbing endpoints are not free boundaries
    nodes.retain(|&j| !(j == 0 && g.left_absorbing()) && !(j == n - 1 && g.right_absorbing()));

    let edge_for = |i: usize| sol.waiting.iter().find(|w| w.nodes.0 <= i && i <= w.nodes.1);
    let mut out = Vec::new();
    for j in nodes {
        let left = if j > 0 { edge_for(j - 1) } else { None };
        let right = if j + 1 < n { edge_for(j + 1) } else { None };
        let differentiable = rew.smooth_at(j);
        let mut x = g.x(j);
        let one_sided = left.is_some() != right.is_some();
        if differentiable && one_sided && j > 0 && j + 1 < n {
            let w = left.or(right).unwrap();
            let gap = |y: f64| w.a * fp.phi_at(y).0 + w.b * fp.psi_at(y).0 - rew.f_at(y);
            x = golden_min(g.x(j - 1), g.x(j + 1), gap);
        }
        let harmonic = |w: &super::WaitingInterval| w.a * fp.phi_at(x).1 + w.b * fp.psi_at(x).1;
        let f_minus = rew.derivative(x, Side::Left);
        let f_plus = rew.derivative(x, Side::Right);
        let v_minus = left.map_or(f_minus, harmonic);
        let v_plus = right.map_or(f_plus, harmonic);
        let size = 1.0 + f_minus.abs().max(f_plus.abs()).max(v_minus.abs()).max(v_plus.abs());
        let tol = 1e-3 * size;
        let chain = f_plus <= v_plus + tol && v_plus <= v_minus + tol && v_minus <= f_minus + tol;
        let equality = [f_plus, v_plus, v_minus, f_minus]
            .iter()
            .all(|d| (d - f_plus).abs() <= tol);
        out.push(SmoothFitPoint {
            x,
            node: g.x(j),
            f_plus,
            v_plus,
            v_minus,
            f_minus,
            differentiable,
            ok: differentiable.then_some(chain),
            equality: differentiable && equality,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningRewardSolution {
    /// `R_h + v_aux`.
    pub v_total: GridFunction,
    pub potential: GridFunction,
    pub sol: ValueSolution,
}

/// Running reward `h`: `v = R_h + v_aux` with auxiliary reward `(f − R_h)⁺`.
pub fn solve_with_running_reward(
    prob: &DiffusionProblem,
    fp: &FundamentalPair,
    h: &Expr,
    rew: &Reward,
    tol_contact: f64,
) -> Result<RunningRewardSolution, SolveError> {
    let r = potential_ac(fp, h)?.r;
    let n = fp.len();
    let mut vals = vec![0.0; n];
    let mut dl = vec![0.0; n];
    let mut dr = vec![0.0; n];
    for i in 0..n {
        let d = rew.f_bar.values[i] - r.values[i];
        if d > 0.0 {
            vals[i] = d;
            dl[i] = rew.f_bar.left_slope[i] - r.left_slope[i];
            dr[i] = rew.f_bar.right_slope[i] - r.right_slope[i];
        }
    }
    let f_bar = GridFunction::new(fp.grid.clone(), vals, dl, dr);
    let clip = |v: Option<f64>, k: usize| v.map(|v| (v - r.values[k]).max(0.0));
    let aux = Reward::from_grid(f_bar, clip(rew.inner_left, 0), clip(rew.inner_right, n - 1));
    let sol = solve(prob, fp, &aux, tol_contact)?;
    let v_total = sol.v.combine(1.0, &r, 1.0);
    Ok(RunningRewardSolution {
        v_total,
        potential: r,
        sol,
    })
}
