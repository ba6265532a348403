//! Euler–Maruyama simulation of the diffusion and Monte-Carlo evaluation of
//! discounted stopping strategies.
//!
//! Paths are never stored: path `i` is regenerated from the ChaCha8 stream
//! `(seed, i)`, so every estimate is a deterministic function of
//! `(seed, n_paths, dt)` whatever the number of worker threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{potential_ac, CalculusError};
use crate::config::SimSection;
use crate::expr::Expr;
use crate::grid::GridFunction;
use crate::ode::FundamentalPair;
use crate::solver::{Reward, ValueSolution};

/// Paths whose discount factor falls below this are dropped.
const DISCOUNT_CUTOFF: f64 = 27.631_021_115_928_547; // −ln 1e−12

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("step from x = {x} at t = {t} escaped the truncated span by more than 10 cells")]
    StepSizeUnstable { x: f64, t: f64 },
    #[error("starting point {0} is not inside the truncated span")]
    NotInterior(f64),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid simulation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub max_time: f64,
    pub bridge_correction: bool,
}

impl From<&SimSection> for SimConfig {
    fn from(s: &SimSection) -> Self {
        SimConfig {
            dt: s.dt,
            n_paths: s.n_paths,
            seed: s.seed,
            max_time: s.max_time,
            bridge_correction: s.bridge_correction,
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        (&SimSection::default()).into()
    }
}

/// A stopping rule, evaluated along each path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Stop on entering a closed set given as sorted disjoint intervals.
    StopAtSet(Vec<(f64, f64)>),
    HitLevel(f64),
    /// Stop on leaving `]lo, hi[`.
    TwoSided(f64, f64),
    Never,
    Immediate,
    /// Run `base`; if it stops at one of the listed levels, continue with the
    /// strategy attached to that level.
    Pasted {
        base: Box<Strategy>,
        table: Vec<(f64, Strategy)>,
    },
}

impl Strategy {
    pub fn validate(&self) -> Result<(), MonteCarloError> {
        let bad = |m: String| Err(MonteCarloError::InvalidStrategy(m));
        match self {
            Strategy::StopAtSet(iv) => {
                for &(a, b) in iv {
                    if a.is_nan() || b.is_nan() || a > b {
                        return bad(format!("interval [{a}, {b}]"));
                    }
                }
                if iv.windows(2).any(|w| w[1].0 <= w[0].1) {
                    return bad("intervals must be sorted and disjoint".into());
                }
                Ok(())
            }
            Strategy::HitLevel(y) if !y.is_finite() => bad(format!("level {y}")),
            Strategy::TwoSided(lo, hi) if lo.is_nan() || hi.is_nan() || lo >= hi => {
                bad(format!("bracket ({lo}, {hi})"))
            }
            Strategy::Pasted { base, table } => {
                base.validate()?;
                let mut levels: Vec<f64> = table.iter().map(|t| t.0).collect();
                levels.sort_by(f64::total_cmp);
                if levels.iter().any(|l| !l.is_finite()) || levels.windows(2).any(|w| w[0] == w[1]) {
                    return bad("pasted target levels must be distinct finite points".into());
                }
                table.iter().try_for_each(|t| t.1.validate())
            }
            _ => Ok(()),
        }
    }

    /// Stopping set; for a pasted strategy the union over its stages.
    fn stop_set(&self) -> Vec<(f64, f64)> {
        match self {
            Strategy::StopAtSet(iv) => iv.clone(),
            Strategy::HitLevel(y) => vec![(*y, *y)],
            Strategy::TwoSided(lo, hi) => vec![(f64::NEG_INFINITY, *lo), (*hi, f64::INFINITY)],
            Strategy::Never => Vec::new(),
            Strategy::Immediate => vec![(f64::NEG_INFINITY, f64::INFINITY)],
            Strategy::Pasted { base, table } => {
                let mut all = base.stop_set();
                for (_, t) in table {
                    all.extend(t.stop_set());
                }
                merge(all)
            }
        }
    }
}

/// Monte-Carlo estimate of an expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    /// Paths that were neither cut off by `max_time` / the discount floor
    /// nor lost through an inaccessible truncation.
    pub n_effective: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Estimate {
    fn from_samples(samples: &[(f64, bool)], cfg: &SimConfig) -> Estimate {
        let n = samples.len();
        // shifted by the first sample so that constant samples are exact
        let first = samples.first().map_or(0.0, |s| s.0);
        let mut sum = 0.0;
        for s in samples {
            sum += s.0 - first;
        }
        let mean = first + sum / n as f64;
        let mut ss = 0.0;
        for s in samples {
            ss += (s.0 - mean) * (s.0 - mean);
        }
        let std_error = if n > 1 { (ss / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 };
        Estimate {
            mean,
            std_error,
            n_effective: samples.iter().filter(|s| s.1).count(),
            n_paths: n,
            dt: cfg.dt,
            seed: cfg.seed,
        }
    }
}

/// Coefficients on the fine mesh of the fundamental pair, interpolated
/// linearly along the path.
#[derive(Debug)]
struct Tables {
    x: Vec<f64>,
    /// Per cell: `[b, b', s, s', r, r']` at the left end.
    cells: Vec<[f64; 6]>,
    constant: bool,
    mesh: Mesh,
    lo: f64,
    hi: f64,
    left_abs: bool,
    right_abs: bool,
    cell_lo: f64,
    cell_hi: f64,
}

#[derive(Debug, Clone, Copy)]
enum Mesh {
    Uniform { x0: f64, inv_h: f64 },
    General,
}

#[derive(Debug, Clone, Copy, Default)]
struct Local {
    b: f64,
    s: f64,
    r: f64,
}

impl Tables {
    fn new(fp: &FundamentalPair) -> Tables {
        let f = fp.fine();
        let g = &fp.grid;
        let n = g.len();
        let s: Vec<f64> = f.sigma2.iter().map(|v| v.sqrt()).collect();
        let nf = f.x.len();
        let cells: Vec<[f64; 6]> = (0..nf - 1)
            .map(|k| {
                let h = f.x[k + 1] - f.x[k];
                let d = |v: &[f64]| (v[k + 1] - v[k]) / h;
                [f.b[k], d(&f.b), s[k], d(&s), f.r[k], d(&f.r)]
            })
            .collect();
        let flat = |v: &[f64]| v.iter().all(|y| *y == v[0]);
        let h0 = f.x[1] - f.x[0];
        let uniform = f.x.windows(2).all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-9 * h0);
        let constant = flat(&f.b) && flat(&s) && flat(&f.r);
        let mesh = if uniform {
            Mesh::Uniform { x0: f.x[0], inv_h: 1.0 / h0 }
        } else {
            Mesh::General
        };
        Tables {
            x: f.x.clone(),
            cells,
            constant,
            mesh,
            lo: g.x(0),
            hi: g.x(n - 1),
            left_abs: g.left_absorbing(),
            right_abs: g.right_absorbing(),
            cell_lo: g.x(1) - g.x(0),
            cell_hi: g.x(n - 1) - g.x(n - 2),
        }
    }

    fn locate(&self, x: f64, mut k: usize) -> usize {
        let last = self.x.len() - 2;
        match self.mesh {
            Mesh::Uniform { x0, inv_h } => (((x - x0) * inv_h).max(0.0) as usize).min(last),
            Mesh::General => {
                while k > 0 && x < self.x[k] {
                    k -= 1;
                }
                while k < last && x > self.x[k + 1] {
                    k += 1;
                }
                k
            }
        }
    }

    fn local(&self, x: f64, k: usize) -> Local {
        let c = &self.cells[k];
        if self.constant {
            return Local { b: c[0], s: c[2], r: c[4] };
        }
        let u = (x - self.x[k]).clamp(0.0, self.x[k + 1] - self.x[k]);
        Local {
            b: c[0] + c[1] * u,
            s: c[2] + c[3] * u,
            r: c[4] + c[5] * u,
        }
    }

    fn at(&self, v: &[f64], x: f64, k: usize) -> f64 {
        let (x0, x1) = (self.x[k], self.x[k + 1]);
        let w = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        v[k] + (v[k + 1] - v[k]) * w
    }
}

/// Lazily simulated batch of paths from `x0`.
#[derive(Debug, Clone)]
pub struct PathBatch {
    tables: Arc<Tables>,
    pub x0: f64,
    pub cfg: SimConfig,
    pub warnings: Vec<String>,
}

pub fn simulate_paths(fp: &FundamentalPair, x0: f64, cfg: SimConfig) -> Result<PathBatch, MonteCarloError> {
    if !(cfg.dt > 0.0 && cfg.max_time > 0.0 && cfg.n_paths > 0) {
        return Err(MonteCarloError::Config(format!(
            "dt = {}, max_time = {}, n_paths = {}",
            cfg.dt, cfg.max_time, cfg.n_paths
        )));
    }
    let tables = Tables::new(fp);
    if !(tables.lo <= x0 && x0 <= tables.hi) {
        return Err(MonteCarloError::NotInterior(x0));
    }
    let mut warnings = Vec::new();
    let r_max = fp.fine().r.iter().fold(0.0f64, |m, v| m.max(*v));
    if cfg.dt * r_max > 0.1 {
        warnings.push(format!("dt·sup r = {} exceeds 0.1", cfg.dt * r_max));
    }
    Ok(PathBatch {
        tables: Arc::new(tables),
        x0,
        cfg,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Wall {
    Stop,
    Absorb,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Stopped(f64),
    Absorbed(f64),
    Exited(f64),
    Censored,
}

struct Walker<'a> {
    tab: &'a Tables,
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    x: f64,
    k: usize,
    here: Local,
    t: f64,
    lam: f64,
    /// `∫ e^{−Λ} h dt` when a running reward table is attached.
    running: f64,
    h: Option<&'a [f64]>,
}

impl<'a> Walker<'a> {
    fn new(batch: &'a PathBatch, path: usize, h: Option<&'a [f64]>) -> Walker<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch.cfg.seed);
        rng.set_stream(path as u64);
        let tab = &*batch.tables;
        let k = tab.locate(batch.x0, tab.x.len() / 2);
        Walker {
            tab,
            cfg: &batch.cfg,
            rng,
            x: batch.x0,
            k,
            here: tab.local(batch.x0, k),
            t: 0.0,
            lam: 0.0,
            running: 0.0,
            h,
        }
    }

    fn discount(&self) -> f64 {
        (-self.lam).exp()
    }

    /// Moves to `y` over the fraction `theta` of a step.
    fn land(&mut self, y: f64, ky: usize, theta: f64, hx: f64) {
        let dt = theta * self.cfg.dt;
        let next = self.tab.local(y, ky);
        let d0 = self.discount_if_running();
        self.lam += 0.5 * dt * (self.here.r + next.r);
        if let Some(h) = self.h {
            let hy = self.tab.at(h, y, ky);
            self.running += 0.5 * dt * (d0 * hx + self.discount() * hy);
        }
        self.t += dt;
        self.x = y;
        self.k = ky;
        self.here = next;
    }

    fn discount_if_running(&self) -> f64 {
        if self.h.is_some() {
            self.discount()
        } else {
            0.0
        }
    }

    /// Runs until the path enters `set`, reaches an end of the span, or is
    /// cut off.
    fn run(&mut self, set: &[(f64, f64)]) -> Result<Outcome, MonteCarloError> {
        let x = self.x;
        if set.iter().any(|&(a, b)| a <= x && x <= b) {
            return Ok(Outcome::Stopped(x));
        }
        let gap_lo = set.iter().filter(|iv| iv.1 < x).map(|iv| iv.1).fold(f64::NEG_INFINITY, f64::max);
        let gap_hi = set.iter().filter(|iv| iv.0 > x).map(|iv| iv.0).fold(f64::INFINITY, f64::min);
        let tab = self.tab;
        let lower = if gap_lo >= tab.lo {
            (gap_lo, Wall::Stop)
        } else {
            (tab.lo, if tab.left_abs { Wall::Absorb } else { Wall::Exit })
        };
        let upper = if gap_hi <= tab.hi {
            (gap_hi, Wall::Stop)
        } else {
            (tab.hi, if tab.right_abs { Wall::Absorb } else { Wall::Exit })
        };
        let sdt = self.cfg.dt.sqrt();
        // with constant coefficients the cell only matters for `h`
        let track = !tab.constant || self.h.is_some();
        let max_steps = (self.cfg.max_time / self.cfg.dt).ceil() as u64;
        let mut steps = (self.t / self.cfg.dt) as u64;
        loop {
            if steps >= max_steps || self.lam > DISCOUNT_CUTOFF {
                return Ok(Outcome::Censored);
            }
            steps += 1;
            let (x, k) = (self.x, self.k);
            let Local { b, s, .. } = self.here;
            let hx = self.h.map_or(0.0, |h| tab.at(h, x, k));
            let z: f64 = self.rng.sample(StandardNormal);
            let y = x + b * self.cfg.dt + s * sdt * z;
            let slack = 8.0 * s * sdt + b.abs() * self.cfg.dt;
            let escaped = (!tab.left_abs && y < tab.lo - 10.0 * tab.cell_lo - slack)
                || (!tab.right_abs && y > tab.hi + 10.0 * tab.cell_hi + slack);
            if !y.is_finite() || escaped {
                return Err(MonteCarloError::StepSizeUnstable { x, t: self.t });
            }
            let hit = if y <= lower.0 {
                Some(lower)
            } else if y >= upper.0 {
                Some(upper)
            } else if self.cfg.bridge_correction {
                let s2dt = s * s * self.cfg.dt;
                let mut bridged = None;
                for wall in [lower, upper] {
                    let (d1, d2) = ((x - wall.0).abs(), (y - wall.0).abs());
                    let e = 2.0 * d1 * d2 / s2dt;
                    if e < 40.0 && self.rng.random::<f64>() < (-e).exp() {
                        bridged = Some(wall);
                        break;
                    }
                }
                bridged
            } else {
                None
            };
            match hit {
                None => {
                    let ky = if track { tab.locate(y, k) } else { k };
                    self.land(y, ky, 1.0, hx);
                }
                Some((w, kind)) => {
                    let (d1, d2) = ((x - w).abs(), (y - w).abs());
                    let theta = if d1 + d2 > 0.0 { d1 / (d1 + d2) } else { 1.0 };
                    let kw = if track { tab.locate(w, k) } else { k };
                    self.land(w, kw, theta, hx);
                    return Ok(match kind {
                        Wall::Stop => Outcome::Stopped(w),
                        Wall::Absorb => Outcome::Absorbed(w),
                        Wall::Exit => Outcome::Exited(w),
                    });
                }
            }
        }
    }

    fn play(&mut self, strat: &Strategy) -> Result<Outcome, MonteCarloError> {
        match strat {
            Strategy::Pasted { base, table } => {
                let out = self.play(base)?;
                if let Outcome::Stopped(x) = out {
                    if let Some((_, next)) = table.iter().find(|(l, _)| (x - l).abs() <= 1e-12 * (1.0 + l.abs())) {
                        return self.play(next);
                    }
                }
                Ok(out)
            }
            s => self.run(&s.stop_set()),
        }
    }
}

impl PathBatch {
    fn per_path<F>(&self, f: F) -> Result<Vec<(f64, bool)>, MonteCarloError>
    where
        F: Fn(usize) -> Result<(f64, bool), MonteCarloError> + Sync + Send,
    {
        (0..self.cfg.n_paths).into_par_iter().map(f).collect()
    }

    /// Positions at time `t`; absorbed or exited paths stay where they ended.
    pub fn positions_at(&self, t: f64) -> Result<Vec<f64>, MonteCarloError> {
        let mut cfg = self.cfg;
        cfg.max_time = t;
        let batch = PathBatch {
            cfg,
            ..self.clone()
        };
        let xs = batch.per_path(|i| {
            let mut w = Walker::new(&batch, i, None);
            w.run(&[])?;
            Ok((w.x, true))
        })?;
        Ok(xs.into_iter().map(|p| p.0).collect())
    }
}

fn payoff_of(out: Outcome, disc: f64, payoff: &Reward) -> (f64, bool) {
    let g = payoff.f_bar.grid.as_ref();
    match out {
        Outcome::Stopped(x) => (disc * payoff.f_at(x), true),
        Outcome::Absorbed(x) => {
            let f = if x <= g.x(0) { payoff.f[0] } else { payoff.f[payoff.f.len() - 1] };
            (disc * f, true)
        }
        Outcome::Exited(_) | Outcome::Censored => (0.0, false),
    }
}

/// `E[e^{−Λ_τ} f(X_τ) 1{τ < ∞}]`.
pub fn evaluate_strategy(paths: &PathBatch, strat: &Strategy, payoff: &Reward) -> Result<Estimate, MonteCarloError> {
    strat.validate()?;
    let samples = paths.per_path(|i| {
        let mut w = Walker::new(paths, i, None);
        let out = w.play(strat)?;
        Ok(payoff_of(out, w.discount(), payoff))
    })?;
    Ok(Estimate::from_samples(&samples, &paths.cfg))
}

/// Stop on the region where `v = f`; with `localize = Some((a, b))`, also
/// stop on leaving `]a, b[`.
pub fn tau_star_strategy(sol: &ValueSolution, localize: Option<(f64, f64)>) -> Strategy {
    let mut set = sol.tau_star_region.clone();
    if let Some((a, b)) = localize {
        set.push((f64::NEG_INFINITY, a));
        set.push((b, f64::INFINITY));
    }
    let set = merge(set);
    match set.as_slice() {
        [] => Strategy::Never,
        [(l, a), (b, h)] if *l == f64::NEG_INFINITY && *h == f64::INFINITY => Strategy::TwoSided(*a, *b),
        _ => Strategy::StopAtSet(set),
    }
}

fn merge(mut set: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    set.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in set {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Composite strategy: run `base`, and on stopping at a target level continue
/// with that level's strategy. Returns warnings for targets the base cannot
/// stop at.
pub fn paste_strategies(
    base: Strategy,
    targets: Vec<(f64, Strategy)>,
) -> Result<(Strategy, Vec<String>), MonteCarloError> {
    if base == Strategy::Never {
        return Ok((Strategy::Never, Vec::new()));
    }
    let set = base.stop_set();
    let mut warnings = Vec::new();
    for (l, _) in &targets {
        if !set.iter().any(|&(a, b)| a <= *l && *l <= b) {
            warnings.push(format!("target level {l} is not in the base stopping set"));
        }
    }
    let table: Vec<(f64, Strategy)> = targets.into_iter().filter(|t| t.1 != Strategy::Immediate).collect();
    let out = if table.is_empty() {
        base
    } else {
        Strategy::Pasted {
            base: Box::new(base),
            table,
        }
    };
    out.validate()?;
    Ok((out, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DynkinReport {
    pub lhs: Estimate,
    pub rhs: f64,
    pub z_score: f64,
}

/// Checks `R_h(x0) = E[∫₀^τ e^{−Λ} h dt + e^{−Λ_τ} R_h(X_τ)]`. Leaving the
/// truncated span counts as stopping; the potential is that of `h` on the
/// span, for which the identity is exact.
pub fn verify_dynkin(
    fp: &FundamentalPair,
    h: &Expr,
    x0: f64,
    strat: &Strategy,
    cfg: SimConfig,
) -> Result<DynkinReport, MonteCarloError> {
    strat.validate()?;
    let pot = potential_ac(fp, h)?.r;
    let f = fp.fine();
    let h_tab: Vec<f64> = f.x.iter().map(|&x| h.eval(x).unwrap_or(0.0)).collect();
    let batch = simulate_paths(fp, x0, cfg)?;
    let r_at = |x: f64| pot.eval(x);
    let samples = batch.per_path(|i| {
        let mut w = Walker::new(&batch, i, Some(&h_tab));
        let out = w.play(strat)?;
        let tail = match out {
            Outcome::Stopped(x) | Outcome::Absorbed(x) | Outcome::Exited(x) => w.discount() * r_at(x),
            Outcome::Censored => 0.0,
        };
        Ok((w.running + tail, out != Outcome::Censored))
    })?;
    let lhs = Estimate::from_samples(&samples, &cfg);
    let rhs = pot.eval(x0);
    let z_score = (lhs.mean - rhs) / lhs.std_error.max(1e-6 * (1.0 + rhs.abs()));
    Ok(DynkinReport { lhs, rhs, z_score })
}

/// Monte-Carlo `E[e^{−Λ_T} 1{X_T = lo}]` and `E[e^{−Λ_T} 1{X_T = hi}]` for
/// the exit time `T` of `]lo, hi[`.
pub fn laplace_hitting_mc(
    fp: &FundamentalPair,
    x0: f64,
    lo: f64,
    hi: f64,
    cfg: SimConfig,
) -> Result<(Estimate, Estimate), MonteCarloError> {
    let strat = Strategy::TwoSided(lo, hi);
    strat.validate()?;
    let batch = simulate_paths(fp, x0, cfg)?;
    let samples = batch.per_path(|i| {
        let mut w = Walker::new(&batch, i, None);
        let out = w.play(&strat)?;
        let d = w.discount();
        // pack the side into the sign; both sides are recovered below
        Ok(match out {
            Outcome::Stopped(x) if x <= lo => (-d, true),
            Outcome::Stopped(_) => (d, true),
            _ => (0.0, false),
        })
    })?;
    let low: Vec<(f64, bool)> = samples.iter().map(|s| ((-s.0).max(0.0), s.1)).collect();
    let high: Vec<(f64, bool)> = samples.iter().map(|s| (s.0.max(0.0), s.1)).collect();
    Ok((Estimate::from_samples(&low, &cfg), Estimate::from_samples(&high, &cfg)))
}

/// Reward built from a grid function; used to evaluate strategies against
/// candidate value functions.
pub fn reward_from(w: &GridFunction) -> Reward {
    Reward::from_grid(w.clone(), None, None)
}
