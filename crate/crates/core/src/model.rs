//! The stopping problem: coefficients, state interval, reward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ProblemConfig;
use crate::expr::{Breakpoints, EvalError, Expr, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Inaccessible,
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Left,
    Right,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cannot parse `{field}`: {source}")]
    Parse {
        field: &'static str,
        #[source]
        source: ParseError,
    },
    #[error("invalid state interval: {0}")]
    Interval(String),
    #[error("sigma vanishes or changes sign at x = {0}")]
    NonPositiveSigma(f64),
    #[error("discount rate {rate} at x = {x} lies below the floor {floor}")]
    RateBelowFloor { x: f64, rate: f64, floor: f64 },
    #[error("(1+|b|)/sigma^2 or r/sigma^2 is not integrable on [{0}, {1}]")]
    LocalIntegrabilityFailure(f64, f64),
    #[error("reward is negative ({value}) at x = {x}")]
    NegativeReward { x: f64, value: f64 },
    #[error("reward at the absorbing endpoint {0} is undefined; set it explicitly")]
    AbsorbingValueMissing(f64),
    #[error("{field}: {source}")]
    Eval {
        field: &'static str,
        #[source]
        source: EvalError,
    },
}

/// Validated stopping problem. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionProblem {
    pub alpha: f64,
    pub beta: f64,
    pub left: BoundaryKind,
    pub right: BoundaryKind,
    pub b: Expr,
    pub sigma: Expr,
    pub r: Expr,
    pub reward: Expr,
    pub breakpoints: Breakpoints,
    /// `f(alpha)` when alpha is absorbing.
    pub reward_at_left: Option<f64>,
    pub reward_at_right: Option<f64>,
    pub r_floor: f64,
    pub running_reward: Option<Expr>,
}

/// Coefficients sampled at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub b: f64,
    pub sigma2: f64,
    pub r: f64,
}

const LI_CUTOFF: f64 = 1e12;

/// Parses and validates a problem on its default probe grid.
pub fn build_problem(cfg: &ProblemConfig) -> Result<DiffusionProblem, ModelError> {
    let parse = |field: &'static str, text: &str| {
        Expr::parse_with(text, &cfg.constants).map_err(|source| ModelError::Parse { field, source })
    };
    let (alpha, beta) = (cfg.interval[0].0, cfg.interval[1].0);
    if alpha.is_nan() || beta.is_nan() || !(alpha < beta) {
        return Err(ModelError::Interval(format!("need alpha < beta, got [{alpha}, {beta}]")));
    }
    if cfg.left == BoundaryKind::Absorbing && !alpha.is_finite() {
        return Err(ModelError::Interval("an infinite endpoint cannot be absorbing".into()));
    }
    if cfg.right == BoundaryKind::Absorbing && !beta.is_finite() {
        return Err(ModelError::Interval("an infinite endpoint cannot be absorbing".into()));
    }
    if !(cfg.r_floor > 0.0) {
        return Err(ModelError::Interval(format!("r_floor must be positive, got {}", cfg.r_floor)));
    }
    let breakpoints = Breakpoints::new(cfg.breakpoints.clone(), alpha, beta).map_err(ModelError::Interval)?;
    let mut prob = DiffusionProblem {
        alpha,
        beta,
        left: cfg.left,
        right: cfg.right,
        b: parse("drift", &cfg.drift)?,
        sigma: parse("sigma", &cfg.sigma)?,
        r: parse("rate", &cfg.rate)?,
        reward: parse("reward", &cfg.reward)?,
        breakpoints,
        reward_at_left: cfg.reward_at_left,
        reward_at_right: cfg.reward_at_right,
        r_floor: cfg.r_floor,
        running_reward: cfg
            .running_reward
            .as_deref()
            .map(|t| parse("running_reward", t))
            .transpose()?,
    };
    if prob.left == BoundaryKind::Absorbing && prob.reward_at_left.is_none() {
        prob.reward_at_left = Some(
            prob.reward
                .eval(alpha)
                .map_err(|_| ModelError::AbsorbingValueMissing(alpha))?,
        );
    }
    if prob.right == BoundaryKind::Absorbing && prob.reward_at_right.is_none() {
        prob.reward_at_right = Some(
            prob.reward
                .eval(beta)
                .map_err(|_| ModelError::AbsorbingValueMissing(beta))?,
        );
    }
    for v in [prob.reward_at_left, prob.reward_at_right].into_iter().flatten() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(ModelError::NegativeReward {
                x: if Some(v) == prob.reward_at_left { alpha } else { beta },
                value: v,
            });
        }
    }
    let probe = prob.probe_points(2001);
    prob.validate_on(&probe)?;
    Ok(prob)
}

impl DiffusionProblem {
    pub fn kind(&self, end: End) -> BoundaryKind {
        match end {
            End::Left => self.left,
            End::Right => self.right,
        }
    }

    pub fn endpoint(&self, end: End) -> f64 {
        match end {
            End::Left => self.alpha,
            End::Right => self.beta,
        }
    }

    pub fn coefficients(&self, x: f64) -> Result<Coefficients, ModelError> {
        let ev = |field: &'static str, e: &Expr| e.eval(x).map_err(|source| ModelError::Eval { field, source });
        let s = ev("sigma", &self.sigma)?;
        Ok(Coefficients {
            b: ev("drift", &self.b)?,
            sigma2: s * s,
            r: ev("rate", &self.r)?,
        })
    }

    /// Interior points used to check the standing assumptions before a grid
    /// exists. Finite ends are approached geometrically.
    pub fn probe_points(&self, n: usize) -> Vec<f64> {
        let (a, b) = (self.alpha, self.beta);
        let lo_eps = |a: f64, w: f64| a + 1e-6 * w;
        match (a.is_finite(), b.is_finite()) {
            (true, true) => {
                let w = b - a;
                let (lo, hi) = (lo_eps(a, w), b - 1e-6 * w);
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            }
            (true, false) => {
                let w = a.abs().max(1.0);
                (0..n)
                    .map(|i| a + w * 10f64.powf(-6.0 + 12.0 * i as f64 / (n - 1) as f64))
                    .collect()
            }
            (false, true) => {
                let w = b.abs().max(1.0);
                (0..n)
                    .rev()
                    .map(|i| b - w * 10f64.powf(-6.0 + 12.0 * i as f64 / (n - 1) as f64))
                    .collect()
            }
            (false, false) => (0..n)
                .map(|i| -50.0 + 100.0 * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Checks the standing assumptions at the given sorted interior points.
    pub fn validate_on(&self, xs: &[f64]) -> Result<(), ModelError> {
        let mut prev: Option<(f64, f64)> = None;
        let mut li = Vec::with_capacity(xs.len());
        for &x in xs {
            if !(x > self.alpha && x < self.beta) {
                continue;
            }
            let s = self
                .sigma
                .eval(x)
                .map_err(|source| ModelError::Eval { field: "sigma", source })?;
            if s == 0.0 {
                return Err(ModelError::NonPositiveSigma(x));
            }
            if let Some((xp, sp)) = prev {
                if sp.signum() != s.signum() {
                    return Err(ModelError::NonPositiveSigma(self.sigma_root(xp, x)));
                }
            }
            prev = Some((x, s));
            let c = self.coefficients(x)?;
            if !(c.r >= self.r_floor) {
                return Err(ModelError::RateBelowFloor {
                    x,
                    rate: c.r,
                    floor: self.r_floor,
                });
            }
            let value = self
                .reward
                .eval(x)
                .map_err(|source| ModelError::Eval { field: "reward", source })?;
            if !(value >= 0.0) {
                return Err(ModelError::NegativeReward { x, value });
            }
            li.push((x, ((1.0 + c.b.abs()) / c.sigma2).max(c.r / c.sigma2)));
        }
        // composite trapezoid over runs of the probe grid
        let mut acc = 0.0;
        let mut start = li.first().map_or(0.0, |p| p.0);
        for w in li.windows(2) {
            acc += 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0);
            if !(acc < LI_CUTOFF) {
                return Err(ModelError::LocalIntegrabilityFailure(start, w[1].0));
            }
            if acc > 1.0 {
                acc = 0.0;
                start = w[1].0;
            }
        }
        Ok(())
    }

    fn sigma_root(&self, mut lo: f64, mut hi: f64) -> f64 {
        let sign = |x: f64| self.sigma.eval(x).map(f64::signum).unwrap_or(0.0);
        let s_lo = sign(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let s = sign(mid);
            if s == 0.0 {
                return mid;
            }
            if s == s_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Declared value of the reward at an absorbing endpoint.
    pub fn reward_at(&self, end: End) -> Option<f64> {
        match end {
            End::Left => self.reward_at_left,
            End::Right => self.reward_at_right,
        }
    }
}

/// Outcome of the explosion test at one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FellerReport {
    pub consistent: bool,
    /// `f64::INFINITY` when the integral diverges numerically.
    #[serde(serialize_with = "crate::io::ser_extended")]
    pub explosion_integral: f64,
    pub accessible: bool,
}

/// Feller's explosion integral `∫ (p(end) - p(y)) m(y) dy` toward `end`,
/// from a reference point `start` inside the interval.
///
/// Advisory: the declared boundary kind is never overridden.
pub fn feller_boundary_check(prob: &DiffusionProblem, end: End, start: f64) -> FellerReport {
    let target = prob.endpoint(end);
    let dir = if end == End::Left { -1.0 } else { 1.0 };
    // breakpoints approaching the end: geometric in the gap for finite ends,
    // doubling for infinite ones
    const LEVELS: usize = 48;
    let mut z = Vec::with_capacity(LEVELS + 1);
    z.push(start);
    for k in 1..=LEVELS {
        let next = if target.is_finite() {
            target + (start - target) * 0.5f64.powi(k as i32)
        } else {
            start + dir * 2f64.powi(k as i32)
        };
        z.push(next);
    }
    let accessible = explosion_integral(prob, &z);
    let declared_abs = prob.kind(end) == BoundaryKind::Absorbing;
    FellerReport {
        consistent: accessible.is_finite() == declared_abs,
        explosion_integral: accessible,
        accessible: accessible.is_finite(),
    }
}

fn explosion_integral(prob: &DiffusionProblem, z: &[f64]) -> f64 {
    const SUB: usize = 32;
    let q = |x: f64| -> Option<f64> {
        let c = prob.coefficients(x).ok()?;
        Some(c.b / c.sigma2)
    };
    let s2 = |x: f64| -> Option<f64> { prob.coefficients(x).ok().map(|c| c.sigma2) };
    // sample points of every level piece: log p', p' and sigma^2
    let mut xs = Vec::new();
    let mut log_dp = Vec::new();
    let mut acc = 0.0;
    let mut qprev = match q(z[0]) {
        Some(v) => v,
        None => return f64::INFINITY,
    };
    xs.push(z[0]);
    log_dp.push(0.0);
    for w in z.windows(2) {
        let h = (w[1] - w[0]) / SUB as f64;
        for j in 1..=SUB {
            let x1 = w[0] + h * j as f64;
            let xm = x1 - 0.5 * h;
            let (Some(qm), Some(q1)) = (q(xm), q(x1)) else {
                return f64::INFINITY;
            };
            acc += -2.0 * h / 6.0 * (qprev + 4.0 * qm + q1);
            qprev = q1;
            xs.push(x1);
            log_dp.push(acc);
        }
    }
    if log_dp.iter().any(|l| *l > 700.0) {
        return f64::INFINITY;
    }
    // scale increments toward the end, then the tail p(end) - p(x)
    let n = xs.len();
    let dp: Vec<f64> = log_dp.iter().map(|l| l.exp()).collect();
    let mut inc = vec![0.0; n];
    for i in 1..n {
        inc[i] = 0.5 * (dp[i] + dp[i - 1]) * (xs[i] - xs[i - 1]).abs();
    }
    let total: f64 = inc.iter().sum();
    let last_level: f64 = inc[n - SUB..].iter().sum();
    if !(total < LI_CUTOFF) || last_level > 1e-6 * total {
        return f64::INFINITY;
    }
    let mut tail = vec![0.0; n];
    for i in (0..n - 1).rev() {
        tail[i] = tail[i + 1] + inc[i + 1];
    }
    let mut integral = 0.0;
    let mut last = 0.0;
    let mut prev_val: Option<f64> = None;
    for i in 0..n {
        let Some(s2v) = s2(xs[i]) else {
            return f64::INFINITY;
        };
        let val = tail[i] * 2.0 / (s2v * dp[i]);
        if let Some(pv) = prev_val {
            let piece = 0.5 * (pv + val) * (xs[i] - xs[i - 1]).abs();
            integral += piece;
            if i >= n - SUB {
                last += piece;
            }
        }
        prev_val = Some(val);
    }
    if !(integral < LI_CUTOFF) || last > 1e-6 * integral.max(1e-300) {
        f64::INFINITY
    } else {
        integral
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Bound;
    use std::collections::BTreeMap;

    fn cfg(lo: f64, hi: f64, left: BoundaryKind, right: BoundaryKind, b: &str, s: &str, r: &str, f: &str) -> ProblemConfig {
        ProblemConfig {
            interval: [Bound(lo), Bound(hi)],
            left,
            right,
            constants: BTreeMap::new(),
            drift: b.into(),
            sigma: s.into(),
            rate: r.into(),
            reward: f.into(),
            breakpoints: vec![],
            reward_at_left: None,
            reward_at_right: None,
            r_floor: 1e-8,
            running_reward: None,
        }
    }

    use BoundaryKind::{Absorbing as Abs, Inaccessible as Inacc};
    const INF: f64 = f64::INFINITY;

    #[test]
    fn brownian_example_is_valid() {
        let mut c = cfg(-INF, INF, Inacc, Inacc, "0", "1", "0.5", "if(x<=0, 0, if(x<=1, 1, 2))");
        c.breakpoints = vec![0.0, 1.0];
        let p = build_problem(&c).unwrap();
        assert_eq!(p.breakpoints.points(), &[0.0, 1.0]);
    }

    #[test]
    fn geometric_brownian_is_valid() {
        let mut c = cfg(0.0, INF, Inacc, Inacc, "b*x", "s*x", "0.05", "max(x - 1, 0)");
        c.constants.insert("b".into(), 0.02);
        c.constants.insert("s".into(), 0.3);
        build_problem(&c).unwrap();
    }

    #[test]
    fn vanishing_sigma_is_located() {
        let c = cfg(0.0, 2.0, Inacc, Inacc, "0", "x-1", "1", "1");
        match build_problem(&c) {
            Err(ModelError::NonPositiveSigma(x)) => assert!((x - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_violations() {
        let c = cfg(-INF, INF, Inacc, Inacc, "0", "1", "0.5 + x", "1");
        assert!(matches!(build_problem(&c), Err(ModelError::RateBelowFloor { .. })));
        let c = cfg(-INF, INF, Inacc, Inacc, "0", "1", "1", "x");
        assert!(matches!(build_problem(&c), Err(ModelError::NegativeReward { .. })));
        let c = cfg(1.0, 0.0, Inacc, Inacc, "0", "1", "1", "1");
        assert!(matches!(build_problem(&c), Err(ModelError::Interval(_))));
        let c = cfg(-INF, INF, Inacc, Inacc, "0", "y", "1", "1");
        assert!(matches!(build_problem(&c), Err(ModelError::Parse { field: "sigma", .. })));
        let c = cfg(0.0, 1.0, Inacc, Inacc, "0", "(x - 0.5)^4 + 1e-30", "1", "1");
        assert!(matches!(
            build_problem(&c),
            Err(ModelError::LocalIntegrabilityFailure(..))
        ));
    }

    #[test]
    fn absorbing_value_defaults_to_expression() {
        let c = cfg(0.0, INF, Abs, Inacc, "0", "1", "0.5", "exp(-x)");
        let p = build_problem(&c).unwrap();
        assert_eq!(p.reward_at_left, Some(1.0));
        let c = cfg(0.0, INF, Abs, Inacc, "0", "1", "0.5", "1/x");
        assert!(matches!(build_problem(&c), Err(ModelError::AbsorbingValueMissing(_))));
    }

    #[test]
    fn deterministic_build() {
        let c = cfg(-INF, INF, Inacc, Inacc, "-x", "1", "0.5", "x^2");
        assert_eq!(build_problem(&c).unwrap(), build_problem(&c).unwrap());
    }

    #[test]
    fn feller_brownian_infinite_end_diverges() {
        let p = build_problem(&cfg(-INF, INF, Inacc, Inacc, "0", "1", "0.5", "1")).unwrap();
        let rep = feller_boundary_check(&p, End::Left, 0.0);
        assert!(rep.consistent);
        assert!(rep.explosion_integral.is_infinite());
    }

    #[test]
    fn feller_absorbed_brownian_at_zero() {
        let mut c = cfg(0.0, INF, Abs, Inacc, "0", "1", "0.5", "exp(-x)");
        c.reward_at_left = Some(0.0);
        let p = build_problem(&c).unwrap();
        let rep = feller_boundary_check(&p, End::Left, 1.0);
        assert!(rep.consistent);
        // oracle: p(x) = x, m = 2, integral of 2 y over (0, 1) = 1
        assert!((rep.explosion_integral - 1.0).abs() < 1e-3, "{}", rep.explosion_integral);
    }

    #[test]
    fn feller_flags_gbm_declared_absorbing() {
        let p = DiffusionProblem {
            left: Abs,
            reward_at_left: Some(1.0),
            ..build_problem(&cfg(0.0, INF, Inacc, Inacc, "0", "x", "1", "1")).unwrap()
        };
        // oracle: p' = 1, m = 2/y^2, the integral of y * 2/y^2 diverges
        let rep = feller_boundary_check(&p, End::Left, 1.0);
        assert!(!rep.consistent);
        assert!(!rep.accessible);
    }
}
