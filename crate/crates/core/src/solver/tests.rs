use super::*;
use crate::config::RunConfig;
use crate::excessive::{check_excessive, EndpointValues};
use crate::run::{prepare, Prepared};
use std::sync::Arc;

const TOL: f64 = 1e-9;

pub(crate) fn fixture(name: &str) -> RunConfig {
    let text = match name {
        "ex1" => include_str!("../../../../fixtures/ex1.json"),
        "ex2" => include_str!("../../../../fixtures/ex2.json"),
        "ex2plus" => include_str!("../../../../fixtures/ex2plus.json"),
        "ex3" => include_str!("../../../../fixtures/ex3.json"),
        "ex5" => include_str!("../../../../fixtures/ex5.json"),
        "call" => include_str!("../../../../fixtures/call.json"),
        _ => panic!("unknown fixture {name}"),
    };
    RunConfig::from_json(text).unwrap()
}

fn setup(name: &str) -> Prepared {
    prepare(&fixture(name)).unwrap()
}

fn with_nodes(name: &str, n: usize) -> Prepared {
    let mut cfg = fixture(name);
    cfg.grid.n_nodes = n;
    prepare(&cfg).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn ex3_value(x: f64) -> f64 {
    let e = 1f64.exp();
    if x <= 0.0 {
        x.exp()
    } else if x <= 1.0 {
        (e - 2.0) / (e - 1.0 / e) * (-x).exp() + (2.0 - 1.0 / e) / (e - 1.0 / e) * x.exp()
    } else {
        2.0
    }
}

fn a_l() -> f64 {
    1.0 + 2f64.sqrt() + 2.0 * (2f64.sqrt() - 1.0).ln()
}

fn a_r() -> f64 {
    1.0 + 2f64.sqrt()
}

#[test]
fn envelope_of_step_rewards() {
    let p = setup("ex3");
    let g = &p.fp.grid;
    let (i0, i1) = (g.nearest(0.0), g.nearest(1.0));
    assert_eq!(p.reward.f_bar.values[i0], 1.0);
    assert_eq!(p.reward.f_bar.values[i1], 2.0);
    assert_eq!(p.reward.f[i0], 0.0);
    assert_eq!(p.reward.f_bar.values[i1 + 1], 2.0);
    let p2 = setup("ex2");
    let j = p2.fp.grid.nearest(1.0);
    assert_eq!(p2.reward.f_bar.values[j], 1.0);
    assert_eq!(p2.reward.f_bar.values[j - 1], 0.0);
    let c = setup("call");
    assert!(c.reward.f.iter().zip(&c.reward.f_bar.values).all(|(a, b)| a == b));
}

#[test]
fn finiteness_limits() {
    let p = setup("ex1");
    let fin = check_finiteness(&p.fp, &p.reward);
    assert!(fin.finite);
    assert!(rel(fin.lim_a, 2.0) < 1e-6, "{}", fin.lim_a);
    assert!(rel(fin.lim_b, 0.5) < 1e-6, "{}", fin.lim_b);
    let p3 = setup("ex3");
    let fin = check_finiteness(&p3.fp, &p3.reward);
    assert!(fin.lim_a.abs() < 1e-12 && fin.lim_b.abs() < 1e-12, "{fin:?}");

    // f = ψ² under Brownian motion: f/ψ = e^x is unbounded
    let mut cfg = fixture("ex3");
    cfg.problem.reward = "exp(2*x)".into();
    cfg.problem.breakpoints.clear();
    let q = prepare(&cfg).unwrap();
    let fin = check_finiteness(&q.fp, &q.reward);
    assert!(!fin.finite && fin.lim_b.is_infinite());
    assert!(matches!(q.solve(TOL), Err(SolveError::InfiniteValue { .. })));
}

#[test]
fn tail_limit_cases() {
    let geo: Vec<f64> = (0..10).map(|k| 3.0 - 0.5f64.powi(k)).collect();
    assert!((tail_limit(&geo) - 3.0).abs() < 1e-12);
    assert_eq!(tail_limit(&[1.0, 2.0, 3.0, 4.0]), f64::INFINITY);
    assert_eq!(tail_limit(&[0.0, 1.0, 0.0, 1.0, 0.5]), 1.0);
    assert_eq!(tail_limit(&[2.0, 2.0, 2.0]), 2.0);
}

#[test]
fn ex3_value_and_regions() {
    let p = setup("ex3");
    let sol = p.solve(TOL).unwrap();
    let g = &p.fp.grid;
    let mut worst = 0.0f64;
    for i in 0..g.len() {
        worst = worst.max(rel(sol.v.values[i], ex3_value(g.x(i))));
    }
    assert!(worst < 1e-6, "{worst}");
    let pv = sol.value_at(&p.fp, 0.5);
    assert!(rel(pv.v, ex3_value(0.5)) < 1e-9, "{pv:?}");
    assert!((pv.v - 1.330202).abs() < 1e-3);

    assert_eq!(sol.stopping_intervals, vec![(0.0, 0.0), (1.0, f64::INFINITY)]);
    assert_eq!(sol.tau_star_region, vec![(1.0, f64::INFINITY)]);
    assert_eq!(sol.waiting.len(), 2);
    let e = 1f64.exp();
    let w = &sol.waiting[1];
    assert_eq!((w.c, w.d), (0.0, 1.0));
    // the solver's φ, ψ are e^{∓x} since the reference point is 0
    assert!(rel(w.a, (e - 2.0) / (e - 1.0 / e)) < 1e-6);
    assert!(rel(w.b, (2.0 - 1.0 / e) / (e - 1.0 / e)) < 1e-6);
    assert!(sol.waiting[0].a.abs() < 1e-12 && rel(sol.waiting[0].b, 1.0) < 1e-9);
    assert!(!sol.diagnostics.f_is_usc && !sol.diagnostics.optimal);
}

#[test]
fn ex5_free_boundaries() {
    let p = setup("ex5");
    let sol = p.solve(TOL).unwrap();
    let inner: Vec<_> = sol.waiting.iter().filter(|w| w.c > 0.0).collect();
    assert_eq!(inner.len(), 1);
    let w = inner[0];
    let h = 1e-3;
    assert!((w.c - a_l()).abs() <= h + 1e-12, "{}", w.c);
    assert!((w.d - a_r()).abs() <= h + 1e-12, "{}", w.d);
    assert!(rel(w.a, 0.5 * a_l().exp()) < 1e-4);
    assert!(rel(w.b, 0.5 * (-a_l()).exp()) < 1e-4);
    // the other waiting interval is ]−∞, 0[ with v = e^x
    assert_eq!(sol.waiting[0].d, 0.0);
    assert_eq!(sol.tau_star_region.len(), 2);
    assert_eq!(sol.tau_star_region[0].0, 0.0);
    assert!(sol.diagnostics.optimal);

    let sf = smooth_fit_report(&p.fp, &p.reward, &sol);
    let pts: Vec<_> = sf.iter().filter(|s| s.x > 0.1).collect();
    assert_eq!(pts.len(), 2);
    assert!((pts[0].x - a_l()).abs() < 1e-5, "{}", pts[0].x);
    assert!((pts[1].x - a_r()).abs() < 1e-5, "{}", pts[1].x);
    assert!(pts.iter().all(|s| s.equality && s.ok == Some(true)));
}

#[test]
fn ex5_point_values() {
    let p = setup("ex5");
    let sol = p.solve(TOL).unwrap();
    let pv = sol.value_at(&p.fp, 1.5);
    assert!(rel(pv.a, 0.5 * a_l().exp()) < 1e-4);
    assert!(rel(pv.b, 0.5 * (-a_l()).exp()) < 1e-4);
    assert!(rel(pv.v, (1.5 - a_l()).cosh()) < 1e-6);
    assert_eq!(pv.contacts.len(), 2);
    assert!((pv.contacts[0] - a_l()).abs() < 1e-3 && (pv.contacts[1] - a_r()).abs() < 1e-3);

    let deep = sol.value_at(&p.fp, 5.0);
    assert!(rel(deep.v, 17.0) < 1e-12);
    assert_eq!(deep.contacts, vec![5.0]);

    let g = &p.fp.grid;
    let mut state = 12345u64;
    for _ in 0..100 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let i = (state >> 33) as usize % g.len();
        let pv = sol.value_at(&p.fp, g.x(i));
        assert!((pv.v - sol.v.values[i]).abs() <= 1e-10 * (1.0 + pv.v.abs()));
    }
}

#[test]
fn ex1_never_stop() {
    let p = setup("ex1");
    let sol = p.solve(TOL).unwrap();
    assert_eq!(sol.waiting.len(), 1);
    let w = &sol.waiting[0];
    assert_eq!((w.c, w.d), (0.0, f64::INFINITY));
    assert!(rel(w.a, 2.0) < 1e-4 && rel(w.b, 0.5) < 1e-4, "{w:?}");
    assert!(sol.stopping.iter().all(|s| !s));
    let m = -(2f64.sqrt());
    for i in (0..p.fp.len()).step_by(50) {
        let x = p.fp.grid.x(i);
        assert!(rel(sol.v.values[i], 2.0 * x.powf(m) + 0.5 * x.powf(-m)) < 1e-4);
    }
    assert_eq!(sol.diagnostics.left_ratio_vanishes, Some(false));
    assert_eq!(sol.diagnostics.right_ratio_vanishes, Some(false));
}

#[test]
fn ex2_value_and_tau_star() {
    let p = setup("ex2");
    let sol = p.solve(TOL).unwrap();
    let n = 2f64.sqrt();
    for i in 0..p.fp.len() {
        let x = p.fp.grid.x(i);
        assert!(rel(sol.v.values[i], x.powf(n)) < 1e-3, "{x}");
    }
    assert_eq!(sol.stopping_intervals, vec![(1.0, 1.0)]);
    assert_eq!(sol.tau_star_region, vec![(1.0, 1.0)]);
    assert_eq!(sol.diagnostics.right_ratio_vanishes, Some(false));
    assert!(!sol.diagnostics.optimal);
}

#[test]
fn ex2plus_absorbed_brownian_motion() {
    let p = setup("ex2plus");
    let sol = p.solve(TOL).unwrap();
    assert_eq!(sol.v_at_left, Some(0.0));
    for i in 1..p.fp.len() {
        let x = p.fp.grid.x(i);
        if x < 10.0 {
            assert!(rel(sol.v.values[i], (-x).exp()) < 1e-3, "{x}");
        }
    }
    assert_eq!(sol.diagnostics.left_endpoint_usc, Some(false));
    assert!(!sol.diagnostics.optimal);
    assert!(sol.stopping[1..].iter().all(|s| !s));
}

#[test]
fn call_smooth_fit() {
    let p = setup("call");
    let sol = p.solve(TOL).unwrap();
    let (s2, b, r): (f64, f64, f64) = (0.09, 0.02, 0.05);
    let qa = 0.5 * s2;
    let qb = b - 0.5 * s2;
    let n = (-qb + (qb * qb + 4.0 * qa * r).sqrt()) / (2.0 * qa);
    let d = n / (n - 1.0);
    assert_eq!(sol.waiting.len(), 1);
    let w = &sol.waiting[0];
    assert_eq!(w.c, 0.0);
    let sf = smooth_fit_report(&p.fp, &p.reward, &sol);
    assert_eq!(sf.len(), 1);
    assert!(rel(sf[0].x, d) < 1e-4, "{} vs {d}", sf[0].x);
    assert!(sf[0].equality);
    // one-sided interval: A is the left limit, B from the value at d
    assert!(w.a.abs() < 1e-9);
    let bd = (sf[0].x - 1.0) / p.fp.psi_at(sf[0].x).0;
    assert!(rel(w.b, bd) < 1e-4, "{} {bd}", w.b);
}

#[test]
fn ex3_smooth_fit_skips_jumps() {
    let p = setup("ex3");
    let sol = p.solve(TOL).unwrap();
    let sf = smooth_fit_report(&p.fp, &p.reward, &sol);
    assert_eq!(sf.len(), 2);
    assert!(sf.iter().all(|s| !s.differentiable && s.ok.is_none()));
}

#[test]
fn verification_of_candidates() {
    let p = setup("ex5");
    let sol = p.solve(TOL).unwrap();
    let lims = (sol.lim_a, sol.lim_b);
    let rep = verify_solution(&p.fp, &p.reward, &sol.v, lims, (None, None));
    assert!(rep.all_ok, "{rep:?}");

    let u = GridFunction::new(
        p.fp.grid.clone(),
        p.reward.f_bar.values.iter().zip(p.fp.grid.nodes()).map(|(f, x)| if *x < 0.0 { x.exp() } else { *f }).collect(),
        p.reward.f_bar.left_slope.iter().zip(p.fp.grid.nodes()).map(|(d, x)| if *x <= 0.0 { x.exp() } else { *d }).collect(),
        p.reward.f_bar.right_slope.iter().zip(p.fp.grid.nodes()).map(|(d, x)| if *x < 0.0 { x.exp() } else { *d }).collect(),
    );
    let rep = verify_solution(&p.fp, &p.reward, &u, lims, (None, None));
    assert!(!rep.excessive_ok && !rep.all_ok);
    assert!((1.0..=2.0).contains(&rep.worst_positive.0));

    let w = sol.v.combine(1.0, &p.fp.phi, 0.1);
    let rep = verify_solution(&p.fp, &p.reward, &w, lims, (None, None));
    assert!(rep.majorant_ok && rep.excessive_ok && !rep.left_limit_ok && !rep.all_ok, "{rep:?}");
}

#[test]
fn solver_outputs_verify_and_are_excessive() {
    for name in ["ex1", "ex2", "ex2plus", "ex3", "ex5", "call"] {
        let p = setup(name);
        let sol = p.solve(TOL).unwrap();
        let rep = verify_solution(&p.fp, &p.reward, &sol.v, (sol.lim_a, sol.lim_b), (sol.v_at_left, sol.v_at_right));
        assert!(rep.all_ok, "{name}: {rep:?}");
        let ends = EndpointValues {
            left: sol.v_at_left,
            right: sol.v_at_right,
        };
        let ex = check_excessive(&p.prob, &p.fp, &sol.v, ends).unwrap();
        assert!(ex.verdict && !ex.disagreement, "{name}: {ex:?}");
    }
}

#[test]
fn idempotence() {
    for name in ["ex3", "ex5", "ex2plus"] {
        let p = setup(name);
        let sol = p.solve(TOL).unwrap();
        let again = Reward::from_grid(sol.v.clone(), p.reward.inner_left.map(|_| sol.v.values[0]), None);
        let mut again = again;
        if let Some(v0) = sol.v_at_left {
            again.f_bar.values[0] = v0;
            again.f[0] = v0;
            again.inner_left = Some(sol.v.values[0]);
        }
        let sol2 = solve(&p.prob, &p.fp, &again, TOL).unwrap();
        for i in 0..p.fp.len() {
            let (a, b) = (sol.v.values[i], sol2.v.values[i]);
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{name} {i}: {a} {b}");
        }
    }
}

#[test]
fn homogeneity_and_monotonicity() {
    let p = setup("ex5");
    let sol = p.solve(TOL).unwrap();
    for c in [0.5, 2.0, 10.0] {
        let sc = solve(&p.prob, &p.fp, &p.reward.scale(c), TOL).unwrap();
        assert_eq!(sc.stopping, sol.stopping);
        for i in 0..p.fp.len() {
            assert!((sc.v.values[i] - c * sol.v.values[i]).abs() <= 1e-10 * (1.0 + c * sol.v.values[i]));
        }
    }
    // f₂ = f + bump ≥ f
    let mut bigger = p.reward.clone();
    for (i, x) in p.fp.grid.nodes().iter().enumerate() {
        bigger.f_bar.values[i] += 0.3 * (-(x - 1.5) * (x - 1.5)).exp();
    }
    bigger.f = bigger.f_bar.values.clone();
    let big = solve(&p.prob, &p.fp, &bigger, TOL).unwrap();
    assert!(big.v.values.iter().zip(&sol.v.values).all(|(b, a)| *b >= *a - 1e-12));
}

#[test]
fn hull_against_vertex_enumeration_on_subgrid() {
    let p = setup("ex5");
    let fin = check_finiteness(&p.fp, &p.reward);
    let n = p.fp.len();
    let idx: Vec<usize> = (0..40).map(|k| 2000 + k * (n - 4001) / 39).collect();
    let s: Vec<f64> = idx.iter().map(|&i| p.fp.s(i)).collect();
    let g: Vec<f64> = idx.iter().map(|&i| p.reward.f_bar.values[i] / p.fp.phi.values[i]).collect();
    let h = majorant(&s, &g, fin.lim_a, fin.lim_b).unwrap();
    for k in 0..40 {
        let bf = hull::brute_force(&s, &g, fin.lim_a, fin.lim_b, s[k]);
        let i = idx[k];
        let (hv, bv) = (h.eval(s[k]) * p.fp.phi.values[i], bf * p.fp.phi.values[i]);
        assert!((hv - bv).abs() <= 1e-9 * (1.0 + bv.abs()), "{k}: {hv} {bv}");
    }
}

#[test]
fn region_formulas() {
    // compact waiting interval of ex5
    let p = setup("ex5");
    let sol = p.solve(TOL).unwrap();
    let w = sol.waiting.iter().find(|w| w.c > 0.0).unwrap();
    let (c, d) = (w.c, w.d);
    let (pc, pd) = (p.fp.phi_at(c).0, p.fp.phi_at(d).0);
    let (qc, qd) = (p.fp.psi_at(c).0, p.fp.psi_at(d).0);
    let (fc, fd) = (p.reward.f_at(c), p.reward.f_at(d));
    let den = pd * qc - pc * qd;
    assert!(rel(w.a, (fd * qc - fc * qd) / den) < 1e-6);
    assert!(rel(w.b, (pd * fc - pc * fd) / den) < 1e-6);

    // one-sided interval ]α, d[ of the call
    let p = setup("call");
    let sol = p.solve(TOL).unwrap();
    let w = &sol.waiting[0];
    let d = w.d;
    let b = (p.reward.f_at(d) - w.a * p.fp.phi_at(d).0) / p.fp.psi_at(d).0;
    assert!(rel(w.b, b) < 1e-6);
    assert!(rel(w.a + 1.0, sol.lim_a + 1.0) < 1e-12);
}

#[test]
fn running_reward_cases() {
    let p = with_nodes("ex3", 1601);
    let zero = Expr::parse("0").unwrap();
    let base = p.solve(TOL).unwrap();
    let rr = solve_with_running_reward(&p.prob, &p.fp, &zero, &p.reward, TOL).unwrap();
    assert_eq!(rr.v_total.values, base.v.values);

    let mut cfg = fixture("ex3");
    cfg.problem.reward = "0".into();
    cfg.problem.breakpoints.clear();
    let q = prepare(&cfg).unwrap();
    let h = Expr::parse("exp(-x^2)").unwrap();
    let rr = solve_with_running_reward(&q.prob, &q.fp, &h, &q.reward, TOL).unwrap();
    assert!(rr.sol.v.values.iter().all(|v| *v == 0.0));
    assert_eq!(rr.v_total.values, rr.potential.values);

    cfg.problem.reward = "3".into();
    let q = prepare(&cfg).unwrap();
    let one = Expr::parse("1").unwrap();
    let rr = solve_with_running_reward(&q.prob, &q.fp, &one, &q.reward, TOL).unwrap();
    for i in 0..q.fp.len() {
        assert!((rr.v_total.values[i] - 3.0).abs() < 1e-9);
        // ∫ e^{−|x−y|} dy over the truncated span
        let x = q.fp.grid.x(i);
        let exact = 2.0 - (-(x + 8.0)).exp() - (x - 8.0).exp();
        assert!((rr.potential.values[i] - exact).abs() < 1e-6, "{x}: {}", rr.potential.values[i]);
    }
    let _ = Arc::strong_count(&q.fp.grid);
}

