//! Least concave majorant of points in the `(s, g)` plane, with an anchor
//! at `s = 0` and a terminal ray.

use serde::Serialize;

/// One linear piece `g = a + b s` on `[s_lo, s_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub s_lo: f64,
    pub s_hi: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hull {
    /// Point indices of the vertices, `None` for the anchor.
    pub vertices: Vec<Option<usize>>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HullError {
    #[error("duplicate abscissa s = {0}")]
    Degenerate(f64),
}

/// Concave majorant of `(s_i, g_i)` (strictly increasing `s_i > 0`) and of
/// the anchor `(0, lim_a)`, whose slope tends to `lim_b`.
pub fn majorant(s: &[f64], g: &[f64], lim_a: f64, lim_b: f64) -> Result<Hull, HullError> {
    if let Some(w) = s.windows(2).find(|w| w[1] <= w[0]) {
        return Err(HullError::Degenerate(w[1]));
    }
    // tangent vertex of the terminal ray: last argmax of g − lim_b s
    let mut best = lim_a;
    let mut last: Option<usize> = None;
    for i in 0..s.len() {
        let v = g[i] - lim_b * s[i];
        if v >= best - 1e-13 * v.abs().max(best.abs()) {
            best = best.max(v);
            last = Some(i);
        }
    }
    let end = last.map_or(0, |i| i + 1);
    let pt = |k: Option<usize>| match k {
        None => (0.0, lim_a),
        Some(i) => (s[i], g[i]),
    };
    let mut stack: Vec<Option<usize>> = vec![None];
    for i in 0..end {
        let (sc, gc) = (s[i], g[i]);
        while stack.len() >= 2 {
            let (sa, ga) = pt(stack[stack.len() - 2]);
            let (sb, gb) = pt(stack[stack.len() - 1]);
            // drop b when it lies on or below the chord a–c
            if (gb - ga) * (sc - sa) <= (gc - ga) * (sb - sa) {
                stack.pop();
            } else {
                break;
            }
        }
        stack.push(Some(i));
    }
    let mut edges = Vec::with_capacity(stack.len());
    for w in stack.windows(2) {
        let (sa, ga) = pt(w[0]);
        let (sb, gb) = pt(w[1]);
        let b = (gb - ga) / (sb - sa);
        edges.push(Edge {
            s_lo: sa,
            s_hi: sb,
            a: ga - b * sa,
            b,
        });
    }
    let (st, gt) = pt(*stack.last().unwrap());
    edges.push(Edge {
        s_lo: st,
        s_hi: f64::INFINITY,
        a: gt - lim_b * st,
        b: lim_b,
    });
    Ok(Hull { vertices: stack, edges })
}

impl Hull {
    /// Index of the edge whose half-open range `[s_lo, s_hi)` holds `s`.
    pub fn edge_index(&self, s: f64) -> usize {
        let k = self.edges.partition_point(|e| e.s_hi <= s);
        k.min(self.edges.len() - 1)
    }

    pub fn eval(&self, s: f64) -> f64 {
        let e = &self.edges[self.edge_index(s)];
        e.a + e.b * s
    }
}

#[cfg(test)]
/// Minimum of `a + b s0` over `a + b s_k ≥ g_k`, `a ≥ lim_a`, `b ≥ lim_b`
/// by enumerating every pair of active constraints.
pub(crate) fn brute_force(s: &[f64], g: &[f64], lim_a: f64, lim_b: f64, s0: f64) -> f64 {
    let n = s.len();
    let feasible = |a: f64, b: f64| {
        a >= lim_a - 1e-12 * (1.0 + lim_a.abs())
            && b >= lim_b - 1e-12 * (1.0 + lim_b.abs())
            && (0..n).all(|k| a + b * s[k] >= g[k] - 1e-11 * (1.0 + g[k].abs()))
    };
    let mut cands = vec![(lim_a, lim_b)];
    for k in 0..n {
        cands.push((lim_a, (g[k] - lim_a) / s[k]));
        cands.push((g[k] - lim_b * s[k], lim_b));
        for l in k + 1..n {
            let b = (g[l] - g[k]) / (s[l] - s[k]);
            cands.push((g[k] - b * s[k], b));
        }
    }
    cands
        .into_iter()
        .filter(|(a, b)| feasible(*a, *b))
        .map(|(a, b)| a + b * s0)
        .fold(f64::INFINITY, f64::min)
}
