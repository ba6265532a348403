//! Working grids and sampled functions on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Node placement rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Uniform,
    /// Uniform in `ln(x - origin)`.
    Log,
}

/// Strictly increasing abscissae covering the truncated span.
///
/// When an endpoint is absorbing it is itself a node (the first or last one);
/// every other node lies in the open state interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<f64>,
    breakpoints: Vec<usize>,
    left_absorbing: bool,
    right_absorbing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub lo: f64,
    pub hi: f64,
    pub n_nodes: usize,
    pub spacing: Spacing,
    /// Origin of the log map (`x - origin > 0` on the span).
    pub log_origin: f64,
    pub breakpoints: Vec<f64>,
    pub left_absorbing: bool,
    pub right_absorbing: bool,
}

impl Grid {
    /// Lays out `n_nodes` base nodes on `[lo, hi]` and merges in the
    /// breakpoints that fall strictly inside.
    pub fn layout(l: &GridLayout) -> Result<Grid, String> {
        if !(l.lo < l.hi) || !l.lo.is_finite() || !l.hi.is_finite() {
            return Err(format!("invalid grid span [{}, {}]", l.lo, l.hi));
        }
        if l.n_nodes < 3 {
            return Err("a grid needs at least 3 nodes".into());
        }
        let n = l.n_nodes;
        let mut nodes: Vec<f64> = match l.spacing {
            Spacing::Uniform => (0..n)
                .map(|i| l.lo + (l.hi - l.lo) * i as f64 / (n - 1) as f64)
                .collect(),
            Spacing::Log => {
                let (a, b) = (l.lo - l.log_origin, l.hi - l.log_origin);
                if !(a > 0.0) {
                    return Err(format!(
                        "log spacing needs the span to lie right of {}",
                        l.log_origin
                    ));
                }
                let (la, lb) = (a.ln(), b.ln());
                (0..n)
                    .map(|i| {
                        if i == 0 {
                            l.lo
                        } else if i == n - 1 {
                            l.hi
                        } else {
                            l.log_origin + (la + (lb - la) * i as f64 / (n - 1) as f64).exp()
                        }
                    })
                    .collect()
            }
        };
        let mut bps: Vec<f64> = l
            .breakpoints
            .iter()
            .copied()
            .filter(|b| *b > l.lo && *b < l.hi)
            .collect();
        bps.sort_by(f64::total_cmp);
        bps.dedup();
        for &b in &bps {
            let k = nodes.partition_point(|x| *x < b);
            let h = nodes[k] - nodes[k - 1];
            if (nodes[k] - b).abs() <= 1e-6 * h {
                nodes[k] = b;
            } else if (b - nodes[k - 1]).abs() <= 1e-6 * h {
                nodes[k - 1] = b;
            } else {
                nodes.insert(k, b);
            }
        }
        // at least three nodes strictly between consecutive marked points
        let mut marks: Vec<f64> = vec![l.lo];
        marks.extend(&bps);
        marks.push(l.hi);
        for w in marks.windows(2) {
            let i0 = nodes.partition_point(|x| *x < w[0]);
            let i1 = nodes.partition_point(|x| *x < w[1]);
            let inside = i1 - i0 - 1;
            if inside < 3 {
                let extra: Vec<f64> = (1..4).map(|j| w[0] + (w[1] - w[0]) * j as f64 / 4.0).collect();
                nodes.splice(i0 + 1..i1, extra);
            }
        }
        let breakpoints = bps
            .iter()
            .map(|b| nodes.partition_point(|x| *x < *b))
            .collect();
        let g = Grid {
            nodes,
            breakpoints,
            left_absorbing: l.left_absorbing,
            right_absorbing: l.right_absorbing,
        };
        g.check()?;
        Ok(g)
    }

    /// Grid from explicit nodes; used by tests and sub-grids.
    pub fn from_nodes(nodes: Vec<f64>, breakpoints: &[f64]) -> Result<Grid, String> {
        let idx = breakpoints
            .iter()
            .map(|b| {
                nodes
                    .iter()
                    .position(|x| x == b)
                    .ok_or_else(|| format!("breakpoint {b} is not a node"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let g = Grid {
            nodes,
            breakpoints: idx,
            left_absorbing: false,
            right_absorbing: false,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<(), String> {
        if self.nodes.len() < 3 {
            return Err("a grid needs at least 3 nodes".into());
        }
        if let Some(w) = self.nodes.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(format!("grid nodes not strictly increasing at {} .. {}", w[0], w[1]));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn left_trunc(&self) -> f64 {
        self.nodes[0]
    }

    pub fn right_trunc(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn left_absorbing(&self) -> bool {
        self.left_absorbing
    }

    pub fn right_absorbing(&self) -> bool {
        self.right_absorbing
    }

    /// Indices of nodes that carry a reward breakpoint.
    pub fn breakpoint_indices(&self) -> &[usize] {
        &self.breakpoints
    }

    pub fn is_breakpoint(&self, i: usize) -> bool {
        self.breakpoints.binary_search(&i).is_ok()
    }

    /// Cell `[x_i, x_{i+1}]` containing `x` (clamped to the span).
    pub fn cell(&self, x: f64) -> usize {
        let k = self.nodes.partition_point(|y| *y <= x);
        k.clamp(1, self.nodes.len() - 1) - 1
    }

    /// Index of the node closest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        let i = self.cell(x);
        if (x - self.nodes[i]).abs() <= (self.nodes[i + 1] - x).abs() {
            i
        } else {
            i + 1
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.left_trunc() && x <= self.right_trunc()
    }
}

/// Values with one-sided slopes at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub left_slope: Vec<f64>,
    pub right_slope: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, left_slope: Vec<f64>, right_slope: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        assert_eq!(left_slope.len(), grid.len());
        assert_eq!(right_slope.len(), grid.len());
        GridFunction {
            grid,
            values,
            left_slope,
            right_slope,
        }
    }

    /// Samples `f` returning `(value, left slope, right slope)` at each node.
    pub fn from_fn(grid: Arc<Grid>, mut f: impl FnMut(f64) -> (f64, f64, f64)) -> Self {
        let n = grid.len();
        let (mut v, mut l, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &x in grid.nodes() {
            let (a, b, c) = f(x);
            v.push(a);
            l.push(b);
            r.push(c);
        }
        GridFunction::new(grid, v, l, r)
    }

    /// Slopes by second-order finite differences. Nodes listed in `kinks`
    /// get separate one-sided slopes from their own side only.
    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>, kinks: &[usize]) -> Self {
        let n = grid.len();
        let x = grid.nodes();
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        let is_kink = |i: usize| kinks.contains(&i);
        for i in 0..n {
            // backward three-point estimate (uses i-2, i-1, i)
            let back = if i >= 2 && !(is_kink(i - 1)) {
                three_point(x[i - 2], x[i - 1], x[i], values[i - 2], values[i - 1], values[i], x[i])
            } else if i >= 1 {
                (values[i] - values[i - 1]) / (x[i] - x[i - 1])
            } else {
                f64::NAN
            };
            let fwd = if i + 2 < n && !(is_kink(i + 1)) {
                three_point(x[i], x[i + 1], x[i + 2], values[i], values[i + 1], values[i + 2], x[i])
            } else if i + 1 < n {
                (values[i + 1] - values[i]) / (x[i + 1] - x[i])
            } else {
                f64::NAN
            };
            let central = if i >= 1 && i + 1 < n {
                three_point(x[i - 1], x[i], x[i + 1], values[i - 1], values[i], values[i + 1], x[i])
            } else {
                f64::NAN
            };
            if is_kink(i) || i == 0 || i == n - 1 {
                left[i] = if back.is_nan() { fwd } else { back };
                right[i] = if fwd.is_nan() { back } else { fwd };
            } else {
                left[i] = central;
                right[i] = central;
            }
        }
        GridFunction::new(grid, values, left, right)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.grid.x(i)
    }

    /// Largest absolute node value (the scale used by tolerances).
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Cubic Hermite interpolation from node values and inner slopes.
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.grid.cell(x);
        let (x0, x1) = (self.grid.x(i), self.grid.x(i + 1));
        hermite(
            x0,
            x1,
            self.values[i],
            self.values[i + 1],
            self.right_slope[i],
            self.left_slope[i + 1],
            x,
        )
        .0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| f(*v)).collect(),
            left_slope: self
                .values
                .iter()
                .zip(&self.left_slope)
                .map(|(v, s)| df(*v, *s))
                .collect(),
            right_slope: self
                .values
                .iter()
                .zip(&self.right_slope)
                .map(|(v, s)| df(*v, *s))
                .collect(),
        }
    }

    /// `a*self + b*other` with slopes combined linearly.
    pub fn combine(&self, a: f64, other: &GridFunction, b: f64) -> GridFunction {
        let lin = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| a * u + b * v).collect();
        GridFunction {
            grid: self.grid.clone(),
            values: lin(&self.values, &other.values),
            left_slope: lin(&self.left_slope, &other.left_slope),
            right_slope: lin(&self.right_slope, &other.right_slope),
        }
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|v| c * v, |_, s| c * s)
    }
}

/// Derivative at `at` of the quadratic through three points.
pub(crate) fn three_point(x0: f64, x1: f64, x2: f64, y0: f64, y1: f64, y2: f64, at: f64) -> f64 {
    let l0 = ((at - x1) + (at - x2)) / ((x0 - x1) * (x0 - x2));
    let l1 = ((at - x0) + (at - x2)) / ((x1 - x0) * (x1 - x2));
    let l2 = ((at - x0) + (at - x1)) / ((x2 - x0) * (x2 - x1));
    y0 * l0 + y1 * l1 + y2 * l2
}

/// Cubic Hermite value and derivative on `[x0, x1]`.
pub(crate) fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> (f64, f64) {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let v = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
    let dh00 = (6.0 * t2 - 6.0 * t) / h;
    let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
    let dh01 = (-6.0 * t2 + 6.0 * t) / h;
    let dh11 = 3.0 * t2 - 2.0 * t;
    let d = dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1;
    (v, d)
}
