//! Gauss–Legendre and periodic trapezoid rules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// `n`-point rule from Newton iteration on `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Composite rule over `[a, b]` split into `panels` equal panels.
    pub fn composite<T: Real, F: Fn(T) -> T>(&self, f: &F, a: T, b: T, panels: usize) -> T {
        let two = T::one() + T::one();
        let h = (b - a) / T::from(panels).unwrap();
        let mut total = T::zero();
        for k in 0..panels {
            let lo = a + h * T::from(k).unwrap();
            let mid = lo + h / two;
            let mut acc = T::zero();
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                acc = acc + T::from(*w).unwrap() * f(mid + h / two * T::from(*x).unwrap());
            }
            total = total + acc * h / two;
        }
        total
    }

    /// Composite nodes and weights over `[a, b]`, for tensor rules.
    pub fn composite_points(&self, a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
        let h = (b - a) / panels as f64;
        let mut xs = Vec::with_capacity(panels * self.nodes.len());
        let mut ws = Vec::with_capacity(panels * self.nodes.len());
        for k in 0..panels {
            let mid = a + h * (k as f64 + 0.5);
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                xs.push(mid + 0.5 * h * x);
                ws.push(0.5 * h * w);
            }
        }
        (xs, ws)
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre with panel doubling until successive estimates
/// differ by at most `max(abs_tol, rel_tol |I|)`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<f64> {
    let rule = GaussLegendre::new(20);
    let mut panels = 4;
    let mut prev = rule.composite(&f, a, b, panels);
    loop {
        panels *= 2;
        let cur = rule.composite(&f, a, b, panels);
        let change = (cur - prev).abs();
        if change <= abs_tol.max(rel_tol * cur.abs()) {
            return Ok(cur);
        }
        if panels >= max_panels {
            return Err(Error::Quadrature {
                achieved: change,
                panels,
            });
        }
        prev = cur;
    }
}

/// Equally spaced nodes on the circle with weight `2 pi / n`.
pub fn trapezoid_points(n: usize) -> (Vec<f64>, f64) {
    let h = 2.0 * PI / n as f64;
    ((0..n).map(|k| -PI + h * k as f64).collect(), h)
}
