//! Poisson-kernel functionals and the binomial / multinomial moments they
//! represent.
//!
//! `mu_rho` is the wrapped-Cauchy law with density
//! `(1 - rho^2) / (2 pi (1 - 2 rho cos theta + rho^2))` and Fourier
//! coefficients `rho^|k|`. With `Xi, Theta_j ~ mu_{sqrt r}`:
//!
//! * `F_{l,r}(a) = E |(1 - a) + a e^{i Xi}|^{2l}`
//! * `L_{l,d,r}(p) = E |sum_j p_j e^{i Theta_j}|^{2l}`
//!
//! Expanding the powers and integrating term by term gives
//! `L_{l,d,r}(p) = E[r^{|N - N'|_1 / 2}]` for independent
//! `N, N' ~ Multinomial(l, p)`, which [`l1_moment_exact`] evaluates directly.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, trapezoid_points, GaussLegendre};
use crate::scalar::Real;
use crate::seed::{stream_rng, SimRng};

/// Tail mass exponent kept outside quadrature windows: `exp(-45)`.
const WINDOW_EXPONENT: f64 = 45.0;
/// Evaluation budget for the tensor rules.
const TENSOR_BUDGET: f64 = 2.5e8;
/// Pair-count dynamic programs stop above this many inner operations.
const PAIR_WORK_LIMIT: u128 = 2_000_000_000;
pub const COMPOSITION_LIMIT: u128 = 100_000;

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("rho must lie in (0,1), got {rho}")))
    }
}

fn check_r(r: f64) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("r must lie in (0,1), got {r}")))
    }
}

/// Probability vector with entries `>= 0` summing to one within `1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("simplex point needs at least one coordinate"));
        }
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("simplex entries must be finite and nonnegative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("simplex entries sum to {total}, not 1")));
        }
        Ok(SimplexPoint(p))
    }

    pub fn uniform(d: usize) -> Self {
        SimplexPoint(vec![1.0 / d as f64; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn support(&self) -> Vec<f64> {
        self.0.iter().copied().filter(|&x| x > 0.0).collect()
    }
}

/// `P_rho(theta) / (2 pi)`.
pub fn kernel_density<T: Real>(rho: T, theta: T) -> Result<T> {
    let one = T::one();
    if !(rho > T::zero() && rho < one) {
        return Err(invalid("rho must lie in (0,1)"));
    }
    let pi = T::from(PI).unwrap();
    if theta.abs() > pi * T::from(1.0 + 1e-12).unwrap() {
        return Err(invalid("theta must lie in [-pi, pi]"));
    }
    Ok(density_unchecked(rho, theta))
}

fn density_unchecked<T: Real>(rho: T, theta: T) -> T {
    let one = T::one();
    let two = one + one;
    let pi = T::from(PI).unwrap();
    (one - rho * rho) / (two * pi * (one - two * rho * theta.cos() + rho * rho))
}

/// Wrapped-Cauchy draw by the half-angle transform of a uniform variate.
pub fn sample_kernel<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> f64 {
    let c = (1.0 - rho) / (1.0 + rho);
    let u: f64 = rng.random();
    let theta = 2.0 * (c * (PI * (u - 0.5)).tan()).atan();
    theta.clamp(-PI, PI)
}

/// `int cos(k theta) mu_rho(d theta)` by quadrature.
pub fn fourier_coefficient(rho: f64, k: u32) -> Result<f64> {
    check_rho(rho)?;
    let half = integrate(
        |t| (k as f64 * t).cos() * density_unchecked(rho, t),
        0.0,
        PI,
        1e-15,
        1e-14,
        1 << 16,
    )?;
    Ok(2.0 * half)
}

/// Half-width `h` beyond which `exp(-l * c (1 - cos h)) <= exp(-45)`, or `pi`.
fn window(l: u32, c: f64) -> f64 {
    if c <= 0.0 || l == 0 {
        return PI;
    }
    let need = WINDOW_EXPONENT / (l as f64 * c);
    if need >= 2.0 {
        PI
    } else {
        (1.0 - need).acos()
    }
}

/// `F_{l,r}(alpha)` by windowed composite Gauss–Legendre.
pub fn f_functional(l: u32, r: f64, alpha: f64) -> Result<f64> {
    check_r(r)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let a = 4.0 * alpha * (1.0 - alpha);
    if l == 0 || a == 0.0 {
        return Ok(1.0);
    }
    let rho = r.sqrt();
    // |1 - alpha + alpha e^{it}|^2 = 1 - 4 alpha (1 - alpha) sin^2(t/2)
    let h = window(l, a / 2.0);
    let lf = l as f64;
    let integrand = |t: f64| {
        let s = (0.5 * t).sin();
        density_unchecked(rho, t) * (lf * (-a * s * s).ln_1p()).exp()
    };
    Ok(2.0 * integrate(integrand, 0.0, h, 1e-14, 1e-13, 1 << 18)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LMethod {
    Trivial,
    /// Periodic trapezoid tensor rule with `n` nodes per axis and a rigorous
    /// aliasing bound.
    Trapezoid { n: usize, error_bound: f64 },
    /// Trapezoid on one axis, windowed Gauss–Legendre on the rest.
    Windowed { outer: usize, inner: usize, last_change: f64 },
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LValue {
    pub value: f64,
    /// Standard error; present for Monte Carlo only.
    pub se: Option<f64>,
    pub method: LMethod,
}

#[derive(Debug, Clone, Copy)]
pub struct LOptions {
    pub mc_samples: usize,
    pub seed: u64,
    /// Allow deterministic quadrature in four dimensions.
    pub tensor_d4: bool,
}

impl Default for LOptions {
    fn default() -> Self {
        LOptions {
            mc_samples: 1_000_000,
            seed: 0,
            tensor_d4: true,
        }
    }
}

pub fn l_functional(l: u32, d: usize, r: f64, p: &SimplexPoint) -> Result<LValue> {
    l_functional_with(l, d, r, p, LOptions::default())
}

/// `L_{l,d,r}(p)`: quadrature for up to three (optionally four) coordinates
/// with positive mass, Monte Carlo beyond.
pub fn l_functional_with(l: u32, d: usize, r: f64, p: &SimplexPoint, opts: LOptions) -> Result<LValue> {
    check_r(r)?;
    if p.dim() != d {
        return Err(invalid(format!("p has {} entries, expected d = {d}", p.dim())));
    }
    let q = p.support();
    if l == 0 || q.len() <= 1 {
        return Ok(LValue {
            value: 1.0,
            se: None,
            method: LMethod::Trivial,
        });
    }
    let rho = r.sqrt();
    let k = q.len();
    let max_quad_dim = if opts.tensor_d4 { 4 } else { 3 };
    if k <= max_quad_dim {
        if let Some(n) = trapezoid_size(l, k, rho) {
            return Ok(l_trapezoid(l, &q, rho, n));
        }
    }
    if k <= 3 {
        return l_windowed(l, &q, rho);
    }
    Ok(l_monte_carlo(l, &q, rho, opts.mc_samples, opts.seed))
}

/// Smallest `n` whose aliasing bound `(1 + 2 rho^{n-l} / (1 - rho^n))^k - 1`
/// is below `1e-13`, if the tensor grid fits the budget.
fn trapezoid_size(l: u32, k: usize, rho: f64) -> Option<usize> {
    let target = (1.0f64 + 1e-13).ln() / k as f64;
    let eps = target.exp_m1();
    let extra = ((eps / 2.5).ln() / rho.ln()).ceil().max(1.0) as usize;
    let n = l as usize + extra + 1;
    ((n as f64).powi(k as i32) <= TENSOR_BUDGET).then_some(n)
}

fn aliasing_bound(l: u32, k: usize, rho: f64, n: usize) -> f64 {
    let e = 2.0 * rho.powi(n as i32 - l as i32) / (1.0 - rho.powi(n as i32));
    (1.0 + e).powi(k as i32) - 1.0
}

fn l_trapezoid(l: u32, q: &[f64], rho: f64, n: usize) -> LValue {
    let k = q.len();
    let (nodes, h) = trapezoid_points(n);
    let w: Vec<f64> = nodes.iter().map(|&t| h * density_unchecked(rho, t)).collect();
    let (c, s): (Vec<f64>, Vec<f64>) = nodes.iter().map(|t| (t.cos(), t.sin())).unzip();

    fn rec(
        depth: usize,
        q: &[f64],
        l: i32,
        re: f64,
        im: f64,
        wt: f64,
        w: &[f64],
        c: &[f64],
        s: &[f64],
    ) -> f64 {
        if depth == q.len() {
            return wt * (re * re + im * im).powi(l);
        }
        let mut acc = 0.0;
        for i in 0..w.len() {
            acc += rec(
                depth + 1,
                q,
                l,
                re + q[depth] * c[i],
                im + q[depth] * s[i],
                wt * w[i],
                w,
                c,
                s,
            );
        }
        acc
    }

    let value: f64 = (0..n)
        .into_par_iter()
        .map(|i| rec(1, q, l as i32, q[0] * c[i], q[0] * s[i], w[i], &w, &c, &s))
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    LValue {
        value,
        se: None,
        method: LMethod::Trapezoid {
            n,
            error_bound: aliasing_bound(l, k, rho, n),
        },
    }
}

/// `ln |sum_j q_j e^{i t_j}|^2` computed as `ln1p(-4 sum q_j q_k sin^2((t_j - t_k)/2))`.
fn log_modulus_sq(q: &[f64], t: &[f64]) -> f64 {
    let mut x = 0.0;
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            let s = (0.5 * (t[a] - t[b])).sin();
            x += q[a] * q[b] * s * s;
        }
    }
    (-4.0 * x).ln_1p()
}

fn l_windowed(l: u32, q: &[f64], rho: f64) -> Result<LValue> {
    let k = q.len();
    let pmin = q.iter().copied().fold(f64::INFINITY, f64::min);
    let h = window(l, 2.0 * pmin * pmin);
    let rule = GaussLegendre::new(16);
    let lf = l as f64;
    let (outer_q, inner_q) = q.split_last().unwrap();
    let _ = outer_q;

    let eval = |n_outer: usize, panels: usize| -> f64 {
        let (nodes, step) = trapezoid_points(n_outer);
        let (xs, ws) = rule.composite_points(-h, h, panels);
        let parts: Vec<f64> = nodes
            .par_iter()
            .map(|&to| {
                let wo = step * density_unchecked(rho, to);
                let mut t = vec![0.0; k];
                t[k - 1] = to;
                let inner: Vec<(f64, f64)> = xs
                    .iter()
                    .zip(&ws)
                    .map(|(&x, &wx)| {
                        let ang = to + x;
                        (ang, wx * density_unchecked(rho, wrap(ang)))
                    })
                    .collect();
                let mut acc = 0.0;
                match inner_q.len() {
                    1 => {
                        for &(a, wa) in &inner {
                            t[0] = a;
                            acc += wa * (lf * log_modulus_sq(q, &t)).exp();
                        }
                    }
                    2 => {
                        for &(a, wa) in &inner {
                            t[0] = a;
                            for &(b, wb) in &inner {
                                t[1] = b;
                                acc += wa * wb * (lf * log_modulus_sq(q, &t)).exp();
                            }
                        }
                    }
                    _ => unreachable!("windowed route handles two or three coordinates"),
                }
                wo * acc
            })
            .collect();
        parts.into_iter().sum()
    };

    let (mut n_outer, mut panels) = (64usize, 4usize);
    let mut prev = eval(n_outer, panels);
    for _ in 0..6 {
        n_outer *= 2;
        panels *= 2;
        let cur = eval(n_outer, panels);
        let change = (cur - prev).abs();
        if change <= 1e-14f64.max(1e-10 * cur.abs()) {
            return Ok(LValue {
                value: cur,
                se: None,
                method: LMethod::Windowed {
                    outer: n_outer,
                    inner: panels * rule.nodes.len(),
                    last_change: change,
                },
            });
        }
        prev = cur;
    }
    Err(Error::Quadrature {
        achieved: f64::NAN,
        panels,
    })
}

fn wrap(t: f64) -> f64 {
    let mut x = (t + PI).rem_euclid(2.0 * PI) - PI;
    if x < -PI {
        x = -PI;
    }
    x
}

fn l_monte_carlo(l: u32, q: &[f64], rho: f64, samples: usize, seed: u64) -> LValue {
    const BLOCK: usize = 10_000;
    let blocks = samples.div_ceil(BLOCK).max(1);
    let sums: Vec<(f64, f64, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng: SimRng = stream_rng(seed, &[0x1F0C, b as u64]);
            let count = BLOCK.min(samples - b * BLOCK);
            let mut t = vec![0.0; q.len()];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                for x in t.iter_mut() {
                    *x = sample_kernel(rho, &mut rng);
                }
                let v = (l as f64 * log_modulus_sq(q, &t)).exp();
                s1 += v;
                s2 += v * v;
            }
            (s1, s2, count)
        })
        .collect();
    let (s1, s2, n) = sums
        .iter()
        .fold((0.0, 0.0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    let nf = n as f64;
    let mean = s1 / nf;
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    LValue {
        value: mean,
        se: Some((var / nf).sqrt()),
        method: LMethod::MonteCarlo { samples: n },
    }
}

/// `E[z^N] = (1 - p + p z)^l` for `N ~ Binomial(l, p)`.
pub fn binom_pgf(l: u32, p: f64, z: Complex64) -> Complex64 {
    (Complex64::new(1.0 - p, 0.0) + z * p).powu(l)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] + (k as f64).ln();
    }
    out
}

/// `Binomial(n, p)` masses for `n = 0..=l`, as rows.
fn binomial_rows(l: usize, p: f64, lf: &[f64]) -> Vec<Vec<f64>> {
    (0..=l)
        .map(|n| {
            (0..=n)
                .map(|x| {
                    if p <= 0.0 {
                        return if x == 0 { 1.0 } else { 0.0 };
                    }
                    if p >= 1.0 {
                        return if x == n { 1.0 } else { 0.0 };
                    }
                    (lf[n] - lf[x] - lf[n - x] + x as f64 * p.ln() + (n - x) as f64 * (-p).ln_1p()).exp()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxBinomial {
    /// `sum_{i,j} P(N=i) P(N'=j) r^{max(i,j)}`.
    pub enumeration: f64,
    /// `(1 - p + p sqrt r)^{2l} F_{l,r}(p sqrt r / (1 - p + p sqrt r))`.
    pub closed_form: f64,
}

pub fn max_binomial_exact(l: u32, p: f64, r: f64) -> Result<MaxBinomial> {
    check_r(r)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p must lie in [0,1], got {p}")));
    }
    if l > 2000 {
        return Err(Error::TooLarge {
            what: "binomial enumeration length",
            size: l as u128,
            limit: 2000,
        });
    }
    let n = l as usize;
    let lf = ln_factorials(n);
    let pmf = binomial_rows(n, p, &lf).pop().unwrap();
    let mut enumeration = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            enumeration += pmf[i] * pmf[j] * r.powi(i.max(j) as i32);
        }
    }
    let base = 1.0 - p + p * r.sqrt();
    let closed_form = base.powi(2 * l as i32) * f_functional(l, r, p * r.sqrt() / base)?;
    Ok(MaxBinomial {
        enumeration,
        closed_form,
    })
}

/// `E[w(N_1, N'_1) ... w(N_d, N'_d)]` for independent multinomial count
/// vectors, built coordinate by coordinate from conditional binomials.
fn pair_product_moment<W: Fn(usize, usize) -> f64>(l: u32, p: &[f64], w: W) -> Result<f64> {
    let q: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    let n = l as usize;
    let work = q.len() as u128 * ((n as u128 + 1).pow(4) / 4 + 1);
    if work > PAIR_WORK_LIMIT {
        return Err(Error::TooLarge {
            what: "pair-count dynamic program",
            size: work,
            limit: PAIR_WORK_LIMIT,
        });
    }
    let lf = ln_factorials(n);
    // mass[a][b]: remaining counts a, b for the two vectors
    let mut mass = vec![vec![0.0; n + 1]; n + 1];
    mass[n][n] = 1.0;
    let mut tail: f64 = q.iter().sum();
    for (idx, &pj) in q.iter().enumerate() {
        if idx + 1 == q.len() {
            let mut total = 0.0;
            for a in 0..=n {
                for b in 0..=n {
                    if mass[a][b] != 0.0 {
                        total += mass[a][b] * w(a, b);
                    }
                }
            }
            return Ok(total);
        }
        let cond = (pj / tail).min(1.0);
        tail -= pj;
        let rows = binomial_rows(n, cond, &lf);
        let mut next = vec![vec![0.0; n + 1]; n + 1];
        for a in 0..=n {
            for b in 0..=n {
                let m = mass[a][b];
                if m == 0.0 {
                    continue;
                }
                for x in 0..=a {
                    let px = rows[a][x];
                    if px == 0.0 {
                        continue;
                    }
                    for y in 0..=b {
                        next[a - x][b - y] += m * px * rows[b][y] * w(x, y);
                    }
                }
            }
        }
        mass = next;
    }
    Ok(1.0)
}

fn compositions(l: u32, d: usize) -> u128 {
    // C(l + d - 1, d - 1), saturating
    let (n, k) = (l as u128 + d as u128 - 1, d as u128 - 1);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul(n - i) / (i + 1);
        if c > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    c
}

/// `E[r^{sum_j min(N_j, N'_j)}]` for independent `N, N' ~ Multinomial(l, p)`.
pub fn min_multinomial_exact(l: u32, d: usize, p: &SimplexPoint, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(invalid(format!("r must be positive, got {r}")));
    }
    if p.dim() != d {
        return Err(invalid(format!("p has {} entries, expected d = {d}", p.dim())));
    }
    let size = compositions(l, d);
    if size > COMPOSITION_LIMIT {
        return Err(Error::TooLarge {
            what: "multinomial support (use l_functional instead)",
            size,
            limit: COMPOSITION_LIMIT,
        });
    }
    pair_product_moment(l, p.as_slice(), |x, y| r.powi(x.min(y) as i32))
}

/// `E[rho^{|N - N'|_1}]` for independent `N, N' ~ Multinomial(l, p)`; equals
/// `L_{l,d,rho^2}(p)`.
pub fn l1_moment_exact(l: u32, p: &SimplexPoint, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    pair_product_moment(l, p.as_slice(), |x, y| rho.powi(x.abs_diff(y) as i32))
}
