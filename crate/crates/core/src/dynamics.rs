//! Branch simulation and informative-time stabilization diagnostics.
//!
//! A branch evolves by `N_t = N_{t-1} + e_{J_t}` where `J_t` is drawn by the
//! policy from a fresh uniform mask. Depths whose mask meets the informative
//! block advance the informative clock `M_t`; reindexed by that clock, the
//! informative counts form `Z_n` and the imbalance `Delta_n = Z_n - (n/s) 1`.
//! Imbalance statistics are kept in scaled integers (`s Delta`, `s^2 V`) so the
//! one-step identity can be checked with exact equality.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{opportunity_rate, sample_mask, to_f64, Mask, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::policies::{select, shift, CountState, PolicySpec};
use crate::seed::{stream_rng, SimRng};

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub mask: Mask,
    pub chosen: usize,
    /// `N_t` after the split.
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InformativeRecord {
    pub n: usize,
    /// Depth `T_n` at which the `n`-th informative opportunity occurred.
    pub depth: usize,
    pub coord: usize,
    /// `Z_n` after the split.
    pub z: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub d: usize,
    pub s: usize,
    pub steps: Vec<StepRecord>,
    pub informative: Vec<InformativeRecord>,
    /// `M_t` for `t = 0..=len`.
    pub clock: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal_counts(&self) -> Vec<u32> {
        self.steps
            .last()
            .map(|r| r.counts.clone())
            .unwrap_or_else(|| vec![0; self.d])
    }

    /// `Z_n` for `n = 0..=M_len`, starting from the zero vector.
    pub fn z_path(&self) -> Vec<Vec<u32>> {
        let mut out = vec![vec![0; self.s]];
        out.extend(self.informative.iter().map(|r| r.z.clone()));
        out
    }

    /// Clock link `N_{t,j} = Z_{M_t,j}`, monotone clock, `sum Z_n = n`, the
    /// exact one-step identity and the bounded-jump property.
    pub fn check_invariants(&self) -> Result<()> {
        let s = self.s;
        let z_path = self.z_path();
        for (n, z) in z_path.iter().enumerate() {
            if z.iter().map(|&x| x as usize).sum::<usize>() != n {
                return Err(Error::Consistency(format!("sum Z_{n} != {n}")));
            }
        }
        for w in self.clock.windows(2) {
            if w[1] < w[0] || w[1] > w[0] + 1 {
                return Err(Error::Consistency("clock must advance by 0 or 1".into()));
            }
        }
        for rec in &self.steps {
            let mt = self.clock[rec.t];
            if rec.counts[..s] != z_path[mt][..] {
                return Err(Error::Consistency(format!("clock link fails at t={}", rec.t)));
            }
        }
        let jump_cap = (1.0 - 1.0 / s as f64).sqrt() + 1e-12;
        for n in 0..z_path.len() - 1 {
            let cur = imbalance(&z_path[n], n, s)?;
            let next = imbalance(&z_path[n + 1], n + 1, s)?;
            let j = self.informative[n].coord;
            if !one_step_identity(&cur, &next, j, s) {
                return Err(Error::Consistency(format!("one-step identity fails at n={n}")));
            }
            if (next.w - cur.w).abs() > jump_cap {
                return Err(Error::Consistency(format!("jump bound fails at n={n}")));
            }
        }
        Ok(())
    }
}

/// `s Delta_n`, `s^2 V_n` and `W_n = sqrt(V_n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalanceStats {
    pub scaled_delta: Vec<i64>,
    pub scaled_v: i64,
    pub w: f64,
}

pub fn imbalance(z: &[u32], n: usize, s: usize) -> Result<ImbalanceStats> {
    if z.len() != s {
        return Err(invalid(format!("Z has {} entries, expected {s}", z.len())));
    }
    let total: u64 = z.iter().map(|&x| x as u64).sum();
    if total != n as u64 {
        return Err(Error::Consistency(format!("sum Z = {total} but n = {n}")));
    }
    let scaled_delta: Vec<i64> = z.iter().map(|&x| s as i64 * x as i64 - n as i64).collect();
    let scaled_v = scaled_delta.iter().map(|x| x * x).sum::<i64>();
    Ok(ImbalanceStats {
        w: (scaled_v as f64).sqrt() / s as f64,
        scaled_delta,
        scaled_v,
    })
}

/// `s^2 V_{n+1} = s^2 V_n + 2 s (s Delta_{n,j}) + s (s - 1)`.
pub fn one_step_identity(cur: &ImbalanceStats, next: &ImbalanceStats, j: usize, s: usize) -> bool {
    let s = s as i64;
    next.scaled_v == cur.scaled_v + 2 * s * cur.scaled_delta[j] + s * (s - 1)
}

/// Single-branch stepper shared by the simulators.
pub struct Branch<'a> {
    model: &'a ModelConfig,
    policy: &'a PolicySpec,
    state: CountState,
}

impl<'a> Branch<'a> {
    pub fn new(model: &'a ModelConfig, policy: &'a PolicySpec) -> Self {
        Branch {
            model,
            policy,
            state: CountState::zeros(model.d),
        }
    }

    pub fn state(&self) -> &CountState {
        &self.state
    }

    /// One depth: draw a mask, split, return `(mask, chosen)`.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Mask, usize) {
        let mask = sample_mask(rng, self.model.d, self.model.m).expect("validated model");
        let j = select(self.policy, self.model, &self.state, &mask, rng);
        self.state.increment(j);
        (mask, j)
    }

    /// Advance to the next informative opportunity and split on it; the
    /// skipped depths do not touch the informative counts.
    pub fn informative_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        loop {
            let mask = sample_mask(rng, self.model.d, self.model.m).expect("validated model");
            if mask.informative_count(self.model.s) == 0 {
                continue;
            }
            let j = select(self.policy, self.model, &self.state, &mask, rng);
            self.state.increment(j);
            return j;
        }
    }
}

/// Simulate one branch of depth `depth`.
pub fn run_branch<R: Rng + ?Sized>(
    model: &ModelConfig,
    policy: &PolicySpec,
    depth: usize,
    rng: &mut R,
) -> Trajectory {
    let s = model.s;
    let mut branch = Branch::new(model, policy);
    let mut steps = Vec::with_capacity(depth);
    let mut informative = Vec::new();
    let mut clock = Vec::with_capacity(depth + 1);
    clock.push(0);
    for t in 1..=depth {
        let (mask, j) = branch.step(rng);
        let counts = branch.state().counts.clone();
        let mut mt = *clock.last().unwrap();
        if mask.informative_count(s) > 0 {
            mt += 1;
            informative.push(InformativeRecord {
                n: mt,
                depth: t,
                coord: j,
                z: counts[..s].to_vec(),
            });
        }
        clock.push(mt);
        steps.push(StepRecord {
            t,
            mask,
            chosen: j,
            counts,
        });
    }
    Trajectory {
        d: model.d,
        s,
        steps,
        informative,
        clock,
    }
}

/// Terminal counts only, without recording the path.
pub fn run_counts<R: Rng + ?Sized>(model: &ModelConfig, policy: &PolicySpec, depth: usize, rng: &mut R) -> CountState {
    let mut branch = Branch::new(model, policy);
    for _ in 0..depth {
        branch.step(rng);
    }
    branch.state
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftBucket {
    /// Sorted `s Delta_n` (equal signal strengths) or the full vector.
    pub key: Vec<i64>,
    pub w: f64,
    pub count: usize,
    pub mean: f64,
    pub se: f64,
    pub shifted_w: f64,
    pub shifted_mean: f64,
    pub shifted_se: f64,
    /// Fewer samples than the bucket minimum; excluded from the kappa estimate.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub buckets: Vec<DriftBucket>,
    /// Largest `kappa` with `mean <= -kappa W + 3 SE` on every usable bucket.
    pub kappa_hat: f64,
    /// `SE / W` on the bucket that attains `kappa_hat`.
    pub kappa_se: f64,
    pub shifted_kappa_hat: f64,
    pub informative_steps: usize,
}

pub const DEFAULT_MIN_BUCKET: usize = 100;

#[derive(Default, Clone)]
struct Acc {
    count: usize,
    sum: f64,
    sumsq: f64,
    shifted_sum: f64,
    shifted_sumsq: f64,
    w: f64,
    shifted_w: f64,
}

impl Acc {
    fn merge(&mut self, other: &Acc) {
        self.count += other.count;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
        self.shifted_sum += other.shifted_sum;
        self.shifted_sumsq += other.shifted_sumsq;
        self.w = other.w;
        self.shifted_w = other.shifted_w;
    }
}

pub(crate) fn mean_se(count: usize, sum: f64, sumsq: f64) -> (f64, f64) {
    let n = count as f64;
    let mean = sum / n;
    if count < 2 {
        return (mean, f64::INFINITY);
    }
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

pub fn estimate_drift_and_kappa(
    model: &ModelConfig,
    policy: &PolicySpec,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<DriftReport> {
    estimate_drift_and_kappa_with(model, policy, horizon, reps, seed, DEFAULT_MIN_BUCKET)
}

/// Monte Carlo estimate of `E[Delta_{n, J_{n+1}} | F_n]` per imbalance bucket.
///
/// Each replicate runs `horizon` informative steps. Alongside the raw
/// imbalance, the shifted imbalance built from `Z_j - (theta_j - mean theta)`
/// is tracked; for equal signal strengths both coincide.
pub fn estimate_drift_and_kappa_with(
    model: &ModelConfig,
    policy: &PolicySpec,
    horizon: usize,
    reps: usize,
    seed: u64,
    min_bucket: usize,
) -> Result<DriftReport> {
    if reps < 100 {
        return Err(invalid(format!("need reps >= 100, got {reps}")));
    }
    let s = model.s;
    if s < 2 {
        return Err(invalid("drift diagnostics need s >= 2"));
    }
    let equal = model.equal_beta();
    let theta: Vec<f64> = (0..s).map(|j| shift(model, j)).collect();
    let theta_bar = theta.iter().sum::<f64>() / s as f64;
    let offsets: Vec<f64> = theta.iter().map(|t| t - theta_bar).collect();

    let per_rep: Vec<BTreeMap<Vec<i64>, Acc>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng: SimRng = stream_rng(seed, &[0xD21F, rep as u64]);
            let mut branch = Branch::new(model, policy);
            let mut table: BTreeMap<Vec<i64>, Acc> = BTreeMap::new();
            for n in 0..horizon {
                let z = &branch.state().counts[..s];
                let stats = imbalance(z, n, s).expect("consistent counts");
                let shifted: Vec<f64> = (0..s)
                    .map(|j| z[j] as f64 - offsets[j] - n as f64 / s as f64)
                    .collect();
                let shifted_w = shifted.iter().map(|x| x * x).sum::<f64>().sqrt();
                let j = branch.informative_step(&mut rng);
                let inc = stats.scaled_delta[j] as f64 / s as f64;
                let shifted_inc = shifted[j];
                let key = if equal {
                    let mut k = stats.scaled_delta.clone();
                    k.sort_unstable();
                    k
                } else {
                    stats.scaled_delta.clone()
                };
                let acc = table.entry(key).or_default();
                acc.count += 1;
                acc.sum += inc;
                acc.sumsq += inc * inc;
                acc.shifted_sum += shifted_inc;
                acc.shifted_sumsq += shifted_inc * shifted_inc;
                acc.w = stats.w;
                acc.shifted_w = shifted_w;
            }
            table
        })
        .collect();

    let mut merged: BTreeMap<Vec<i64>, Acc> = BTreeMap::new();
    for table in &per_rep {
        for (k, acc) in table {
            merged.entry(k.clone()).or_default().merge(acc);
        }
    }

    let mut buckets = Vec::with_capacity(merged.len());
    let mut kappa = f64::INFINITY;
    let mut kappa_se = 0.0;
    let mut shifted_kappa = f64::INFINITY;
    for (key, acc) in merged {
        let (mean, se) = mean_se(acc.count, acc.sum, acc.sumsq);
        let (shifted_mean, shifted_se) = mean_se(acc.count, acc.shifted_sum, acc.shifted_sumsq);
        let flagged = acc.count < min_bucket;
        if !flagged && acc.w > 0.0 {
            let bound = (3.0 * se - mean) / acc.w;
            if bound < kappa {
                kappa = bound;
                kappa_se = se / acc.w;
            }
        }
        if !flagged && acc.shifted_w > 1e-12 {
            shifted_kappa = shifted_kappa.min((3.0 * shifted_se - shifted_mean) / acc.shifted_w);
        }
        buckets.push(DriftBucket {
            key,
            w: acc.w,
            count: acc.count,
            mean,
            se,
            shifted_w: acc.shifted_w,
            shifted_mean,
            shifted_se,
            flagged,
        });
    }
    let clamp = |k: f64| if k.is_finite() { k.max(0.0) } else { 0.0 };
    Ok(DriftReport {
        buckets,
        kappa_hat: clamp(kappa),
        kappa_se,
        shifted_kappa_hat: clamp(shifted_kappa),
        informative_steps: horizon * reps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpMomentPoint {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

/// Monte Carlo `E exp(eta W_n)` along an increasing grid of informative times.
pub fn exp_moment_diag(
    model: &ModelConfig,
    policy: &PolicySpec,
    eta: f64,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<ExpMomentPoint>> {
    if !(eta >= 0.0) {
        return Err(invalid("eta must be >= 0"));
    }
    if n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("n grid must be strictly increasing"));
    }
    if reps < 2 {
        return Err(invalid("need at least two replicates"));
    }
    let s = model.s;
    let horizon = n_grid.last().copied().unwrap_or(0);
    let samples: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng: SimRng = stream_rng(seed, &[0xE4B0, rep as u64]);
            let mut branch = Branch::new(model, policy);
            let mut out = Vec::with_capacity(n_grid.len());
            let mut next = 0;
            for n in 0..=horizon {
                if next < n_grid.len() && n_grid[next] == n {
                    let w = imbalance(&branch.state().counts[..s], n, s).expect("consistent").w;
                    out.push((eta * w).exp());
                    next += 1;
                }
                if n < horizon {
                    branch.informative_step(&mut rng);
                }
            }
            out
        })
        .collect();
    Ok(n_grid
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let (sum, sumsq) = samples
                .iter()
                .fold((0.0, 0.0), |(a, b), row| (a + row[i], b + row[i] * row[i]));
            let (mean, se) = mean_se(reps, sum, sumsq);
            ExpMomentPoint { n, mean, se }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationSummary {
    pub empirical: Vec<f64>,
    pub target: Vec<f64>,
    pub max_abs_dev: f64,
}

/// First-order allocation `pi(gamma) = (q/s, ..., (1-q)/(d-s), ...)`.
pub fn allocation_target(model: &ModelConfig) -> Result<Vec<f64>> {
    let q = to_f64(&opportunity_rate(model.d, model.s, model.m)?);
    let (d, s) = (model.d, model.s);
    Ok((0..d)
        .map(|j| if j < s { q / s as f64 } else { (1.0 - q) / (d - s) as f64 })
        .collect())
}

/// Pooled `N_t / t` over trajectories that share one configuration.
pub fn summarize_allocation(model: &ModelConfig, trajectories: &[Trajectory]) -> Result<AllocationSummary> {
    let d = model.d;
    if trajectories.iter().any(|t| t.d != d || t.s != model.s) {
        return Err(invalid("trajectories do not share the model configuration"));
    }
    let total: usize = trajectories.iter().map(|t| t.len()).sum();
    if total == 0 {
        return Err(invalid("no split steps to summarize"));
    }
    let mut sums = vec![0u64; d];
    for tr in trajectories {
        for (acc, c) in sums.iter_mut().zip(tr.terminal_counts()) {
            *acc += c as u64;
        }
    }
    let empirical: Vec<f64> = sums.iter().map(|&c| c as f64 / total as f64).collect();
    let target = allocation_target(model)?;
    let max_abs_dev = empirical
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(AllocationSummary {
        empirical,
        target,
        max_abs_dev,
    })
}
