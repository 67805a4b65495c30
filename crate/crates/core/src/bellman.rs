//! Terminal laws, the ensemble objective and its Bellman certificates.
//!
//! Masks enter only through exposure classes: every built-in policy and every
//! default objective depends on a mask only through `u ∩ S`, except that a
//! mask with no informative member is split uniformly. In reduced mode the
//! state is the informative count vector `z` and such masks leave it fixed;
//! in full mode the state is the whole `N_t` and each noninformative-only
//! mask is its own class.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Branch;
use crate::environment::{binom, exposure_classes, Mask, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::policies::{action_distribution, CountState, PolicySpec};
use crate::scalar::{Scalar, REL_TIE_TOL};
use crate::seed::{stream_rng, SimRng};

pub const STATE_LIMIT: u128 = 100_000;
pub const POLICY_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LawMode {
    /// Informative counts only; valid when the objective ignores the rest.
    Reduced,
    Full,
}

impl LawMode {
    /// Reduced unless the noise term makes noninformative counts matter.
    pub fn auto(model: &ModelConfig) -> Self {
        if model.sigma0_sq == 0.0 {
            LawMode::Reduced
        } else {
            LawMode::Full
        }
    }

    fn state_len(self, model: &ModelConfig) -> usize {
        match self {
            LawMode::Reduced => model.s,
            LawMode::Full => model.d,
        }
    }
}

/// One exposure class of masks.
#[derive(Debug, Clone, Serialize)]
pub struct MaskClass {
    /// `u ∩ S`.
    pub exposure: Vec<usize>,
    /// The whole mask, for noninformative-only masks in full mode.
    pub mask: Option<Vec<usize>>,
    #[serde(serialize_with = "crate::scalar::serialize_ratio")]
    pub prob: BigRational,
    /// Admissible actions `A(u)`; empty means the reduced state does not move.
    pub actions: Vec<usize>,
    #[serde(skip)]
    representative: Option<Mask>,
}

pub fn mask_classes(model: &ModelConfig, mode: LawMode) -> Result<Vec<MaskClass>> {
    let (d, s, m) = (model.d, model.s, model.m);
    let mut out = Vec::new();
    for (e, prob) in exposure_classes(d, s, m)? {
        if e.is_empty() {
            match mode {
                LawMode::Reduced => out.push(MaskClass {
                    exposure: e,
                    mask: None,
                    prob,
                    actions: Vec::new(),
                    representative: None,
                }),
                LawMode::Full => {
                    let count = binom(d - s, m);
                    if count > BigInt::from(STATE_LIMIT as u64) {
                        return Err(Error::TooLarge {
                            what: "noninformative-only masks",
                            size: u128::MAX,
                            limit: STATE_LIMIT,
                        });
                    }
                    let each = BigRational::new(BigInt::one(), binom(d, m));
                    for u in subsets(&(s..d).collect::<Vec<_>>(), m) {
                        out.push(MaskClass {
                            exposure: Vec::new(),
                            mask: Some(u.clone()),
                            prob: each.clone(),
                            actions: u.clone(),
                            representative: Some(Mask::new(u, d)?),
                        });
                    }
                }
            }
            continue;
        }
        let mut members = e.clone();
        members.extend(s..s + (m - e.len()));
        let representative = Mask::new(members, d)?;
        out.push(MaskClass {
            actions: e.clone(),
            exposure: e,
            mask: None,
            prob,
            representative: Some(representative),
        });
    }
    Ok(out)
}

fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < k - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::new(), &mut out);
    out
}

fn padded(model: &ModelConfig, state: &[u32]) -> CountState {
    let mut counts = state.to_vec();
    counts.resize(model.d, 0);
    CountState::from_counts(counts)
}

fn successor(state: &[u32], j: usize) -> Vec<u32> {
    let mut next = state.to_vec();
    next[j] += 1;
    next
}

/// Positive-probability actions of `policy` on a class, or empty for "stay".
fn class_action_probs<S: Scalar>(
    policy: &PolicySpec,
    model: &ModelConfig,
    state: &[u32],
    class: &MaskClass,
) -> Vec<(usize, S)> {
    let Some(mask) = &class.representative else {
        return Vec::new();
    };
    let probs = action_distribution::<S>(policy, model, &padded(model, state), mask);
    mask.members()
        .iter()
        .zip(probs)
        .filter(|(_, p)| *p > S::zero())
        .map(|(&j, p)| (j, p))
        .collect()
}

fn count_states(len: usize, depth: usize, mode: LawMode) -> u128 {
    // compositions of depth into len parts (full) or of at most depth (reduced)
    let (n, k) = match mode {
        LawMode::Full => (depth + len - 1, len - 1),
        LawMode::Reduced => (depth + len, len),
    };
    let c = binom(n, k);
    u128::try_from(c).unwrap_or(u128::MAX)
}

fn guard_states(model: &ModelConfig, l: usize, mode: LawMode) -> Result<()> {
    let size = count_states(mode.state_len(model), l, mode);
    if size > STATE_LIMIT {
        return Err(Error::TooLarge {
            what: "count-state space",
            size,
            limit: STATE_LIMIT,
        });
    }
    Ok(())
}

/// States at depth `t`: `sum = t` in full mode, `sum <= t` in reduced mode.
fn states_at(len: usize, t: usize, mode: LawMode) -> Vec<Vec<u32>> {
    fn rec(len: usize, rest: u32, exact: bool, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() + 1 == len {
            if exact {
                cur.push(rest);
                out.push(cur.clone());
                cur.pop();
            } else {
                for x in 0..=rest {
                    cur.push(x);
                    out.push(cur.clone());
                    cur.pop();
                }
            }
            return;
        }
        for x in 0..=rest {
            cur.push(x);
            rec(len, rest - x, exact, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, t as u32, mode == LawMode::Full, &mut Vec::new(), &mut out);
    out
}

/// Probability mass over depth-`l` count states.
#[derive(Clone, PartialEq)]
pub struct TerminalLaw<S> {
    pub depth: usize,
    pub mode: LawMode,
    entries: BTreeMap<Vec<u32>, S>,
}

impl<S: Scalar> fmt::Debug for TerminalLaw<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (k, v) in &self.entries {
            m.entry(k, &v.render());
        }
        m.finish()
    }
}

impl<S: Scalar> TerminalLaw<S> {
    pub fn new(depth: usize, mode: LawMode, entries: BTreeMap<Vec<u32>, S>) -> Result<Self> {
        if entries.values().any(|p| *p < S::zero()) {
            return Err(Error::Consistency("negative terminal mass".into()));
        }
        let total: S = entries.values().cloned().sum();
        if !total.ties(&S::one(), 1e-12) {
            return Err(Error::Consistency(format!("terminal masses sum to {}", total.render())));
        }
        Ok(TerminalLaw { depth, mode, entries })
    }

    pub fn point_mass(depth: usize, mode: LawMode, state: Vec<u32>) -> Self {
        TerminalLaw {
            depth,
            mode,
            entries: BTreeMap::from([(state, S::one())]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u32>, &S)> {
        self.entries.iter()
    }

    pub fn mass(&self, state: &[u32]) -> S {
        self.entries.get(state).cloned().unwrap_or_else(S::zero)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> S {
        self.entries.values().cloned().sum()
    }

    /// `(1 - eps) self + eps other`.
    pub fn mix(&self, other: &Self, eps: &S) -> Result<Self> {
        if self.mode != other.mode || self.depth != other.depth {
            return Err(invalid("laws must share depth and mode"));
        }
        let mut entries: BTreeMap<Vec<u32>, S> = BTreeMap::new();
        for (k, v) in &self.entries {
            *entries.entry(k.clone()).or_insert_with(S::zero) =
                entries.get(k).cloned().unwrap_or_else(S::zero) + (S::one() - eps.clone()) * v.clone();
        }
        for (k, v) in &other.entries {
            let cur = entries.get(k).cloned().unwrap_or_else(S::zero);
            entries.insert(k.clone(), cur + eps.clone() * v.clone());
        }
        entries.retain(|_, v| !v.is_zero());
        TerminalLaw::new(self.depth, self.mode, entries)
    }

    pub fn to_real(&self) -> TerminalLaw<f64> {
        TerminalLaw {
            depth: self.depth,
            mode: self.mode,
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.to_real())).collect(),
        }
    }
}

/// Laws of `N_t` (or `Z` in reduced mode) for `t = 0..=l`.
pub fn forward_laws<S: Scalar>(
    model: &ModelConfig,
    policy: &PolicySpec,
    l: usize,
    mode: LawMode,
) -> Result<Vec<BTreeMap<Vec<u32>, S>>> {
    policy.validate()?;
    guard_states(model, l, mode)?;
    let classes = mask_classes(model, mode)?;
    let class_probs: Vec<S> = classes.iter().map(|c| S::from_big_ratio(&c.prob)).collect();
    let mut laws = Vec::with_capacity(l + 1);
    let mut cur: BTreeMap<Vec<u32>, S> = BTreeMap::from([(vec![0; mode.state_len(model)], S::one())]);
    for _ in 0..l {
        let mut next: BTreeMap<Vec<u32>, S> = BTreeMap::new();
        for (state, mass) in &cur {
            for (class, pc) in classes.iter().zip(&class_probs) {
                let w = mass.clone() * pc.clone();
                let moves = class_action_probs::<S>(policy, model, state, class);
                if moves.is_empty() {
                    add(&mut next, state.clone(), w);
                    continue;
                }
                for (j, pj) in moves {
                    add(&mut next, successor(state, j), w.clone() * pj);
                }
            }
        }
        laws.push(std::mem::replace(&mut cur, next));
    }
    laws.push(cur);
    Ok(laws)
}

fn add<S: Scalar>(map: &mut BTreeMap<Vec<u32>, S>, key: Vec<u32>, w: S) {
    if w.is_zero() {
        return;
    }
    match map.get_mut(&key) {
        Some(v) => *v = v.clone() + w,
        None => {
            map.insert(key, w);
        }
    }
}

pub fn terminal_law<S: Scalar>(
    model: &ModelConfig,
    policy: &PolicySpec,
    l: usize,
    mode: LawMode,
) -> Result<TerminalLaw<S>> {
    let entries = forward_laws::<S>(model, policy, l, mode)?.pop().unwrap();
    TerminalLaw::new(l, mode, entries)
}

/// Exact law when the policy's probabilities are rational, real otherwise.
#[derive(Debug, Clone)]
pub enum AnyLaw {
    Exact(TerminalLaw<BigRational>),
    /// Real-mode fallback; the policy has irrational action probabilities.
    Real(TerminalLaw<f64>),
}

impl AnyLaw {
    pub fn is_exact(&self) -> bool {
        matches!(self, AnyLaw::Exact(_))
    }

    pub fn to_real(&self) -> TerminalLaw<f64> {
        match self {
            AnyLaw::Exact(l) => l.to_real(),
            AnyLaw::Real(l) => l.clone(),
        }
    }
}

pub fn terminal_law_exact(model: &ModelConfig, policy: &PolicySpec, l: usize, mode: LawMode) -> Result<AnyLaw> {
    if policy.exactly_representable() {
        Ok(AnyLaw::Exact(terminal_law(model, policy, l, mode)?))
    } else {
        Ok(AnyLaw::Real(terminal_law(model, policy, l, mode)?))
    }
}

/// Terminal state counts from simulated branches.
pub fn empirical_law(
    model: &ModelConfig,
    policy: &PolicySpec,
    l: usize,
    branches: usize,
    seed: u64,
    mode: LawMode,
) -> BTreeMap<Vec<u32>, u64> {
    const CHUNK: usize = 10_000;
    let len = mode.state_len(model);
    let chunks: Vec<BTreeMap<Vec<u32>, u64>> = (0..branches.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng: SimRng = stream_rng(seed, &[0xB311, c as u64]);
            let mut out = BTreeMap::new();
            for _ in 0..CHUNK.min(branches - c * CHUNK) {
                let state = run_to_depth(model, policy, l, &mut rng);
                *out.entry(state.counts[..len].to_vec()).or_insert(0) += 1;
            }
            out
        })
        .collect();
    let mut total = BTreeMap::new();
    for m in chunks {
        for (k, v) in m {
            *total.entry(k).or_insert(0) += v;
        }
    }
    total
}

fn run_to_depth<R: Rng + ?Sized>(model: &ModelConfig, policy: &PolicySpec, l: usize, rng: &mut R) -> CountState {
    let mut branch = Branch::new(model, policy);
    for _ in 0..l {
        branch.step(rng);
    }
    branch.state().clone()
}

pub type StateFn<S> = Arc<dyn Fn(&[u32]) -> S + Send + Sync>;
pub type PairFn<S> = Arc<dyn Fn(&[u32], &[u32]) -> S + Send + Sync>;

/// `J(nu) = E Phi(N) / B + (B - 1) / B E Psi(N, N')`.
#[derive(Clone)]
pub struct EnsembleObjective<S> {
    pub b: u32,
    phi: StateFn<S>,
    psi: PairFn<S>,
    pub psi_symmetric: bool,
}

impl<S> fmt::Debug for EnsembleObjective<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleObjective")
            .field("b", &self.b)
            .field("psi_symmetric", &self.psi_symmetric)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar + 'static> EnsembleObjective<S> {
    pub fn new(b: u32, phi: StateFn<S>, psi: PairFn<S>, psi_symmetric: bool) -> Result<Self> {
        if b == 0 {
            return Err(invalid("B must be at least 1"));
        }
        Ok(EnsembleObjective {
            b,
            phi,
            psi,
            psi_symmetric,
        })
    }

    /// `Phi(n) = sum_{j<=s} beta_j^2 2^{-2 n_j}` and
    /// `Psi(n,n') = sum_{j<=s} beta_j^2 2^{-2 max(n_j, n'_j)} + sigma0^2 (2^l / n0) 2^{-|n - n'|_1 / 2}`.
    pub fn default_for(model: &ModelConfig, l: usize, b: u32, n0: Option<f64>, mode: LawMode) -> Result<Self> {
        let s = model.s;
        let beta_sq: Vec<S> = model
            .beta
            .iter()
            .map(|&x| {
                let v = S::from_f64(x);
                v.clone() * v
            })
            .collect();
        let noise = if model.sigma0_sq > 0.0 {
            if mode == LawMode::Reduced {
                return Err(invalid("the noise term needs full count states"));
            }
            let n0 = n0.ok_or_else(|| invalid("n0 is required when sigma0_sq > 0"))?;
            if !(n0 > 0.0) {
                return Err(invalid("n0 must be positive"));
            }
            Some(S::from_f64(model.sigma0_sq) * S::pow2(l as i32) / S::from_f64(n0))
        } else {
            None
        };
        let bs = beta_sq.clone();
        let phi: StateFn<S> = Arc::new(move |n: &[u32]| {
            (0..s).map(|j| bs[j].clone() * S::pow2(-2 * n[j] as i32)).sum()
        });
        let psi: PairFn<S> = Arc::new(move |n: &[u32], m: &[u32]| {
            let mut v: S = (0..s)
                .map(|j| beta_sq[j].clone() * S::pow2(-2 * n[j].max(m[j]) as i32))
                .sum();
            if let Some(c) = &noise {
                let l1: u32 = n.iter().zip(m).map(|(a, b)| a.abs_diff(*b)).sum();
                let w = if l1 % 2 == 0 {
                    S::pow2(-((l1 / 2) as i32))
                } else {
                    S::from_f64((-(l1 as f64) / 2.0).exp2())
                };
                v = v + c.clone() * w;
            }
            v
        });
        EnsembleObjective::new(b, phi, psi, true)
    }

    pub fn phi(&self, n: &[u32]) -> S {
        (self.phi)(n)
    }

    pub fn psi(&self, n: &[u32], m: &[u32]) -> S {
        (self.psi)(n, m)
    }

    fn weights(&self) -> (S, S) {
        let b = S::from_ratio(self.b as i64, 1);
        (S::one() / b.clone(), (b.clone() - S::one()) / b)
    }

    /// Symmetry of `Psi` over all pairs from `states`.
    pub fn check_symmetry(&self, states: &[Vec<u32>]) -> bool {
        states.iter().all(|a| {
            states
                .iter()
                .all(|b| self.psi(a, b).ties(&self.psi(b, a), REL_TIE_TOL))
        })
    }
}

pub fn objective_j<S: Scalar + 'static>(law: &TerminalLaw<S>, obj: &EnsembleObjective<S>) -> S {
    let (w1, w2) = obj.weights();
    let mut first = S::zero();
    let mut second = S::zero();
    for (n, p) in law.iter() {
        first = first + p.clone() * obj.phi(n);
        for (m, q) in law.iter() {
            second = second + p.clone() * q.clone() * obj.psi(n, m);
        }
    }
    w1 * first + w2 * second
}

/// `Gamma_nu(n) = Phi(n) / B + (B - 1) / B int (Psi(n, .) + Psi(., n)) d nu`.
pub struct MarginalCost<'a, S> {
    law: &'a TerminalLaw<S>,
    obj: &'a EnsembleObjective<S>,
}

pub fn marginal_cost<'a, S: Scalar + 'static>(
    law: &'a TerminalLaw<S>,
    obj: &'a EnsembleObjective<S>,
) -> MarginalCost<'a, S> {
    MarginalCost { law, obj }
}

impl<S: Scalar + 'static> MarginalCost<'_, S> {
    pub fn eval(&self, n: &[u32]) -> S {
        let (w1, w2) = self.obj.weights();
        let mut cross = S::zero();
        for (m, q) in self.law.iter() {
            cross = cross + q.clone() * (self.obj.psi(n, m) + self.obj.psi(m, n));
        }
        w1 * self.obj.phi(n) + w2 * cross
    }
}

/// Value tables `V_t` and Bellman argmin sets per (state, class).
#[derive(Debug, Clone)]
pub struct BellmanTable<S> {
    pub depth: usize,
    pub mode: LawMode,
    pub classes: Vec<MaskClass>,
    values: Vec<BTreeMap<Vec<u32>, S>>,
    argmin: Vec<BTreeMap<(Vec<u32>, usize), Vec<usize>>>,
}

impl<S: Scalar> BellmanTable<S> {
    pub fn value(&self, t: usize, state: &[u32]) -> Option<&S> {
        self.values.get(t)?.get(state)
    }

    /// `V_0(0)`.
    pub fn root_value(&self) -> &S {
        self.values[0].values().next().expect("root state")
    }

    pub fn argmin_set(&self, t: usize, state: &[u32], class: usize) -> Option<&[usize]> {
        self.argmin.get(t)?.get(&(state.to_vec(), class)).map(|v| v.as_slice())
    }

    pub fn states(&self, t: usize) -> impl Iterator<Item = (&Vec<u32>, &S)> {
        self.values[t].iter()
    }
}

/// `V_l = h`, `V_t(n) = sum_u p(u) min_{j in A(u)} V_{t+1}(n + e_j)`.
pub fn bellman_backward<S: Scalar, H: Fn(&[u32]) -> S>(
    model: &ModelConfig,
    h: H,
    l: usize,
    mode: LawMode,
) -> Result<BellmanTable<S>> {
    guard_states(model, l, mode)?;
    let classes = mask_classes(model, mode)?;
    let class_probs: Vec<S> = classes.iter().map(|c| S::from_big_ratio(&c.prob)).collect();
    let len = mode.state_len(model);
    let mut values: Vec<BTreeMap<Vec<u32>, S>> = vec![BTreeMap::new(); l + 1];
    let mut argmin: Vec<BTreeMap<(Vec<u32>, usize), Vec<usize>>> = vec![BTreeMap::new(); l];
    values[l] = states_at(len, l, mode).into_iter().map(|n| {
        let v = h(&n);
        (n, v)
    }).collect();
    for t in (0..l).rev() {
        let (head, tail) = values.split_at_mut(t + 1);
        let next = &tail[0];
        for n in states_at(len, t, mode) {
            let mut v = S::zero();
            for (ci, (class, pc)) in classes.iter().zip(&class_probs).enumerate() {
                if class.actions.is_empty() {
                    v = v + pc.clone() * next[&n].clone();
                    continue;
                }
                let succ: Vec<S> = class.actions.iter().map(|&j| next[&successor(&n, j)].clone()).collect();
                let best = min_of(&succ);
                let set: Vec<usize> = class
                    .actions
                    .iter()
                    .zip(&succ)
                    .filter(|(_, x)| x.ties(&best, REL_TIE_TOL))
                    .map(|(&j, _)| j)
                    .collect();
                argmin[t].insert((n.clone(), ci), set);
                v = v + pc.clone() * best;
            }
            head[t].insert(n, v);
        }
    }
    Ok(BellmanTable {
        depth: l,
        mode,
        classes,
        values,
        argmin,
    })
}

fn min_of<S: Scalar>(xs: &[S]) -> S {
    let mut best = xs[0].clone();
    for x in &xs[1..] {
        if *x < best {
            best = x.clone();
        }
    }
    best
}

/// A reachable decision where the policy puts mass on a non-minimizing action.
#[derive(Debug, Clone)]
pub struct Violation<S> {
    /// Depth `t` of the state `N_t`; the offending split is number `t + 1`.
    pub depth: usize,
    pub state: Vec<u32>,
    pub exposure: Vec<usize>,
    pub mask: Option<Vec<usize>>,
    pub action: usize,
    pub better: usize,
    /// `V_{t+1}(n + e_action) - V_{t+1}(n + e_better) > 0`.
    pub margin: S,
    pub action_prob: S,
    /// Probability of reaching the state and drawing the class.
    pub event_prob: S,
}

#[derive(Debug, Clone)]
pub struct CertificateReport<S> {
    pub violations: Vec<Violation<S>>,
    /// `J` at the policy's own terminal law.
    pub objective: S,
    /// `V_0(0)` for the terminal cost `Gamma`.
    pub root_value: S,
    /// `E_nu Gamma_nu` for comparison with `root_value`.
    pub policy_gamma: S,
}

/// Scan every reachable (state, class) event for actions that lose against
/// the Bellman values of the policy's own marginal cost. An empty list is not
/// a proof of optimality.
pub fn certificate_scan<S: Scalar + 'static>(
    model: &ModelConfig,
    policy: &PolicySpec,
    obj: &EnsembleObjective<S>,
    l: usize,
    mode: LawMode,
) -> Result<CertificateReport<S>> {
    let laws = forward_laws::<S>(model, policy, l, mode)?;
    let law = TerminalLaw::new(l, mode, laws[l].clone())?;
    let gamma = marginal_cost(&law, obj);
    let table = bellman_backward(model, |n: &[u32]| gamma.eval(n), l, mode)?;
    let mut violations = Vec::new();
    for (t, law_t) in laws.iter().enumerate().take(l) {
        for (state, mass) in law_t {
            for (ci, class) in table.classes.iter().enumerate() {
                if class.actions.len() < 2 {
                    continue;
                }
                let set = table.argmin_set(t, state, ci).expect("tabulated");
                let better = set[0];
                let best = table.value(t + 1, &successor(state, better)).unwrap().clone();
                for (j, pj) in class_action_probs::<S>(policy, model, state, class) {
                    let vj = table.value(t + 1, &successor(state, j)).unwrap().clone();
                    if set.contains(&j) {
                        continue;
                    }
                    violations.push(Violation {
                        depth: t,
                        state: state.clone(),
                        exposure: class.exposure.clone(),
                        mask: class.mask.clone(),
                        action: j,
                        better,
                        margin: vj - best.clone(),
                        action_prob: pj,
                        event_prob: mass.clone() * S::from_big_ratio(&class.prob),
                    });
                }
            }
        }
    }
    let policy_gamma = law.iter().map(|(n, p)| p.clone() * gamma.eval(n)).sum();
    Ok(CertificateReport {
        violations,
        objective: objective_j(&law, obj),
        root_value: table.root_value().clone(),
        policy_gamma,
    })
}

#[derive(Debug, Clone)]
pub struct Decision {
    pub depth: usize,
    pub state: Vec<u32>,
    pub exposure: Vec<usize>,
    pub mask: Option<Vec<usize>>,
    pub action: usize,
}

#[derive(Debug, Clone)]
pub struct SearchReport<S> {
    pub best_value: S,
    /// Choices at every reachable decision point with more than one admissible action.
    pub best_policy: Vec<Decision>,
    pub policies: u128,
}

/// Exhaustive search over deterministic Markov count-state policies.
///
/// `J` is quadratic in the terminal law, so the optimum over this class is a
/// heuristic reference for the full design problem, not its solution.
pub fn brute_force_policy_search<S: Scalar + 'static>(
    model: &ModelConfig,
    obj: &EnsembleObjective<S>,
    l: usize,
    mode: LawMode,
) -> Result<SearchReport<S>> {
    guard_states(model, l, mode)?;
    let classes = mask_classes(model, mode)?;
    let class_probs: Vec<S> = classes.iter().map(|c| S::from_big_ratio(&c.prob)).collect();
    // upper bound: every state of every depth treated as reachable
    let len = mode.state_len(model);
    let per_state: f64 = classes.iter().map(|c| (c.actions.len().max(1) as f64).log2()).sum();
    let bits: f64 = (0..l).map(|t| states_at(len, t, mode).len() as f64 * per_state).sum();
    if bits > (POLICY_LIMIT as f64).log2() {
        return Err(Error::TooLarge {
            what: "deterministic policy enumeration",
            size: if bits < 127.0 { bits.exp2() as u128 } else { u128::MAX },
            limit: POLICY_LIMIT,
        });
    }

    struct Ctx<'a, S> {
        classes: &'a [MaskClass],
        class_probs: &'a [S],
        obj: &'a EnsembleObjective<S>,
        l: usize,
        mode: LawMode,
        count: u128,
        best: Option<(S, Vec<Decision>)>,
        path: Vec<Decision>,
    }

    fn rec<S: Scalar + 'static>(ctx: &mut Ctx<'_, S>, t: usize, law: BTreeMap<Vec<u32>, S>) -> Result<()> {
        if t == ctx.l {
            ctx.count += 1;
            if ctx.count > POLICY_LIMIT {
                return Err(Error::TooLarge {
                    what: "deterministic policy enumeration",
                    size: ctx.count,
                    limit: POLICY_LIMIT,
                });
            }
            let law = TerminalLaw::new(ctx.l, ctx.mode, law)?;
            let v = objective_j(&law, ctx.obj);
            if ctx.best.as_ref().is_none_or(|(b, _)| v < *b) {
                ctx.best = Some((v, ctx.path.clone()));
            }
            return Ok(());
        }
        let points: Vec<(Vec<u32>, usize)> = law
            .keys()
            .flat_map(|n| {
                ctx.classes
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.actions.len() > 1)
                    .map(move |(ci, _)| (n.clone(), ci))
            })
            .collect();
        let mut choice = vec![0usize; points.len()];
        loop {
            let mut next: BTreeMap<Vec<u32>, S> = BTreeMap::new();
            let mut k = 0;
            for (n, mass) in &law {
                for (ci, class) in ctx.classes.iter().enumerate() {
                    let w = mass.clone() * ctx.class_probs[ci].clone();
                    let j = match class.actions.len() {
                        0 => {
                            add(&mut next, n.clone(), w);
                            continue;
                        }
                        1 => class.actions[0],
                        _ => {
                            let j = class.actions[choice[k]];
                            k += 1;
                            j
                        }
                    };
                    add(&mut next, successor(n, j), w);
                }
            }
            let before = ctx.path.len();
            for ((n, ci), &c) in points.iter().zip(&choice) {
                let class = &ctx.classes[*ci];
                ctx.path.push(Decision {
                    depth: t,
                    state: n.clone(),
                    exposure: class.exposure.clone(),
                    mask: class.mask.clone(),
                    action: class.actions[c],
                });
            }
            rec(ctx, t + 1, next)?;
            ctx.path.truncate(before);
            // odometer over the decision points of this depth
            let mut i = 0;
            while i < points.len() {
                choice[i] += 1;
                if choice[i] < ctx.classes[points[i].1].actions.len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
            if i == points.len() {
                return Ok(());
            }
        }
    }

    let mut ctx = Ctx {
        classes: &classes,
        class_probs: &class_probs,
        obj,
        l,
        mode,
        count: 0,
        best: None,
        path: Vec::new(),
    };
    let root = BTreeMap::from([(vec![0; mode.state_len(model)], S::one())]);
    rec(&mut ctx, 0, root)?;
    let (best_value, best_policy) = ctx.best.expect("at least one policy");
    Ok(SearchReport {
        best_value,
        best_policy,
        policies: ctx.count,
    })
}

/// Eigenvalues of the symmetrized `Psi` kernel on zero-sum vectors over
/// `states` (a sufficient surrogate for the convexity condition).
pub fn psd_diagnostic<S: Scalar + 'static>(states: &[Vec<u32>], obj: &EnsembleObjective<S>) -> Vec<f64> {
    let k = states.len();
    if k < 2 {
        return Vec::new();
    }
    let q = DMatrix::from_fn(k, k, |i, j| {
        0.5 * (obj.psi(&states[i], &states[j]).to_real() + obj.psi(&states[j], &states[i]).to_real())
    });
    // orthonormal Helmert basis of the zero-sum subspace
    let h = DMatrix::from_fn(k - 1, k, |r, c| {
        let r1 = (r + 1) as f64;
        let norm = (r1 * (r1 + 1.0)).sqrt();
        if c <= r {
            1.0 / norm
        } else if c == r + 1 {
            -r1 / norm
        } else {
            0.0
        }
    });
    let reduced = &h * q * h.transpose();
    let mut eig: Vec<f64> = SymmetricEigen::new(reduced).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Exact quantities of the greedy counterexample on `(d, s, m) = (6, 2, 4)`,
/// `l = 2`, unit signals and no noise.
#[derive(Debug, Clone)]
pub struct CounterexampleReport {
    pub b: u32,
    pub epsilon: BigRational,
    pub q: BigRational,
    pub law: TerminalLaw<BigRational>,
    pub phi_a: BigRational,
    pub phi_b: BigRational,
    pub psi_aa: BigRational,
    pub psi_ab: BigRational,
    pub psi_bb: BigRational,
    pub quadratic_coefficient: BigRational,
    pub gamma_a: BigRational,
    pub gamma_b: BigRational,
    pub gamma_diff: BigRational,
    /// `(29 - 2B) / (48 B)`.
    pub gamma_diff_formula: BigRational,
    /// Probability of reaching `Z_1 = (1,0)` and then exposing both informative coordinates.
    pub event_prob: BigRational,
    pub theta: BigRational,
    /// `J(eta^eps) - J(eta^gr)` from the perturbed law.
    pub delta_j: BigRational,
    /// `theta (29 - 2B) / (48 B) + theta^2 ((B - 1) / B) (15 / 16)`.
    pub delta_j_expansion: BigRational,
    pub objective_greedy: BigRational,
    /// Largest `eps` with `delta_j < 0` strictly below it (`B >= 15` only).
    pub epsilon_threshold: Option<BigRational>,
    pub violations: Vec<Violation<BigRational>>,
}

impl CounterexampleReport {
    pub fn descent(&self) -> bool {
        self.delta_j.is_negative()
    }
}

fn bb_minus_one_over_b(b: u32) -> BigRational {
    BigRational::new(BigInt::from(b as i64 - 1), BigInt::from(b))
}

pub fn gamma_diff_formula(b: u32) -> BigRational {
    BigRational::new(BigInt::from(29 - 2 * b as i64), BigInt::from(48 * b as i64))
}

pub fn reproduce_counterexample(b: u32, epsilon: &BigRational) -> Result<CounterexampleReport> {
    if b < 2 {
        return Err(invalid("the counterexample needs B >= 2"));
    }
    if !(epsilon.is_positive() && *epsilon < BigRational::one()) {
        return Err(invalid("epsilon must lie in (0,1)"));
    }
    let model = ModelConfig::unit(6, 2, 4)?;
    let mode = LawMode::Reduced;
    let l = 2;
    let policy = PolicySpec::greedy();
    let laws = forward_laws::<BigRational>(&model, &policy, l, mode)?;
    let law = TerminalLaw::new(l, mode, laws[l].clone())?;
    let obj = EnsembleObjective::<BigRational>::default_for(&model, l, b, None, mode)?;
    let (a_state, b_state) = (vec![2u32, 0], vec![1u32, 1]);
    let gamma = marginal_cost(&law, &obj);
    let gamma_a = gamma.eval(&a_state);
    let gamma_b = gamma.eval(&b_state);
    let both = mask_classes(&model, mode)?
        .into_iter()
        .find(|c| c.exposure == [0, 1])
        .expect("class {1,2}");
    let reach = laws[1].get(&vec![1u32, 0]).cloned().unwrap_or_else(BigRational::zero);
    let event_prob = reach * both.prob.clone();
    let theta = epsilon * event_prob.clone();
    let perturbed = {
        let mut entries: BTreeMap<Vec<u32>, BigRational> = law.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        *entries.get_mut(&a_state).unwrap() += theta.clone();
        *entries.get_mut(&b_state).unwrap() -= theta.clone();
        TerminalLaw::new(l, mode, entries)?
    };
    let objective_greedy = objective_j(&law, &obj);
    let delta_j = objective_j(&perturbed, &obj) - objective_greedy.clone();
    let psi_aa = obj.psi(&a_state, &a_state);
    let psi_ab = obj.psi(&a_state, &b_state);
    let psi_bb = obj.psi(&b_state, &b_state);
    let quadratic_coefficient = psi_aa.clone() - psi_ab.clone() * BigRational::from_integer(2.into()) + psi_bb.clone();
    let bb = BigRational::from_integer(BigInt::from(b));
    let delta_j_expansion = theta.clone() * gamma_diff_formula(b)
        + theta.clone() * theta.clone() * (bb.clone() - BigRational::one()) / bb
            * BigRational::new(15.into(), 16.into());
    let violations = certificate_scan(&model, &policy, &obj, l, mode)?.violations;
    let slope = -gamma_diff_formula(b);
    let curvature = (bb_minus_one_over_b(b)) * BigRational::new(15.into(), 16.into()) * event_prob.clone();
    let epsilon_threshold = slope.is_positive().then(|| slope / curvature);
    Ok(CounterexampleReport {
        b,
        epsilon: epsilon.clone(),
        q: crate::environment::opportunity_rate(6, 2, 4)?,
        phi_a: obj.phi(&a_state),
        phi_b: obj.phi(&b_state),
        law,
        psi_aa,
        psi_ab,
        psi_bb,
        quadratic_coefficient,
        gamma_diff: gamma_a.clone() - gamma_b.clone(),
        gamma_a,
        gamma_b,
        gamma_diff_formula: gamma_diff_formula(b),
        event_prob,
        theta,
        delta_j,
        delta_j_expansion,
        objective_greedy,
        epsilon_threshold,
        violations,
    })
}
