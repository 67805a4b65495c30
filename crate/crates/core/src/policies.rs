//! Split policies on the masked environment.
//!
//! Every policy maps a count state and a realized mask to a distribution over
//! the mask members. All built-in kinds are informative-respecting: when the
//! mask exposes at least one informative coordinate, noninformative members get
//! zero mass; when it exposes none, the split is uniform over the mask.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Mask, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::scalar::{Scalar, REL_TIE_TOL};

/// Split-count vector `N_t` over all `d` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CountState {
    pub counts: Vec<u32>,
}

impl CountState {
    pub fn zeros(d: usize) -> Self {
        CountState { counts: vec![0; d] }
    }

    pub fn from_counts(counts: Vec<u32>) -> Self {
        CountState { counts }
    }

    pub fn depth(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn increment(&mut self, j: usize) {
        self.counts[j] += 1;
    }

    pub fn informative(&self, s: usize) -> &[u32] {
        &self.counts[..s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    Greedy,
    Exploratory,
    /// Greedy with probability `alpha`, exploratory otherwise.
    AlphaMix(f64),
    /// Population score window of width `w` (may be infinite).
    ScoreWindow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub tie_tolerance: f64,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Result<Self> {
        let spec = PolicySpec {
            kind,
            tie_tolerance: REL_TIE_TOL,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn greedy() -> Self {
        Self::new(PolicyKind::Greedy).unwrap()
    }

    pub fn exploratory() -> Self {
        Self::new(PolicyKind::Exploratory).unwrap()
    }

    pub fn mix(alpha: f64) -> Result<Self> {
        Self::new(PolicyKind::AlphaMix(alpha))
    }

    pub fn window(w: f64) -> Result<Self> {
        Self::new(PolicyKind::ScoreWindow(w))
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PolicyKind::AlphaMix(a) if !(0.0..=1.0).contains(&a) => {
                Err(invalid(format!("alpha must lie in [0, 1], got {a}")))
            }
            PolicyKind::ScoreWindow(w) if !(w >= 0.0) => {
                Err(invalid(format!("window must be >= 0, got {w}")))
            }
            _ if !(self.tie_tolerance >= 0.0) => Err(invalid("tie tolerance must be >= 0")),
            _ => Ok(()),
        }
    }

    /// Whether exact rational probabilities are available: a finite window must
    /// have an integer `2w` so the threshold `2^{-2w}` is dyadic.
    pub fn exactly_representable(&self) -> bool {
        match self.kind {
            PolicyKind::ScoreWindow(w) => w.is_infinite() || (2.0 * w).fract() == 0.0,
            _ => true,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Greedy => write!(f, "greedy"),
            PolicyKind::Exploratory => write!(f, "exploratory"),
            PolicyKind::AlphaMix(a) => write!(f, "mix:{a}"),
            PolicyKind::ScoreWindow(w) if w.is_infinite() => write!(f, "window:inf"),
            PolicyKind::ScoreWindow(w) => write!(f, "window:{w}"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_num = |v: &str| -> Result<f64> {
            if v.eq_ignore_ascii_case("inf") {
                return Ok(f64::INFINITY);
            }
            v.parse::<f64>()
                .map_err(|_| invalid(format!("bad number '{v}' in policy")))
        };
        match s.split_once(':') {
            None if s == "greedy" => Ok(Self::greedy()),
            None if s == "exploratory" => Ok(Self::exploratory()),
            Some(("mix", a)) => Self::mix(parse_num(a)?),
            Some(("window", w)) => Self::window(parse_num(w)?),
            _ => Err(invalid(format!(
                "unknown policy '{s}' (expected greedy|exploratory|mix:<alpha>|window:<w>)"
            ))),
        }
    }
}

/// Population impurity decrease of a midpoint split along `j`:
/// `beta_j^2 2^{-2 N_j} / 12` on the informative block, zero elsewhere.
pub fn gain(model: &ModelConfig, state: &CountState, j: usize) -> f64 {
    gain_as::<f64>(model, &state.counts, j)
}

pub fn gain_as<S: Scalar>(model: &ModelConfig, counts: &[u32], j: usize) -> S {
    if j >= model.s {
        return S::zero();
    }
    let b = S::from_f64(model.beta[j]);
    b.clone() * b * S::pow2(-2 * counts[j] as i32) / S::from_ratio(12, 1)
}

/// Shift `theta_j = log2(beta_j^2) / 2` used by the shifted-count form of
/// the greedy rule.
pub fn shift(model: &ModelConfig, j: usize) -> f64 {
    0.5 * (model.beta[j] * model.beta[j]).log2()
}

fn window_factor<S: Scalar>(w: f64) -> S {
    if w.is_infinite() {
        S::zero()
    } else if (2.0 * w).fract() == 0.0 && 2.0 * w <= i32::MAX as f64 {
        S::pow2(-(2.0 * w) as i32)
    } else {
        S::from_f64((-2.0 * w).exp2())
    }
}

/// Members of the greedy action set within `informative` (positions into `gains`).
fn argmax_set<S: Scalar>(gains: &[S], tol: f64) -> Vec<usize> {
    let mut best = gains[0].clone();
    for g in &gains[1..] {
        if *g > best {
            best = g.clone();
        }
    }
    (0..gains.len()).filter(|&i| gains[i].ties(&best, tol)).collect()
}

/// Action probabilities aligned with `mask.members()`.
pub fn action_distribution<S: Scalar>(
    policy: &PolicySpec,
    model: &ModelConfig,
    state: &CountState,
    mask: &Mask,
) -> Vec<S> {
    let members = mask.members();
    let inf_len = mask.informative_count(model.s);
    let mut probs = vec![S::zero(); members.len()];
    if inf_len == 0 {
        let p = S::from_ratio(1, members.len() as i64);
        probs.iter_mut().for_each(|x| *x = p.clone());
        return probs;
    }
    // informative members occupy the leading positions of the sorted mask;
    // gains are rescaled by 4^{min N} so deep branches do not underflow
    let base = members[..inf_len].iter().map(|&j| state.counts[j]).min().unwrap_or(0);
    let shifted: Vec<u32> = state.counts.iter().map(|&n| n.saturating_sub(base)).collect();
    let gains: Vec<S> = members[..inf_len]
        .iter()
        .map(|&j| gain_as::<S>(model, &shifted, j))
        .collect();
    let tol = policy.tie_tolerance;
    let spread = |set: &[usize], weight: S, probs: &mut [S]| {
        let each = weight / S::from_ratio(set.len() as i64, 1);
        for &i in set {
            probs[i] = probs[i].clone() + each.clone();
        }
    };
    let all: Vec<usize> = (0..inf_len).collect();
    match policy.kind {
        PolicyKind::Greedy => spread(&argmax_set(&gains, tol), S::one(), &mut probs),
        PolicyKind::Exploratory => spread(&all, S::one(), &mut probs),
        PolicyKind::AlphaMix(alpha) => {
            let a = S::from_f64(alpha);
            spread(&argmax_set(&gains, tol), a.clone(), &mut probs);
            spread(&all, S::one() - a, &mut probs);
        }
        PolicyKind::ScoreWindow(w) => {
            let best = gains[argmax_set(&gains, tol)[0]].clone();
            let cut = best * window_factor::<S>(w);
            let set: Vec<usize> = (0..inf_len)
                .filter(|&i| gains[i] >= cut || gains[i].ties(&cut, tol))
                .collect();
            spread(&set, S::one(), &mut probs);
        }
    }
    probs
}

/// Coordinates carrying positive mass, for set-valued comparisons.
pub fn action_set(policy: &PolicySpec, model: &ModelConfig, state: &CountState, mask: &Mask) -> Vec<usize> {
    action_distribution::<f64>(policy, model, state, mask)
        .iter()
        .zip(mask.members())
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, &j)| j)
        .collect()
}

/// Draw a split coordinate from the policy's action distribution.
pub fn select<R: Rng + ?Sized>(
    policy: &PolicySpec,
    model: &ModelConfig,
    state: &CountState,
    mask: &Mask,
    rng: &mut R,
) -> usize {
    let probs = action_distribution::<f64>(policy, model, state, mask);
    let members = mask.members();
    let support: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    if support.len() == 1 {
        return members[support[0]];
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &i in &support {
        acc += probs[i];
        if u < acc {
            return members[i];
        }
    }
    members[*support.last().unwrap()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_mask, ModelConfig};
    use crate::seed::rng_from_seed;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use rand::Rng;

    #[test]
    fn greedy_survives_deep_counts() {
        let model = ModelConfig::unit(4, 2, 4).unwrap();
        let st = CountState::from_counts(vec![1200, 1201, 0, 0]);
        let u = Mask::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(action_set(&PolicySpec::greedy(), &model, &st, &u), vec![0]);
        assert_eq!(action_set(&PolicySpec::window(1.0).unwrap(), &model, &st, &u), vec![0, 1]);
        assert_eq!(action_set(&PolicySpec::window(0.25).unwrap(), &model, &st, &u), vec![0]);
    }

    fn mask(members: &[usize], d: usize) -> Mask {
        Mask::new(members.to_vec(), d).unwrap()
    }

    fn all_kinds() -> Vec<PolicySpec> {
        vec![
            PolicySpec::greedy(),
            PolicySpec::exploratory(),
            PolicySpec::mix(0.3).unwrap(),
            PolicySpec::window(0.0).unwrap(),
            PolicySpec::window(1.5).unwrap(),
            PolicySpec::window(f64::INFINITY).unwrap(),
        ]
    }

    #[test]
    fn gain_examples() {
        let model = ModelConfig::new(5, 2, 3, vec![1.0, 3.0], 0.0).unwrap();
        let st = CountState::from_counts(vec![0, 2, 0, 4, 0]);
        assert_eq!(gain(&model, &st, 3), 0.0);
        assert_eq!(gain(&model, &st, 0), 1.0 / 12.0);
        assert_eq!(gain(&model, &st, 1), 3.0 / 64.0);
        let exact: BigRational = gain_as(&model, &st.counts, 1);
        assert_eq!(exact, <BigRational as Scalar>::from_ratio(3, 64));
    }

    #[test]
    fn greedy_splits_symmetric_tie() {
        let model = ModelConfig::unit(6, 2, 4).unwrap();
        let st = CountState::zeros(6);
        let p = action_distribution::<f64>(&PolicySpec::greedy(), &model, &st, &mask(&[0, 1, 3, 5], 6));
        assert_eq!(p, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn greedy_first_split_marginal_is_seven_fifteenths() {
        // enumerate all 15 masks of size 4 out of 6
        let model = ModelConfig::unit(6, 2, 4).unwrap();
        let st = CountState::zeros(6);
        let mut total = BigRational::zero();
        let mut count = 0;
        for a in 0..6 {
            for b in a + 1..6 {
                // complement pair {a, b} is excluded
                let members: Vec<usize> = (0..6).filter(|&j| j != a && j != b).collect();
                let u = mask(&members, 6);
                let probs = action_distribution::<BigRational>(&PolicySpec::greedy(), &model, &st, &u);
                for (p, &j) in probs.iter().zip(u.members()) {
                    if j == 0 {
                        total += p.clone();
                    }
                }
                count += 1;
            }
        }
        assert_eq!(count, 15);
        assert_eq!(total / BigRational::from_integer(15.into()), <BigRational as Scalar>::from_ratio(7, 15));
    }

    #[test]
    fn mix_endpoints() {
        let model = ModelConfig::new(8, 3, 5, vec![1.0, 2.0, 0.5], 0.0).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let counts: Vec<u32> = (0..8).map(|_| rng.random_range(0..5)).collect();
            let st = CountState::from_counts(counts);
            let u = sample_mask(&mut rng, 8, 5).unwrap();
            let ex = action_distribution::<BigRational>(&PolicySpec::exploratory(), &model, &st, &u);
            let m0 = action_distribution::<BigRational>(&PolicySpec::mix(0.0).unwrap(), &model, &st, &u);
            let gr = action_distribution::<BigRational>(&PolicySpec::greedy(), &model, &st, &u);
            let m1 = action_distribution::<BigRational>(&PolicySpec::mix(1.0).unwrap(), &model, &st, &u);
            assert_eq!(ex, m0);
            assert_eq!(gr, m1);
        }
    }

    #[test]
    fn forced_single_informative() {
        let model = ModelConfig::unit(6, 2, 3).unwrap();
        let st = CountState::from_counts(vec![5, 0, 0, 0, 0, 0]);
        let u = mask(&[0, 3, 4], 6);
        let mut rng = rng_from_seed(0);
        for p in all_kinds() {
            for _ in 0..20 {
                assert_eq!(select(&p, &model, &st, &u, &mut rng), 0);
            }
        }
    }

    #[test]
    fn distinct_gains_give_unique_argmax() {
        let model = ModelConfig::new(6, 3, 4, vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let st = CountState::from_counts(vec![3, 1, 2, 0, 0, 0]);
        let u = mask(&[0, 1, 2, 5], 6);
        for seed in 0..50 {
            let mut rng = rng_from_seed(seed);
            assert_eq!(select(&PolicySpec::greedy(), &model, &st, &u, &mut rng), 1);
        }
    }

    #[test]
    fn noninformative_mask_is_uniform() {
        let model = ModelConfig::unit(6, 2, 3).unwrap();
        let st = CountState::zeros(6);
        let u = mask(&[2, 3, 5], 6);
        for p in all_kinds() {
            let probs = action_distribution::<BigRational>(&p, &model, &st, &u);
            assert!(probs.iter().all(|x| *x == <BigRational as Scalar>::from_ratio(1, 3)));
        }
    }

    #[test]
    fn select_frequencies_match_distribution() {
        let model = ModelConfig::new(8, 4, 6, vec![1.0, 1.0, 2.0, 1.0], 0.0).unwrap();
        let st = CountState::from_counts(vec![1, 1, 2, 3, 0, 0, 0, 0]);
        let u = mask(&[0, 1, 2, 3, 5, 6], 8);
        let policy = PolicySpec::mix(0.5).unwrap();
        let probs = action_distribution::<f64>(&policy, &model, &st, &u);
        let mut rng = rng_from_seed(9);
        let n = 100_000;
        let mut hits = vec![0usize; 8];
        for _ in 0..n {
            hits[select(&policy, &model, &st, &u, &mut rng)] += 1;
        }
        for (p, &j) in probs.iter().zip(u.members()) {
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!((hits[j] as f64 / n as f64 - p).abs() <= 4.0 * se, "coord {j}");
        }
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in ["greedy", "exploratory", "mix:0.25", "window:2", "window:inf"] {
            let p: PolicySpec = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("mix:1.5".parse::<PolicySpec>().is_err());
        assert!("window:-1".parse::<PolicySpec>().is_err());
        assert!("bogus".parse::<PolicySpec>().is_err());
    }

    #[test]
    fn exactness_flag() {
        assert!(PolicySpec::window(1.5).unwrap().exactly_representable());
        assert!(!PolicySpec::window(0.3).unwrap().exactly_representable());
        assert!(PolicySpec::mix(0.1).unwrap().exactly_representable());
    }

    fn random_instance(rng: &mut impl Rng, model: &ModelConfig) -> (CountState, Mask) {
        let counts: Vec<u32> = (0..model.d).map(|_| rng.random_range(0..6)).collect();
        let u = sample_mask(rng, model.d, model.m).unwrap();
        (CountState::from_counts(counts), u)
    }

    #[test]
    fn distributions_sum_to_one_and_respect_informative_block() {
        let model = ModelConfig::new(9, 4, 5, vec![1.0, -2.0, 0.5, 3.0], 0.0).unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..2_000 {
            let (st, u) = random_instance(&mut rng, &model);
            for p in all_kinds() {
                let probs = action_distribution::<f64>(&p, &model, &st, &u);
                let total: f64 = probs.iter().sum();
                assert!((total - 1.0).abs() <= 1e-15);
                assert!(probs.iter().all(|x| *x >= 0.0));
                if u.informative_count(model.s) > 0 {
                    let off: f64 = probs
                        .iter()
                        .zip(u.members())
                        .filter(|(_, &j)| j >= model.s)
                        .map(|(p, _)| *p)
                        .sum();
                    assert_eq!(off, 0.0);
                }
                if p.exactly_representable() {
                    let exact = action_distribution::<BigRational>(&p, &model, &st, &u);
                    assert_eq!(exact.into_iter().sum::<BigRational>(), BigRational::one());
                }
            }
        }
    }

    #[test]
    fn greedy_is_smallest_shifted_count() {
        let model = ModelConfig::new(10, 4, 6, vec![1.0, 3.0, 0.7, 2.0], 0.0).unwrap();
        let mut rng = rng_from_seed(8);
        for _ in 0..10_000 {
            let (st, u) = random_instance(&mut rng, &model);
            let inf: Vec<usize> = u.informative(model.s).collect();
            if inf.is_empty() {
                continue;
            }
            let shifted = |j: usize| st.counts[j] as f64 - shift(&model, j);
            let lo = inf.iter().map(|&j| shifted(j)).fold(f64::INFINITY, f64::min);
            let expect: Vec<usize> = inf.iter().copied().filter(|&j| (shifted(j) - lo).abs() < 1e-9).collect();
            assert_eq!(action_set(&PolicySpec::greedy(), &model, &st, &u), expect);
        }
    }

    #[test]
    fn zero_window_matches_greedy_on_distinct_gains() {
        let model = ModelConfig::new(10, 4, 6, vec![1.0, 1.3, 0.7, 2.1], 0.0).unwrap();
        let mut rng = rng_from_seed(12);
        for _ in 0..5_000 {
            let (st, u) = random_instance(&mut rng, &model);
            assert_eq!(
                action_set(&PolicySpec::window(0.0).unwrap(), &model, &st, &u),
                action_set(&PolicySpec::greedy(), &model, &st, &u)
            );
        }
    }

    #[test]
    fn infinite_window_is_exploratory() {
        let model = ModelConfig::new(10, 4, 6, vec![1.0, 1.3, 0.7, 2.1], 0.0).unwrap();
        let mut rng = rng_from_seed(13);
        for _ in 0..2_000 {
            let (st, u) = random_instance(&mut rng, &model);
            assert_eq!(
                action_distribution::<BigRational>(&PolicySpec::window(f64::INFINITY).unwrap(), &model, &st, &u),
                action_distribution::<BigRational>(&PolicySpec::exploratory(), &model, &st, &u)
            );
        }
    }
}
