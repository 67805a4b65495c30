//! The masked-action environment: the sparse linear midpoint model, random
//! candidate masks, and the exact hypergeometric exposure law.
//!
//! Coordinates are 0-based internally; the informative block is `0..s`.

use num_bigint::BigInt;
use num_integer::binomial;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::ratio_to_f64;

/// Sparse linear midpoint model `Y = sum_j X_j beta_j + eps` with informative
/// coordinates `0..s` and candidate-set size `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub beta: Vec<f64>,
    pub sigma0_sq: f64,
}

impl ModelConfig {
    pub fn new(d: usize, s: usize, m: usize, beta: Vec<f64>, sigma0_sq: f64) -> Result<Self> {
        let cfg = ModelConfig {
            d,
            s,
            m,
            beta,
            sigma0_sq,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Equal unit coefficients and no noise.
    pub fn unit(d: usize, s: usize, m: usize) -> Result<Self> {
        Self::new(d, s, m, vec![1.0; s], 0.0)
    }

    /// Candidate-set size from a subsampling ratio, `m = ceil(gamma d)`.
    pub fn m_from_gamma(d: usize, gamma: f64) -> Result<usize> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(invalid(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        // guard against 0.5 * 10 = 5.000000000000001 style rounding
        let raw = gamma * d as f64;
        let m = (raw - 1e-9).ceil().max(1.0) as usize;
        Ok(m.min(d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be positive"));
        }
        if self.s == 0 || self.s > self.d {
            return Err(invalid(format!("need 1 <= s <= d, got s={} d={}", self.s, self.d)));
        }
        if self.m == 0 || self.m > self.d {
            return Err(invalid(format!("need 1 <= m <= d, got m={} d={}", self.m, self.d)));
        }
        if self.beta.len() != self.s {
            return Err(invalid(format!(
                "beta has {} entries, expected s={}",
                self.beta.len(),
                self.s
            )));
        }
        if self.beta.iter().any(|b| *b == 0.0 || !b.is_finite()) {
            return Err(invalid("every beta entry must be finite and nonzero"));
        }
        if !(self.sigma0_sq >= 0.0) || !self.sigma0_sq.is_finite() {
            return Err(invalid("sigma0_sq must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn is_informative(&self, j: usize) -> bool {
        j < self.s
    }

    pub fn equal_beta(&self) -> bool {
        let b0 = self.beta[0] * self.beta[0];
        self.beta.iter().all(|b| b * b == b0)
    }

    pub fn gamma(&self) -> f64 {
        self.m as f64 / self.d as f64
    }
}

/// A realized candidate set: `m` distinct sorted coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Mask {
    members: Vec<usize>,
}

impl Mask {
    pub fn new(mut members: Vec<usize>, d: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(invalid("mask must be nonempty"));
        }
        if members.iter().any(|&j| j >= d) {
            return Err(invalid("mask index out of range"));
        }
        Ok(Mask { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `u ∩ S` for the informative block `0..s`.
    pub fn informative(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied().filter(move |&j| j < s)
    }

    pub fn informative_count(&self, s: usize) -> usize {
        self.members.partition_point(|&j| j < s)
    }
}

/// Uniform `m`-subset of `0..d`, drawn without replacement.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize) -> Result<Mask> {
    if m == 0 || m > d {
        return Err(invalid(format!("need 1 <= m <= d, got m={m} d={d}")));
    }
    let mut members = rand::seq::index::sample(rng, d, m).into_vec();
    members.sort_unstable();
    Ok(Mask { members })
}

pub fn binom(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    binomial(BigInt::from(n), BigInt::from(k))
}

fn check_dims(d: usize, s: usize, m: usize) -> Result<()> {
    if d == 0 || s == 0 || s > d || m == 0 || m > d {
        return Err(invalid(format!("invalid dimensions d={d} s={s} m={m}")));
    }
    Ok(())
}

/// `P(K = k)` for `K ~ Hypergeometric(d, s, m)`; zero outside the support.
pub fn hypergeom_pmf(d: usize, s: usize, m: usize, k: usize) -> Result<BigRational> {
    check_dims(d, s, m)?;
    if k > s || k > m || m - k > d - s {
        return Ok(BigRational::zero());
    }
    Ok(BigRational::new(
        binom(s, k) * binom(d - s, m - k),
        binom(d, m),
    ))
}

/// Informative-opportunity rate `q = 1 - C(d-s, m) / C(d, m)`.
pub fn opportunity_rate(d: usize, s: usize, m: usize) -> Result<BigRational> {
    check_dims(d, s, m)?;
    Ok(BigRational::one() - BigRational::new(binom(d - s, m), binom(d, m)))
}

/// Drift constant of the greedy policy.
///
/// `kernel` is the exact part `sum_k (k-1) P(K=k | K>=1)`; `value` divides it
/// by `s (s-1)^{3/2}`, which is irrational for `s >= 3`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftConstant {
    #[serde(serialize_with = "crate::scalar::serialize_ratio")]
    pub kernel: BigRational,
    pub value: f64,
    /// `P(K >= 2 | K >= 1) > 0`.
    pub nondegenerate: bool,
    /// False when `s = 1`: there is never a choice among informative coordinates.
    pub competition_possible: bool,
}

pub fn drift_constant_cstar(d: usize, s: usize, m: usize) -> Result<DriftConstant> {
    check_dims(d, s, m)?;
    if s < 2 {
        return Ok(DriftConstant {
            kernel: BigRational::zero(),
            value: 0.0,
            nondegenerate: false,
            competition_possible: false,
        });
    }
    let q = opportunity_rate(d, s, m)?;
    let mut kernel = BigRational::zero();
    for k in 2..=s.min(m) {
        let pk = hypergeom_pmf(d, s, m, k)?;
        kernel += pk * BigRational::from_integer(BigInt::from(k - 1));
    }
    if !q.is_zero() {
        kernel /= q;
    }
    let denom = s as f64 * ((s - 1) as f64).powf(1.5);
    let value = ratio_to_f64(&kernel) / denom;
    Ok(DriftConstant {
        nondegenerate: !kernel.is_zero(),
        kernel,
        value,
        competition_possible: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaReqReport {
    pub eta_req: f64,
    pub threshold: f64,
    pub cstar: f64,
    pub passes: bool,
}

/// Sufficient check `c* > (1 - 1/s) eta_req / 4` with
/// `eta_req = max(2 ln 2, sqrt(s) ln 2 / 2)` (natural logarithm).
pub fn check_etareq(d: usize, s: usize, m: usize) -> Result<EtaReqReport> {
    if s < 2 {
        return Err(invalid("the eta_req check needs s >= 2"));
    }
    let ln2 = std::f64::consts::LN_2;
    let eta_req = (2.0 * ln2).max((s as f64).sqrt() * ln2 / 2.0);
    let threshold = (1.0 - 1.0 / s as f64) * eta_req / 4.0;
    let cstar = drift_constant_cstar(d, s, m)?.value;
    Ok(EtaReqReport {
        eta_req,
        threshold,
        cstar,
        passes: cstar > threshold,
    })
}

/// Exposure classes `(u ∩ S, |u \ S|)` with their exact probabilities.
///
/// Every informative subset `e` with `|e| <= m` and `m - |e| <= d - s` gets
/// probability `C(d-s, m-|e|) / C(d, m)`.
pub fn exposure_classes(d: usize, s: usize, m: usize) -> Result<Vec<(Vec<usize>, BigRational)>> {
    check_dims(d, s, m)?;
    if s > 24 {
        return Err(crate::Error::TooLarge {
            what: "informative subsets",
            size: 1u128 << s.min(127),
            limit: 1 << 24,
        });
    }
    let total = binom(d, m);
    let mut out = Vec::new();
    for bits in 0u32..(1u32 << s) {
        let e: Vec<usize> = (0..s).filter(|j| bits & (1 << j) != 0).collect();
        let k = e.len();
        if k > m || m - k > d - s {
            continue;
        }
        let p = BigRational::new(binom(d - s, m - k), total.clone());
        out.push((e, p));
    }
    Ok(out)
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| ratio_to_f64(r))
}
