//! Scalar abstraction shared by the exact (rational) and floating-point
//! computation paths.
//!
//! Terminal laws, objectives and Bellman tables are generic over [`Scalar`].
//! `BigRational` gives exact arithmetic on small instances; `f64` is the
//! fallback when an input has no exact representation.

use std::fmt::Debug;
use std::iter::Sum;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, Num, One, Signed, ToPrimitive, Zero};

/// Relative tolerance used when comparing real-valued gains and values.
pub const REL_TIE_TOL: f64 = 1e-12;

pub trait Scalar: Num + Signed + Clone + Debug + PartialOrd + Send + Sync + Sum {
    /// True when arithmetic is exact.
    const EXACT: bool;

    /// Exact conversion for rationals (every finite `f64` is a dyadic rational).
    fn from_f64(x: f64) -> Self;

    fn from_ratio(numer: i64, denom: i64) -> Self;

    fn from_big_ratio(r: &BigRational) -> Self;

    fn to_real(&self) -> f64;

    /// `2^exp`, exact for rationals.
    fn pow2(exp: i32) -> Self;

    /// Tie test: exact equality for rationals, relative tolerance otherwise.
    fn ties(&self, other: &Self, rel_tol: f64) -> bool;

    /// Render for reports; rationals as `p/q`.
    fn render(&self) -> String;
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn from_ratio(numer: i64, denom: i64) -> Self {
        numer as f64 / denom as f64
    }

    fn from_big_ratio(r: &BigRational) -> Self {
        r.to_f64().unwrap_or(f64::NAN)
    }

    fn to_real(&self) -> f64 {
        *self
    }

    fn pow2(exp: i32) -> Self {
        2f64.powi(exp)
    }

    fn ties(&self, other: &Self, rel_tol: f64) -> bool {
        let scale = self.abs().max(other.abs());
        (self - other).abs() <= rel_tol * scale
    }

    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Scalar for BigRational {
    const EXACT: bool = true;

    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).expect("finite float")
    }

    fn from_ratio(numer: i64, denom: i64) -> Self {
        BigRational::new(BigInt::from(numer), BigInt::from(denom))
    }

    fn from_big_ratio(r: &BigRational) -> Self {
        r.clone()
    }

    fn to_real(&self) -> f64 {
        ratio_to_f64(self)
    }

    fn pow2(exp: i32) -> Self {
        let p = BigInt::one() << exp.unsigned_abs();
        if exp >= 0 {
            BigRational::from_integer(p)
        } else {
            BigRational::new(BigInt::one(), p)
        }
    }

    fn ties(&self, other: &Self, _rel_tol: f64) -> bool {
        self == other
    }

    fn render(&self) -> String {
        render_ratio(self)
    }
}

/// `p/q` rendering, always with an explicit denominator.
pub fn render_ratio(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Conversion that survives numerators and denominators beyond `f64` range.
pub fn ratio_to_f64(r: &BigRational) -> f64 {
    if let Some(v) = r.to_f64() {
        if v.is_finite() && (v != 0.0 || r.is_zero()) {
            return v;
        }
    }
    let n = r.numer();
    let d = r.denom();
    let shift = n.bits() as i64 - d.bits() as i64;
    let (num, den) = if shift > 0 {
        (n.clone(), d.clone() << (shift as u64))
    } else {
        (n.clone() << ((-shift) as u64), d.clone())
    };
    let q = BigRational::new(num, den).to_f64().unwrap_or(0.0);
    q * 2f64.powi(shift as i32)
}

/// Serialize a rational as a `p/q` string.
pub fn serialize_ratio<S: serde::Serializer>(r: &BigRational, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(&render_ratio(r))
}

/// Serialize a list of rationals as `p/q` strings.
pub fn serialize_ratios<S: serde::Serializer>(rs: &[BigRational], ser: S) -> Result<S::Ok, S::Error> {
    ser.collect_seq(rs.iter().map(render_ratio))
}

/// Generic floating-point alias used by the numeric kernels.
pub trait Real: Float + Debug + Send + Sync + Sum {}

impl<T: Float + Debug + Send + Sync + Sum> Real for T {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pow2_exact_and_real_agree() {
        for e in -12..12 {
            let exact = <BigRational as Scalar>::pow2(e);
            assert_eq!(exact.to_real(), <f64 as Scalar>::pow2(e));
        }
    }

    #[test]
    fn from_f64_is_exact_for_dyadics() {
        let x = <BigRational as Scalar>::from_f64(0.375);
        assert_eq!(x, BigRational::new(BigInt::from(3), BigInt::from(8)));
    }

    #[test]
    fn render_always_has_denominator() {
        assert_eq!(render_ratio(&BigRational::from_integer(1.into())), "1/1");
        assert_eq!(<BigRational as Scalar>::from_ratio(28, 30).render(), "14/15");
    }

    #[test]
    fn ratio_to_f64_handles_huge_parts() {
        let big = BigInt::from(3) << 2000u32;
        let r = BigRational::new(big.clone(), big * BigInt::from(4));
        assert!((ratio_to_f64(&r) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn real_ties_are_relative() {
        assert!(1.0f64.ties(&(1.0 + 1e-14), REL_TIE_TOL));
        assert!(!1.0f64.ties(&(1.0 + 1e-9), REL_TIE_TOL));
    }
}
