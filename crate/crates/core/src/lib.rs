//! Feature-subsampled CART forests viewed as a masked-action control problem.
//!
//! The crate covers the whole pipeline from the split environment to risk:
//!
//! * [`environment`]: candidate masks, the hypergeometric exposure law, the
//!   opportunity rate `q` and the greedy drift constant.
//! * [`policies`]: greedy, exploratory, alpha-mixture and score-window split
//!   rules as action distributions over a mask.
//! * [`dynamics`]: branch simulation, informative-time imbalance statistics,
//!   drift and exponential-moment diagnostics.
//! * [`poisson`]: Poisson-kernel attenuation functionals and the exact
//!   binomial/multinomial functionals they represent.
//! * [`risk`]: Monte Carlo risk functionals and closed-form bound terms.
//! * [`bellman`]: exact terminal laws, the ensemble objective, marginal costs,
//!   Bellman recursions and certificates of greedy nonoptimality.
//! * [`forest`]: honest midpoint forests with empirical score-window splits.
//!
//! Exact computations are generic over [`Scalar`]; use the [`Exact`] aliases
//! for rational arithmetic and the `Real` aliases for floating point.

pub mod bellman;
pub mod dynamics;
pub mod environment;
pub mod error;
pub mod forest;
pub mod poisson;
pub mod policies;
pub mod quadrature;
pub mod risk;
pub mod scalar;
pub mod seed;

pub use environment::{Mask, ModelConfig};
pub use error::{Error, Result};
pub use policies::{CountState, PolicyKind, PolicySpec};
pub use scalar::{Real, Scalar};

/// Exact rational scalar.
pub type Exact = num_rational::BigRational;

pub type ExactLaw = bellman::TerminalLaw<Exact>;
pub type RealLaw = bellman::TerminalLaw<f64>;
pub type ExactObjective = bellman::EnsembleObjective<Exact>;
pub type RealObjective = bellman::EnsembleObjective<f64>;
pub type ExactTable = bellman::BellmanTable<Exact>;
pub type RealTable = bellman::BellmanTable<f64>;
