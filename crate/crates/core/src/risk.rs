//! Terminal-law risk functionals and the closed-form MSE bound terms.
//!
//! The forest MSE is driven by three expectations over independent terminal
//! count vectors `N, N'` of two trees:
//! single-tree bias `sum_{j<=s} beta_j^2 E[2^{-2 N_j}]`, cross-tree bias
//! `sum_{j<=s} beta_j^2 E[2^{-2 max(N_j, N'_j)}]` and the overlap
//! `E[2^{-|N - N'|_1 / 2}]`. They are estimated here by simulation and set
//! beside the equilibrium-replacement bound terms for population CART and the
//! exploratory benchmark.

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{allocation_target, mean_se, run_counts};
use crate::environment::{check_etareq, opportunity_rate, to_f64, ModelConfig};
use crate::error::{invalid, Result};
use crate::poisson::{f_functional, l_functional, LValue, SimplexPoint};
use crate::policies::{PolicyKind, PolicySpec};
use crate::seed::{stream_rng, SimRng};

pub const MIN_RISK_REPS: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct RiskFunctionals {
    pub l: usize,
    pub pairs: usize,
    pub single_tree_bias: f64,
    pub single_tree_bias_se: f64,
    pub cross_tree_bias: f64,
    pub cross_tree_bias_se: f64,
    pub overlap: f64,
    pub overlap_se: f64,
}

fn single_bias(beta: &[f64], n: &[u32]) -> f64 {
    beta.iter()
        .zip(n)
        .map(|(b, &k)| b * b * (-2.0 * k as f64).exp2())
        .sum()
}

fn cross_bias(beta: &[f64], n: &[u32], m: &[u32]) -> f64 {
    beta.iter()
        .zip(n.iter().zip(m))
        .map(|(b, (&x, &y))| b * b * (-2.0 * x.max(y) as f64).exp2())
        .sum()
}

fn overlap_weight(n: &[u32], m: &[u32]) -> f64 {
    let l1: u32 = n.iter().zip(m).map(|(a, b)| a.abs_diff(*b)).sum();
    (-(l1 as f64) / 2.0).exp2()
}

/// Plug-in estimates from `reps` independent tree pairs.
///
/// Pair `i` draws both trees from `stream_rng(seed, [0x815C, i])`, so two
/// policies run with one seed see the same random stream pair by pair. The
/// single-tree term averages both trees of a pair.
pub fn estimate_functionals(
    model: &ModelConfig,
    policy: &PolicySpec,
    l: usize,
    reps: usize,
    seed: u64,
) -> Result<RiskFunctionals> {
    model.validate()?;
    policy.validate()?;
    if reps < MIN_RISK_REPS {
        return Err(invalid(format!("need at least {MIN_RISK_REPS} pairs, got {reps}")));
    }
    let beta = &model.beta;
    let rows: Vec<[f64; 3]> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng: SimRng = stream_rng(seed, &[0x815C, i as u64]);
            let a = run_counts(model, policy, l, &mut rng).counts;
            let b = run_counts(model, policy, l, &mut rng).counts;
            [
                0.5 * (single_bias(beta, &a) + single_bias(beta, &b)),
                cross_bias(beta, &a, &b),
                overlap_weight(&a, &b),
            ]
        })
        .collect();
    let stat = |k: usize| {
        let (s, ss) = rows.iter().fold((0.0, 0.0), |(s, ss), r| (s + r[k], ss + r[k] * r[k]));
        mean_se(reps, s, ss)
    };
    let (st, st_se) = stat(0);
    let (ct, ct_se) = stat(1);
    let (ov, ov_se) = stat(2);
    Ok(RiskFunctionals {
        l,
        pairs: reps,
        single_tree_bias: st,
        single_tree_bias_se: st_se,
        cross_tree_bias: ct,
        cross_tree_bias_se: ct_se,
        overlap: ov,
        overlap_se: ov_se,
    })
}

/// Displayed factors of the forest MSE bound at depth `l`.
///
/// `bias1` and `bias2` multiply `sum beta_j^2`, `varterm` multiplies
/// `sigma0^2`; the `1/B`, `(B-1)/B` and `1 + 2^l/n0` weights are left to the
/// caller. `pi` is the allocation vector fed to the overlap functional.
#[derive(Debug, Clone, Serialize)]
pub struct BoundTerms {
    pub l: usize,
    pub b: u32,
    pub n0: f64,
    pub q: f64,
    pub bias1: f64,
    pub bias2: f64,
    pub f_argument: f64,
    pub f_value: f64,
    pub varterm: f64,
    pub overlap_proxy: LValue,
    pub remainder: f64,
    pub pi: Vec<f64>,
    /// `None` when the check does not apply (`s = 1`, where the informative
    /// block cannot be unbalanced).
    pub etareq_passes: Option<bool>,
}

impl BoundTerms {
    /// The bound with all weights applied, constants set to one.
    pub fn assembled(&self, model: &ModelConfig) -> f64 {
        let b = self.b as f64;
        let beta_sq: f64 = model.beta.iter().map(|x| x * x).sum();
        let scale = (self.l as f64).exp2() / self.n0;
        beta_sq * self.bias1 * (1.0 + scale) / b
            + model.sigma0_sq * scale / b
            + (b - 1.0) / b * beta_sq * self.bias2 * (1.0 + scale)
            + (b - 1.0) / b * model.sigma0_sq * self.varterm
            + self.remainder
    }
}

fn check_bound_args(l: usize, b: u32, n0: f64) -> Result<()> {
    if b == 0 {
        return Err(invalid("B must be positive"));
    }
    if !(n0 > 0.0) {
        return Err(invalid("n0 must be positive"));
    }
    if l > u32::MAX as usize {
        return Err(invalid("depth too large"));
    }
    Ok(())
}

fn q_of(model: &ModelConfig) -> Result<f64> {
    model.validate()?;
    Ok(to_f64(&opportunity_rate(model.d, model.s, model.m)?))
}

/// `(q, (1-q)/(d-s), ..., (1-q)/(d-s))` of length `d - s + 1`.
pub fn pi_pop(model: &ModelConfig) -> Result<Vec<f64>> {
    let q = q_of(model)?;
    let rest = model.d - model.s;
    let mut pi = vec![q];
    if rest > 0 {
        pi.extend(std::iter::repeat((1.0 - q) / rest as f64).take(rest));
    }
    Ok(pi)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    l: usize,
    b: u32,
    n0: f64,
    q: f64,
    bias1: f64,
    bias2_base: f64,
    f_r: f64,
    f_argument: f64,
    pi: Vec<f64>,
    etareq_passes: Option<bool>,
) -> Result<BoundTerms> {
    let lu = l as u32;
    let f_value = f_functional(lu, f_r, f_argument)?;
    let point = SimplexPoint::new(pi.clone())?;
    let overlap_proxy = l_functional(lu, pi.len(), std::f64::consts::FRAC_1_SQRT_2, &point)?;
    let scale = (l as f64).exp2() / n0;
    Ok(BoundTerms {
        l,
        b,
        n0,
        q,
        bias1,
        bias2: bias2_base.powi(2 * l as i32) * f_value,
        f_argument,
        f_value,
        varterm: scale * overlap_proxy.value,
        overlap_proxy,
        remainder: (1.0 - (-(l as f64)).exp2()).powf(n0),
        pi,
        etareq_passes,
    })
}

/// Population-CART factors: `(1-q+q 4^{-1/s})^l`,
/// `(1-q+q 2^{-1/s})^{2l} F_{l,2^{-2/s}}(q 2^{-1/s} / (1-q+q 2^{-1/s}))`,
/// `2^l/n0 L_{l,d-s+1,2^{-1/2}}(pi_pop)` and `(1-2^{-l})^{n0}`.
///
/// The terms are returned even when the `eta_req` check fails; the flag
/// records that the bound is then unproven.
pub fn cart_bound_terms(model: &ModelConfig, l: usize, b: u32, n0: f64) -> Result<BoundTerms> {
    check_bound_args(l, b, n0)?;
    let q = q_of(model)?;
    let s = model.s as f64;
    let etareq = if model.s >= 2 {
        Some(check_etareq(model.d, model.s, model.m)?.passes)
    } else {
        None
    };
    let h = (-1.0 / s).exp2();
    let base = 1.0 - q + q * h;
    let bias1 = (1.0 - q + q * (-2.0 / s).exp2()).powi(l as i32);
    assemble(l, b, n0, q, bias1, base, (-2.0 / s).exp2(), q * h / base, pi_pop(model)?, etareq)
}

/// Exploratory-benchmark factors: `(1-3q/(4s))^l`,
/// `(1-q/(2s))^{2l} F_{l,1/4}(q/(2s-q))`, `2^l/n0 L_{l,d,2^{-1/2}}(pi)` and
/// the same remainder, with the full allocation `pi`.
pub fn benchmark_bound_terms(model: &ModelConfig, l: usize, b: u32, n0: f64) -> Result<BoundTerms> {
    check_bound_args(l, b, n0)?;
    let q = q_of(model)?;
    let s = model.s as f64;
    let bias1 = (1.0 - 3.0 * q / (4.0 * s)).powi(l as i32);
    let base = 1.0 - q / (2.0 * s);
    assemble(l, b, n0, q, bias1, base, 0.25, q / (2.0 * s - q), allocation_target(model)?, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplacementRow {
    pub l: usize,
    /// `mean_{j<=s} E^[2^{-2 N_{l,j}}]`.
    pub estimate: f64,
    pub se: f64,
    pub reference: f64,
    pub ratio: f64,
    pub ratio_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplacementReport {
    pub policy: String,
    /// Reference factor family: `"cart"` or `"benchmark"`.
    pub reference: &'static str,
    pub etareq_passes: Option<bool>,
    pub rows: Vec<ReplacementRow>,
}

/// Ratio of the simulated informative bias functional to its equilibrium
/// factor along `l_grid`.
///
/// The exploratory policy is compared with `(1-3q/(4s))^l`, every other policy
/// with `(1-q+q 4^{-1/s})^l`. Each depth uses its own replicate streams.
pub fn equilibrium_replacement_ratio(
    model: &ModelConfig,
    policy: &PolicySpec,
    l_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ReplacementReport> {
    model.validate()?;
    policy.validate()?;
    if reps < 2 {
        return Err(invalid("need at least two replicates"));
    }
    let q = q_of(model)?;
    let s = model.s;
    let sf = s as f64;
    let benchmark = policy.kind == PolicyKind::Exploratory;
    let etareq = if s >= 2 {
        Some(check_etareq(model.d, s, model.m)?.passes)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(l_grid.len());
    for &l in l_grid {
        let vals: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|i| {
                let mut rng: SimRng = stream_rng(seed, &[0xE9A1, l as u64, i as u64]);
                let n = run_counts(model, policy, l, &mut rng).counts;
                n[..s].iter().map(|&k| (-2.0 * k as f64).exp2()).sum::<f64>() / sf
            })
            .collect();
        let (sum, sumsq) = vals.iter().fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
        let (estimate, se) = mean_se(reps, sum, sumsq);
        let reference = if benchmark {
            (1.0 - 3.0 * q / (4.0 * sf)).powi(l as i32)
        } else {
            (1.0 - q + q * (-2.0 / sf).exp2()).powi(l as i32)
        };
        rows.push(ReplacementRow {
            l,
            estimate,
            se,
            reference,
            ratio: estimate / reference,
            ratio_se: se / reference,
        });
    }
    Ok(ReplacementReport {
        policy: policy.to_string(),
        reference: if benchmark { "benchmark" } else { "cart" },
        etareq_passes: etareq,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{terminal_law, EnsembleObjective, LawMode};
    use crate::poisson::{l1_moment_exact, max_binomial_exact};

    fn unit(d: usize, s: usize, m: usize) -> ModelConfig {
        ModelConfig::unit(d, s, m).unwrap()
    }

    fn within(x: f64, want: f64, se: f64, k: f64) -> bool {
        (x - want).abs() <= k * se.max(1e-15)
    }

    #[test]
    fn identical_trees_when_policy_is_deterministic() {
        // s = 1 and m = d: coordinate 0 is always offered and always chosen
        let model = unit(5, 1, 5);
        let f = estimate_functionals(&model, &PolicySpec::greedy(), 7, 1000, 3).unwrap();
        assert_eq!(f.cross_tree_bias, f.single_tree_bias);
        assert_eq!(f.overlap, 1.0);
        assert_eq!(f.single_tree_bias, 4f64.powi(-7));
    }

    #[test]
    fn single_tree_bias_matches_exact_law() {
        let model = unit(6, 2, 4);
        let l = 2;
        let f = estimate_functionals(&model, &PolicySpec::greedy(), l, 20_000, 11).unwrap();
        let law = terminal_law::<f64>(&model, &PolicySpec::greedy(), l, LawMode::Full).unwrap();
        let obj = EnsembleObjective::<f64>::default_for(&model, l, 2, None, LawMode::Full).unwrap();
        let exact: f64 = law.iter().map(|(n, p)| p * obj.phi(n)).sum();
        assert!(within(f.single_tree_bias, exact, f.single_tree_bias_se, 3.0), "{} vs {exact}", f.single_tree_bias);
    }

    #[test]
    fn beta_scaling_is_quadratic() {
        let base = unit(6, 2, 3);
        let scaled = ModelConfig::new(6, 2, 3, vec![3.0, 3.0], 0.0).unwrap();
        let p = PolicySpec::greedy();
        let a = estimate_functionals(&base, &p, 5, 1000, 9).unwrap();
        let b = estimate_functionals(&scaled, &p, 5, 1000, 9).unwrap();
        assert!((b.single_tree_bias - 9.0 * a.single_tree_bias).abs() <= 1e-12 * b.single_tree_bias);
        assert!((b.cross_tree_bias - 9.0 * a.cross_tree_bias).abs() <= 1e-12 * b.cross_tree_bias);
        assert_eq!(a.overlap, b.overlap);
    }

    #[test]
    fn exploratory_matches_closed_forms() {
        let model = unit(8, 2, 4);
        let l = 6u32;
        let f = estimate_functionals(&model, &PolicySpec::exploratory(), l as usize, 40_000, 5).unwrap();
        // 1 - C(6,4)/C(8,4)
        let q: f64 = 1.0 - 15.0 / 70.0;
        let p = q / 2.0;
        // binomial pgf at 1/4 for each of the two informative coordinates
        let single = 2.0 * (1.0 - 0.75 * p).powi(l as i32);
        assert!(within(f.single_tree_bias, single, f.single_tree_bias_se, 4.0));
        let cross = 2.0 * max_binomial_exact(l, p, 0.25).unwrap().enumeration;
        assert!(within(f.cross_tree_bias, cross, f.cross_tree_bias_se, 4.0));
        let pi = SimplexPoint::new(allocation_target(&model).unwrap()).unwrap();
        let ov = l1_moment_exact(l, &pi, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        assert!(within(f.overlap, ov, f.overlap_se, 4.0));
    }

    #[test]
    fn functional_invariants() {
        let model = unit(8, 3, 4);
        for policy in [PolicySpec::greedy(), PolicySpec::exploratory(), PolicySpec::mix(0.3).unwrap()] {
            let f = estimate_functionals(&model, &policy, 8, 2000, 1).unwrap();
            assert!(f.cross_tree_bias <= f.single_tree_bias + 4.0 * f.single_tree_bias_se);
            assert!((0.0..=1.0).contains(&f.overlap));
        }
    }

    #[test]
    fn single_tree_bias_decreases_with_depth() {
        let model = unit(6, 2, 3);
        let vals: Vec<f64> = [2, 4, 6, 8, 10]
            .iter()
            .map(|&l| estimate_functionals(&model, &PolicySpec::greedy(), l, 2000, 4).unwrap().single_tree_bias)
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(estimate_functionals(&unit(4, 2, 2), &PolicySpec::greedy(), 3, 999, 0).is_err());
    }

    #[test]
    fn cart_bias1_arithmetic() {
        let t = cart_bound_terms(&unit(6, 2, 4), 5, 10, 1000.0).unwrap();
        assert!((t.bias1 - (8.0f64 / 15.0).powi(5)).abs() < 1e-15);
        let t = cart_bound_terms(&unit(4, 1, 4), 6, 10, 1000.0).unwrap();
        assert_eq!(t.q, 1.0);
        assert!((t.bias1 - 4f64.powi(-6)).abs() < 1e-18);
        assert_eq!(t.etareq_passes, None);
    }

    #[test]
    fn bias2_is_a_max_binomial_moment() {
        // (1-p+p sqrt r)^{2l} F_{l,r}(p sqrt r / (1-p+p sqrt r)) = E[r^{max(M, M')}]
        for (d, s, m, l) in [(6, 2, 4, 5), (10, 3, 5, 12), (8, 2, 2, 30)] {
            let model = unit(d, s, m);
            let q = q_of(&model).unwrap();
            let cart = cart_bound_terms(&model, l, 4, 500.0).unwrap();
            let want = max_binomial_exact(l as u32, q, (-2.0 / s as f64).exp2()).unwrap().enumeration;
            assert!((cart.bias2 - want).abs() < 1e-11 * want.max(1e-300), "{} vs {want}", cart.bias2);
            let bench = benchmark_bound_terms(&model, l, 4, 500.0).unwrap();
            let want = max_binomial_exact(l as u32, q / s as f64, 0.25).unwrap().enumeration;
            assert!((bench.bias2 - want).abs() < 1e-11 * want);
            assert!(cart.f_argument > 0.0 && cart.f_argument < 1.0);
        }
    }

    #[test]
    fn benchmark_argument() {
        let model = unit(10, 3, 5);
        let q = q_of(&model).unwrap();
        let t = benchmark_bound_terms(&model, 4, 2, 100.0).unwrap();
        assert!((t.f_argument - q / (6.0 - q)).abs() < 1e-15);
        assert_eq!(t.pi.len(), 10);
        assert!((t.bias1 - (1.0 - q / 4.0).powi(4)).abs() < 1e-15);
    }

    #[test]
    fn variance_proxy_uses_collapsed_dimension() {
        let model = unit(4, 2, 3);
        let l = 8;
        let cart = cart_bound_terms(&model, l, 5, 256.0).unwrap();
        let bench = benchmark_bound_terms(&model, l, 5, 256.0).unwrap();
        assert_eq!(cart.pi.len(), 3);
        assert_eq!(bench.pi.len(), 4);
        assert!(cart.overlap_proxy.se.is_none());
        let pi = SimplexPoint::new(cart.pi.clone()).unwrap();
        let exact = l1_moment_exact(l as u32, &pi, 2f64.powf(-0.25)).unwrap();
        assert!((cart.varterm - exact).abs() < 1e-12, "{} vs {exact}", cart.varterm);
        assert!(bench.overlap_proxy.value < cart.overlap_proxy.value);
    }

    #[test]
    fn factors_in_unit_interval() {
        for (d, s, m) in [(6, 2, 4), (12, 3, 4), (5, 5, 2), (20, 2, 10)] {
            let model = unit(d, s, m);
            for l in [0, 1, 3, 9] {
                for t in [
                    cart_bound_terms(&model, l, 3, 50.0).unwrap(),
                    benchmark_bound_terms(&model, l, 3, 50.0).unwrap(),
                ] {
                    for v in [t.bias1, t.bias2, t.remainder, t.overlap_proxy.value] {
                        assert!((0.0..=1.0 + 1e-12).contains(&v), "{v}");
                    }
                    assert!(t.varterm >= 0.0);
                }
            }
        }
    }

    #[test]
    fn replacement_ratio_is_one_for_single_informative() {
        let model = unit(5, 1, 2);
        let r = equilibrium_replacement_ratio(&model, &PolicySpec::greedy(), &[3, 6, 9], 20_000, 2).unwrap();
        for row in &r.rows {
            assert!(within(row.ratio, 1.0, row.ratio_se, 4.0), "{row:?}");
        }
    }

    #[test]
    fn replacement_ratio_bounded_for_greedy() {
        let model = unit(10, 2, 8);
        let grid: Vec<usize> = (2..=20).step_by(3).collect();
        let r = equilibrium_replacement_ratio(&model, &PolicySpec::greedy(), &grid, 4000, 8).unwrap();
        assert_eq!(r.reference, "cart");
        for row in &r.rows {
            assert!(row.ratio > 0.2 && row.ratio < 5.0, "{row:?}");
        }
    }

    #[test]
    fn replacement_ratio_exploratory_uses_benchmark_factor() {
        let model = unit(10, 2, 8);
        let r = equilibrium_replacement_ratio(&model, &PolicySpec::exploratory(), &[4, 10, 16], 20_000, 8).unwrap();
        assert_eq!(r.reference, "benchmark");
        for row in &r.rows {
            assert!(within(row.ratio, 1.0, row.ratio_se, 4.0), "{row:?}");
        }
    }
}
