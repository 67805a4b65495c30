//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line per check
//! and fails its test if any line fails. Criteria run one at a time so the
//! wall-clock limits are measured without contention between them.
//!
//! Run with `cargo test -p maskforest-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use maskforest::bellman::{
    bellman_backward, brute_force_policy_search, empirical_law, gamma_diff_formula, reproduce_counterexample,
    terminal_law_exact, LawMode,
};
use maskforest::dynamics::{
    allocation_target, estimate_drift_and_kappa, exp_moment_diag, imbalance, run_branch, summarize_allocation,
};
use maskforest::environment::{opportunity_rate, sample_mask, to_f64};
use maskforest::forest::{heatmap_experiment, ExperimentGrid, HeatmapRow, Window};
use maskforest::poisson::{
    f_functional, fourier_coefficient, l1_moment_exact, l_functional, max_binomial_exact, min_multinomial_exact,
    SimplexPoint,
};
use maskforest::policies::action_set;
use maskforest::risk::estimate_functionals;
use maskforest::seed::stream_rng;
use maskforest::{CountState, ExactObjective, ModelConfig, PolicySpec};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

const SEED: u64 = 20_240_601;

struct Criterion {
    name: &'static str,
    start: Instant,
    limit: Duration,
    failures: usize,
}

impl Criterion {
    fn new(name: &'static str, limit_secs: u64) -> Self {
        Criterion {
            name,
            start: Instant::now(),
            limit: Duration::from_secs(limit_secs),
            failures: 0,
        }
    }

    fn check(&mut self, what: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{}] {what}: {detail}", if pass { "PASS" } else { "FAIL" }, self.name);
    }

    fn finish(mut self) {
        let took = self.start.elapsed();
        let limit = self.limit;
        self.check("runtime", took < limit, format!("{:.2?} (limit {limit:?})", took));
        assert_eq!(self.failures, 0, "{} check(s) failed in {}", self.failures, self.name);
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn parse_rat(s: &str) -> BigRational {
    match s.split_once('/') {
        Some((n, d)) => BigRational::new(n.parse().unwrap(), d.parse().unwrap()),
        None => BigRational::from_integer(s.parse().unwrap()),
    }
}

#[test]
fn counterexample_exact() {
    let _g = serial();
    let mut c = Criterion::new("counterexample", 1);

    let out = Command::new(env!("CARGO_BIN_EXE_maskforest"))
        .args(["bellman", "counterexample", "--B", "15"])
        .output()
        .expect("spawn");
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).expect("json");
    let mut law: Vec<BigRational> = doc["law"]
        .as_array()
        .expect("law states")
        .iter()
        .map(|s| parse_rat(s["prob"].as_str().unwrap()))
        .collect();
    law.sort();
    let mut want = vec![rat(1, 225), rat(14, 225), rat(14, 225), rat(28, 225), rat(28, 225), rat(140, 225)];
    want.sort();
    c.check(
        "greedy terminal law",
        out.status.success() && law == want,
        format!("{:?}", law.iter().map(|r| r.to_string()).collect::<Vec<_>>()),
    );

    let eps = rat(1, 100);
    let mut all_match = true;
    let mut signs_ok = true;
    for b in 2..=30u32 {
        let rep = reproduce_counterexample(b, &eps).unwrap();
        let literal = rat(29 - 2 * b as i64, 48 * b as i64);
        all_match &= rep.gamma_diff == literal && gamma_diff_formula(b) == literal;
        signs_ok &= if b >= 15 { rep.gamma_diff.is_negative() } else { rep.gamma_diff.is_positive() };
    }
    c.check("Gamma(a) - Gamma(b) = (29-2B)/(48B), B = 2..30", all_match, "exact".into());
    c.check("sign flips at B = 15", signs_ok, "negative for B >= 15, positive for B <= 14".into());

    let rep = reproduce_counterexample(15, &eps).unwrap();
    // theta = eps * P(Z_1 = (1,0)) * P(mask exposes both informative coordinates)
    let theta = eps.clone() * rat(7, 15) * rat(6, 15);
    let expansion = theta.clone() * rat(29 - 30, 48 * 15) + theta.clone() * theta * rat(14, 15) * rat(15, 16);
    c.check(
        "Delta J (B=15, eps=1/100) equals the expansion",
        rep.delta_j == expansion && rep.delta_j == rep.delta_j_expansion,
        format!("{}", rep.delta_j),
    );
    c.check("Delta J (B=15, eps=1/100) is negative", rep.delta_j.is_negative(), format!("{}", rep.delta_j));
    let small = reproduce_counterexample(15, &rat(1, 200)).unwrap();
    c.check(
        "Delta J (B=15, eps=1/200) is negative",
        small.delta_j.is_negative(),
        format!("{}", small.delta_j),
    );
    c.finish();
}

#[test]
fn dp_matches_brute_force() {
    let _g = serial();
    let mut c = Criterion::new("dp-vs-brute-force", 10);
    let model = ModelConfig::unit(3, 2, 2).unwrap();
    let l = 2;
    let mode = LawMode::Reduced;
    let obj = ExactObjective::default_for(&model, l, 1, None, mode).unwrap();
    let table = bellman_backward(&model, |n: &[u32]| obj.phi(n), l, mode).unwrap();
    let search = brute_force_policy_search(&model, &obj, l, mode).unwrap();
    c.check(
        "V0(0) = best deterministic policy value",
        *table.root_value() == search.best_value,
        format!("{} vs {}", table.root_value(), search.best_value),
    );
    c.finish();
}

#[test]
fn poisson_identities() {
    let _g = serial();
    let mut c = Criterion::new("poisson-identities", 30);

    let mut worst = 0.0f64;
    for l in 1..=8 {
        for p in [0.2, 0.5, 0.8] {
            for r in [0.25, 2f64.powf(-1.0), 2f64.powf(-2.0 / 3.0)] {
                let m = max_binomial_exact(l, p, r).unwrap();
                worst = worst.max((m.enumeration - m.closed_form).abs());
            }
        }
    }
    c.check("max-binomial identity, tol 1e-10", worst <= 1e-10, format!("max error {worst:.3e}"));

    let points = |d: usize| {
        let mut w: Vec<f64> = (1..=d).map(|j| j as f64).collect();
        let t: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= t);
        [SimplexPoint::uniform(d), SimplexPoint::new(w).unwrap()]
    };
    let (mut literal, mut corrected) = (0.0f64, 0.0f64);
    for d in 2..=4 {
        for p in points(d) {
            for l in 1..=6 {
                for r in [0.25, 0.5] {
                    let lv = l_functional(l, d, r, &p).unwrap().value;
                    let mm = min_multinomial_exact(l, d, &p, r).unwrap();
                    literal = literal.max((mm - r.powi(l as i32) * lv).abs());
                    let l1 = l1_moment_exact(l, &p, r.sqrt()).unwrap();
                    corrected = corrected.max((l1 - lv).abs());
                }
            }
        }
    }
    c.check(
        "min-multinomial identity E[r^sum min] = r^l L, tol 1e-8",
        literal <= 1e-8,
        format!("max error {literal:.3e}"),
    );
    c.check(
        "L = E[r^(|N-N'|_1 / 2)], tol 1e-8",
        corrected <= 1e-8,
        format!("max error {corrected:.3e}"),
    );

    let mut worst = 0.0f64;
    for rho in [0.3, 0.5, 0.7, 2f64.powf(-0.5)] {
        for k in 0..=10 {
            worst = worst.max((fourier_coefficient(rho, k).unwrap() - rho.powi(k as i32)).abs());
        }
    }
    c.check("Fourier coefficients, k <= 10, tol 1e-10", worst <= 1e-10, format!("max error {worst:.3e}"));
    c.finish();
}

#[test]
fn asymptotic_orders() {
    let _g = serial();
    let mut c = Criterion::new("asymptotic-orders", 120);
    let f = |l| f_functional(l, 0.25, 0.4).unwrap();
    let ratio = f(8192) / f(4096);
    let target = 2f64.powf(-0.5);
    c.check(
        "F(2l)/F(l) at l=4096 within 5% of 2^-1/2",
        (ratio / target - 1.0).abs() <= 0.05,
        format!("{ratio:.5} vs {target:.5}"),
    );
    let p = SimplexPoint::uniform(3);
    let lf = |l| l_functional(l, 3, 0.5, &p).unwrap().value;
    let ratio = lf(2048) / lf(1024);
    c.check(
        "L(2l)/L(l) at l=1024, d=3 within 10% of 1/2",
        (ratio / 0.5 - 1.0).abs() <= 0.10,
        format!("{ratio:.5}"),
    );
    c.finish();
}

#[test]
fn one_step_identity_and_bounded_jump() {
    let _g = serial();
    let mut c = Criterion::new("one-step-identity", 30);
    const TRAJECTORIES: usize = 1000;
    const DEPTH: usize = 200;
    for (d, s, m) in [(6, 2, 4), (10, 3, 5), (12, 4, 6)] {
        let model = ModelConfig::unit(d, s, m).unwrap();
        let bound = (1.0 - 1.0 / s as f64).sqrt() + 1e-12;
        let (mut steps, mut identity_bad, mut jump_bad) = (0usize, 0usize, 0usize);
        let mut worst_jump = 0.0f64;
        for (pi, policy) in [PolicySpec::greedy(), PolicySpec::exploratory()].iter().enumerate() {
            for i in 0..TRAJECTORIES {
                let mut rng = stream_rng(SEED, &[1, d as u64, pi as u64, i as u64]);
                let traj = run_branch(&model, policy, DEPTH, &mut rng);
                let mut cur = imbalance(&vec![0; s], 0, s).unwrap();
                for rec in &traj.informative {
                    let next = imbalance(&rec.z, rec.n, s).unwrap();
                    let s_i = s as i64;
                    let want = cur.scaled_v + 2 * s_i * cur.scaled_delta[rec.coord] + s_i * (s_i - 1);
                    identity_bad += usize::from(rec.coord >= s || next.scaled_v != want);
                    let jump = (next.w - cur.w).abs();
                    worst_jump = worst_jump.max(jump);
                    jump_bad += usize::from(jump > bound);
                    steps += 1;
                    cur = next;
                }
            }
        }
        c.check(
            &format!("exact identity on ({d},{s},{m})"),
            identity_bad == 0 && steps > 0,
            format!("{identity_bad} violations over {steps} informative steps"),
        );
        c.check(
            &format!("bounded jump on ({d},{s},{m})"),
            jump_bad == 0,
            format!("max |W_n+1 - W_n| = {worst_jump:.6} <= {bound:.6}"),
        );
    }
    c.finish();
}

#[test]
fn drift_and_contraction() {
    let _g = serial();
    let mut c = Criterion::new("drift", 120);
    // 100 informative steps x 1000 replicates = 1e5 informative steps per run
    let (horizon, reps) = (100, 1000);
    for (d, s, m) in [(6, 2, 4), (10, 3, 5)] {
        let model = ModelConfig::unit(d, s, m).unwrap();
        let rep = estimate_drift_and_kappa(&model, &PolicySpec::exploratory(), horizon, reps, SEED).unwrap();
        let used: Vec<_> = rep.buckets.iter().filter(|b| !b.flagged).collect();
        let worst = used
            .iter()
            .map(|b| (b.mean / b.se).abs())
            .fold(0.0f64, f64::max);
        c.check(
            &format!("exploratory drift within 3 SE of zero on ({d},{s},{m})"),
            !used.is_empty() && used.iter().all(|b| b.mean.abs() <= 3.0 * b.se),
            format!("{} buckets, max |mean|/SE = {worst:.2}", used.len()),
        );
    }
    let model = ModelConfig::unit(6, 2, 4).unwrap();
    let greedy = estimate_drift_and_kappa(&model, &PolicySpec::greedy(), horizon, reps, SEED).unwrap();
    let cstar = 3.0 / 14.0;
    c.check(
        "greedy kappa-hat >= 3/14 - 3 SE on (6,2,4)",
        greedy.kappa_hat >= cstar - 3.0 * greedy.kappa_se,
        format!("{:.4} (SE {:.4})", greedy.kappa_hat, greedy.kappa_se),
    );
    let mixes: Vec<_> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&a| estimate_drift_and_kappa(&model, &PolicySpec::mix(a).unwrap(), horizon, reps, SEED).unwrap())
        .collect();
    let ordered = mixes
        .windows(2)
        .all(|w| w[0].kappa_hat <= w[1].kappa_hat + 3.0 * w[0].kappa_se.hypot(w[1].kappa_se));
    c.check(
        "mixture kappa-hat nondecreasing in alpha within 3 SE",
        ordered,
        mixes
            .iter()
            .map(|r| format!("{:.4}", r.kappa_hat))
            .collect::<Vec<_>>()
            .join(" <= "),
    );
    c.finish();
}

#[test]
fn compression_contrast() {
    let _g = serial();
    let mut c = Criterion::new("compression", 180);
    let model = ModelConfig::unit(10, 2, 8).unwrap();
    let grid = [500, 1000, 2000];
    let g = exp_moment_diag(&model, &PolicySpec::greedy(), 0.5, &grid, 10_000, SEED).unwrap();
    let ratio = g[2].mean / g[1].mean;
    c.check("greedy E exp(eta W): n=2000 / n=1000 <= 1.1", ratio <= 1.1, format!("{ratio:.4}"));
    let e = exp_moment_diag(&model, &PolicySpec::exploratory(), 0.5, &grid, 10_000, SEED).unwrap();
    let ratio = e[2].mean / e[0].mean;
    c.check("exploratory E exp(eta W): n=2000 / n=500 >= 2", ratio >= 2.0, format!("{ratio:.4}"));
    c.finish();
}

#[test]
fn first_order_limit() {
    let _g = serial();
    let mut c = Criterion::new("first-order-limit", 30);
    let m = ModelConfig::m_from_gamma(10, 0.5).unwrap();
    let model = ModelConfig::unit(10, 3, m).unwrap();
    let q = to_f64(&opportunity_rate(10, 3, m).unwrap());
    let oracle: Vec<f64> = (0..10).map(|j| if j < 3 { q / 3.0 } else { (1.0 - q) / 7.0 }).collect();
    let target = allocation_target(&model).unwrap();
    let same = target.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-15);
    for (i, policy) in [PolicySpec::greedy(), PolicySpec::exploratory(), PolicySpec::mix(0.5).unwrap()]
        .iter()
        .enumerate()
    {
        let mut rng = stream_rng(SEED, &[8, i as u64]);
        let traj = run_branch(&model, policy, 100_000, &mut rng);
        let dev = summarize_allocation(&model, &[traj])
            .unwrap()
            .empirical
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        c.check(
            &format!("{policy}: max_j |N_t,j / t - pi_j| < 0.01 (m={m})"),
            same && dev < 0.01,
            format!("{dev:.5}"),
        );
    }
    c.finish();
}

#[test]
fn exact_law_cross_check() {
    let _g = serial();
    let mut c = Criterion::new("exact-law", 120);
    let model = ModelConfig::unit(6, 2, 4).unwrap();
    let policy = PolicySpec::greedy();
    let mode = LawMode::Reduced;
    let n = 1_000_000u64;
    let exact = terminal_law_exact(&model, &policy, 2, mode).unwrap().to_real();
    let counts: BTreeMap<Vec<u32>, u64> = empirical_law(&model, &policy, 2, n as usize, SEED, mode);
    let mut worst = 0.0f64;
    let mut ok = counts.keys().all(|k| exact.mass(k) > 0.0);
    for (state, &p) in exact.iter() {
        let freq = counts.get(state).copied().unwrap_or(0) as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let z = (freq - p).abs() / se;
        worst = worst.max(z);
        ok &= z <= 4.0;
    }
    c.check("per-state frequencies within 4 SE", ok, format!("max |z| = {worst:.2}"));
    c.finish();
}

#[test]
fn risk_consistency() {
    let _g = serial();
    let mut c = Criterion::new("risk", 120);
    let (d, s, m, l) = (8usize, 2usize, 4usize, 6u32);
    let model = ModelConfig::unit(d, s, m).unwrap();
    let rf = estimate_functionals(&model, &PolicySpec::exploratory(), l as usize, 100_000, SEED).unwrap();
    let q = to_f64(&opportunity_rate(d, s, m).unwrap());
    let pi_j = q / s as f64;
    let beta2: f64 = model.beta.iter().map(|b| b * b).sum();

    let single = beta2 * (1.0 - 0.75 * pi_j).powi(l as i32);
    c.check(
        "single-tree bias vs sum beta^2 (1 - 3q/(4s))^l",
        (rf.single_tree_bias - single).abs() <= 4.0 * rf.single_tree_bias_se,
        format!("{:.6} vs {single:.6} (SE {:.1e})", rf.single_tree_bias, rf.single_tree_bias_se),
    );
    let cross = beta2 * max_binomial_exact(l, pi_j, 0.25).unwrap().enumeration;
    c.check(
        "cross-tree bias vs max-binomial functional",
        (rf.cross_tree_bias - cross).abs() <= 4.0 * rf.cross_tree_bias_se,
        format!("{:.6} vs {cross:.6} (SE {:.1e})", rf.cross_tree_bias, rf.cross_tree_bias_se),
    );

    let pi: Vec<f64> = (0..d).map(|j| if j < s { pi_j } else { (1.0 - q) / (d - s) as f64 }).collect();
    let pi = SimplexPoint::new(pi).unwrap();
    let h = 2f64.powf(-0.5);
    let literal = min_multinomial_exact(l, d, &pi, h).unwrap() / h.powi(l as i32);
    c.check(
        "overlap vs min_multinomial(l,d,pi,2^-1/2) / 2^(-l/2)",
        (rf.overlap - literal).abs() <= 4.0 * rf.overlap_se,
        format!("{:.6} vs {literal:.6} (SE {:.1e})", rf.overlap, rf.overlap_se),
    );
    let scaled = min_multinomial_exact(l, d, &pi, 2.0).unwrap();
    let lhs = rf.overlap * 2f64.powi(l as i32);
    c.check(
        "overlap * 2^l vs min_multinomial(l,d,pi,2)",
        (lhs - scaled).abs() <= 4.0 * rf.overlap_se * 2f64.powi(l as i32),
        format!("{lhs:.6} vs {scaled:.6}"),
    );
    let l1 = l1_moment_exact(l, &pi, h).unwrap();
    c.check(
        "overlap vs E[2^(-|N-N'|_1 / 2)]",
        (rf.overlap - l1).abs() <= 4.0 * rf.overlap_se,
        format!("{:.6} vs {l1:.6}", rf.overlap),
    );
    c.finish();
}

#[test]
fn schur_property() {
    let _g = serial();
    let mut c = Criterion::new("schur", 10);
    let psis: [(&str, fn(f64) -> f64); 3] = [("sum x^2", |x| x * x), ("sum x^4", |x| x.powi(4)), ("sum e^x", f64::exp)];
    let mut rng = stream_rng(SEED, &[11]);
    let mut mismatches = [0usize; 3];
    let mut pairs = 0;
    while pairs < 10_000 {
        let d = rng.random_range(3..=12usize);
        let s = rng.random_range(2..=d);
        let m = rng.random_range(1..=d);
        let model = ModelConfig::unit(d, s, m).unwrap();
        let mask = sample_mask(&mut rng, d, m).unwrap();
        let exposed: Vec<usize> = mask.members().iter().copied().filter(|&j| j < s).collect();
        if exposed.is_empty() {
            continue;
        }
        let counts: Vec<u32> = (0..d).map(|_| rng.random_range(0..8)).collect();
        let state = CountState::from_counts(counts.clone());
        let greedy = action_set(&PolicySpec::greedy(), &model, &state, &mask);
        for (k, (_, phi)) in psis.iter().enumerate() {
            let value = |j: usize| {
                (0..s)
                    .map(|i| phi((counts[i] + u32::from(i == j)) as f64))
                    .sum::<f64>()
            };
            let vals: Vec<f64> = exposed.iter().map(|&j| value(j)).collect();
            let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let argmin: Vec<usize> = exposed
                .iter()
                .zip(&vals)
                .filter(|(_, v)| **v <= best * (1.0 + 1e-12))
                .map(|(&j, _)| j)
                .collect();
            mismatches[k] += usize::from(argmin != greedy);
        }
        pairs += 1;
    }
    for (k, (name, _)) in psis.iter().enumerate() {
        c.check(
            &format!("greedy set = argmin of {name}"),
            mismatches[k] == 0,
            format!("{} mismatches over {pairs} pairs", mismatches[k]),
        );
    }
    c.finish();
}

#[test]
fn forest_qualitative() {
    let _g = serial();
    let mut c = Criterion::new("forest", 600);
    let grid = ExperimentGrid {
        d: 40,
        s: 5,
        n0: 300,
        depth: 5,
        trees: 100,
        reps: 20,
        gamma_grid: vec![0.02, 0.6],
        snr_grid: vec![2.0],
        ..ExperimentGrid::default()
    };
    let rows = heatmap_experiment(&grid, SEED).unwrap();
    let cell = |g: f64, w: Window| -> &HeatmapRow {
        rows.iter().find(|r| r.gamma == g && r.w == w).expect("cell")
    };
    let (w0, inf) = (cell(0.6, Window::Finite(0.0)), cell(0.6, Window::Infinite));
    c.check(
        "gamma=0.6: MSE(w=0) < MSE(w=inf)",
        w0.mean_mse < inf.mean_mse,
        format!("{:.4} vs {:.4}", w0.mean_mse, inf.mean_mse),
    );
    for &w in &grid.w_grid {
        let (lo, hi) = (cell(0.02, w), cell(0.6, w));
        c.check(
            &format!("w={w}: MSE(gamma=0.02) > MSE(gamma=0.6)"),
            lo.mean_mse > hi.mean_mse,
            format!("{:.4} vs {:.4}", lo.mean_mse, hi.mean_mse),
        );
    }
    c.finish();
}
