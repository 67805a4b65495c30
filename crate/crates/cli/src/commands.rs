use anyhow::{anyhow, bail, Context, Result};
use maskforest::bellman::{
    brute_force_policy_search, certificate_scan, objective_j, reproduce_counterexample, terminal_law, AnyLaw,
    EnsembleObjective, LawMode, TerminalLaw, Violation,
};
use maskforest::dynamics::{
    estimate_drift_and_kappa_with, exp_moment_diag, run_branch, summarize_allocation,
};
use maskforest::environment::{check_etareq, drift_constant_cstar, hypergeom_pmf, opportunity_rate, to_f64};
use maskforest::forest::{heatmap_experiment, ExperimentGrid};
use maskforest::poisson::{
    f_functional, fourier_coefficient, kernel_density, l1_moment_exact, l_functional_with, max_binomial_exact,
    min_multinomial_exact, LOptions, SimplexPoint,
};
use maskforest::risk::{benchmark_bound_terms, cart_bound_terms, equilibrium_replacement_ratio, estimate_functionals};
use maskforest::scalar::render_ratio;
use maskforest::seed::stream_rng;
use maskforest::{ModelConfig, PolicyKind, Scalar};
use num_bigint::BigInt;
use num_rational::BigRational;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::output::{coords, joined, scalar, Sink};

pub fn model(a: &ModelArgs) -> Result<ModelConfig> {
    let m = match (a.m, a.gamma) {
        (Some(m), _) => m,
        (None, Some(g)) => ModelConfig::m_from_gamma(a.d, g)?,
        (None, None) => 4.min(a.d),
    };
    let beta = a.beta.clone().unwrap_or_else(|| vec![1.0; a.s]);
    Ok(ModelConfig::new(a.d, a.s, m, beta, a.sigma0_sq)?)
}

pub fn dispatch(cli: &Cli, config: Option<&Value>) -> Result<()> {
    let g = &cli.global;
    let sink = Sink {
        path: g.out.clone(),
        format: g.format,
    };
    let seed = g.seed;
    match &cli.command {
        Command::Env(a) => env(&model(&a.model)?, &sink),
        Command::Simulate(a) => simulate(a, seed, &sink),
        Command::Drift(a) => {
            let m = model(&a.model)?;
            let report = estimate_drift_and_kappa_with(&m, &a.policy.policy, a.horizon, a.reps, seed, a.min_bucket)?;
            if sink.format == Some(Format::Csv) {
                #[derive(Serialize)]
                struct Row {
                    key: String,
                    w: f64,
                    count: usize,
                    mean: f64,
                    se: f64,
                    shifted_w: f64,
                    shifted_mean: f64,
                    shifted_se: f64,
                    flagged: bool,
                }
                let rows: Vec<Row> = report
                    .buckets
                    .iter()
                    .map(|b| Row {
                        key: b.key.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
                        w: b.w,
                        count: b.count,
                        mean: b.mean,
                        se: b.se,
                        shifted_w: b.shifted_w,
                        shifted_mean: b.shifted_mean,
                        shifted_se: b.shifted_se,
                        flagged: b.flagged,
                    })
                    .collect();
                sink.rows(&rows)
            } else {
                sink.json(&json!({"policy": a.policy.policy.to_string(), "report": report}))
            }
        }
        Command::Expmoment(a) => {
            let m = model(&a.model)?;
            sink.rows(&exp_moment_diag(&m, &a.policy.policy, a.eta, &a.n_grid, a.reps, seed)?)
        }
        Command::Allocation(a) => allocation(a, seed, &sink),
        Command::Poisson { command } => poisson(command, seed, &sink),
        Command::Risk(a) => risk(a, seed, &sink),
        Command::Bellman { command } => bellman(command, &sink),
        Command::Forest {
            command: ForestCommand::Heatmap { reps },
        } => {
            let mut grid: ExperimentGrid = match config {
                Some(v) => serde_json::from_value(v.clone()).context("experiment grid")?,
                None => ExperimentGrid::default(),
            };
            if let Some(r) = reps {
                grid.reps = *r;
            }
            sink.rows(&heatmap_experiment(&grid, seed)?)
        }
    }
}

fn env(m: &ModelConfig, sink: &Sink) -> Result<()> {
    let q = opportunity_rate(m.d, m.s, m.m)?;
    let pmf = (0..=m.s.min(m.m))
        .map(|k| Ok(json!({"k": k, "prob": render_ratio(&hypergeom_pmf(m.d, m.s, m.m, k)?)})))
        .collect::<Result<Vec<_>>>()?;
    let etareq = if m.s >= 2 {
        serde_json::to_value(check_etareq(m.d, m.s, m.m)?)?
    } else {
        Value::Null
    };
    let target = maskforest::dynamics::allocation_target(m)?;
    sink.json(&json!({
        "d": m.d,
        "s": m.s,
        "m": m.m,
        "gamma": m.gamma(),
        "q": render_ratio(&q),
        "q_value": to_f64(&q),
        "exposure_pmf": pmf,
        "drift_constant": drift_constant_cstar(m.d, m.s, m.m)?,
        "etareq": etareq,
        "allocation": target,
    }))
}

fn simulate(a: &SimulateArgs, seed: u64, sink: &Sink) -> Result<()> {
    let m = model(&a.model)?;
    #[derive(Serialize)]
    struct Row {
        branch: usize,
        t: usize,
        clock: usize,
        informative: bool,
        chosen: usize,
        mask: String,
        counts: String,
    }
    let mut rows = Vec::new();
    for b in 0..a.branches {
        let mut rng = stream_rng(seed, &[0x5111, b as u64]);
        let traj = run_branch(&m, &a.policy.policy, a.depth, &mut rng);
        traj.check_invariants()?;
        for step in &traj.steps {
            rows.push(Row {
                branch: b + 1,
                t: step.t,
                clock: traj.clock[step.t],
                informative: traj.clock[step.t] > traj.clock[step.t - 1],
                chosen: step.chosen + 1,
                mask: joined(step.mask.members()),
                counts: step.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            });
        }
    }
    sink.rows(&rows)
}

fn allocation(a: &AllocationArgs, seed: u64, sink: &Sink) -> Result<()> {
    let m = model(&a.model)?;
    let trajs: Vec<_> = (0..a.branches)
        .map(|b| run_branch(&m, &a.policy.policy, a.t, &mut stream_rng(seed, &[0xA110, b as u64])))
        .collect();
    let summary = summarize_allocation(&m, &trajs)?;
    if sink.format == Some(Format::Csv) {
        #[derive(Serialize)]
        struct Row {
            j: usize,
            empirical: f64,
            target: f64,
            abs_dev: f64,
        }
        let rows: Vec<Row> = (0..m.d)
            .map(|j| Row {
                j: j + 1,
                empirical: summary.empirical[j],
                target: summary.target[j],
                abs_dev: (summary.empirical[j] - summary.target[j]).abs(),
            })
            .collect();
        sink.rows(&rows)
    } else {
        sink.json(&json!({"policy": a.policy.policy.to_string(), "t": a.t, "branches": a.branches, "summary": summary}))
    }
}

fn poisson(cmd: &PoissonCommand, seed: u64, sink: &Sink) -> Result<()> {
    let v = match cmd {
        PoissonCommand::Kernel { rho, theta } => json!({"density": kernel_density(*rho, *theta)?}),
        PoissonCommand::Fourier { rho, k_max } => {
            let rows = (0..=*k_max)
                .map(|k| Ok(json!({"k": k, "quadrature": fourier_coefficient(*rho, k)?, "exact": rho.powi(k as i32)})))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(rows)
        }
        PoissonCommand::F { l, r, alpha } => json!({"value": f_functional(*l, *r, *alpha)?}),
        PoissonCommand::L { l, r, p, mc_samples } => {
            let pt = SimplexPoint::new(p.clone())?;
            let opts = LOptions {
                mc_samples: *mc_samples,
                seed,
                ..LOptions::default()
            };
            serde_json::to_value(l_functional_with(*l, p.len(), *r, &pt, opts)?)?
        }
        PoissonCommand::Max { l, p, r } => serde_json::to_value(max_binomial_exact(*l, *p, *r)?)?,
        PoissonCommand::Min { l, p, r } => {
            let pt = SimplexPoint::new(p.clone())?;
            let lv = l_functional_with(*l, p.len(), *r, &pt, LOptions { seed, ..LOptions::default() })?;
            json!({
                "min_moment": min_multinomial_exact(*l, p.len(), &pt, *r)?,
                "r_pow_l_times_l": r.powi(*l as i32) * lv.value,
                "l_functional": lv,
                "half_l1_moment": l1_moment_exact(*l, &pt, r.sqrt())?,
            })
        }
    };
    sink.json(&v)
}

fn risk(a: &RiskArgs, seed: u64, sink: &Sink) -> Result<()> {
    let m = model(&a.model)?;
    if a.replacement {
        #[derive(Serialize)]
        struct Row {
            policy: String,
            reference: &'static str,
            l: usize,
            estimate: f64,
            se: f64,
            reference_value: f64,
            ratio: f64,
            ratio_se: f64,
            etareq_passes: Option<bool>,
        }
        let mut rows = Vec::new();
        for p in &a.policies {
            let rep = equilibrium_replacement_ratio(&m, p, &a.l_grid, a.reps, seed)?;
            rows.extend(rep.rows.iter().map(|r| Row {
                policy: rep.policy.clone(),
                reference: rep.reference,
                l: r.l,
                estimate: r.estimate,
                se: r.se,
                reference_value: r.reference,
                ratio: r.ratio,
                ratio_se: r.ratio_se,
                etareq_passes: rep.etareq_passes,
            }));
        }
        return sink.rows(&rows);
    }
    #[derive(Serialize)]
    struct Row {
        policy: String,
        l: usize,
        pairs: usize,
        single_tree_bias: f64,
        single_tree_bias_se: f64,
        cross_tree_bias: f64,
        cross_tree_bias_se: f64,
        overlap: f64,
        overlap_se: f64,
        bound: &'static str,
        bias1: f64,
        bias2: f64,
        f_argument: f64,
        varterm: f64,
        overlap_proxy: f64,
        overlap_proxy_se: Option<f64>,
        remainder: f64,
        etareq_passes: Option<bool>,
    }
    let mut rows = Vec::new();
    for p in &a.policies {
        for &l in &a.l_grid {
            let f = estimate_functionals(&m, p, l, a.reps, seed)?;
            let (bound, t) = if p.kind == PolicyKind::Exploratory {
                ("benchmark", benchmark_bound_terms(&m, l, a.b, a.n0)?)
            } else {
                ("cart", cart_bound_terms(&m, l, a.b, a.n0)?)
            };
            rows.push(Row {
                policy: p.to_string(),
                l,
                pairs: f.pairs,
                single_tree_bias: f.single_tree_bias,
                single_tree_bias_se: f.single_tree_bias_se,
                cross_tree_bias: f.cross_tree_bias,
                cross_tree_bias_se: f.cross_tree_bias_se,
                overlap: f.overlap,
                overlap_se: f.overlap_se,
                bound,
                bias1: t.bias1,
                bias2: t.bias2,
                f_argument: t.f_argument,
                varterm: t.varterm,
                overlap_proxy: t.overlap_proxy.value,
                overlap_proxy_se: t.overlap_proxy.se,
                remainder: t.remainder,
                etareq_passes: t.etareq_passes,
            });
        }
    }
    sink.rows(&rows)
}

fn law_mode(a: &BellmanArgs, m: &ModelConfig) -> LawMode {
    match a.mode {
        ModeArg::Auto => LawMode::auto(m),
        ModeArg::Reduced => LawMode::Reduced,
        ModeArg::Full => LawMode::Full,
    }
}

fn law_json<S: Scalar>(law: &TerminalLaw<S>) -> Value {
    Value::Array(law.iter().map(|(n, p)| json!({"state": n, "prob": scalar(p)})).collect())
}

fn violation_json<S: Scalar>(v: &Violation<S>) -> Value {
    json!({
        "split": v.depth + 1,
        "state": v.state,
        "exposure": coords(&v.exposure),
        "mask": v.mask.as_ref().map(|m| coords(m)),
        "action": v.action + 1,
        "better": v.better + 1,
        "margin": scalar(&v.margin),
        "action_prob": scalar(&v.action_prob),
        "event_prob": scalar(&v.event_prob),
    })
}

fn bellman_exact<S: Scalar + 'static>(cmd: &BellmanCommand, a: &BellmanArgs, m: &ModelConfig) -> Result<Value> {
    let mode = law_mode(a, m);
    let obj = EnsembleObjective::<S>::default_for(m, a.l, a.b, a.n0, mode)?;
    let head = json!({"policy": a.policy.policy.to_string(), "l": a.l, "B": a.b, "mode": mode, "exact": S::EXACT});
    let body = match cmd {
        BellmanCommand::Objective(_) => {
            let law = terminal_law::<S>(m, &a.policy.policy, a.l, mode)?;
            let phi: S = law.iter().map(|(n, p)| p.clone() * obj.phi(n)).sum();
            json!({"objective": scalar(&objective_j(&law, &obj)), "mean_phi": scalar(&phi)})
        }
        BellmanCommand::Certify(_) => {
            let rep = certificate_scan(m, &a.policy.policy, &obj, a.l, mode)?;
            json!({
                "objective": scalar(&rep.objective),
                "root_value": scalar(&rep.root_value),
                "policy_gamma": scalar(&rep.policy_gamma),
                "violation_count": rep.violations.len(),
                "violations": rep.violations.iter().map(violation_json).collect::<Vec<_>>(),
            })
        }
        BellmanCommand::Search(_) => {
            let rep = brute_force_policy_search(m, &obj, a.l, mode)?;
            let reference = terminal_law::<S>(m, &a.policy.policy, a.l, mode)?;
            json!({
                "best_value": scalar(&rep.best_value),
                "policy_value": scalar(&objective_j(&reference, &obj)),
                "policies": rep.policies.to_string(),
                "best_policy": rep.best_policy.iter().map(|d| json!({
                    "split": d.depth + 1,
                    "state": d.state,
                    "exposure": coords(&d.exposure),
                    "mask": d.mask.as_ref().map(|m| coords(m)),
                    "action": d.action + 1,
                })).collect::<Vec<_>>(),
            })
        }
        _ => unreachable!(),
    };
    let mut out = head;
    out.as_object_mut().unwrap().extend(body.as_object().unwrap().clone());
    Ok(out)
}

pub fn parse_rational(s: &str) -> Result<BigRational> {
    let t = s.trim();
    if let Some((p, q)) = t.split_once('/') {
        let p: BigInt = p.trim().parse().map_err(|_| anyhow!("bad numerator in '{s}'"))?;
        let q: BigInt = q.trim().parse().map_err(|_| anyhow!("bad denominator in '{s}'"))?;
        if q == BigInt::from(0) {
            bail!("zero denominator in '{s}'");
        }
        return Ok(BigRational::new(p, q));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if !frac.chars().all(|c| c.is_ascii_digit()) {
        bail!("bad number '{s}'");
    }
    let digits: BigInt = format!("{int}{frac}").parse().map_err(|_| anyhow!("bad number '{s}'"))?;
    Ok(BigRational::new(digits, BigInt::from(10).pow(frac.len() as u32)))
}

fn bellman(cmd: &BellmanCommand, sink: &Sink) -> Result<()> {
    let v = match cmd {
        BellmanCommand::Counterexample { b, epsilon } => {
            let eps = parse_rational(epsilon)?;
            let r = reproduce_counterexample(*b, &eps)?;
            let rs = |x: &BigRational| Value::String(render_ratio(x));
            json!({
                "B": r.b,
                "epsilon": rs(&r.epsilon),
                "q": rs(&r.q),
                "law": law_json(&r.law),
                "objective_greedy": rs(&r.objective_greedy),
                "phi_a": rs(&r.phi_a),
                "phi_b": rs(&r.phi_b),
                "psi_aa": rs(&r.psi_aa),
                "psi_ab": rs(&r.psi_ab),
                "psi_bb": rs(&r.psi_bb),
                "quadratic_coefficient": rs(&r.quadratic_coefficient),
                "gamma_a": rs(&r.gamma_a),
                "gamma_b": rs(&r.gamma_b),
                "gamma_diff": rs(&r.gamma_diff),
                "gamma_diff_formula": rs(&r.gamma_diff_formula),
                "event_prob": rs(&r.event_prob),
                "theta": rs(&r.theta),
                "delta_j": rs(&r.delta_j),
                "delta_j_expansion": rs(&r.delta_j_expansion),
                "descent": r.descent(),
                "epsilon_threshold": r.epsilon_threshold.as_ref().map(rs),
                "violations": r.violations.iter().map(violation_json).collect::<Vec<_>>(),
            })
        }
        BellmanCommand::Law(a) => {
            let m = model(&a.model)?;
            let mode = law_mode(a, &m);
            let law = maskforest::bellman::terminal_law_exact(&m, &a.policy.policy, a.l, mode)?;
            let states = match &law {
                AnyLaw::Exact(l) => law_json(l),
                AnyLaw::Real(l) => law_json(l),
            };
            json!({"policy": a.policy.policy.to_string(), "l": a.l, "mode": mode, "exact": law.is_exact(), "states": states})
        }
        BellmanCommand::Objective(a) | BellmanCommand::Certify(a) | BellmanCommand::Search(a) => {
            let m = model(&a.model)?;
            if a.policy.policy.exactly_representable() {
                bellman_exact::<BigRational>(cmd, a, &m)?
            } else {
                bellman_exact::<f64>(cmd, a, &m)?
            }
        }
    };
    sink.json(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationals_parse_exactly() {
        assert_eq!(render_ratio(&parse_rational("1/100").unwrap()), "1/100");
        assert_eq!(render_ratio(&parse_rational("0.01").unwrap()), "1/100");
        assert_eq!(render_ratio(&parse_rational("3").unwrap()), "3/1");
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("a.b").is_err());
    }

    #[test]
    fn model_defaults() {
        let a = ModelArgs {
            d: 10,
            s: 3,
            m: None,
            gamma: Some(0.5),
            beta: None,
            sigma0_sq: 0.0,
        };
        let m = model(&a).unwrap();
        assert_eq!((m.m, m.beta.len()), (5, 3));
    }
}
