//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use eotlab::cost::{evaluate_cost, gibbs_kernel, reference_measure, CostMatrix, CostSpec, GibbsKernel};
use eotlab::invariance::{
    check_invariance, factorize, rectangle_identity_product, rectangle_inequality, CheckMode, Rectangle, Reference,
};
use eotlab::lab::{run_experiment, ExperimentRecord, ExperimentSpec, STAGE_RESIDUAL_TOL};
use eotlab::measure::{product_measure, quantize, Coupling, DiscreteMeasure, Law};
use eotlab::oracle::{brute_force_2x2, dual_newton, exhaustive_invariance};
use eotlab::solver::{sinkhorn, sinkhorn_from, Solution, SolveConfig};
use eotlab::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// A random instance with sizes in `2..=max`, cost uniform in [0, 1].
struct Instance {
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostMatrix,
    eps: f64,
    product: Coupling,
    kernel: GibbsKernel,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, max: usize, zero_cost: bool) -> Instance {
        let n = rng.random_range(2..=max);
        let m = rng.random_range(2..=max);
        let weights = |rng: &mut ChaCha8Rng, k: usize| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / s).collect::<Vec<_>>()
        };
        let line = |k: usize| (0..k).map(|i| i as f64).collect::<Vec<_>>();
        let mu = DiscreteMeasure::on_line(&line(n), &weights(rng, n)).unwrap();
        let nu = DiscreteMeasure::on_line(&line(m), &weights(rng, m)).unwrap();
        let values = Array2::from_shape_fn((n, m), |_| if zero_cost { 0.0 } else { rng.random::<f64>() });
        let eps = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let cost = CostMatrix::new(values).unwrap();
        let product = product_measure(&mu, &nu);
        let kernel = gibbs_kernel(&cost, eps, &product).unwrap();
        Instance {
            mu,
            nu,
            cost,
            eps,
            product,
            kernel,
        }
    }

    fn solve(&self) -> Result<Solution, String> {
        let sol = sinkhorn(&self.kernel, &self.mu, &self.nu, &SolveConfig::default()).map_err(e2s)?;
        ensure(sol.report.converged, || format!("solver stopped at {:e}", sol.report.marginal_error))?;
        Ok(sol)
    }

    fn reference(&self) -> Reference<'_> {
        Reference::Gibbs {
            kernel: &self.kernel,
            product: &self.product,
        }
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn experiment(json: &str) -> Result<Vec<ExperimentRecord>, String> {
    let spec = ExperimentSpec::from_json(json).map_err(e2s)?;
    Ok(run_experiment(&spec).map_err(e2s)?.records)
}

fn w1_series(records: &[ExperimentRecord]) -> Vec<f64> {
    records.iter().map(|r| r.w1_to_reference).collect()
}

fn stage_checks(records: &[ExperimentRecord]) -> Result<(), String> {
    for r in records {
        ensure(r.converged, || format!("stage {} did not converge", r.stage_param))?;
        ensure(r.invariance_residual <= STAGE_RESIDUAL_TOL, || {
            format!("stage {} residual {:e}", r.stage_param, r.invariance_residual)
        })?;
    }
    Ok(())
}

// 1. Optimizer agrees with the dual oracle and is cyclically invariant.
fn optimizer_iff_invariant() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_gap, mut worst_res): (f64, f64) = (0.0, 0.0);
    for trial in 0..200 {
        let inst = Instance::random(&mut rng, 6, false);
        let sol = inst.solve()?;
        let oracle = dual_newton(&inst.cost, inst.eps, &inst.mu, &inst.nu).map_err(e2s)?;
        let gap = max_abs_diff(sol.coupling.mass(), oracle.coupling.mass());
        ensure(gap <= 1e-7, || format!("instance {trial}: entrywise gap {gap:e}"))?;
        let report = check_invariance(&sol.coupling, inst.reference(), 3, u64::MAX, 0).map_err(e2s)?;
        ensure(report.mode == CheckMode::Exhaustive, || "cycle check fell back to sampling".into())?;
        let r = reference_measure(&inst.kernel, &inst.product).map_err(e2s)?;
        let brute = exhaustive_invariance(&sol.coupling, &r, 3).map_err(e2s)?;
        let res = report.max_residual.max(brute);
        ensure(res <= 1e-9, || format!("instance {trial}: residual {res:e}"))?;
        worst_gap = worst_gap.max(gap);
        worst_res = worst_res.max(res);
    }
    let took = start.elapsed();
    ensure(took <= Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "200 instances, max gap {worst_gap:.1e}, max residual {worst_res:.1e}, {:.1}s",
        took.as_secs_f64()
    ))
}

// 2. Symmetric 2x2 with absolute cost at ε = 1.
fn closed_form_2x2() -> Outcome {
    let expected = 1.0 / (2.0 * (1.0 + (-1.0f64).exp()));
    let mu = DiscreteMeasure::on_line(&[0.0, 1.0], &[0.5, 0.5]).map_err(e2s)?;
    let p = product_measure(&mu, &mu);
    let c = evaluate_cost(&CostSpec::Absolute, mu.atoms(), mu.atoms()).map_err(e2s)?;
    let k = gibbs_kernel(&c, 1.0, &p).map_err(e2s)?;
    let sol = sinkhorn(&k, &mu, &mu, &SolveConfig::default()).map_err(e2s)?;
    let line = brute_force_2x2(&mu, &mu, &c, 1.0).map_err(e2s)?;
    let newton = dual_newton(&c, 1.0, &mu, &mu).map_err(e2s)?;
    for (name, v) in [
        ("solver", sol.coupling.mass()[[0, 0]]),
        ("line search", line.coupling.mass()[[0, 0]]),
        ("dual newton", newton.coupling.mass()[[0, 0]]),
    ] {
        ensure((v - expected).abs() <= 1e-10, || format!("{name}: {v} vs {expected}"))?;
    }
    Ok(format!("π₁₁ = {:.12}", sol.coupling.mass()[[0, 0]]))
}

fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

// 3. Potentials are unique up to one constant.
fn gauge_uniqueness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut report = String::new();
    for trial in 0..20 {
        let inst = Instance::random(&mut rng, 6, false);
        let cfg = SolveConfig::default();
        let a = sinkhorn(&inst.kernel, &inst.mu, &inst.nu, &cfg).map_err(e2s)?;
        let init: Vec<f64> = (0..inst.nu.len()).map(|_| rng.random_range(-5.0..5.0) + 7.0).collect();
        let b = sinkhorn_from(&inst.kernel, &inst.mu, &inst.nu, &cfg, &init).map_err(e2s)?;
        let d_phi: Vec<f64> = a.potentials.log_phi.iter().zip(&b.potentials.log_phi).map(|(x, y)| y - x).collect();
        let d_psi: Vec<f64> = a.potentials.log_psi.iter().zip(&b.potentials.log_psi).map(|(x, y)| y - x).collect();
        let (m_phi, s_phi) = mean_and_std(&d_phi);
        let (m_psi, s_psi) = mean_and_std(&d_psi);
        ensure(s_phi <= 1e-8 && s_psi <= 1e-8, || format!("instance {trial}: std {s_phi:e}, {s_psi:e}"))?;
        ensure(m_phi.abs() > 1e-6 && m_phi.signum() == -m_psi.signum(), || {
            format!("instance {trial}: constants {m_phi} and {m_psi}")
        })?;
        ensure((m_phi + m_psi).abs() <= 1e-8, || format!("instance {trial}: {m_phi} + {m_psi} ≠ 0"))?;
        if trial == 0 {
            report = format!("20 instances, e.g. shift {m_phi:+.4} / {m_psi:+.4}, std {:.1e}", s_phi.max(s_psi));
        }
    }
    Ok(report)
}

// 4. Every Sinkhorn iterate is invariant, not just the limit.
fn iterate_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
    let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mu = DiscreteMeasure::on_line(&xs, &raw.iter().map(|w| w / s).collect::<Vec<_>>()).map_err(e2s)?;
    let nu = DiscreteMeasure::uniform_on_line(&xs).map_err(e2s)?;
    let cost = CostMatrix::new(Array2::from_shape_fn((5, 5), |_| rng.random::<f64>())).map_err(e2s)?;
    let p = product_measure(&mu, &nu);
    let k = gibbs_kernel(&cost, 0.02, &p).map_err(e2s)?;
    let r = reference_measure(&k, &p).map_err(e2s)?;
    let plain = SolveConfig {
        record_iterates: true,
        newton_after: None,
        eps_scaling: false,
        ..SolveConfig::default()
    };
    let sol = sinkhorn(&k, &mu, &nu, &plain).map_err(e2s)?;
    let recorded = sol.report.iterate_invariance_residuals.clone().unwrap_or_default();
    ensure(recorded.len() >= 50, || format!("only {} iterates", recorded.len()))?;
    let worst_recorded = recorded.iter().copied().fold(0.0, f64::max);
    ensure(worst_recorded <= 1e-10, || format!("recorded residual {worst_recorded:e}"))?;
    // Rebuild each iterate from scratch and enumerate every cycle up to length 3.
    let mut worst: f64 = 0.0;
    for t in 1..=recorded.len() {
        let cfg = SolveConfig { max_iter: t, ..plain };
        let it = sinkhorn(&k, &mu, &nu, &cfg).map_err(e2s)?;
        worst = worst.max(exhaustive_invariance(&it.coupling, &r, 3).map_err(e2s)?);
    }
    ensure(worst <= 1e-10, || format!("enumerated residual {worst:e}"))?;
    Ok(format!("{} iterates, max residual {:.1e}", recorded.len(), worst.max(worst_recorded)))
}

const GAUSSIANS: &str = r#""law_x":{"kind":"gaussian","params":{"mean":0,"std":1}},
  "law_y":{"kind":"gaussian","params":{"mean":0,"std":1}},
  "cost":{"kind":"squared_euclidean"},"eps":1.0"#;

// 5. Refinement of the marginals.
fn refine_marginals() -> Outcome {
    let start = Instant::now();
    let recs = experiment(&format!(
        r#"{{"kind":"refine_marginals",{GAUSSIANS},"schedule":[16,32,64,128,256],"reference_size":1024,"seed":7}}"#
    ))?;
    stage_checks(&recs)?;
    let w = w1_series(&recs);
    ensure(w.windows(2).all(|p| p[1] < 1.05 * p[0]), || format!("not decreasing: {w:?}"))?;
    ensure(w[w.len() - 1] < w[0] / 5.0, || format!("final {} vs first {}", w[w.len() - 1], w[0]))?;
    let took = start.elapsed();
    ensure(took <= Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!("W1 {:.3e} → {:.3e}, {:.1}s", w[0], w[w.len() - 1], took.as_secs_f64()))
}

// 6. Perturbations of the cost and of ε.
fn perturbations() -> Outcome {
    let strictly = |w: &[f64], what: &str| -> Result<(), String> {
        ensure(w.windows(2).all(|p| p[1] < p[0]), || format!("{what} not decreasing: {w:?}"))?;
        ensure(w[w.len() - 1] <= w[0] / 4.0, || format!("{what}: final {} vs first {}", w[w.len() - 1], w[0]))
    };
    let delta = experiment(&format!(
        r#"{{"kind":"perturb_cost",{GAUSSIANS},"schedule":[0.5,0.25,0.125,0.0625],"seed":3}}"#
    ))?;
    stage_checks(&delta)?;
    let wd = w1_series(&delta);
    strictly(&wd, "δ schedule")?;
    let schedule: Vec<String> = (1..=8).map(|k| format!("{}", 1.0 + 0.5f64.powi(k))).collect();
    let eps = experiment(&format!(
        r#"{{"kind":"perturb_eps",{GAUSSIANS},"schedule":[{}],"seed":3}}"#,
        schedule.join(",")
    ))?;
    stage_checks(&eps)?;
    let we = w1_series(&eps);
    strictly(&we, "ε schedule")?;
    ensure(we[we.len() - 1] <= 1e-3, || format!("ε schedule ends at {}", we[we.len() - 1]))?;
    let shift = experiment(&format!(
        r#"{{"kind":"perturb_cost",{GAUSSIANS},"schedule":[2.0,1.0,0.5,0.25],"seed":3,"perturbation":"marginal_shift"}}"#
    ))?;
    stage_checks(&shift)?;
    let ws = w1_series(&shift);
    let worst_shift = ws.iter().copied().fold(0.0, f64::max);
    ensure(worst_shift <= 1e-9, || format!("marginal shift moved the optimizer by {worst_shift:e}"))?;
    Ok(format!(
        "δ: {:.2e} → {:.2e}; ε: {:.2e} → {:.2e}; shift ≤ {:.1e}",
        wd[0],
        wd[wd.len() - 1],
        we[0],
        we[we.len() - 1],
        worst_shift
    ))
}

// 7. Heavy tails: every coupling has infinite expected cost in the limit.
fn infinite_cost() -> Outcome {
    let recs = experiment(
        r#"{"kind":"infinite_cost",
            "law_x":{"kind":"cauchy","params":{"loc":0,"scale":1}},
            "law_y":{"kind":"cauchy","params":{"loc":0,"scale":2}},
            "cost":{"kind":"squared_euclidean"},"eps":1.0,
            "schedule":[32,64,128,256,512],"window":3.0,"seed":7}"#,
    )?;
    stage_checks(&recs)?;
    ensure(recs.len() == 4, || format!("{} consecutive pairs", recs.len()))?;
    let w = w1_series(&recs);
    ensure(w.windows(2).all(|p| p[1] < p[0]), || format!("windowed W1 not decreasing: {w:?}"))?;
    let costs: Vec<f64> = recs.iter().map(|r| r.expected_cost.unwrap_or(f64::NAN)).collect();
    ensure(costs.windows(2).all(|p| p[1] > p[0]), || format!("expected cost not increasing: {costs:?}"))?;
    ensure(costs[3] >= 4.0 * costs[0], || format!("expected cost barely grows: {costs:?}"))?;
    // Recompute the first reported cost by direct summation.
    let cauchy = |scale| Law::Cauchy { loc: 0.0, scale };
    let mu = quantize(&cauchy(1.0), 64).map_err(e2s)?;
    let nu = quantize(&cauchy(2.0), 64).map_err(e2s)?;
    let p = product_measure(&mu, &nu);
    let c = evaluate_cost(&CostSpec::SquaredEuclidean, mu.atoms(), nu.atoms()).map_err(e2s)?;
    let k = gibbs_kernel(&c, 1.0, &p).map_err(e2s)?;
    let sol = sinkhorn(&k, &mu, &nu, &SolveConfig::default()).map_err(e2s)?;
    let direct: f64 = sol.coupling.mass().iter().zip(c.values().iter()).map(|(a, b)| a * b).sum();
    ensure((direct - costs[0]).abs() <= 1e-8 * direct, || format!("direct sum {direct} vs {}", costs[0]))?;
    Ok(format!(
        "windowed W1 {:.3e} → {:.3e}; Σcπ {:.1} → {:.1}",
        w[0],
        w[3],
        costs[0],
        costs[3]
    ))
}

// 8. Discontinuous cost: the CLI reproduces the instability.
fn counterexample() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_eotlab"))
        .arg("counterexample")
        .arg("--output-dir")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.code() == Some(0), || format!("exit {:?}", out.status.code()))?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(stdout.trim() == "instability reproduced", || format!("printed {stdout:?}"))?;
    let text = fs::read_to_string(dir.path().join("counterexample.json")).map_err(|e| e.to_string())?;
    let bundle: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let records = bundle["records"].as_array().ok_or("no records")?;
    let (limit, pre) = records.split_last().ok_or("empty records")?;
    for r in pre {
        let res = r["invariance_residual"].as_f64().ok_or("missing residual")?;
        ensure(res <= 1e-10, || format!("pre-limit residual {res:e}"))?;
    }
    let lim = limit["invariance_residual"].as_f64().ok_or("missing limit residual")?;
    ensure((lim - 1.0).abs() <= 1e-9, || format!("limit residual {lim}"))?;
    let notes = limit["notes"].as_str().unwrap_or_default();
    let required: f64 = notes
        .split(';')
        .find_map(|kv| kv.strip_prefix("required_ratio="))
        .and_then(|v| v.parse().ok())
        .ok_or("no required ratio")?;
    ensure((required - (-1.0f64).exp()).abs() <= 1e-12, || format!("required ratio {required}"))?;
    Ok(format!("{} pre-limit stages, limit residual {lim}, required ratio {required:.6}", pre.len()))
}

fn random_subset(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    loop {
        let v: Vec<usize> = (0..len).filter(|_| rng.random_bool(0.5)).collect();
        if !v.is_empty() {
            return v;
        }
    }
}

// 9. Rectangle inequality, and the product identity when R = P.
fn rectangles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identity_draws = 0;
    let mut worst_identity: f64 = 0.0;
    for draw in 0..1000 {
        let zero_cost = draw % 4 == 0;
        let inst = Instance::random(&mut rng, 6, zero_cost);
        let sol = inst.solve()?;
        let (n, m) = sol.coupling.shape();
        let k = rng.random_range(2..=3);
        let rects: Vec<Rectangle> = (0..k)
            .map(|_| Rectangle::new(random_subset(&mut rng, n), random_subset(&mut rng, m)))
            .collect::<eotlab::Result<_>>()
            .map_err(e2s)?;
        let r = reference_measure(&inst.kernel, &inst.product).map_err(e2s)?;
        let bound = rectangle_inequality(&sol.coupling, &r, &inst.product, &rects).map_err(e2s)?;
        ensure(bound.lhs <= bound.rhs * (1.0 + 1e-12), || {
            format!("draw {draw}: {} > {}", bound.lhs, bound.rhs)
        })?;
        if zero_cost {
            identity_draws += 1;
            let ratio = rectangle_identity_product(&sol.coupling, &rects[0], &rects[1]).map_err(e2s)?;
            worst_identity = worst_identity.max((ratio - 1.0).abs());
            ensure((ratio - 1.0).abs() <= 1e-10, || format!("draw {draw}: identity ratio {ratio}"))?;
        }
    }
    Ok(format!(
        "1000 draws, no violations; R = P identity on {identity_draws} draws within {worst_identity:.1e}"
    ))
}

// 10. Factorization of solver outputs, and a located failure when corrupted.
fn factorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let inst = Instance::random(&mut rng, 6, false);
        let sol = inst.solve()?;
        let pot = factorize(&sol.coupling, inst.reference()).map_err(e2s)?;
        let r = reference_measure(&inst.kernel, &inst.product).map_err(e2s)?;
        let rebuilt = Array2::from_shape_fn(sol.coupling.shape(), |(i, j)| {
            (pot.log_phi[i] + pot.log_psi[j]).exp() * r.mass()[[i, j]]
        });
        let gap = max_abs_diff(&rebuilt, sol.coupling.mass());
        ensure(gap <= 1e-9, || format!("instance {trial}: reconstruction gap {gap:e}"))?;
        worst = worst.max(gap);

        // Inflate the lightest cell and renormalize.
        let ((ci, cj), _) = sol
            .coupling
            .mass()
            .indexed_iter()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let mut bad = sol.coupling.mass().clone();
        bad[[ci, cj]] *= 1.5;
        let total = bad.sum();
        bad.mapv_inplace(|v| v / total);
        let corrupted = sol.coupling.with_mass(bad).map_err(e2s)?;
        match factorize(&corrupted, inst.reference()) {
            Err(Error::NotCyclicallyInvariant { row, col, defect }) => {
                ensure(row == ci || col == cj, || {
                    format!("instance {trial}: witness ({row}, {col}) misses corrupted cell ({ci}, {cj})")
                })?;
                ensure(defect > 0.1, || format!("instance {trial}: defect {defect}"))?;
            }
            other => return Err(format!("instance {trial}: corrupted coupling gave {other:?}")),
        }
    }
    Ok(format!("200 outputs rebuilt within {worst:.1e}; 200 corruptions located"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("optimizer agrees with oracle and is cyclically invariant", optimizer_iff_invariant),
        ("closed-form symmetric 2x2", closed_form_2x2),
        ("potentials unique up to one constant", gauge_uniqueness),
        ("every Sinkhorn iterate is invariant", iterate_invariance),
        ("stability under marginal refinement", refine_marginals),
        ("stability under cost and epsilon perturbation", perturbations),
        ("wellposedness with infinite expected cost", infinite_cost),
        ("instability for a discontinuous cost", counterexample),
        ("rectangle inequality and product identity", rectangles),
        ("factorization and corrupted-entry witness", factorization),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({detail}) [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
