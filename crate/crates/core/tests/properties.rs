use eotlab::cost::{evaluate_cost, gibbs_kernel, reference_measure, CostMatrix, CostSpec};
use eotlab::invariance::{check_invariance, factorize, Reference};
use eotlab::measure::{product_measure, DiscreteMeasure, GroundMetric};
use eotlab::oracle::dual_newton;
use eotlab::solver::{objective, sinkhorn, SolveConfig};
use eotlab::wasserstein::wasserstein1;
use ndarray::Array2;
use proptest::prelude::*;

fn weights(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

fn measure_strategy(max_len: usize) -> impl Strategy<Value = DiscreteMeasure> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_filter_map("atoms must be distinct", |(xs, ws)| {
                DiscreteMeasure::on_line(&xs, &weights(&ws)).ok()
            })
    })
}

/// Random instance: marginals of length 2..=5, cost uniform in [0, 1].
fn instance() -> impl Strategy<Value = (DiscreteMeasure, DiscreteMeasure, Array2<f64>, f64)> {
    (2usize..=5, 2usize..=5).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(0.05f64..1.0, m),
            prop::collection::vec(0.0f64..1.0, n * m),
            prop::sample::select(vec![0.1, 1.0, 10.0]),
        )
            .prop_map(move |(a, b, c, eps)| {
                let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
                let ys: Vec<f64> = (0..m).map(|j| j as f64).collect();
                let mu = DiscreteMeasure::on_line(&xs, &weights(&a)).unwrap();
                let nu = DiscreteMeasure::on_line(&ys, &weights(&b)).unwrap();
                (mu, nu, Array2::from_shape_vec((n, m), c).unwrap(), eps)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w1_is_a_metric(a in measure_strategy(6), b in measure_strategy(6), c in measure_strategy(6)) {
        let d = |x: &DiscreteMeasure, y: &DiscreteMeasure| wasserstein1(x, y, GroundMetric::EuclideanOnPoints).unwrap();
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        prop_assert!(d(&a, &a).abs() < 1e-12);
        prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab));
        prop_assert!(ac <= ab + bc + 1e-10);
    }

    #[test]
    fn w1_on_the_line_matches_the_cdf_formula(a in measure_strategy(7), b in measure_strategy(7)) {
        // On the real line W1 is the L1 distance between distribution functions.
        let mut knots: Vec<(f64, f64, f64)> = a.atoms().iter().zip(a.weights()).map(|(p, &w)| (p.x(), w, 0.0))
            .chain(b.atoms().iter().zip(b.weights()).map(|(p, &w)| (p.x(), 0.0, w)))
            .collect();
        knots.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut fa, mut fb, mut area) = (0.0, 0.0, 0.0);
        for win in knots.windows(2) {
            fa += win[0].1;
            fb += win[0].2;
            area += (fa - fb).abs() * (win[1].0 - win[0].0);
        }
        let w = wasserstein1(&a, &b, GroundMetric::EuclideanOnPoints).unwrap();
        prop_assert!((w - area).abs() < 1e-9, "{} vs {}", w, area);
    }

    #[test]
    fn solver_output_has_the_prescribed_marginals((mu, nu, c, eps) in instance()) {
        let p = product_measure(&mu, &nu);
        let k = gibbs_kernel(&CostMatrix::new(c).unwrap(), eps, &p).unwrap();
        let sol = sinkhorn(&k, &mu, &nu, &SolveConfig::default()).unwrap();
        prop_assert!(sol.report.converged);
        for (s, w) in sol.coupling.row_sums().iter().zip(mu.weights()) {
            prop_assert!((s - w).abs() < 1e-12);
        }
        for (s, w) in sol.coupling.col_sums().iter().zip(nu.weights()) {
            prop_assert!((s - w).abs() < 1e-11);
        }
    }

    #[test]
    fn solver_agrees_with_the_dual_oracle((mu, nu, c, eps) in instance()) {
        let cost = CostMatrix::new(c).unwrap();
        let p = product_measure(&mu, &nu);
        let k = gibbs_kernel(&cost, eps, &p).unwrap();
        let sol = sinkhorn(&k, &mu, &nu, &SolveConfig::default()).unwrap();
        let orc = dual_newton(&cost, eps, &mu, &nu).unwrap();
        for (a, b) in sol.coupling.mass().iter().zip(orc.coupling.mass().iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let obj = objective(&sol.coupling, &cost, eps, &p).unwrap();
        prop_assert!((obj.eot - orc.objective).abs() < 1e-9 * (1.0 + orc.objective.abs()));
        prop_assert!((obj.eot - sol.report.objective_eot).abs() < 1e-9 * (1.0 + obj.eot.abs()));
    }

    #[test]
    fn solutions_are_invariant_and_factorize((mu, nu, c, eps) in instance()) {
        let p = product_measure(&mu, &nu);
        let k = gibbs_kernel(&CostMatrix::new(c).unwrap(), eps, &p).unwrap();
        let sol = sinkhorn(&k, &mu, &nu, &SolveConfig::default()).unwrap();
        let reference = Reference::Gibbs { kernel: &k, product: &p };
        let report = check_invariance(&sol.coupling, reference, 3, 1_000_000, 0).unwrap();
        prop_assert!(report.max_residual < 1e-9);
        let pot = factorize(&sol.coupling, reference).unwrap();
        let r = reference_measure(&k, &p).unwrap();
        for ((i, j), &v) in sol.coupling.mass().indexed_iter() {
            let rebuilt = (pot.log_phi[i] + pot.log_psi[j]).exp() * r.mass()[[i, j]];
            prop_assert!((rebuilt - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gauge_shift_of_the_start_changes_nothing((mu, nu, c, eps) in instance(), shift in -20.0f64..20.0) {
        let p = product_measure(&mu, &nu);
        let k = gibbs_kernel(&CostMatrix::new(c).unwrap(), eps, &p).unwrap();
        let cfg = SolveConfig::default();
        let a = sinkhorn(&k, &mu, &nu, &cfg).unwrap();
        let b = eotlab::solver::sinkhorn_from(&k, &mu, &nu, &cfg, &vec![shift; nu.len()]).unwrap();
        for (x, y) in a.coupling.mass().iter().zip(b.coupling.mass().iter()) {
            prop_assert!((x - y).abs() < 1e-11);
        }
    }
}

#[test]
fn heavy_tailed_instances_converge() {
    let cauchy = |scale| eotlab::measure::Law::Cauchy { loc: 0.0, scale };
    let mu = eotlab::measure::quantize(&cauchy(1.0), 96).unwrap();
    let nu = eotlab::measure::quantize(&cauchy(2.0), 96).unwrap();
    let p = product_measure(&mu, &nu);
    let c = evaluate_cost(&CostSpec::SquaredEuclidean, mu.atoms(), nu.atoms()).unwrap();
    let k = gibbs_kernel(&c, 1.0, &p).unwrap();
    let sol = sinkhorn(&k, &mu, &nu, &SolveConfig::default()).unwrap();
    assert!(sol.report.converged, "{}", sol.report.marginal_error);
    assert!(sol.report.warm_start_sweeps > 0);
    let w = &sol.log_coupling - &k.log_reference(&p);
    assert!(eotlab::invariance::max_two_cycle_residual(&w).0 < 1e-9);
}
