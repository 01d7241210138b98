//! Reference solvers that share no code with [`crate::solver`] or
//! [`crate::invariance`]. Tests compare the main implementation against them.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cost::CostMatrix;
use crate::measure::{Coupling, DiscreteMeasure};
use crate::{Error, Result};

const GRAD_TOL: f64 = 1e-13;
const MAX_NEWTON: usize = 200;
const FALLBACK_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    /// One-parameter line search over the 2×2 transport polytope.
    LineSearch2x2,
    /// Damped Newton on the dual.
    DualNewton,
    /// Alternating dual maximization followed by Newton.
    AlternatingNewtonPolish,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub coupling: Coupling,
    /// `Σ cπ + ε H(π|P)`
    pub objective: f64,
    pub method: OracleMethod,
}

fn primal_objective(mass: &Array2<f64>, c: &Array2<f64>, eps: f64, mu: &[f64], nu: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((i, j), &p) in mass.indexed_iter() {
        total += c[[i, j]] * p;
        if p > 0.0 {
            total += eps * p * (p / (mu[i] * nu[j])).ln();
        }
    }
    total
}

fn check_inputs(c: &CostMatrix, eps: f64, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    if c.shape() != (mu.len(), nu.len()) {
        return Err(Error::ShapeMismatch {
            expected: (mu.len(), nu.len()),
            found: c.shape(),
        });
    }
    Ok(())
}

/// Minimizes the entropic transport objective over the 2×2 polytope
/// `π = [[t, μ₀−t], [ν₀−t, 1−μ₀−ν₀+t]]`.
///
/// A golden-section pass brackets the minimizer; the objective is so flat
/// near it that the final digits come from bisecting the sign of the
/// derivative, which is strictly increasing in `t`.
pub fn brute_force_2x2(mu: &DiscreteMeasure, nu: &DiscreteMeasure, c: &CostMatrix, eps: f64) -> Result<OracleResult> {
    if mu.len() != 2 || nu.len() != 2 {
        return Err(Error::Dimension("the 2x2 oracle needs two atoms on each side".into()));
    }
    check_inputs(c, eps, mu, nu)?;
    let (m0, n0) = (mu.weights()[0], nu.weights()[0]);
    let cv = c.values();
    let build = |t: f64| {
        ndarray::array![[t, m0 - t], [n0 - t, 1.0 - m0 - n0 + t]].mapv(|v: f64| v.max(0.0))
    };
    let f = |t: f64| primal_objective(&build(t), cv, eps, mu.weights(), nu.weights());
    let lo0 = (m0 + n0 - 1.0).max(0.0);
    let hi0 = m0.min(n0);

    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo0, hi0);
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    // F'(t) = c00 − c01 − c10 + c11 + ε log(π00 π11 / (π01 π10))
    //         (the P terms cancel in the cross ratio).
    let slope = |t: f64| {
        let p = build(t);
        cv[[0, 0]] - cv[[0, 1]] - cv[[1, 0]] + cv[[1, 1]]
            + eps * (p[[0, 0]].ln() + p[[1, 1]].ln() - p[[0, 1]].ln() - p[[1, 0]].ln())
    };
    // Widen the golden-section bracket until the slope changes sign; the
    // slope is −∞/+∞ at a polytope vertex that empties a cell.
    let (mut lo, mut hi) = (a, b);
    let mut step = (b - a).max(1e-12);
    while lo > lo0 && slope(lo) >= 0.0 {
        lo = (lo - step).max(lo0);
        step *= 2.0;
    }
    step = (b - a).max(1e-12);
    while hi < hi0 && slope(hi) <= 0.0 {
        hi = (hi + step).min(hi0);
        step *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    a = lo;
    b = hi;
    let t = 0.5 * (a + b);
    let mass = build(t);
    let objective = primal_objective(&mass, cv, eps, mu.weights(), nu.weights());
    Ok(OracleResult {
        coupling: Coupling::new(mu.atoms().to_vec(), nu.atoms().to_vec(), mass)?,
        objective,
        method: OracleMethod::LineSearch2x2,
    })
}

/// Dual state `(f, g)` with `g_{m−1} = 0` pinned for uniqueness.
struct Dual<'a> {
    c: &'a Array2<f64>,
    eps: f64,
    mu: &'a [f64],
    nu: &'a [f64],
}

impl Dual<'_> {
    fn plan(&self, f: &[f64], g: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn(self.c.dim(), |(i, j)| {
            self.mu[i] * self.nu[j] * ((f[i] + g[j] - self.c[[i, j]]) / self.eps).exp()
        })
    }

    /// `Σ fμ + Σ gν − ε Σ π + ε`, maximized at the optimum.
    fn value(&self, f: &[f64], g: &[f64]) -> f64 {
        let p = self.plan(f, g);
        let lin: f64 = f.iter().zip(self.mu).map(|(a, b)| a * b).sum::<f64>()
            + g.iter().zip(self.nu).map(|(a, b)| a * b).sum::<f64>();
        lin - self.eps * p.sum() + self.eps
    }

    fn gradient(&self, p: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let gf = (0..p.nrows()).map(|i| self.mu[i] - p.row(i).sum()).collect();
        let gg = (0..p.ncols()).map(|j| self.nu[j] - p.column(j).sum()).collect();
        (gf, gg)
    }

    fn sup(gf: &[f64], gg: &[f64]) -> f64 {
        gf.iter().chain(gg).fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Newton iterations from `(f, g)`; `None` when the line search stalls
    /// or the iteration budget runs out.
    fn newton(&self, mut f: Vec<f64>, mut g: Vec<f64>) -> Option<(Vec<f64>, Vec<f64>)> {
        let (n, m) = self.c.dim();
        let dim = n + m - 1;
        for _ in 0..MAX_NEWTON {
            let p = self.plan(&f, &g);
            if p.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let (gf, gg) = self.gradient(&p);
            let gnorm = Self::sup(&gf, &gg);
            if gnorm <= GRAD_TOL {
                return Some((f, g));
            }
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..n {
                h[(i, i)] = p.row(i).sum() / self.eps;
                rhs[i] = gf[i];
            }
            for j in 0..m - 1 {
                h[(n + j, n + j)] = p.column(j).sum() / self.eps;
                rhs[n + j] = gg[j];
                for i in 0..n {
                    h[(i, n + j)] = p[[i, j]] / self.eps;
                    h[(n + j, i)] = p[[i, j]] / self.eps;
                }
            }
            let step = h.clone().cholesky().map(|ch| ch.solve(&rhs)).or_else(|| h.lu().solve(&rhs))?;
            let base = self.value(&f, &g);
            let slope: f64 = step.dot(&rhs);
            let mut t = 1.0;
            loop {
                let nf: Vec<f64> = (0..n).map(|i| f[i] + t * step[i]).collect();
                let mut ng: Vec<f64> = (0..m - 1).map(|j| g[j] + t * step[n + j]).collect();
                ng.push(0.0);
                let np = self.plan(&nf, &ng);
                if np.iter().all(|v| v.is_finite()) {
                    let (a, b) = self.gradient(&np);
                    let armijo = self.value(&nf, &ng) >= base + 1e-4 * t * slope;
                    if armijo || Self::sup(&a, &b) < gnorm {
                        f = nf;
                        g = ng;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
            }
        }
        None
    }

    /// Exact alternating maximization in `f` then `g`.
    fn alternate(&self, mut f: Vec<f64>, mut g: Vec<f64>, sweeps: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = self.c.dim();
        for _ in 0..sweeps {
            for i in 0..n {
                let terms: Vec<f64> = (0..m).map(|j| (g[j] - self.c[[i, j]]) / self.eps).collect();
                let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = terms.iter().zip(self.nu).map(|(t, w)| w * (t - top).exp()).sum();
                f[i] = -self.eps * (top + s.ln());
            }
            for j in 0..m {
                let terms: Vec<f64> = (0..n).map(|i| (f[i] - self.c[[i, j]]) / self.eps).collect();
                let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = terms.iter().zip(self.mu).map(|(t, w)| w * (t - top).exp()).sum();
                g[j] = -self.eps * (top + s.ln());
            }
        }
        let pin = g[m - 1];
        f.iter_mut().for_each(|v| *v += pin);
        g.iter_mut().for_each(|v| *v -= pin);
        (f, g)
    }
}

/// Solves the entropic problem by Newton's method on the dual from zero.
pub fn dual_newton(c: &CostMatrix, eps: f64, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<OracleResult> {
    dual_newton_from(c, eps, mu, nu, &vec![0.0; mu.len()], &vec![0.0; nu.len()])
}

/// [`dual_newton`] from a given dual start. The last entry of `g0` is
/// replaced by 0.
pub fn dual_newton_from(
    c: &CostMatrix,
    eps: f64,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    f0: &[f64],
    g0: &[f64],
) -> Result<OracleResult> {
    check_inputs(c, eps, mu, nu)?;
    if f0.len() != mu.len() || g0.len() != nu.len() {
        return Err(Error::ShapeMismatch {
            expected: (mu.len(), nu.len()),
            found: (f0.len(), g0.len()),
        });
    }
    let dual = Dual {
        c: c.values(),
        eps,
        mu: mu.weights(),
        nu: nu.weights(),
    };
    let mut g = g0.to_vec();
    *g.last_mut().expect("nonempty") = 0.0;
    let (method, (f, g)) = match dual.newton(f0.to_vec(), g.clone()) {
        Some(sol) => (OracleMethod::DualNewton, sol),
        None => {
            let (fa, ga) = dual.alternate(vec![0.0; mu.len()], vec![0.0; nu.len()], FALLBACK_SWEEPS);
            let sol = dual
                .newton(fa, ga)
                .ok_or_else(|| Error::InvalidConfig("dual Newton oracle did not converge".into()))?;
            (OracleMethod::AlternatingNewtonPolish, sol)
        }
    };
    let mass = dual.plan(&f, &g);
    let objective = primal_objective(&mass, c.values(), eps, mu.weights(), nu.weights());
    Ok(OracleResult {
        coupling: Coupling::new(mu.atoms().to_vec(), nu.atoms().to_vec(), mass)?,
        objective,
        method,
    })
}

/// Largest cycle residual of `π` against `R` over every ordered tuple of
/// cells of length `1..=k_upto`, by full enumeration.
pub fn exhaustive_invariance(pi: &Coupling, r: &Coupling, k_upto: usize) -> Result<f64> {
    const CAP: f64 = 2e7;
    if pi.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            expected: r.shape(),
            found: pi.shape(),
        });
    }
    let (n, m) = pi.shape();
    let cells = n * m;
    let count: f64 = (1..=k_upto).map(|k| (cells as f64).powi(k as i32)).sum();
    if count > CAP {
        return Err(Error::EnumerationCap { count, cap: CAP });
    }
    let ratio = |i: usize, j: usize| -> Result<f64> {
        let (a, b) = (pi.mass()[[i, j]], r.mass()[[i, j]]);
        if a <= 0.0 || b <= 0.0 {
            Err(Error::SupportViolation { row: i, col: j })
        } else {
            Ok(a / b)
        }
    };
    let mut worst: f64 = 0.0;
    for k in 1..=k_upto {
        let mut tuple = vec![0usize; k];
        'outer: loop {
            let mut top = 1.0;
            let mut bottom = 1.0;
            for t in 0..k {
                let (xi, yi) = (tuple[t] / m, tuple[t] % m);
                let next = tuple[(t + 1) % k] % m;
                top *= ratio(xi, yi)?;
                bottom *= ratio(xi, next)?;
            }
            worst = worst.max((top / bottom).ln().abs());
            for pos in (0..k).rev() {
                tuple[pos] += 1;
                if tuple[pos] < cells {
                    continue 'outer;
                }
                tuple[pos] = 0;
            }
            break;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{evaluate_cost, CostSpec};
    use crate::measure::product_measure;
    use approx::assert_abs_diff_eq;

    fn line(xs: &[f64], w: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::on_line(xs, w).unwrap()
    }

    #[test]
    fn closed_form_two_by_two() {
        let u = line(&[0.0, 1.0], &[0.5, 0.5]);
        let p = product_measure(&u, &u);
        let c = evaluate_cost(&CostSpec::Absolute, p.row_support(), p.col_support()).unwrap();
        let a = brute_force_2x2(&u, &u, &c, 1.0).unwrap();
        let b = dual_newton(&c, 1.0, &u, &u).unwrap();
        // t = e/(2(1+e)) solves F'(t) = 0 with c00 = c11 = 0, c01 = c10 = 1.
        let e = std::f64::consts::E;
        let t = e / (2.0 * (1.0 + e));
        assert_abs_diff_eq!(a.coupling.mass()[[0, 0]], t, epsilon = 1e-12);
        assert_abs_diff_eq!(b.coupling.mass()[[0, 0]], t, epsilon = 1e-12);
        assert_eq!(b.method, OracleMethod::DualNewton);
        assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-12);
    }

    #[test]
    fn quadrant_indicator_two_by_two() {
        let u = line(&[-1.0, 1.0], &[0.5, 0.5]);
        let p = product_measure(&u, &u);
        let spec = CostSpec::QuadrantIndicator { ax: 0.0, ay: 0.0 };
        let c = evaluate_cost(&spec, p.row_support(), p.col_support()).unwrap();
        let a = brute_force_2x2(&u, &u, &c, 2.0).unwrap();
        // Only the (low, low) cell pays 1, so F'(t) = 1 + 2ε log(t/(1/2 − t))
        // and the root is t = 0.5/(1 + e^{1/4}).
        let t = 0.5 / (1.0 + 0.25f64.exp());
        assert_abs_diff_eq!(a.coupling.mass()[[0, 0]], t, epsilon = 1e-12);
        let b = dual_newton(&c, 2.0, &u, &u).unwrap();
        assert_abs_diff_eq!(b.coupling.mass()[[0, 0]], t, epsilon = 1e-12);
    }

    #[test]
    fn quadrant_cost_on_the_unit_corner() {
        // Costs [[0,0],[0,1]]: π₀₀ = π₁₁ = t and t²/(1/2 − t)² = e^{−1}.
        let u = line(&[0.0, 1.0], &[0.5, 0.5]);
        let p = product_measure(&u, &u);
        let spec = CostSpec::QuadrantIndicator { ax: 1.0, ay: 1.0 };
        let c = evaluate_cost(&spec, p.row_support(), p.col_support()).unwrap();
        let a = brute_force_2x2(&u, &u, &c, 1.0).unwrap();
        assert_abs_diff_eq!(a.coupling.mass()[[0, 0]], 0.188_770_334_399, epsilon = 1e-12);
        assert_abs_diff_eq!(a.coupling.mass()[[1, 1]], 0.188_770_334_399, epsilon = 1e-12);
    }

    #[test]
    fn dual_start_does_not_matter() {
        let mu = line(&[0.0, 1.0, 2.5], &[0.2, 0.5, 0.3]);
        let nu = line(&[0.3, 1.7, 2.0, 3.1], &[0.1, 0.2, 0.3, 0.4]);
        let p = product_measure(&mu, &nu);
        let c = evaluate_cost(&CostSpec::SquaredEuclidean, p.row_support(), p.col_support()).unwrap();
        let a = dual_newton(&c, 0.3, &mu, &nu).unwrap();
        let b = dual_newton_from(&c, 0.3, &mu, &nu, &[3.0, -2.0, 1.0], &[0.5, -4.0, 2.0, 9.0]).unwrap();
        for (x, y) in a.coupling.mass().iter().zip(b.coupling.mass().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn exhaustive_invariance_examples() {
        let mu = line(&[0.0, 1.0], &[0.3, 0.7]);
        let nu = line(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]);
        let p = product_measure(&mu, &nu);
        assert!(exhaustive_invariance(&p, &p, 3).unwrap() < 1e-14);
        let skew = p.with_mass(ndarray::array![[0.1, 0.1, 0.1], [0.1, 0.2, 0.4]]).unwrap();
        assert!(exhaustive_invariance(&skew, &p, 2).unwrap() > 0.1);
        let big = product_measure(
            &DiscreteMeasure::uniform_on_line(&(0..10).map(f64::from).collect::<Vec<_>>()).unwrap(),
            &DiscreteMeasure::uniform_on_line(&(0..10).map(f64::from).collect::<Vec<_>>()).unwrap(),
        );
        assert!(matches!(exhaustive_invariance(&big, &big, 4), Err(Error::EnumerationCap { .. })));
    }
}
