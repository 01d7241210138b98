//! Log-domain Sinkhorn iterations for the static Schrödinger bridge
//! `min H(π|R)` over couplings of `(μ, ν)`.
//!
//! With `f = dR/dP = exp(log_density)` the fixed point solves the
//! Schrödinger system
//!
//! ```text
//!   Σ_j f_ij ψ_j ν_j = φ_i⁻¹,     Σ_i f_ij φ_i μ_i = ψ_j⁻¹,
//! ```
//!
//! stored as `log_phi = log φ`, `log_psi = log ψ`. The coupling is
//! `π_ij = exp(log_phi_i + log_density_ij + log_psi_j)·μ_i ν_j`, so the
//! reciprocal in the system shows up as `−log_phi` on the right-hand side of
//! the row equation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{gibbs_kernel, CostMatrix, GibbsKernel};
use crate::invariance::max_two_cycle_residual;
use crate::measure::{Coupling, DiscreteMeasure};
use crate::{log_sum_exp, safe_ln, Error, Result};

/// Grids with at least this many cells reduce rows in parallel.
const PARALLEL_CELLS: usize = 1 << 14;
/// Newton steps factor an `(m−1)×(m−1)` matrix; wider problems stay with
/// plain sweeps.
const NEWTON_MAX_COLS: usize = 2048;
const NEWTON_RIDGE: f64 = 1e-12;
/// A kernel whose log-density spans more than this is warm-started by
/// solving at coarser temperatures first.
const SCALING_SPAN: f64 = 32.0;
/// Sweep budget and L1 target for each coarse temperature.
const SCALING_SWEEPS: usize = 200;
const SCALING_TOL: f64 = 1e-3;

/// Log-domain Schrödinger potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub log_phi: Vec<f64>,
    pub log_psi: Vec<f64>,
}

impl Potentials {
    /// `log π_ij` induced by the potentials (not renormalized).
    pub fn log_coupling(&self, kernel: &GibbsKernel, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Array2<f64> {
        let ld = kernel.log_density();
        Array2::from_shape_fn(ld.dim(), |(i, j)| {
            self.log_phi[i] + ld[[i, j]] + self.log_psi[j] + mu.weights()[i].ln() + nu.weights()[j].ln()
        })
    }

    /// Adds `s` to `log_phi` and subtracts it from `log_psi`; the induced
    /// coupling is unchanged.
    pub fn regauged(&self, s: f64) -> Potentials {
        Potentials {
            log_phi: self.log_phi.iter().map(|v| v + s).collect(),
            log_psi: self.log_psi.iter().map(|v| v - s).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    /// L1 tolerance on the column marginal after a row update.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep per-iteration marginal errors and invariance residuals.
    pub record_iterates: bool,
    /// Switch to Newton steps on the column potential after this many plain
    /// sweeps; `None` disables them.
    pub newton_after: Option<usize>,
    /// Warm-start badly scaled kernels by annealing the temperature down
    /// to `ε` by halving.
    pub eps_scaling: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol: 1e-12,
            max_iter: 100_000,
            record_iterates: false,
            newton_after: Some(100),
            eps_scaling: true,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Sweeps performed at the target `ε`, counting each Newton step as one.
    pub iterations: usize,
    pub newton_steps: usize,
    /// Sweeps spent at coarser temperatures before the first iteration.
    #[serde(default)]
    pub warm_start_sweeps: usize,
    /// L1 column-marginal error of the returned coupling. Never increases
    /// from one iteration to the next.
    pub marginal_error: f64,
    /// L1 row-marginal error of the returned coupling.
    pub row_marginal_error: f64,
    pub converged: bool,
    /// `Σ cπ + ε H(π|P)`.
    pub objective_eot: f64,
    /// `H(π|R)`.
    pub objective_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal_error_trace: Option<Vec<f64>>,
    /// Largest two-cycle residual of `log(π_t/R)` for each iterate `π_t`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterate_invariance_residuals: Option<Vec<f64>>,
}

/// Output of [`sinkhorn`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub coupling: Coupling,
    /// `log π`, finite even where `π` underflows.
    pub log_coupling: Array2<f64>,
    pub potentials: Potentials,
    pub report: SolveReport,
}

/// Sinkhorn from `log_psi ≡ 0`.
pub fn sinkhorn(kernel: &GibbsKernel, mu: &DiscreteMeasure, nu: &DiscreteMeasure, config: &SolveConfig) -> Result<Solution> {
    sinkhorn_from(kernel, mu, nu, config, &vec![0.0; nu.len()])
}

/// Sinkhorn from a given initial `log_psi`.
///
/// Each iteration sets `log_phi_i = −log Σ_j exp(log_density_ij + log_psi_j)·ν_j`
/// (rows exact), measures the column marginal, and stops if its L1
/// error is within `tol`; otherwise it updates `log_psi` the same way. The
/// returned coupling is always the one after a row update.
///
/// Badly conditioned kernels (heavy tails, small `ε`) make the plain sweeps
/// crawl. After `newton_after` sweeps the update of `log_psi` becomes a
/// damped Newton step whenever that step lowers the marginal error, so the
/// error sequence stays nonincreasing either way.
///
/// When the finite log-density values span more than a few dozen units and
/// `eps_scaling` is set, the initial `log_psi` is first carried through
/// solves at `2^L·ε, …, 2ε` (same cost, hotter kernel). Potentials in cost
/// units move little between neighbouring temperatures, so each level needs
/// few sweeps, whereas a cold start at `ε` would need a number of sweeps
/// proportional to the span.
pub fn sinkhorn_from(
    kernel: &GibbsKernel,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    config: &SolveConfig,
    init_log_psi: &[f64],
) -> Result<Solution> {
    config.validate()?;
    let (n, m) = kernel.shape();
    if (mu.len(), nu.len()) != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            found: (mu.len(), nu.len()),
        });
    }
    if init_log_psi.len() != m || init_log_psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("initial log_psi must be finite with one entry per column".into()));
    }

    let ld = kernel.log_density();
    let ld_t = ld.t().as_standard_layout().into_owned();
    let log_mu: Vec<f64> = mu.weights().iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = nu.weights().iter().map(|w| w.ln()).collect();
    let sc = Scaler {
        ld,
        ld_t: &ld_t,
        log_mu: &log_mu,
        log_nu: &log_nu,
        nu: nu.weights(),
        parallel: n * m >= PARALLEL_CELLS,
    };
    let newton_from = match config.newton_after {
        Some(k) if (2..=NEWTON_MAX_COLS).contains(&m) => k,
        _ => usize::MAX,
    };

    let (mut log_psi, warm_start_sweeps) = if config.eps_scaling {
        anneal(ld, &log_mu, &log_nu, nu.weights(), sc.parallel, init_log_psi)
    } else {
        (init_log_psi.to_vec(), 0)
    };
    let mut log_phi = vec![0.0; n];
    let mut col_lse = vec![0.0; m];
    let mut marginal_error = sc.sweep(&log_psi, &mut log_phi, &mut col_lse);
    let mut iterations = 1;
    let mut newton_steps = 0;
    let mut trace = config.record_iterates.then(Vec::new);
    let mut residuals = config.record_iterates.then(Vec::new);

    loop {
        if let Some(t) = trace.as_mut() {
            t.push(marginal_error);
        }
        if let Some(r) = residuals.as_mut() {
            let log_ref = kernel.log_reference_from_weights(&log_mu, &log_nu);
            let log_pi = log_pi_matrix(ld, &log_phi, &log_psi, &log_mu, &log_nu);
            r.push(max_two_cycle_residual(&(&log_pi - &log_ref)).0);
        }
        if marginal_error <= config.tol || iterations >= config.max_iter {
            break;
        }
        iterations += 1;
        if iterations > newton_from {
            if let Some(next) = sc.newton_step(&log_phi, &log_psi, &col_lse, marginal_error) {
                (log_psi, log_phi, col_lse, marginal_error) = next;
                newton_steps += 1;
                continue;
            }
        }
        log_psi.iter_mut().zip(&col_lse).for_each(|(p, s)| *p = -*s);
        marginal_error = sc.sweep(&log_psi, &mut log_phi, &mut col_lse);
    }

    let log_pi = log_pi_matrix(ld, &log_phi, &log_psi, &log_mu, &log_nu);
    let mass = log_pi.mapv(f64::exp);
    let row_marginal_error = mass
        .axis_iter(Axis(0))
        .zip(mu.weights())
        .map(|(r, w)| (r.sum() - w).abs())
        .sum();
    let coupling = Coupling::new(mu.atoms().to_vec(), nu.atoms().to_vec(), mass)?;

    // log(π/R) = log_phi_i + log_psi_j on the support.
    let objective_kl: f64 = coupling
        .mass()
        .indexed_iter()
        .map(|((i, j), &p)| if p > 0.0 { p * (log_phi[i] + log_psi[j]) } else { 0.0 })
        .sum();
    let eps = kernel.epsilon();
    let objective_eot = eps * (objective_kl + kernel.log_norm());

    Ok(Solution {
        coupling,
        log_coupling: log_pi,
        potentials: Potentials { log_phi, log_psi },
        report: SolveReport {
            iterations,
            newton_steps,
            warm_start_sweeps,
            marginal_error,
            row_marginal_error,
            converged: marginal_error <= config.tol,
            objective_eot,
            objective_kl,
            marginal_error_trace: trace,
            iterate_invariance_residuals: residuals,
        },
    })
}

/// Coarse-to-fine warm start. Returns `log_psi` for the target kernel and the
/// number of sweeps spent.
fn anneal(
    ld: &Array2<f64>,
    log_mu: &[f64],
    log_nu: &[f64],
    nu: &[f64],
    parallel: bool,
    init: &[f64],
) -> (Vec<f64>, usize) {
    let (lo, hi) = ld
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= SCALING_SPAN {
        return (init.to_vec(), 0);
    }
    let levels = ((hi - lo) / SCALING_SPAN).log2().ceil() as i32;
    let (n, m) = ld.dim();
    let mut phi = vec![0.0; n];
    let mut lse = vec![0.0; m];
    // Potentials are carried in units of the target ε throughout.
    let mut psi = init.to_vec();
    let mut sweeps = 0;
    for level in (1..=levels).rev() {
        let factor = 2f64.powi(level);
        let hot = ld.mapv(|v| (v - hi) / factor);
        let hot_t = hot.t().as_standard_layout().into_owned();
        let sc = Scaler {
            ld: &hot,
            ld_t: &hot_t,
            log_mu,
            log_nu,
            nu,
            parallel,
        };
        let mut local: Vec<f64> = psi.iter().map(|v| v / factor).collect();
        for _ in 0..SCALING_SWEEPS {
            let err = sc.sweep(&local, &mut phi, &mut lse);
            sweeps += 1;
            local.iter_mut().zip(&lse).for_each(|(p, s)| *p = -*s);
            if err <= SCALING_TOL {
                break;
            }
        }
        psi = local.iter().map(|v| v * factor).collect();
    }
    (psi, sweeps)
}

/// `out_i = −log Σ_j exp(mat_ij + other_j + log_w_j)`.
fn half_step(mat: &Array2<f64>, other: &[f64], log_w: &[f64], out: &mut [f64], parallel: bool) {
    let shift: Vec<f64> = other.iter().zip(log_w).map(|(a, b)| a + b).collect();
    let row_value = |row: &[f64]| -> f64 { -log_sum_exp(row.iter().zip(&shift).map(|(a, b)| a + b)) };
    let flat = mat.as_slice().expect("standard layout");
    let width = mat.ncols();
    if parallel {
        out.par_iter_mut()
            .zip(flat.par_chunks(width))
            .for_each(|(o, row)| *o = row_value(row));
    } else {
        out.iter_mut().zip(flat.chunks(width)).for_each(|(o, row)| *o = row_value(row));
    }
}

struct Scaler<'a> {
    ld: &'a Array2<f64>,
    ld_t: &'a Array2<f64>,
    log_mu: &'a [f64],
    log_nu: &'a [f64],
    nu: &'a [f64],
    parallel: bool,
}

type NewtonState = (Vec<f64>, Vec<f64>, Vec<f64>, f64);

impl Scaler<'_> {
    /// Row update for `log_psi`, then the column statistics. Returns the L1
    /// column-marginal error; `col_lse_j = log Σ_i exp(ld_ij + log_phi_i)·μ_i`
    /// so that the column marginal is `ν_j·exp(log_psi_j + col_lse_j)`.
    fn sweep(&self, log_psi: &[f64], log_phi: &mut [f64], col_lse: &mut [f64]) -> f64 {
        half_step(self.ld, log_psi, self.log_nu, log_phi, self.parallel);
        half_step(self.ld_t, log_phi, self.log_mu, col_lse, self.parallel);
        col_lse.iter_mut().for_each(|v| *v = -*v);
        col_lse
            .iter()
            .zip(log_psi)
            .zip(self.nu)
            .map(|((s, p), w)| (w * (s + p).exp() - w).abs())
            .sum()
    }

    /// One damped Newton step on `log_psi` for the dual with `log_phi`
    /// eliminated. Its Hessian is `diag(col) − πᵀ diag(1/μ) π` (rows are
    /// exact after a sweep); the last column is pinned to fix the gauge.
    /// Returns the accepted state only if it lowers the marginal error.
    fn newton_step(&self, log_phi: &[f64], log_psi: &[f64], col_lse: &[f64], error: f64) -> Option<NewtonState> {
        let (n, m) = self.ld.dim();
        let k = m - 1;
        // π_ij = w_i·t_ij with t_ij = exp(ld_ij + log_psi_j + log ν_j − top_i).
        // The Hessian is a weighted graph Laplacian; its diagonal is built
        // from the off-diagonal mass Σ_{l≠j} π_il, summed from both ends so
        // nothing cancels when one cell dominates a row.
        let mut pi = DMatrix::<f64>::zeros(n, m);
        let mut off = DMatrix::<f64>::zeros(n, m);
        for i in 0..n {
            let row: Vec<f64> = (0..m).map(|j| self.ld[[i, j]] + log_psi[j] + self.log_nu[j]).collect();
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = (top + log_phi[i] + self.log_mu[i]).exp();
            let t: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
            let mut prefix = 0.0;
            for j in 0..m {
                pi[(i, j)] = w * t[j];
                off[(i, j)] = prefix;
                prefix += t[j];
            }
            let mut suffix = 0.0;
            for j in (0..m).rev() {
                off[(i, j)] = w * (off[(i, j)] + suffix);
                suffix += t[j];
            }
        }
        let inv_sqrt_mu: Vec<f64> = self.log_mu.iter().map(|l| (-0.5 * l).exp()).collect();
        let scaled = DMatrix::from_fn(n, k, |i, j| pi[(i, j)] * inv_sqrt_mu[i]);
        let mut hess = -scaled.tr_mul(&scaled);
        let mut rhs = DVector::zeros(k);
        for j in 0..k {
            // Columns whose rows put no measurable mass elsewhere form blocks
            // of their own; the ridge keeps those blocks from making the
            // system singular.
            hess[(j, j)] = NEWTON_RIDGE * self.nu[j]
                + (0..n).map(|i| pi[(i, j)] * off[(i, j)] * inv_sqrt_mu[i] * inv_sqrt_mu[i]).sum::<f64>();
            rhs[j] = self.nu[j] - self.nu[j] * (log_psi[j] + col_lse[j]).exp();
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| hess.lu().solve(&rhs))?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut t = 1.0;
        let mut phi = vec![0.0; n];
        let mut lse = vec![0.0; m];
        for _ in 0..30 {
            let psi: Vec<f64> = (0..m).map(|j| log_psi[j] + if j < k { t * step[j] } else { 0.0 }).collect();
            let e = self.sweep(&psi, &mut phi, &mut lse);
            if e < error {
                return Some((psi, phi, lse, e));
            }
            t *= 0.5;
        }
        None
    }
}

fn log_pi_matrix(ld: &Array2<f64>, log_phi: &[f64], log_psi: &[f64], log_mu: &[f64], log_nu: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn(ld.dim(), |(i, j)| log_phi[i] + ld[[i, j]] + log_psi[j] + log_mu[i] + log_nu[j])
}

impl GibbsKernel {
    fn log_reference_from_weights(&self, log_mu: &[f64], log_nu: &[f64]) -> Array2<f64> {
        let ld = self.log_density();
        Array2::from_shape_fn(ld.dim(), |(i, j)| ld[[i, j]] + log_mu[i] + log_nu[j])
    }
}

/// Largest violation of the Schrödinger system in log form:
/// `|log Σ_j f_ij ψ_j ν_j + log φ_i|` over rows and the symmetric column
/// expression over columns.
pub fn schrodinger_residual(
    pot: &Potentials,
    kernel: &GibbsKernel,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<f64> {
    let (n, m) = kernel.shape();
    if (pot.log_phi.len(), pot.log_psi.len()) != (n, m) || (mu.len(), nu.len()) != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            found: (pot.log_phi.len(), pot.log_psi.len()),
        });
    }
    let ld = kernel.log_density();
    let row = (0..n).map(|i| {
        let lse = log_sum_exp((0..m).map(|j| ld[[i, j]] + pot.log_psi[j] + nu.weights()[j].ln()));
        (lse + pot.log_phi[i]).abs()
    });
    let col = (0..m).map(|j| {
        let lse = log_sum_exp((0..n).map(|i| ld[[i, j]] + pot.log_phi[i] + mu.weights()[i].ln()));
        (lse + pot.log_psi[j]).abs()
    });
    Ok(row.chain(col).fold(0.0, f64::max))
}

/// Both objective values of a coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// `Σ cπ + ε H(π|P)`
    pub eot: f64,
    /// `H(π|R)` for `dR/dP = a e^{−c/ε}`.
    pub kl_vs_r: f64,
}

/// Entropic transport objective and Schrödinger-bridge objective of `pi`.
/// Either may be `+∞` when `π` charges a cell that `P` does not.
pub fn objective(pi: &Coupling, c: &CostMatrix, eps: f64, p: &Coupling) -> Result<Objective> {
    let kernel = gibbs_kernel(c, eps, p)?;
    if pi.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            expected: p.shape(),
            found: pi.shape(),
        });
    }
    let mut transport = 0.0;
    let mut entropy = 0.0;
    let mut kl = 0.0;
    let ld = kernel.log_density();
    for ((i, j), &pij) in pi.mass().indexed_iter() {
        if pij == 0.0 {
            continue;
        }
        let base = p.mass()[[i, j]];
        if base == 0.0 {
            return Ok(Objective {
                eot: f64::INFINITY,
                kl_vs_r: f64::INFINITY,
            });
        }
        transport += c.values()[[i, j]] * pij;
        entropy += pij * (pij.ln() - base.ln());
        kl += pij * (pij.ln() - ld[[i, j]] - safe_ln(base));
    }
    let eot = transport + eps * entropy;
    debug_assert!(
        (eot - eps * (kl + kernel.log_norm())).abs() <= 1e-9 * (1.0 + eot.abs()),
        "objective identity violated: {eot} vs {}",
        eps * (kl + kernel.log_norm())
    );
    Ok(Objective { eot, kl_vs_r: kl })
}

/// Whether `∫c dP + H(P|P) < ∞`. Always true for a valid cost matrix; the
/// infinite-value regime only exists for the continuum laws behind an
/// experiment (see `crate::lab`).
pub fn finiteness_check(c: &CostMatrix, p: &Coupling) -> bool {
    c.shape() == p.shape() && c.values().iter().all(|v| v.is_finite())
}
