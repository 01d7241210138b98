//! Cyclical invariance of couplings.
//!
//! A cycle is a list of cells `z_i = (x_i, y_i)`; its barred partner shifts
//! the columns by one, `z̄_i = (x_i, y_{i+1})` with `y_{k+1} = y_1`. A coupling
//! is cyclically invariant with respect to `R` when
//! `Π π(z_i)/R(z_i) = Π π(z̄_i)/R(z̄_i)` for every cycle. Everything here works
//! on `W = log π − log R`, so the residual of a cycle is
//! `|Σ W(z_i) − Σ W(z̄_i)|`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostMatrix, GibbsKernel};
use crate::measure::Coupling;
use crate::solver::Potentials;
use crate::{Error, Result};

/// Entrywise tolerance used when recovering potentials.
pub const FACTOR_TOL: f64 = 1e-8;

const SAMPLE_BATCH: u64 = 4096;

/// A cycle of `(row, col)` cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cycle {
    cells: Vec<(usize, usize)>,
}

impl Cycle {
    pub fn new(cells: Vec<(usize, usize)>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Index("a cycle needs at least one cell".into()));
        }
        Ok(Cycle { cells })
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(x_i, y_{i+1})` with the last cell wrapping to the first column.
    pub fn barred(&self) -> Vec<(usize, usize)> {
        let k = self.cells.len();
        (0..k).map(|i| (self.cells[i].0, self.cells[(i + 1) % k].1)).collect()
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        for &(i, j) in &self.cells {
            if i >= shape.0 || j >= shape.1 {
                return Err(Error::Index(format!("cell ({i}, {j}) outside a {}x{} grid", shape.0, shape.1)));
            }
        }
        Ok(())
    }
}

/// What a coupling is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// `R` given by a Gibbs kernel over the product measure `P`.
    Gibbs { kernel: &'a GibbsKernel, product: &'a Coupling },
    /// An explicit positive reference coupling.
    Measure(&'a Coupling),
}

impl Reference<'_> {
    fn log_matrix(&self) -> Result<Array2<f64>> {
        match self {
            Reference::Gibbs { kernel, product } => {
                if kernel.shape() != product.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: kernel.shape(),
                        found: product.shape(),
                    });
                }
                Ok(kernel.log_reference(product))
            }
            Reference::Measure(r) => {
                if r.mass().iter().any(|&v| v <= 0.0) {
                    return Err(Error::InvalidCoupling("reference must be strictly positive".into()));
                }
                Ok(r.mass().mapv(f64::ln))
            }
        }
    }
}

/// `W = log π − log R`. Fails if `π` vanishes anywhere: invariance is only
/// defined on the full product support.
pub fn log_density_ratio(pi: &Coupling, reference: Reference<'_>) -> Result<Array2<f64>> {
    let log_r = reference.log_matrix()?;
    if log_r.dim() != pi.shape() {
        return Err(Error::ShapeMismatch {
            expected: log_r.dim(),
            found: pi.shape(),
        });
    }
    if let Some(((i, j), _)) = pi.mass().indexed_iter().find(|(_, &v)| v <= 0.0) {
        return Err(Error::SupportViolation { row: i, col: j });
    }
    Ok(pi.mass().mapv(f64::ln) - log_r)
}

/// Residual of one cycle on a log-density matrix.
pub fn cycle_residual_log(w: &Array2<f64>, cycle: &Cycle) -> Result<f64> {
    cycle.check_shape(w.dim())?;
    let fwd: f64 = cycle.cells().iter().map(|&c| w[c]).sum();
    let back: f64 = cycle.barred().iter().map(|&c| w[c]).sum();
    Ok((fwd - back).abs())
}

/// Residual against a general positive reference `R`.
pub fn cycle_residual_general(pi: &Coupling, r: &Coupling, cycle: &Cycle) -> Result<f64> {
    if pi.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            expected: r.shape(),
            found: pi.shape(),
        });
    }
    cycle.check_shape(pi.shape())?;
    let mut total = 0.0;
    for (cells, sign) in [(cycle.cells().to_vec(), 1.0), (cycle.barred(), -1.0)] {
        for (i, j) in cells {
            let (p, q) = (pi.mass()[[i, j]], r.mass()[[i, j]]);
            if p <= 0.0 || q <= 0.0 {
                return Err(Error::SupportViolation { row: i, col: j });
            }
            total += sign * (p.ln() - q.ln());
        }
    }
    Ok(total.abs())
}

/// Residual in the entropic-transport form, against `P` and the cost:
/// `|Σ log(π/P)(z) − Σ log(π/P)(z̄) + (Σ c(z) − Σ c(z̄))/ε|`.
pub fn cycle_residual_eot(pi: &Coupling, c: &CostMatrix, eps: f64, p: &Coupling, cycle: &Cycle) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    if pi.shape() != p.shape() || c.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            expected: p.shape(),
            found: pi.shape(),
        });
    }
    cycle.check_shape(pi.shape())?;
    let mut total = 0.0;
    for (cells, sign) in [(cycle.cells().to_vec(), 1.0), (cycle.barred(), -1.0)] {
        for (i, j) in cells {
            let (a, b) = (pi.mass()[[i, j]], p.mass()[[i, j]]);
            if a <= 0.0 || b <= 0.0 {
                return Err(Error::SupportViolation { row: i, col: j });
            }
            total += sign * (a.ln() - b.ln() + c.values()[[i, j]] / eps);
        }
    }
    Ok(total.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub k_max: usize,
    pub cycles_checked: u64,
    pub max_residual: f64,
    pub worst_cycle: Cycle,
    pub mode: CheckMode,
}

/// Checks all cycles of length `2..=k_max`, exhaustively when the count of
/// distinct cycles fits in `budget`, otherwise on `budget` uniform samples
/// drawn from `seed`.
pub fn check_invariance(
    pi: &Coupling,
    reference: Reference<'_>,
    k_max: usize,
    budget: u64,
    seed: u64,
) -> Result<InvarianceReport> {
    let w = log_density_ratio(pi, reference)?;
    check_invariance_log(&w, k_max, budget, seed)
}

/// [`check_invariance`] on a precomputed `W = log π − log R`.
pub fn check_invariance_log(w: &Array2<f64>, k_max: usize, budget: u64, seed: u64) -> Result<InvarianceReport> {
    if k_max < 2 {
        return Err(Error::InvalidConfig(format!("k_max must be at least 2, got {k_max}")));
    }
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be positive".into()));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCoupling("log-density must be finite".into()));
    }
    let (n, m) = w.dim();
    let cells = (n * m) as f64;
    let exhaustive_count: f64 = (2..=k_max).map(|k| cells.powi(k as i32) / k as f64).sum();
    if exhaustive_count <= budget as f64 {
        Ok(exhaustive(w, k_max))
    } else {
        Ok(sampled(w, k_max, budget, seed))
    }
}

fn residual_flat(w: &[f64], m: usize, idx: &[usize]) -> f64 {
    let k = idx.len();
    let mut s = 0.0;
    for t in 0..k {
        let (r, c) = (idx[t] / m, idx[t] % m);
        let next_col = idx[(t + 1) % k] % m;
        s += w[r * m + c] - w[r * m + next_col];
    }
    s.abs()
}

fn to_cycle(idx: &[usize], m: usize) -> Cycle {
    Cycle {
        cells: idx.iter().map(|&c| (c / m, c % m)).collect(),
    }
}

/// Rotations leave the residual unchanged, so only tuples whose first cell
/// is the smallest are visited.
fn exhaustive(w: &Array2<f64>, k_max: usize) -> InvarianceReport {
    let (_, m) = w.dim();
    let flat = w.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let total = flat.len();
    let mut best = (0.0_f64, vec![0usize, 0usize]);
    let mut checked = 0u64;
    for k in 2..=k_max {
        let per_first: Vec<(f64, Vec<usize>, u64)> = (0..total)
            .into_par_iter()
            .map(|first| {
                let mut idx = vec![first; k];
                let mut local = (0.0_f64, idx.clone(), 0u64);
                loop {
                    let r = residual_flat(&flat, m, &idx);
                    local.2 += 1;
                    if r > local.0 {
                        local.0 = r;
                        local.1.clone_from(&idx);
                    }
                    // Odometer over positions 1..k, each in first..total.
                    let mut pos = k - 1;
                    loop {
                        if pos == 0 {
                            return local;
                        }
                        idx[pos] += 1;
                        if idx[pos] < total {
                            break;
                        }
                        idx[pos] = first;
                        pos -= 1;
                    }
                }
            })
            .collect();
        for (r, idx, count) in per_first {
            checked += count;
            if r > best.0 {
                best = (r, idx);
            }
        }
    }
    InvarianceReport {
        k_max,
        cycles_checked: checked,
        max_residual: best.0,
        worst_cycle: to_cycle(&best.1, m),
        mode: CheckMode::Exhaustive,
    }
}

fn sampled(w: &Array2<f64>, k_max: usize, budget: u64, seed: u64) -> InvarianceReport {
    let (_, m) = w.dim();
    let flat = w.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let total = flat.len();
    let batches = budget.div_ceil(SAMPLE_BATCH);
    let per_batch: Vec<(f64, Vec<usize>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let count = SAMPLE_BATCH.min(budget - b * SAMPLE_BATCH);
            let mut local = (0.0_f64, vec![0usize, 0usize]);
            let mut idx = Vec::with_capacity(k_max);
            for _ in 0..count {
                let k = rng.random_range(2..=k_max);
                idx.clear();
                idx.extend((0..k).map(|_| rng.random_range(0..total)));
                let r = residual_flat(&flat, m, &idx);
                if r > local.0 {
                    local = (r, idx.clone());
                }
            }
            local
        })
        .collect();
    let mut best = (0.0_f64, vec![0usize, 0usize]);
    for (r, idx) in per_batch {
        if r > best.0 {
            best = (r, idx);
        }
    }
    InvarianceReport {
        k_max,
        cycles_checked: budget,
        max_residual: best.0,
        worst_cycle: to_cycle(&best.1, m),
        mode: CheckMode::Sampled,
    }
}

/// Exact maximum residual over all two-cycles in `O(n²m)`.
///
/// For rows `i, k` the two-cycle `((i, j), (k, l))` has residual
/// `|d_j − d_l|` with `d = W_i − W_k`, so the maximum is `max d − min d`.
pub fn max_two_cycle_residual(w: &Array2<f64>) -> (f64, Cycle) {
    let n = w.nrows();
    let rows: Vec<(f64, Cycle)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (0.0, Cycle { cells: vec![(i, 0), (i, 0)] });
            for k in (i + 1)..n {
                let (mut hi, mut lo) = ((f64::NEG_INFINITY, 0), (f64::INFINITY, 0));
                for (j, (a, b)) in w.row(i).iter().zip(w.row(k).iter()).enumerate() {
                    let d = a - b;
                    if d > hi.0 {
                        hi = (d, j);
                    }
                    if d < lo.0 {
                        lo = (d, j);
                    }
                }
                let r = hi.0 - lo.0;
                if r > best.0 {
                    best = (r, Cycle { cells: vec![(i, hi.1), (k, lo.1)] });
                }
            }
            best
        })
        .collect();
    let mut best = (0.0, Cycle { cells: vec![(0, 0), (0, 0)] });
    for r in rows {
        if r.0 > best.0 {
            best = r;
        }
    }
    best
}

/// Recovers `log φ, log ψ` with `log π − log R = log φ_i + log ψ_j`, anchored
/// at the heaviest cell of `π`.
pub fn factorize(pi: &Coupling, reference: Reference<'_>) -> Result<Potentials> {
    let w = log_density_ratio(pi, reference)?;
    let hub = pi
        .mass()
        .indexed_iter()
        .fold(((0, 0), f64::NEG_INFINITY), |acc, (ij, &v)| if v > acc.1 { (ij, v) } else { acc })
        .0;
    factorize_log(&w, hub)
}

/// [`factorize`] on `W` with an explicit hub cell.
pub fn factorize_log(w: &Array2<f64>, hub: (usize, usize)) -> Result<Potentials> {
    let (hi, hj) = hub;
    if hi >= w.nrows() || hj >= w.ncols() {
        return Err(Error::Index(format!("hub ({hi}, {hj}) outside the grid")));
    }
    let log_psi: Vec<f64> = w.row(hi).to_vec();
    let log_phi: Vec<f64> = w.column(hj).iter().map(|v| v - log_psi[hj]).collect();
    let mut worst = (0.0, 0, 0);
    for ((i, j), &v) in w.indexed_iter() {
        let defect = (v - log_phi[i] - log_psi[j]).abs();
        if defect.is_nan() || defect > worst.0 {
            worst = (if defect.is_nan() { f64::INFINITY } else { defect }, i, j);
        }
    }
    if worst.0 > FACTOR_TOL {
        return Err(Error::NotCyclicallyInvariant {
            row: worst.1,
            col: worst.2,
            defect: worst.0,
        });
    }
    Ok(Potentials { log_phi, log_psi })
}

/// Rows `F` and columns `G` of a rectangle `F × G`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rectangle {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Rectangle {
    pub fn new(rows: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::EmptyRectangle("rectangle sides must be nonempty".into()));
        }
        Ok(Rectangle { rows, cols })
    }

    fn mass_in(&self, m: &Array2<f64>) -> Result<f64> {
        let mut s = 0.0;
        for &i in &self.rows {
            for &j in &self.cols {
                s += *m
                    .get((i, j))
                    .ok_or_else(|| Error::Index(format!("cell ({i}, {j}) outside the grid")))?;
            }
        }
        Ok(s)
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&i| self.cols.iter().map(move |&j| (i, j)))
    }
}

/// `π(F₁×G₁)·π(F₂×G₂) / (π(F₁×G₂)·π(F₂×G₁))`, which is 1 for a coupling
/// that factorizes against a product reference.
pub fn rectangle_identity_product(pi: &Coupling, a: &Rectangle, b: &Rectangle) -> Result<f64> {
    let m = pi.mass();
    let num = a.mass_in(m)? * b.mass_in(m)?;
    let cross1 = Rectangle::new(a.rows.clone(), b.cols.clone())?.mass_in(m)?;
    let cross2 = Rectangle::new(b.rows.clone(), a.cols.clone())?.mass_in(m)?;
    if num <= 0.0 || cross1 <= 0.0 || cross2 <= 0.0 {
        return Err(Error::EmptyRectangle("a rectangle carries no mass".into()));
    }
    Ok(num / (cross1 * cross2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectangleBound {
    /// `Π π(F_i × G_i)`
    pub lhs: f64,
    /// `(αᾱ)^k Π π(F_i × G_{i+1})`
    pub rhs: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub holds: bool,
}

/// Rectangle inequality for a coupling invariant against `R`, where `α`
/// bounds `dR/dP` on the rectangles and `ᾱ` bounds `dP/dR` on the shifted
/// ones.
pub fn rectangle_inequality(pi: &Coupling, r: &Coupling, p: &Coupling, rects: &[Rectangle]) -> Result<RectangleBound> {
    if rects.is_empty() {
        return Err(Error::EmptyRectangle("need at least one rectangle".into()));
    }
    if r.shape() != pi.shape() || p.shape() != pi.shape() {
        return Err(Error::ShapeMismatch {
            expected: pi.shape(),
            found: r.shape(),
        });
    }
    factorize(pi, Reference::Measure(r))?;
    let k = rects.len();
    let shifted: Vec<Rectangle> = (0..k)
        .map(|i| Rectangle::new(rects[i].rows.clone(), rects[(i + 1) % k].cols.clone()))
        .collect::<Result<_>>()?;
    let mut alpha: f64 = 0.0;
    let mut alpha_bar: f64 = 0.0;
    for (rect, bar) in rects.iter().zip(&shifted) {
        for c in rect.cells() {
            let (rv, pv) = (lookup(r, c)?, lookup(p, c)?);
            alpha = alpha.max(rv / pv);
        }
        for c in bar.cells() {
            let (rv, pv) = (lookup(r, c)?, lookup(p, c)?);
            alpha_bar = alpha_bar.max(pv / rv);
        }
    }
    let mut lhs = 1.0;
    let mut rhs = (alpha * alpha_bar).powi(k as i32);
    for (rect, bar) in rects.iter().zip(&shifted) {
        lhs *= rect.mass_in(pi.mass())?;
        rhs *= bar.mass_in(pi.mass())?;
    }
    Ok(RectangleBound {
        lhs,
        rhs,
        alpha,
        alpha_bar,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

fn lookup(c: &Coupling, (i, j): (usize, usize)) -> Result<f64> {
    c.mass()
        .get((i, j))
        .copied()
        .ok_or_else(|| Error::Index(format!("cell ({i}, {j}) outside the grid")))
}
