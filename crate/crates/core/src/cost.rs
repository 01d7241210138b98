//! Cost functions on support grids and the Gibbs reference measure
//! `dR/dP = a·exp(−c/ε)`, stored in log domain.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::measure::{matrix_from_rows, Coupling, Point};
use crate::{log_sum_exp, safe_ln, Error, Result};

/// Relative tolerance when checking that a reference `P` is a product.
const PRODUCT_TOL: f64 = 1e-10;

/// A cost function `c(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    /// `‖x − y‖²`
    SquaredEuclidean,
    /// `‖x − y‖`
    Absolute,
    /// `1` if `x ≥ ax` and `y ≥ ay`, else `0`; real line only. Its jump at
    /// `(ax, ay)` cannot be removed by subtracting functions of `x` and `y`
    /// alone.
    QuadrantIndicator { ax: f64, ay: f64 },
    Zero,
    /// Explicit values on the supports at hand.
    CustomMatrix(Array2<f64>),
}

#[derive(Serialize, Deserialize)]
struct QuadrantParams {
    ax: f64,
    ay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CostSpecRepr {
    SquaredEuclidean,
    Absolute,
    QuadrantIndicator { params: QuadrantParams },
    Zero,
    CustomMatrix { values: Vec<Vec<f64>> },
}

impl Serialize for CostSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            CostSpec::SquaredEuclidean => CostSpecRepr::SquaredEuclidean,
            CostSpec::Absolute => CostSpecRepr::Absolute,
            CostSpec::QuadrantIndicator { ax, ay } => CostSpecRepr::QuadrantIndicator {
                params: QuadrantParams { ax: *ax, ay: *ay },
            },
            CostSpec::Zero => CostSpecRepr::Zero,
            CostSpec::CustomMatrix(v) => CostSpecRepr::CustomMatrix {
                values: v.rows().into_iter().map(|r| r.to_vec()).collect(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CostSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match CostSpecRepr::deserialize(d)? {
            CostSpecRepr::SquaredEuclidean => CostSpec::SquaredEuclidean,
            CostSpecRepr::Absolute => CostSpec::Absolute,
            CostSpecRepr::QuadrantIndicator { params } => CostSpec::QuadrantIndicator {
                ax: params.ax,
                ay: params.ay,
            },
            CostSpecRepr::Zero => CostSpec::Zero,
            CostSpecRepr::CustomMatrix { values } => {
                CostSpec::CustomMatrix(matrix_from_rows(&values).map_err(serde::de::Error::custom)?)
            }
        })
    }
}

/// Cost values on `rows × cols`; all entries finite.
///
/// Built-in specs produce nonnegative matrices. Shifts by marginal functions
/// ([`CostMatrix::shift_marginals`]) may go negative, which is harmless:
/// neither the Gibbs construction nor the optimizer depends on the sign.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidCost(format!("non-finite entry {v}")));
        }
        Ok(CostMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `c(x, y) − f(x) − g(y)`.
    pub fn shift_marginals(&self, f: &[f64], g: &[f64]) -> Result<Self> {
        let (n, m) = self.shape();
        if f.len() != n || g.len() != m {
            return Err(Error::ShapeMismatch {
                expected: (n, m),
                found: (f.len(), g.len()),
            });
        }
        CostMatrix::new(Array2::from_shape_fn((n, m), |(i, j)| self.values[[i, j]] - f[i] - g[j]))
    }

    /// `c + δ·b`.
    pub fn perturbed(&self, delta: f64, bump: &CostMatrix) -> Result<Self> {
        if bump.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: bump.shape(),
            });
        }
        CostMatrix::new(&self.values + &(delta * &bump.values))
    }

    /// `Σ c π`.
    pub fn integrate(&self, pi: &Coupling) -> f64 {
        self.values.iter().zip(pi.mass().iter()).map(|(c, p)| c * p).sum()
    }
}

/// Evaluates `spec` on every pair `(rows[i], cols[j])`.
pub fn evaluate_cost(spec: &CostSpec, rows: &[Point], cols: &[Point]) -> Result<CostMatrix> {
    let dim = rows.first().or(cols.first()).map(Point::dim).unwrap_or(1);
    if rows.iter().chain(cols).any(|p| p.dim() != dim) {
        return Err(Error::Dimension("row and column supports differ in dimension".into()));
    }
    let shape = (rows.len(), cols.len());
    let values = match spec {
        CostSpec::SquaredEuclidean => Array2::from_shape_fn(shape, |(i, j)| {
            let d = rows[i].euclidean(&cols[j]);
            d * d
        }),
        CostSpec::Absolute => Array2::from_shape_fn(shape, |(i, j)| rows[i].euclidean(&cols[j])),
        CostSpec::QuadrantIndicator { ax, ay } => {
            if dim != 1 {
                return Err(Error::Dimension(format!(
                    "quadrant indicator needs one-dimensional supports, got d = {dim}"
                )));
            }
            Array2::from_shape_fn(shape, |(i, j)| {
                if rows[i].x() >= *ax && cols[j].x() >= *ay {
                    1.0
                } else {
                    0.0
                }
            })
        }
        CostSpec::Zero => Array2::zeros(shape),
        CostSpec::CustomMatrix(v) => {
            if v.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    found: v.dim(),
                });
            }
            v.clone()
        }
    };
    CostMatrix::new(values)
}

/// `log dR/dP` on the grid, with `R` a probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsKernel {
    log_density: Array2<f64>,
    epsilon: f64,
    log_norm: f64,
}

impl GibbsKernel {
    pub fn log_density(&self) -> &Array2<f64> {
        &self.log_density
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `log a` with `a = (Σ e^{−c/ε} P)^{−1}`.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn shape(&self) -> (usize, usize) {
        self.log_density.dim()
    }

    /// Kernel of an arbitrary reference `R ~ P`, i.e. `log dR/dP`, with the
    /// convention `ε = 1` and `log a = 0`.
    pub fn from_reference(r: &Coupling, p: &Coupling) -> Result<Self> {
        check_aligned(r.shape(), p.shape())?;
        let mut log_density = Array2::zeros(r.shape());
        for ((i, j), &rij) in r.mass().indexed_iter() {
            let pij = p.mass()[[i, j]];
            if rij <= 0.0 || pij <= 0.0 {
                return Err(Error::SupportViolation { row: i, col: j });
            }
            log_density[[i, j]] = rij.ln() - pij.ln();
        }
        Ok(GibbsKernel {
            log_density,
            epsilon: 1.0,
            log_norm: 0.0,
        })
    }

    /// `log R_ij = log_density_ij + log P_ij`.
    pub fn log_reference(&self, p: &Coupling) -> Array2<f64> {
        let mut out = self.log_density.clone();
        out.zip_mut_with(p.mass(), |l, &pij| *l += safe_ln(pij));
        out
    }
}

fn check_aligned(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, found })
    }
}

fn check_product(p: &Coupling) -> Result<()> {
    let rows = p.row_sums();
    let cols = p.col_sums();
    for ((i, j), &pij) in p.mass().indexed_iter() {
        let expected = rows[i] * cols[j];
        if (pij - expected).abs() > PRODUCT_TOL * expected.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidCoupling(format!(
                "reference is not a product measure at cell ({i}, {j})"
            )));
        }
        if pij <= 0.0 {
            return Err(Error::SupportViolation { row: i, col: j });
        }
    }
    Ok(())
}

/// Builds `log dR/dP = −c/ε + log a` against the product `P`.
pub fn gibbs_kernel(c: &CostMatrix, eps: f64, p: &Coupling) -> Result<GibbsKernel> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    check_aligned(c.shape(), p.shape())?;
    check_product(p)?;
    let scaled = c.values.mapv(|v| -v / eps);
    let log_mass = log_sum_exp(
        scaled
            .iter()
            .zip(p.mass().iter())
            .map(|(s, &pij)| s + pij.ln()),
    );
    let log_norm = -log_mass;
    if !log_norm.is_finite() {
        return Err(Error::InvalidCost("normalizing constant is not finite".into()));
    }
    Ok(GibbsKernel {
        log_density: scaled.mapv(|s| s + log_norm),
        epsilon: eps,
        log_norm,
    })
}

/// `R_ij = exp(log_density_ij)·P_ij`.
pub fn reference_measure(kernel: &GibbsKernel, p: &Coupling) -> Result<Coupling> {
    check_aligned(kernel.shape(), p.shape())?;
    let mut mass = kernel.log_density.mapv(f64::exp);
    mass.zip_mut_with(p.mass(), |r, &pij| *r *= pij);
    p.with_mass(mass)
}
