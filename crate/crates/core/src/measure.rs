//! Finitely supported probability measures on ℝ^d and couplings between them.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};

use crate::{Error, Result};

/// Atoms closer than this in sup-norm are merged.
pub const MERGE_TOL: f64 = 1e-12;

/// Accepted deviation of an input's total mass from one before renormalizing.
pub const MASS_TOL: f64 = 1e-9;

/// A point of ℝ^d.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Dimension("points need at least one coordinate".into()));
        }
        if let Some(x) = coords.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure(format!("non-finite coordinate {x}")));
        }
        Ok(Point(coords))
    }

    /// A one-dimensional point. Panics on a non-finite coordinate.
    pub fn scalar(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite coordinate {x}");
        Point(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// First coordinate; the natural accessor on the real line.
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn euclidean(&self, other: &Point) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sup_dist(&self, other: &Point) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let coords = Vec::<f64>::deserialize(d)?;
        Point::new(coords).map_err(serde::de::Error::custom)
    }
}

/// Ground metric used by [`crate::wasserstein::wasserstein1`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    /// Euclidean distance between atoms of a measure.
    EuclideanOnPoints,
    /// `max(|x − x′|, |y − y′|)` between cells of a coupling, each factor
    /// measured with the Euclidean distance.
    ProductMax,
}

/// A named continuous law on the real line, used for quantile discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Law {
    Uniform { a: f64, b: f64 },
    Gaussian { mean: f64, std: f64 },
    Cauchy { loc: f64, scale: f64 },
}

impl Law {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Law::Uniform { a, b } => a.is_finite() && b.is_finite() && a < b,
            Law::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std > 0.0,
            Law::Cauchy { loc, scale } => loc.is_finite() && scale.is_finite() && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLaw(format!("{self:?}")))
        }
    }

    /// Inverse distribution function at level `p ∈ (0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Law::Uniform { a, b } => a + (b - a) * p,
            Law::Gaussian { mean, std } => {
                StatrsNormal::new(mean, std).expect("validated").inverse_cdf(p)
            }
            Law::Cauchy { loc, scale } => loc + scale * (std::f64::consts::PI * (p - 0.5)).tan(),
        }
    }

    pub fn is_heavy_tailed(&self) -> bool {
        matches!(self, Law::Cauchy { .. })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Law::Uniform { a, b } => Uniform::new(a, b).expect("validated").sample(rng),
            Law::Gaussian { mean, std } => Normal::new(mean, std).expect("validated").sample(rng),
            Law::Cauchy { loc, scale } => Cauchy::new(loc, scale).expect("validated").sample(rng),
        }
    }
}

/// A finitely supported probability measure.
///
/// Weights are strictly positive and sum to one; atoms are pairwise distinct
/// (points within [`MERGE_TOL`] are merged into the first occurrence).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidMeasure(format!("weight {w} is negative or non-finite")));
        }
        let dim = atoms.first().map(Point::dim).unwrap_or(1);
        if atoms.iter().any(|a| a.dim() != dim) {
            return Err(Error::Dimension("atoms of mixed dimension".into()));
        }

        let mut merged_atoms: Vec<Point> = Vec::with_capacity(atoms.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (atom, w) in atoms.into_iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            match merged_atoms.iter().position(|a| a.sup_dist(&atom) < MERGE_TOL) {
                Some(k) => merged_weights[k] += w,
                None => {
                    merged_atoms.push(atom);
                    merged_weights.push(w);
                }
            }
        }
        if merged_atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atom with positive weight".into()));
        }
        let total: f64 = merged_weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("total mass {total} is not 1")));
        }
        merged_weights.iter_mut().for_each(|w| *w /= total);
        Ok(DiscreteMeasure {
            atoms: merged_atoms,
            weights: merged_weights,
        })
    }

    /// Equal weights on the given reals.
    pub fn uniform_on_line(xs: &[f64]) -> Result<Self> {
        let w = 1.0 / xs.len() as f64;
        let atoms = xs.iter().map(|&x| Point::new(vec![x])).collect::<Result<Vec<_>>>()?;
        Self::new(atoms, vec![w; xs.len()])
    }

    /// Measure on the real line from parallel slices of positions and weights.
    pub fn on_line(xs: &[f64], weights: &[f64]) -> Result<Self> {
        let atoms = xs.iter().map(|&x| Point::new(vec![x])).collect::<Result<Vec<_>>>()?;
        Self::new(atoms, weights.to_vec())
    }

    pub fn dirac(p: Point) -> Self {
        DiscreteMeasure {
            atoms: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[Point] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    /// i.i.d. empirical measure of `n` draws; the seeded alternative to [`quantize`].
    pub fn sample<R: Rng + ?Sized>(law: &Law, n: usize, rng: &mut R) -> Result<Self> {
        law.validate()?;
        if n == 0 {
            return Err(Error::InvalidMeasure("sample size must be positive".into()));
        }
        let mut xs: Vec<f64> = (0..n).map(|_| law.sample(rng)).collect();
        xs.sort_by(f64::total_cmp);
        Self::uniform_on_line(&xs)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            atoms: Vec<Point>,
            weights: Vec<f64>,
        }
        let r = Repr::deserialize(d)?;
        DiscreteMeasure::new(r.atoms, r.weights).map_err(serde::de::Error::custom)
    }
}

/// The `n`-point quantile discretization of `law`: mass `1/n` at the
/// `(i − ½)/n` quantiles, atoms ascending.
pub fn quantize(law: &Law, n: usize) -> Result<DiscreteMeasure> {
    law.validate()?;
    if n == 0 {
        return Err(Error::InvalidMeasure("quantization size must be positive".into()));
    }
    let xs: Vec<f64> = (1..=n)
        .map(|i| law.quantile((i as f64 - 0.5) / n as f64))
        .collect();
    DiscreteMeasure::uniform_on_line(&xs)
}

/// A joint probability on `row_support × col_support`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    row_support: Vec<Point>,
    col_support: Vec<Point>,
    mass: Array2<f64>,
}

impl Coupling {
    pub fn new(row_support: Vec<Point>, col_support: Vec<Point>, mass: Array2<f64>) -> Result<Self> {
        let expected = (row_support.len(), col_support.len());
        if mass.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: mass.dim(),
            });
        }
        if let Some(m) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::InvalidCoupling(format!("entry {m} is negative or non-finite")));
        }
        let total = mass.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidCoupling(format!("total mass {total} is not 1")));
        }
        Ok(Coupling {
            row_support,
            col_support,
            mass,
        })
    }

    pub fn row_support(&self) -> &[Point] {
        &self.row_support
    }

    pub fn col_support(&self) -> &[Point] {
        &self.col_support
    }

    pub fn mass(&self) -> &Array2<f64> {
        &self.mass
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mass.dim()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.mass.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// The same supports with a different mass matrix.
    pub fn with_mass(&self, mass: Array2<f64>) -> Result<Self> {
        Coupling::new(self.row_support.clone(), self.col_support.clone(), mass)
    }

    /// Restriction to rows/columns selected by the predicates, renormalized
    /// to a probability. Returns the captured mass alongside.
    pub fn restrict(
        &self,
        keep_row: impl Fn(&Point) -> bool,
        keep_col: impl Fn(&Point) -> bool,
    ) -> Result<(Coupling, f64)> {
        let rows: Vec<usize> = (0..self.row_support.len())
            .filter(|&i| keep_row(&self.row_support[i]))
            .collect();
        let cols: Vec<usize> = (0..self.col_support.len())
            .filter(|&j| keep_col(&self.col_support[j]))
            .collect();
        let mut mass = Array2::zeros((rows.len(), cols.len()));
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                mass[[a, b]] = self.mass[[i, j]];
            }
        }
        let captured = mass.sum();
        if captured <= 0.0 {
            return Err(Error::InvalidCoupling("restriction captures no mass".into()));
        }
        mass.mapv_inplace(|m| m / captured);
        let restricted = Coupling {
            row_support: rows.iter().map(|&i| self.row_support[i].clone()).collect(),
            col_support: cols.iter().map(|&j| self.col_support[j].clone()).collect(),
            mass,
        };
        Ok((restricted, captured))
    }
}

impl Serialize for Coupling {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let rows: Vec<Vec<f64>> = self.mass.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut st = s.serialize_struct("Coupling", 3)?;
        st.serialize_field("row_support", &self.row_support)?;
        st.serialize_field("col_support", &self.col_support)?;
        st.serialize_field("mass", &rows)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Coupling {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            row_support: Vec<Point>,
            col_support: Vec<Point>,
            mass: Vec<Vec<f64>>,
        }
        let r = Repr::deserialize(d)?;
        let mass = matrix_from_rows(&r.mass).map_err(serde::de::Error::custom)?;
        Coupling::new(r.row_support, r.col_support, mass).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((n, m), flat).expect("shape checked"))
}

/// `P = μ ⊗ ν`.
pub fn product_measure(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Coupling {
    let mass = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| mu.weights[i] * nu.weights[j]);
    Coupling {
        row_support: mu.atoms.clone(),
        col_support: nu.atoms.clone(),
        mass,
    }
}

/// Row and column marginals; atoms that carry no mass are dropped.
pub fn marginals(pi: &Coupling) -> (DiscreteMeasure, DiscreteMeasure) {
    let build = |support: &[Point], sums: Vec<f64>| {
        let total: f64 = sums.iter().sum();
        let (atoms, weights): (Vec<Point>, Vec<f64>) = support
            .iter()
            .cloned()
            .zip(sums)
            .filter(|(_, w)| *w > 0.0)
            .map(|(a, w)| (a, w / total))
            .unzip();
        DiscreteMeasure::new(atoms, weights).expect("marginal of a valid coupling")
    };
    (
        build(&pi.row_support, pi.row_sums()),
        build(&pi.col_support, pi.col_sums()),
    )
}
