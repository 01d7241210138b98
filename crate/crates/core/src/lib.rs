//! # eotlab
//!
//! Discrete entropic optimal transport and static Schrödinger bridges, built
//! around *cyclical invariance*: a coupling `π` is invariant with respect to a
//! reference `R` when the density `dπ/dR` has equal products along every cycle
//! `(x₁,y₁),…,(x_k,y_k)` and its column-rotated twin `(x₁,y₂),…,(x_k,y₁)`.
//! On a finite support that is the same as `dπ/dR = φ(x)ψ(y)`, and the unique
//! such coupling with prescribed marginals is the entropic optimal transport.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`measure`] | points, discrete measures, couplings, quantile discretization |
//! | [`wasserstein`] | exact 1-Wasserstein distance (network simplex) |
//! | [`cost`] | cost specs, cost matrices, log-domain Gibbs kernels |
//! | [`solver`] | log-domain Sinkhorn, objectives, Schrödinger-system residual |
//! | [`invariance`] | cycle residuals, factorization, rectangle identities |
//! | [`oracle`] | slow independent references (2×2 line search, dual Newton) |
//! | [`lab`] | stability / instability experiments and their reports |
//!
//! ```
//! use eotlab::{cost::{CostSpec, evaluate_cost, gibbs_kernel}, measure::{DiscreteMeasure, product_measure}};
//! use eotlab::solver::{sinkhorn, SolveConfig};
//!
//! let mu = DiscreteMeasure::uniform_on_line(&[0.0, 1.0]).unwrap();
//! let p = product_measure(&mu, &mu);
//! let c = evaluate_cost(&CostSpec::Absolute, p.row_support(), p.col_support()).unwrap();
//! let kernel = gibbs_kernel(&c, 1.0, &p).unwrap();
//! let sol = sinkhorn(&kernel, &mu, &mu, &SolveConfig::default()).unwrap();
//! assert!((sol.coupling.mass()[[0, 0]] - 0.365_529_289_315_002_4).abs() < 1e-12);
//! ```

pub mod cost;
pub mod fmt;
pub mod invariance;
pub mod lab;
pub mod measure;
pub mod oracle;
pub mod solver;
pub mod wasserstein;

mod error;

pub use error::{Error, Result};

/// Numerical floor for `log`, below which a mass counts as zero.
pub(crate) fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log Σ exp(v)` with max subtraction.
pub(crate) fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
