use serde::{Deserialize, Serialize};

use crate::fmt::real17;
use crate::measure::{Coupling, Point};
use crate::{Error, Result};

/// Mass ratio `π(B_r(z)) / R(B_r(z))` on a closed product-max ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProbe {
    pub center: (Point, Point),
    pub radius: f64,
    /// Absent when the ball carries no reference mass.
    pub ratio_pi_over_r: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Probes `dπ/dR` at each center over strictly decreasing radii.
pub fn density_probe(pi: &Coupling, r: &Coupling, centers: &[(Point, Point)], radii: &[f64]) -> Result<Vec<DensityProbe>> {
    if pi.row_support() != r.row_support() || pi.col_support() != r.col_support() {
        return Err(Error::InvalidCoupling("probe needs couplings on the same supports".into()));
    }
    if radii.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidConfig("radii must be positive and finite".into()));
    }
    if radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig("radii must be strictly decreasing".into()));
    }
    let mut out = Vec::with_capacity(centers.len() * radii.len());
    for (cx, cy) in centers {
        let dx: Vec<f64> = pi.row_support().iter().map(|p| p.euclidean(cx)).collect();
        let dy: Vec<f64> = pi.col_support().iter().map(|p| p.euclidean(cy)).collect();
        for &radius in radii {
            let (mut a, mut b) = (0.0, 0.0);
            for (i, &di) in dx.iter().enumerate() {
                if di > radius {
                    continue;
                }
                for (j, &dj) in dy.iter().enumerate() {
                    if dj <= radius {
                        a += pi.mass()[[i, j]];
                        b += r.mass()[[i, j]];
                    }
                }
            }
            let (ratio, note) = if b > 0.0 {
                (Some(a / b), String::new())
            } else {
                (None, format!("no reference mass within {}", real17(radius)))
            };
            out.push(DensityProbe {
                center: (cx.clone(), cy.clone()),
                radius,
                ratio_pi_over_r: ratio,
                note,
            });
        }
    }
    Ok(out)
}
