//! Scripted stability experiments.
//!
//! An [`ExperimentSpec`] (read from JSON) names one of five experiments and
//! its parameters; [`run_experiment`] solves every stage and returns one
//! [`ExperimentRecord`] per stage. Records go out as a six-column CSV
//! ([`write_records_csv`]) and as a JSON bundle stamped with the hash of the
//! input ([`bundle_json`]).

mod probe;
mod runs;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::fmt::{real17, to_json_string};
use crate::measure::Law;
use crate::solver::SolveConfig;
use crate::{Error, Result};

pub use probe::{density_probe, DensityProbe};
pub use runs::{
    run_counterexample, run_counterexample_with, run_infinite_cost, run_perturb_cost, run_perturb_eps,
    run_refine_marginals,
};

/// Default number of bins per axis when couplings are too large for an
/// exact `W₁`.
pub const DEFAULT_COARSE_GRID: usize = 32;
/// Default support size for experiments at fixed marginals.
pub const DEFAULT_FIXED_SIZE: usize = 32;
/// Default half-width of the window used by the infinite-cost experiment.
pub const DEFAULT_WINDOW: f64 = 3.0;
/// Largest residual tolerated for a pre-limit coupling.
pub const STAGE_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RefineMarginals,
    PerturbCost,
    PerturbEps,
    InfiniteCost,
    Counterexample,
}

/// Direction of the cost perturbation in a `perturb_cost` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `c + δ·sin(x + y)`
    #[default]
    SinBump,
    /// `c + δ·(f(x) + g(y))` with `f, g` drawn once from the seed.
    MarginalShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law_x: Option<Law>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law_y: Option<Law>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default)]
    pub schedule: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Support size of the reference solve in `refine_marginals`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_size: Option<usize>,
    /// Support size for experiments at fixed marginals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_grid: Option<usize>,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolveConfig>,
}

impl ExperimentSpec {
    /// Parses and validates a JSON spec. Syntax errors keep serde's line and
    /// column.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.kind != ExperimentKind::Counterexample || !self.schedule.is_empty() {
            if self.schedule.is_empty() {
                return bad("schedule must be nonempty".into());
            }
            if self.schedule.iter().any(|v| !v.is_finite()) {
                return bad("schedule entries must be finite".into());
            }
            let up = self.schedule.windows(2).all(|w| w[1] > w[0]);
            let down = self.schedule.windows(2).all(|w| w[1] < w[0]);
            if !(up || down) {
                return bad("schedule must be strictly monotone".into());
            }
        }
        if let Some(c) = &self.solver {
            c.validate()?;
        }
        if let Some(g) = self.coarse_grid {
            if g == 0 {
                return bad("coarse_grid must be positive".into());
            }
        }
        if let Some(w) = self.window {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("window must be positive, got {w}"));
            }
        }
        let sizes = |what: &str, min: f64| -> Result<()> {
            if self.schedule.iter().any(|&v| v.fract() != 0.0 || v < min) {
                return Err(Error::InvalidSpec(format!("{what} schedule entries must be integers >= {min}")));
            }
            Ok(())
        };
        if self.kind == ExperimentKind::Counterexample {
            return sizes("counterexample", 2.0);
        }
        self.law_x()?.validate()?;
        self.law_y()?.validate()?;
        let eps = self.epsilon()?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidEpsilon(eps));
        }
        if matches!(self.cost()?, CostSpec::CustomMatrix(_)) {
            return bad("experiments need a cost defined on points, not a fixed matrix".into());
        }
        match self.kind {
            ExperimentKind::RefineMarginals => {
                sizes("refine_marginals", 1.0)?;
                if self.reference_size() <= self.max_schedule() as usize {
                    return bad("reference_size must exceed every schedule entry".into());
                }
            }
            ExperimentKind::InfiniteCost => {
                sizes("infinite_cost", 1.0)?;
                if self.schedule.len() < 2 {
                    return bad("infinite_cost compares consecutive sizes and needs two or more".into());
                }
                let cauchy = |l: &Law| matches!(l, Law::Cauchy { .. });
                if !(cauchy(self.law_x()?) && cauchy(self.law_y()?)) {
                    return bad("infinite_cost expects Cauchy laws on both sides".into());
                }
                if *self.cost()? != CostSpec::SquaredEuclidean {
                    return bad("infinite_cost expects the squared_euclidean cost".into());
                }
            }
            ExperimentKind::PerturbEps => {
                if self.schedule.iter().any(|&e| e <= 0.0) {
                    return bad("every scheduled epsilon must be positive".into());
                }
            }
            ExperimentKind::PerturbCost | ExperimentKind::Counterexample => {}
        }
        if self.size == Some(0) {
            return bad("size must be positive".into());
        }
        Ok(())
    }

    fn law_x(&self) -> Result<&Law> {
        self.law_x.as_ref().ok_or_else(|| Error::InvalidSpec("law_x is required".into()))
    }

    fn law_y(&self) -> Result<&Law> {
        self.law_y.as_ref().ok_or_else(|| Error::InvalidSpec("law_y is required".into()))
    }

    fn cost(&self) -> Result<&CostSpec> {
        self.cost.as_ref().ok_or_else(|| Error::InvalidSpec("cost is required".into()))
    }

    fn epsilon(&self) -> Result<f64> {
        self.eps.ok_or_else(|| Error::InvalidSpec("eps is required".into()))
    }

    fn max_schedule(&self) -> f64 {
        self.schedule.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn reference_size(&self) -> usize {
        self.reference_size.unwrap_or(4 * self.max_schedule().max(1.0) as usize)
    }

    fn solver_config(&self) -> SolveConfig {
        self.solver.unwrap_or_default()
    }
}

/// One stage of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub stage_param: f64,
    pub w1_to_reference: f64,
    pub invariance_residual: f64,
    pub solver_iterations: usize,
    /// Median of `exp(log dR_stage/dP − log dR_ref/dP)` over the stage grid.
    pub alpha_fit: f64,
    pub notes: String,
    pub converged: bool,
    /// `Σ cπ` of the stage coupling, reported by the infinite-cost run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "instability reproduced")]
    InstabilityReproduced,
    #[serde(rename = "instability not reproduced")]
    NotReproduced,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::InstabilityReproduced => "instability reproduced",
            Verdict::NotReproduced => "instability not reproduced",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub records: Vec<ExperimentRecord>,
    /// Whether `∫c d(μ⊗ν)` is finite for the continuum laws.
    pub finite_value_regime: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub warnings: Vec<String>,
}

/// Runs whichever experiment the experiment spec names.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let (records, verdict, warnings) = match spec.kind {
        ExperimentKind::RefineMarginals => (run_refine_marginals(spec)?, None, vec![]),
        ExperimentKind::PerturbCost => (run_perturb_cost(spec)?, None, vec![]),
        ExperimentKind::PerturbEps => (run_perturb_eps(spec)?, None, vec![]),
        ExperimentKind::InfiniteCost => {
            let recs = run_infinite_cost(spec)?;
            let warnings = recs
                .iter()
                .filter(|r| r.notes.contains("low_window_mass"))
                .map(|r| format!("window captures under half the mass at stage {}", r.stage_param))
                .collect();
            (recs, None, warnings)
        }
        ExperimentKind::Counterexample => {
            let schedule: Option<Vec<usize>> =
                (!spec.schedule.is_empty()).then(|| spec.schedule.iter().map(|&v| v as usize).collect());
            let (recs, v) = run_counterexample_with(schedule.as_deref(), &spec.solver_config())?;
            (recs, Some(v), vec![])
        }
    };
    let finite_value_regime = match (&spec.law_x, &spec.law_y, &spec.cost) {
        (Some(x), Some(y), Some(c)) => continuum_value_finite(x, y, c),
        _ => true,
    };
    Ok(ExperimentOutcome {
        kind: spec.kind,
        records,
        finite_value_regime,
        verdict,
        warnings,
    })
}

/// Whether `∫c d(μ⊗ν) < ∞` for the continuum laws. Only a heavy-tailed law
/// paired with an unbounded cost breaks it; the discrete problems solved at
/// each stage are always finite.
pub fn continuum_value_finite(law_x: &Law, law_y: &Law, cost: &CostSpec) -> bool {
    let unbounded = matches!(cost, CostSpec::SquaredEuclidean | CostSpec::Absolute);
    !(unbounded && (law_x.is_heavy_tailed() || law_y.is_heavy_tailed()))
}

pub const CSV_HEADER: [&str; 6] = [
    "stage_param",
    "w1_to_reference",
    "invariance_residual",
    "solver_iterations",
    "alpha_fit",
    "notes",
];

/// Writes the six-column CSV with 17-significant-digit reals.
pub fn write_records_csv<W: Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            real17(r.stage_param),
            real17(r.w1_to_reference),
            real17(r.invariance_residual),
            r.solver_iterations.to_string(),
            real17(r.alpha_fit),
            r.notes.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Bundle<'a> {
    format_version: u32,
    library_version: &'static str,
    spec_hash: &'a str,
    spec: &'a ExperimentSpec,
    #[serde(flatten)]
    outcome: &'a ExperimentOutcome,
}

/// JSON bundle with the spec, its hash and every record.
pub fn bundle_json(spec: &ExperimentSpec, spec_hash: &str, outcome: &ExperimentOutcome) -> Result<String> {
    to_json_string(&Bundle {
        format_version: 1,
        library_version: env!("CARGO_PKG_VERSION"),
        spec_hash,
        spec,
        outcome,
    })
}
