//! Command-line driver: `solve`, `check`, `experiment` and `counterexample`.
//!
//! Exit codes: 0 success, 1 invalid input, 2 solver did not converge
//! (`solve`), 3 counterexample verdict failed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use eotlab::cost::{evaluate_cost, gibbs_kernel, CostSpec};
use eotlab::fmt::{sha256_hex, to_json_string};
use eotlab::invariance::{check_invariance, factorize, InvarianceReport, Reference};
use eotlab::lab::{bundle_json, run_counterexample_with, run_experiment, write_records_csv, ExperimentSpec, Verdict};
use eotlab::measure::{product_measure, Coupling, DiscreteMeasure};
use eotlab::solver::{sinkhorn_from, Potentials, SolveConfig, SolveReport};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_VERDICT_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "eotlab", version, about = "Entropic optimal transport solver and stability lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one entropic transport instance.
    Solve(Common),
    /// Check cyclical invariance of a given coupling.
    Check(Common),
    /// Run a stability experiment from a spec file.
    Experiment(Common),
    /// Reproduce the discontinuous-cost counterexample.
    Counterexample(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl Common {
    fn solver(&self, base: SolveConfig) -> SolveConfig {
        SolveConfig {
            tol: self.tol.unwrap_or(base.tol),
            max_iter: self.max_iter.unwrap_or(base.max_iter),
            ..base
        }
    }

    fn read_input(&self) -> Result<(String, String), Failure> {
        let path = self
            .input
            .as_ref()
            .ok_or_else(|| Failure::invalid("--input is required for this subcommand"))?;
        let text = fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        let hash = sha256_hex(text.as_bytes());
        Ok((text, hash))
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<eotlab::Error> for Failure {
    fn from(e: eotlab::Error) -> Self {
        Failure::invalid(e.to_string())
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(c) => solve(c),
        Command::Check(c) => check(c),
        Command::Experiment(c) => experiment(c),
        Command::Counterexample(c) => counterexample(c),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::invalid(format!("malformed {what}: {e}")))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    let io = |e: std::io::Error| Failure::invalid(format!("writing {name}: {e}"));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(dir.join(name)).map_err(|e| io(e.error))?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveInput {
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostSpec,
    eps: f64,
    #[serde(default)]
    init_log_psi: Option<Vec<f64>>,
    #[serde(default)]
    solver: Option<SolveConfig>,
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    input_hash: &'a str,
    epsilon: f64,
    log_norm: f64,
    report: &'a SolveReport,
    potentials: &'a Potentials,
}

fn solve(c: &Common) -> Result<i32, Failure> {
    let (text, hash) = c.read_input()?;
    let input: SolveInput = parse(&text, "solve input")?;
    let cfg = c.solver(input.solver.unwrap_or_default());
    let product = product_measure(&input.mu, &input.nu);
    let cost = evaluate_cost(&input.cost, input.mu.atoms(), input.nu.atoms())?;
    let kernel = gibbs_kernel(&cost, input.eps, &product)?;
    let init = input.init_log_psi.unwrap_or_else(|| vec![0.0; input.nu.len()]);
    let sol = sinkhorn_from(&kernel, &input.mu, &input.nu, &cfg, &init)?;
    write_atomic(&c.output_dir, "coupling.json", to_json_string(&sol.coupling)?.as_bytes())?;
    let out = SolveOutput {
        input_hash: &hash,
        epsilon: kernel.epsilon(),
        log_norm: kernel.log_norm(),
        report: &sol.report,
        potentials: &sol.potentials,
    };
    write_atomic(&c.output_dir, "report.json", to_json_string(&out)?.as_bytes())?;
    if sol.report.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "solver stopped after {} iterations with marginal error {:e}",
            sol.report.iterations, sol.report.marginal_error
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn default_k_max() -> usize {
    3
}

fn default_budget() -> u64 {
    1_000_000
}

/// Either an explicit reference coupling or a cost and `ε` (the reference
/// is then the Gibbs measure over the product of the coupling's marginals).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckInput {
    coupling: Coupling,
    #[serde(default)]
    reference: Option<Coupling>,
    #[serde(default)]
    cost: Option<CostSpec>,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default = "default_k_max")]
    k_max: usize,
    #[serde(default = "default_budget")]
    budget: u64,
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    input_hash: &'a str,
    report: &'a InvarianceReport,
    factorization: FactorOutcome,
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum FactorOutcome {
    Ok { potentials: Potentials },
    Failed { reason: String },
}

fn check(c: &Common) -> Result<i32, Failure> {
    let (text, hash) = c.read_input()?;
    let input: CheckInput = parse(&text, "check input")?;
    let pi = &input.coupling;
    let seed = c.seed.unwrap_or(0);
    let (report, factor) = match (&input.reference, &input.cost, input.eps) {
        (Some(r), None, None) => {
            let reference = Reference::Measure(r);
            (
                check_invariance(pi, reference, input.k_max, input.budget, seed)?,
                factorize(pi, reference),
            )
        }
        (None, Some(spec), Some(eps)) => {
            let mu = DiscreteMeasure::new(pi.row_support().to_vec(), pi.row_sums())?;
            let nu = DiscreteMeasure::new(pi.col_support().to_vec(), pi.col_sums())?;
            if mu.len() != pi.shape().0 || nu.len() != pi.shape().1 {
                return Err(Failure::invalid("coupling has an empty row or column"));
            }
            let product = product_measure(&mu, &nu);
            let cost = evaluate_cost(spec, mu.atoms(), nu.atoms())?;
            let kernel = gibbs_kernel(&cost, eps, &product)?;
            let reference = Reference::Gibbs {
                kernel: &kernel,
                product: &product,
            };
            (
                check_invariance(pi, reference, input.k_max, input.budget, seed)?,
                factorize(pi, reference),
            )
        }
        _ => {
            return Err(Failure::invalid(
                "check input needs either `reference` or both `cost` and `eps`",
            ))
        }
    };
    let factorization = match factor {
        Ok(potentials) => FactorOutcome::Ok { potentials },
        Err(e) => FactorOutcome::Failed { reason: e.to_string() },
    };
    let out = CheckOutput {
        input_hash: &hash,
        report: &report,
        factorization,
    };
    write_atomic(&c.output_dir, "invariance.json", to_json_string(&out)?.as_bytes())?;
    Ok(EXIT_OK)
}

fn experiment(c: &Common) -> Result<i32, Failure> {
    let (text, hash) = c.read_input()?;
    let mut spec = ExperimentSpec::from_json(&text).map_err(|e| Failure::invalid(format!("malformed experiment spec: {e}")))?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    if c.tol.is_some() || c.max_iter.is_some() {
        spec.solver = Some(c.solver(spec.solver.unwrap_or_default()));
    }
    let outcome = run_experiment(&spec)?;
    let mut csv = Vec::new();
    write_records_csv(&outcome.records, &mut csv)?;
    write_atomic(&c.output_dir, "records.csv", &csv)?;
    write_atomic(&c.output_dir, "bundle.json", bundle_json(&spec, &hash, &outcome)?.as_bytes())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    Ok(match outcome.verdict {
        Some(Verdict::NotReproduced) => EXIT_VERDICT_FAILED,
        _ => EXIT_OK,
    })
}

#[derive(Serialize)]
struct CounterexampleBundle<'a> {
    spec_hash: String,
    library_version: &'static str,
    verdict: Verdict,
    records: &'a [eotlab::lab::ExperimentRecord],
}

fn counterexample(c: &Common) -> Result<i32, Failure> {
    let cfg = c.solver(SolveConfig::default());
    let (records, verdict) = run_counterexample_with(None, &cfg)?;
    let mut csv = Vec::new();
    write_records_csv(&records, &mut csv)?;
    write_atomic(&c.output_dir, "counterexample.csv", &csv)?;
    // The instance is built in; its "spec" is the solver configuration.
    let bundle = CounterexampleBundle {
        spec_hash: sha256_hex(to_json_string(&cfg)?.as_bytes()),
        library_version: env!("CARGO_PKG_VERSION"),
        verdict,
        records: &records,
    };
    write_atomic(&c.output_dir, "counterexample.json", to_json_string(&bundle)?.as_bytes())?;
    println!("{verdict}");
    Ok(match verdict {
        Verdict::InstabilityReproduced => EXIT_OK,
        Verdict::NotReproduced => EXIT_VERDICT_FAILED,
    })
}
