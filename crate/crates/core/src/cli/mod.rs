//! Command-line front end. `run` parses arguments, does the work, writes
//! output, and returns the process exit code.

mod output;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::lrvb::{build_system, LrvbSystem};
use crate::mfvb::{fit, FitOptions, ModelSpec, VbSolution};
use crate::models::{
    build_microcredit_model, simulate_microcredit, MicrocreditData, MicrocreditPriors, MicrocreditTruth,
    NormalInverseGamma, NormalNormal,
};
use crate::oracle::{perturb_and_rerun, Engine, RerunOptions};
use crate::robustness::{influence_grid, make_report, model_hash, solution_hash, SensitivityQuery};

pub use output::{fmt_f64, SCHEMA_VERSION};
use output::{json_bytes, Cell, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "LRVB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lrvb", version, about = "Mean-field VB fits, linear response covariances and prior sensitivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the variational approximation and summarize it.
    Fit(Common),
    /// Sensitivity of every tracked quantity to listed hyperparameters.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        /// Hyperparameter to differentiate along (repeatable; default all).
        #[arg(long = "hyper")]
        hypers: Vec<String>,
    },
    /// Influence function of one block over a lattice.
    InfluenceGrid {
        #[command(flatten)]
        common: Common,
        /// Perturbed block (default: the first block).
        #[arg(long)]
        block: Option<String>,
        /// Tracked quantity (default: the first one).
        #[arg(long)]
        quantity: Option<String>,
        /// Box per axis as `lo:hi`, comma-separated (default: +-3 posterior sd).
        #[arg(long = "box")]
        bounds: Option<String>,
        /// Lattice points per axis.
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// Linear response predictions against reruns of an oracle engine.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "hyper")]
        hyper: String,
        #[arg(long, value_enum, default_value_t = EngineArg::Vb)]
        engine: EngineArg,
        /// Step along the hyperparameter (default depends on the engine).
        #[arg(long)]
        step: Option<f64>,
        /// Retained draws per chain for the mcmc engine.
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Write a synthetic hierarchical dataset as CSV.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        sites: usize,
        #[arg(long, default_value_t = 200)]
        per_site: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Microcredit,
    NormalNormal,
    NormalInverseGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Quadrature,
    Mcmc,
    Vb,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Quadrature => Engine::Quadrature,
            EngineArg::Mcmc => Engine::Mcmc,
            EngineArg::Vb => Engine::Vb,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Input CSV. Hierarchical model: `site,treatment,outcome`; conjugate
    /// models: a single column `x`.
    #[arg(long)]
    data: PathBuf,
    /// Hyperparameter override `name=value` (repeatable).
    #[arg(long = "prior", value_parser = parse_override)]
    priors: Vec<(String, f64)>,
    /// Known observation variance of the normal-normal model.
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
}

fn parse_override(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("`{v}` is not a number: {e}"))?;
    Ok((k.trim().to_string(), v))
}

/// Failure tagged with the exit code it maps to.
struct Failure {
    code: i32,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL };
        Self { code, error }
    }
}

fn invalid(e: Error) -> Failure {
    Failure { code: EXIT_VALIDATION, error: e }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Entry point shared by the binary and tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}: {}", f.error.name(), f.error);
            f.code
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| invalid(Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))))?;
    // the global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit(c) => {
            let model = load_model(&c)?;
            let (sol, sys) = fit_and_linearize(&model, &c)?;
            emit(&c, fit_json(&model, &sol, &sys), || fit_table(&model, &sol, &sys))
        }
        Command::Sensitivity { common: c, hypers } => {
            let model = load_model(&c)?;
            let hypers = if hypers.is_empty() { model.hyper_names() } else { hypers };
            let mut queries = Vec::new();
            for h in &hypers {
                model.hyper_index(h).map_err(invalid)?;
                for q in model.quantities() {
                    queries.push(SensitivityQuery::hyperparameter(&model, &q, h).map_err(invalid)?);
                }
            }
            let (sol, sys) = fit_and_linearize(&model, &c)?;
            let report = make_report(&model, &sol, &sys, &queries);
            let mut v = serde_json::to_value(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
            stamp(&mut v, "sensitivity");
            let table = || Table {
                header: vec!["quantity", "hyperparameter", "value", "posterior_sd", "normalized", "error"],
                rows: report
                    .entries
                    .iter()
                    .map(|e| {
                        vec![
                            Cell::Text(e.quantity.clone()),
                            Cell::Text(e.direction.clone()),
                            Cell::Num(e.value),
                            Cell::Num(e.posterior_sd),
                            Cell::Num(e.normalized),
                            Cell::Text(e.error.clone().unwrap_or_default()),
                        ]
                    })
                    .collect(),
            };
            emit(&c, v, table)
        }
        Command::InfluenceGrid { common: c, block, quantity, bounds, points } => {
            let model = load_model(&c)?;
            let b = match &block {
                Some(name) => model.layout().find(name).ok_or_else(|| {
                    let valid: Vec<&str> = model.layout().blocks().iter().map(|b| b.name.as_str()).collect();
                    invalid(Error::InvalidInput(format!("unknown block `{name}`; valid: {}", valid.join(", "))))
                })?,
                None => 0,
            };
            let quantities = model.quantities();
            let q = match &quantity {
                Some(name) => quantities.iter().find(|q| &q.name == name).ok_or_else(|| {
                    let valid: Vec<&str> = quantities.iter().map(|q| q.name.as_str()).collect();
                    invalid(Error::InvalidInput(format!("unknown quantity `{name}`; valid: {}", valid.join(", "))))
                })?,
                None => &quantities[0],
            };
            if points < 2 {
                return Err(invalid(Error::InvalidInput("--points must be at least 2".into())));
            }
            let family = model.layout().blocks()[b].family;
            let axes_n = match family {
                Family::GaussianUnivariate | Family::Gamma | Family::InverseGamma => 1,
                Family::GaussianMultivariate { dim: 2 } => 2,
                other => {
                    return Err(invalid(Error::InvalidInput(format!("influence grids over {other:?} blocks are not supported"))))
                }
            };
            let explicit = bounds.as_deref().map(|s| parse_box(s, axes_n)).transpose().map_err(invalid)?;
            let (sol, sys) = fit_and_linearize(&model, &c)?;
            let axes = match explicit {
                Some(a) => a,
                None => default_box(&model, &sol, &sys, b)?,
            };
            let grid = lattice(&axes, points);
            let values = influence_grid(&model, &sol, &sys, b, &grid, &q.gradient(model.dim()))?;
            let v = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "influence-grid",
                "model": model.name(),
                "hyperparameters": hyper_map(&model),
                "block": model.layout().blocks()[b].name,
                "quantity": q.name,
                "axes": axes.iter().map(|(lo, hi)| json!({"lo": lo, "hi": hi, "points": points})).collect::<Vec<_>>(),
                "points": grid,
                "values": values,
                "model_hash": model_hash(&model),
                "solution_hash": solution_hash(&sol),
            });
            let table = || Table {
                header: if axes_n == 1 { vec!["x", "value"] } else { vec!["x", "y", "value"] },
                rows: grid
                    .iter()
                    .zip(&values)
                    .map(|(p, v)| p.iter().map(|x| Cell::Num(Some(*x))).chain([Cell::Num(Some(*v))]).collect())
                    .collect(),
            };
            emit(&c, v, table)
        }
        Command::Compare { common: c, hyper, engine, step, draws } => {
            let model = load_model(&c)?;
            let d = model.hyper_direction(&hyper).map_err(invalid)?;
            if step.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                return Err(invalid(Error::InvalidInput("--step must be positive".into())));
            }
            let opts = RerunOptions {
                step,
                draws,
                seed: c.seed,
                fit: FitOptions { tol: c.tol.min(1e-10), max_iter: c.max_iter },
                ..RerunOptions::default()
            };
            let r = perturb_and_rerun(&model, &d, engine.into(), &opts)?;
            let mut v = serde_json::to_value(&r).map_err(|e| Error::InvalidInput(e.to_string()))?;
            stamp(&mut v, "compare");
            if let Value::Object(m) = &mut v {
                m.insert("model".into(), model.name().into());
                m.insert("hyperparameter".into(), hyper.clone().into());
                m.insert("hyperparameters".into(), hyper_map(&model));
                m.insert("model_hash".into(), model_hash(&model).into());
                m.insert("seed".into(), c.seed.into());
            }
            let table = || Table {
                header: vec!["quantity", "predicted", "actual", "standard_error"],
                rows: (0..r.quantities.len())
                    .map(|i| {
                        vec![
                            Cell::Text(r.quantities[i].clone()),
                            Cell::Num(Some(r.predicted_deltas[i])),
                            Cell::Num(Some(r.actual_deltas[i])),
                            Cell::Num(Some(r.mc_standard_errors[i])),
                        ]
                    })
                    .collect(),
            };
            emit(&c, v, table)
        }
        Command::Simulate { out, sites, per_site, seed } => {
            if sites < 2 || per_site == 0 {
                return Err(invalid(Error::InvalidInput("need at least 2 sites and 1 observation per site".into())));
            }
            let base = MicrocreditTruth::default();
            // site noise levels cycle through the default ladder
            let sigma2 = (0..sites).map(|k| base.sigma2[k % base.sigma2.len()]).collect();
            let truth = MicrocreditTruth { sigma2, ..base };
            let data = simulate_microcredit(&truth, &vec![per_site; sites], seed)?;
            let mut buf = Vec::new();
            data.write_csv(&mut buf)?;
            write_out(out.as_deref(), &buf)
        }
    }
}

fn load_model(c: &Common) -> CliResult<ModelSpec> {
    if !(c.tol > 0.0) || c.max_iter == 0 {
        return Err(invalid(Error::InvalidInput("--tol must be positive and --max-iter non-zero".into())));
    }
    let model = match c.model {
        ModelArg::Microcredit => {
            let data = MicrocreditData::from_csv(&c.data).map_err(invalid)?;
            build_microcredit_model(data, &MicrocreditPriors::default()).map_err(invalid)?
        }
        ModelArg::NormalNormal => {
            let x = read_column(&c.data, "x")?;
            let joint = NormalNormal::new(x, c.noise_var).map_err(invalid)?;
            ModelSpec::new(Arc::new(joint), NormalNormal::prior_from_moments(0.0, 100.0)).map_err(invalid)?
        }
        ModelArg::NormalInverseGamma => {
            let x = read_column(&c.data, "x")?;
            let joint = NormalInverseGamma::new(x).map_err(invalid)?;
            ModelSpec::new(Arc::new(joint), vec![0.0, 1.0, 2.0, 1.0]).map_err(invalid)?
        }
    };
    let mut alpha = model.hyperparams().to_vec();
    for (k, v) in &c.priors {
        alpha[model.hyper_index(k).map_err(invalid)?] = *v;
    }
    model.with_hyperparams(alpha).map_err(invalid)
}

fn read_column(path: &Path, name: &str) -> CliResult<Vec<f64>> {
    let f = fs::File::open(path).map_err(|e| invalid(Error::Io(format!("{}: {e}", path.display()))))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    let headers = rdr.headers().map_err(|e| invalid(e.into()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| invalid(Error::InvalidInput(format!("missing CSV column `{name}`"))))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(e.into()))?;
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid(Error::InvalidInput(format!("row {}: `{name}` is not a number", i + 2))))?;
        out.push(v);
    }
    Ok(out)
}

fn fit_and_linearize(model: &ModelSpec, c: &Common) -> CliResult<(VbSolution, LrvbSystem)> {
    let sol = fit(model, None, &FitOptions { tol: c.tol, max_iter: c.max_iter })?;
    let sys = build_system(model, &sol)?;
    Ok((sol, sys))
}

fn hyper_map(model: &ModelSpec) -> Value {
    let mut m = Map::new();
    for (n, a) in model.hyper_names().into_iter().zip(model.hyperparams()) {
        m.insert(n, json!(a));
    }
    Value::Object(m)
}

fn stamp(v: &mut Value, command: &str) {
    if let Value::Object(m) = v {
        m.insert("schema_version".into(), SCHEMA_VERSION.into());
        m.insert("command".into(), command.into());
    }
}

struct QuantityRow {
    name: String,
    mean: f64,
    vb_sd: f64,
    lrvb_sd: f64,
}

fn quantity_rows(model: &ModelSpec, sol: &VbSolution, sys: &LrvbSystem) -> Vec<QuantityRow> {
    model
        .quantities()
        .iter()
        .map(|q| {
            let g = q.gradient(model.dim());
            let vb = g.dot(&(&sys.v * &g));
            let lr = g.dot(&(&sys.sigma_hat * &g));
            QuantityRow { name: q.name.clone(), mean: sol.mean[q.index], vb_sd: vb.max(0.0).sqrt(), lrvb_sd: lr.max(0.0).sqrt() }
        })
        .collect()
}

fn fit_json(model: &ModelSpec, sol: &VbSolution, sys: &LrvbSystem) -> Value {
    let rows: Vec<Value> = quantity_rows(model, sol, sys)
        .into_iter()
        .map(|r| json!({"name": r.name, "mean": r.mean, "vb_sd": r.vb_sd, "lrvb_sd": r.lrvb_sd}))
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "model": model.name(),
        "hyperparameters": hyper_map(model),
        "converged": sol.converged,
        "iterations": sol.iterations,
        "elbo": sol.elbo,
        "grad_norm": sol.grad_norm,
        "elbo_non_decreasing": sol.elbo_non_decreasing(),
        "quantities": rows,
        "blocks": model.layout().blocks().iter().map(|b| json!({
            "name": b.name,
            "family": b.family,
            "mean_parameters": sol.mean.as_slice()[b.range()].to_vec(),
        })).collect::<Vec<_>>(),
        "lrvb_condition": sys.condition,
        "model_hash": model_hash(model),
        "solution_hash": solution_hash(sol),
    })
}

fn fit_table(model: &ModelSpec, sol: &VbSolution, sys: &LrvbSystem) -> Table {
    Table {
        header: vec!["quantity", "mean", "vb_sd", "lrvb_sd"],
        rows: quantity_rows(model, sol, sys)
            .into_iter()
            .map(|r| vec![Cell::Text(r.name), Cell::Num(Some(r.mean)), Cell::Num(Some(r.vb_sd)), Cell::Num(Some(r.lrvb_sd))])
            .collect(),
    }
}

fn parse_box(s: &str, n: usize) -> Result<Vec<(f64, f64)>> {
    let axes: Vec<&str> = s.split(',').collect();
    if axes.len() != n {
        return Err(Error::InvalidInput(format!("--box needs {n} axis range(s), got {}", axes.len())));
    }
    axes.iter()
        .map(|a| {
            let (lo, hi) = a.split_once(':').ok_or_else(|| Error::InvalidInput(format!("axis range `{a}` is not lo:hi")))?;
            let lo: f64 = lo.trim().parse().map_err(|_| Error::InvalidInput(format!("bad bound `{lo}`")))?;
            let hi: f64 = hi.trim().parse().map_err(|_| Error::InvalidInput(format!("bad bound `{hi}`")))?;
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("axis range `{a}` must satisfy lo < hi")));
            }
            Ok((lo, hi))
        })
        .collect()
}

/// `+-3` linear response sds around the mean for Gaussian blocks; for
/// positive blocks, `+-3` sds of `q` clipped to stay positive.
fn default_box(model: &ModelSpec, sol: &VbSolution, sys: &LrvbSystem, b: usize) -> CliResult<Vec<(f64, f64)>> {
    let spec = &model.layout().blocks()[b];
    let blk = sol.params.block(b);
    match spec.family {
        Family::GaussianUnivariate | Family::GaussianMultivariate { .. } => {
            let d = spec.family.point_dim();
            Ok((0..d)
                .map(|i| {
                    let idx = spec.offset + i;
                    let mut g = DVector::zeros(model.dim());
                    g[idx] = 1.0;
                    let sd = g.dot(&(&sys.sigma_hat * &g)).max(0.0).sqrt();
                    (sol.mean[idx] - 3.0 * sd, sol.mean[idx] + 3.0 * sd)
                })
                .collect())
        }
        Family::Gamma | Family::InverseGamma => {
            let (a, r) = blk.gamma_params().ok_or_else(|| Error::Domain("not a gamma-type block".into()))?;
            let (mean, sd) = if spec.family == Family::Gamma {
                (a / r, a.sqrt() / r)
            } else if a > 2.0 {
                (r / (a - 1.0), r / ((a - 1.0) * (a - 2.0).sqrt()))
            } else {
                return Err(invalid(Error::InvalidInput("posterior variance undefined; pass --box".into())));
            };
            // the lower edge must keep the prior density representable
            let min_lp = crate::robustness::MIN_PRIOR_DENSITY.ln();
            let mut lo = (mean - 3.0 * sd).max(mean * 1e-3);
            while !(model.block_prior_log_density(b, &[lo])? >= min_lp) {
                lo = 0.5 * (lo + mean);
                if mean - lo <= 1e-12 * mean {
                    return Err(invalid(Error::InvalidInput("prior density underflows near the posterior mean; pass --box".into())));
                }
            }
            Ok(vec![(lo, mean + 3.0 * sd)])
        }
        other => Err(invalid(Error::InvalidInput(format!("no default box for {other:?}")))),
    }
}

/// Row-major lattice, last axis fastest.
fn lattice(axes: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    let coords: Vec<Vec<f64>> = axes
        .iter()
        .map(|(lo, hi)| (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
        .collect();
    match coords.len() {
        1 => coords[0].iter().map(|x| vec![*x]).collect(),
        _ => coords[0].iter().flat_map(|x| coords[1].iter().map(move |y| vec![*x, *y])).collect(),
    }
}

fn emit<F>(c: &Common, json_value: Value, table: F) -> CliResult<()>
where
    F: FnOnce() -> Table,
{
    let bytes = match c.format {
        Format::Json => json_bytes(&json_value)?,
        Format::Csv => table().to_csv()?,
    };
    write_out(c.out.as_deref(), &bytes)
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| invalid(Error::Io(format!("{}: {e}", p.display())))),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).map_err(|e| invalid(Error::Io(e.to_string())))
        }
    }
}
