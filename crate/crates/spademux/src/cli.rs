//! Command-line surface: reproducible tables and reports for every major
//! capability of the library.
//!
//! Subcommands:
//!
//! - `fisher-curve` — `w^2 F` over a separation grid for an ideal sorter, the
//!   uniform coupling model, a seeded random-matrix ensemble (mean and spread)
//!   or a matrix loaded from file; optionally with the direct-imaging
//!   baseline alongside.
//! - `dmin` — root-solved minimal resolvable distances over photon-number
//!   (and, for the uniform model, `|r|^2`) grids, with the analytic
//!   asymptotes for comparison.
//! - `audit-matrix` — a JSON health report for a stored coupling matrix:
//!   unitarity, coupling statistics, small-separation information
//!   coefficient, a `d_min` table, and the crossover against direct imaging.
//! - `mle-verify` — Monte Carlo maximum-likelihood trials against the
//!   Cramér-Rao bound.
//! - `calibrate-mu` — invert the ensemble-mean off-diagonal power to a
//!   coupling strength `mu`.
//!
//! Every artifact embeds its run configuration and the tool version, and
//! identical configurations produce byte-identical files regardless of thread
//! count. Exit codes: 0 on success, 2 for configuration errors, 3 for
//! numerical failures.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::crosstalk::{
    calibrate_mu, load_matrix, sample_random_crosstalk, uniform_crosstalk, CrosstalkMatrix,
};
use crate::error::{Error, Result};
use crate::fisher::{
    demux_probabilities, fisher_direct_imaging, fisher_exact, fisher_generic_smalld,
    fisher_ideal_closed_form, mean_std, GenericEntries, ProbabilityModel,
};
use crate::modes::{ideal_probabilities, ModeGrid, SceneParams};
use crate::montecarlo::{crb_experiment_detailed, CrbConfig, DEFAULT_SEARCH};
use crate::output::{emit, render_report, render_table, Field, Table};
use crate::resolution::{
    dmin_direct_imaging, dmin_ideal, dmin_uniform, minimal_resolvable_distance,
    uniform_beats_direct_imaging,
};
use crate::stream::RngStream;

/// Output encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn as_str(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Coupling models selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// No crosstalk (closed-form information).
    Ideal,
    /// Uniform coupling: `t` diagonal, `r` off-diagonal.
    Uniform,
    /// Seeded ensemble of random unitaries `exp(-i mu H)`.
    Random,
    /// A matrix loaded from `--matrix-file`.
    File,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ideal => "ideal",
            ModelKind::Uniform => "uniform",
            ModelKind::Random => "random",
            ModelKind::File => "file",
        }
    }
}

/// A value grid written `min:max:steps:log|lin`, or a bare number for a
/// single point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    raw: String,
    min: f64,
    max: f64,
    steps: usize,
    log: bool,
}

impl GridSpec {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let n = self.steps;
        if self.log {
            let step = (self.max / self.min).ln() / (n - 1) as f64;
            (0..n).map(|i| (self.min.ln() + step * i as f64).exp()).collect()
        } else {
            let step = (self.max - self.min) / (n - 1) as f64;
            (0..n).map(|i| self.min + step * i as f64).collect()
        }
    }

    /// The grid's single value, or a configuration error naming the flag.
    pub fn single(&self, flag: &str) -> Result<f64> {
        if self.steps == 1 {
            Ok(self.min)
        } else {
            Err(Error::InvalidParameter(format!(
                "{flag} must be a single value here, got the grid {:?}",
                self.raw
            )))
        }
    }
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse = |v: &str, what: &str| -> std::result::Result<f64, String> {
            v.parse::<f64>()
                .map_err(|_| format!("bad {what} {v:?} in grid {s:?}"))
                .and_then(|x| {
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(format!("{what} must be finite in grid {s:?}"))
                    }
                })
        };
        match parts.as_slice() {
            [v] => {
                let x = parse(v, "value")?;
                Ok(GridSpec {
                    raw: s.to_string(),
                    min: x,
                    max: x,
                    steps: 1,
                    log: false,
                })
            }
            [min, max, steps, scale] => {
                let min = parse(min, "minimum")?;
                let max = parse(max, "maximum")?;
                let steps: usize = steps
                    .parse()
                    .map_err(|_| format!("bad step count {steps:?} in grid {s:?}"))?;
                let log = match *scale {
                    "log" => true,
                    "lin" => false,
                    other => return Err(format!("grid scale must be log or lin, got {other:?}")),
                };
                if steps == 0 {
                    return Err(format!("grid {s:?} needs at least one step"));
                }
                if steps > 1 && !(max > min) {
                    return Err(format!("grid {s:?} needs max > min"));
                }
                if log && !(min > 0.0) {
                    return Err(format!("log grid {s:?} needs min > 0"));
                }
                Ok(GridSpec {
                    raw: s.to_string(),
                    min,
                    max,
                    steps,
                    log,
                })
            }
            _ => Err(format!(
                "grid must be a single value or min:max:steps:log|lin, got {s:?}"
            )),
        }
    }
}

/// Precision limits of two-source superresolution under mode-sorter
/// crosstalk: Fisher-information curves, minimal resolvable distances,
/// matrix audits, and Monte Carlo Cramér-Rao verification.
#[derive(Debug, Parser)]
#[command(name = "spademux", version = crate::VERSION)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Master seed; all randomness derives from (seed, stream index).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output path (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Output format. Tables default to csv; audit-matrix and mle-verify
    /// reports are JSON-only.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Worker threads: a number, or "auto" for one per core. Results are
    /// byte-identical for any choice.
    #[arg(long, global = true, default_value = "auto")]
    pub threads: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fisher information w^2 F over a separation grid.
    FisherCurve(FisherCurveArgs),
    /// Minimal resolvable distance over photon-number (and |r|^2) grids.
    Dmin(DminArgs),
    /// Audit a stored coupling-matrix file.
    AuditMatrix(AuditMatrixArgs),
    /// Monte Carlo verification of the Cramér-Rao bound for the separation
    /// estimator.
    MleVerify(MleVerifyArgs),
    /// Find the coupling strength mu whose ensemble-mean off-diagonal power
    /// matches a target.
    CalibrateMu(CalibrateMuArgs),
}

/// Flags describing the coupling model and measurement.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Coupling model.
    #[arg(long, value_enum, default_value_t = ModelKind::Ideal)]
    pub model: ModelKind,

    /// Crosstalk-space dimension D, a perfect square (q+1)^2.
    #[arg(long, default_value_t = 9)]
    pub dim: usize,

    /// Measured cutoff Q: modes (n,m) with n,m <= Q are detected.
    #[arg(long, default_value_t = 2)]
    pub q_measured: u32,

    /// Off-diagonal power |r|^2 of the uniform model; `dmin` accepts a grid
    /// min:max:steps:log|lin for |r|^2 sweeps.
    #[arg(long, default_value = "0.0017")]
    pub r2: GridSpec,

    /// Coupling strength of the random ensemble (bypasses calibration).
    #[arg(long, conflicts_with = "target_offdiag")]
    pub mu: Option<f64>,

    /// Calibrate mu so the ensemble-mean off-diagonal power hits this
    /// target (default 0.0017 when neither --mu nor this is given).
    #[arg(long)]
    pub target_offdiag: Option<f64>,

    /// Ensemble size for the random model.
    #[arg(long, default_value_t = 500)]
    pub samples: u64,

    /// Angle of the source axis, radians.
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,

    /// Stored matrix for --model file ("D <dim>" format or row,col,re,im CSV).
    #[arg(long)]
    pub matrix_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FisherCurveArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Separation grid in x = d/(2w), min:max:steps:log|lin or one value.
    #[arg(long, default_value = "1e-4:2.5:60:log")]
    pub x_grid: GridSpec,

    /// Add a direct_imaging_w2F baseline column (one quadrature per point).
    #[arg(long)]
    pub direct_imaging: bool,
}

#[derive(Debug, Args)]
pub struct DminArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Photon-number grid, min:max:steps:log|lin or one value.
    #[arg(long, default_value = "1:1e6:13:log")]
    pub n_photons: GridSpec,
}

#[derive(Debug, Args)]
pub struct AuditMatrixArgs {
    /// Matrix file to audit.
    pub matrix: PathBuf,

    /// Measured cutoff Q (must fit inside the file's dimension).
    #[arg(long, default_value_t = 2)]
    pub q_measured: u32,

    /// Angle of the source axis, radians.
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,

    /// Photon numbers for the d_min table.
    #[arg(long, default_value = "1e2:1e8:7:log")]
    pub n_photons: GridSpec,
}

#[derive(Debug, Args)]
pub struct MleVerifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// True separation x = d/(2w) of the simulated scenes. For
    /// --model random the single matrix with sample index 0 is used.
    #[arg(long, default_value_t = 0.1)]
    pub x: f64,

    /// Photons per shot.
    #[arg(long, default_value_t = 1e4)]
    pub n_photons: f64,

    /// Simulate-estimate trials (fewer than 100 is flagged as statistically
    /// weak).
    #[arg(long, default_value_t = 1000)]
    pub trials: u64,

    /// Also write per-trial estimates as CSV to this path.
    #[arg(long)]
    pub per_trial: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateMuArgs {
    /// Crosstalk-space dimension D.
    #[arg(long, default_value_t = 9)]
    pub dim: usize,

    /// Target ensemble-mean off-diagonal power, in (0, 1/(D-1)).
    #[arg(long, default_value_t = 0.0017)]
    pub target_offdiag: f64,

    /// Ensemble size used during calibration.
    #[arg(long, default_value_t = 500)]
    pub samples: u64,
}

/// Parse arguments, run, and report: 0 success, 2 configuration error,
/// 3 numerical failure. Clap's own usage errors also exit with 2.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Dispatch a parsed invocation (separated from [`run`] for testability).
pub fn execute(cli: Cli) -> Result<()> {
    setup_threads(&cli.threads)?;
    let common = Common {
        seed: cli.seed,
        out: cli.out.clone(),
        format: cli.format,
    };
    match &cli.command {
        Command::FisherCurve(args) => cmd_fisher_curve(&common, args),
        Command::Dmin(args) => cmd_dmin(&common, args),
        Command::AuditMatrix(args) => cmd_audit_matrix(&common, args),
        Command::MleVerify(args) => cmd_mle_verify(&common, args),
        Command::CalibrateMu(args) => cmd_calibrate_mu(&common, args),
    }
}

struct Common {
    seed: u64,
    out: Option<PathBuf>,
    format: Option<Format>,
}

impl Common {
    fn format_or(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }

    fn json_only(&self, command: &str) -> Result<Format> {
        match self.format {
            Some(Format::Csv) => Err(Error::InvalidParameter(format!(
                "{command} reports are JSON-only (per-trial CSV is available via --per-trial)"
            ))),
            _ => Ok(Format::Json),
        }
    }
}

fn setup_threads(threads: &str) -> Result<()> {
    if threads == "auto" {
        return Ok(());
    }
    let n: usize = threads.parse().map_err(|_| {
        Error::InvalidParameter(format!(
            "--threads takes a positive number or \"auto\", got {threads:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::InvalidParameter(
            "--threads needs at least one thread".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool setup failed: {e}")))
}

/// The coupling model resolved into concrete matrices.
struct ResolvedModel {
    kind: ModelKind,
    /// Mode grid; `None` only for the ideal model, which needs no crosstalk
    /// space.
    grid: Option<ModeGrid>,
    /// Empty for ideal; one matrix for uniform/file; the ensemble for random.
    matrices: Vec<CrosstalkMatrix>,
    mu: Option<f64>,
    descriptor: String,
}

impl ResolvedModel {
    /// Mean |c_ij|^2 over the matrices' off-diagonals (the `|r|^2`
    /// identification used for analytic predictions).
    fn identified_r2(&self) -> f64 {
        if self.matrices.is_empty() {
            return 0.0;
        }
        self.matrices
            .iter()
            .map(|c| c.stats().avg_offdiag)
            .sum::<f64>()
            / self.matrices.len() as f64
    }
}

/// Resolve `--mu`/`--target-offdiag` into a concrete coupling strength.
fn resolve_mu(args: &ModelArgs, seed: u64) -> Result<(f64, Option<f64>)> {
    if let Some(mu) = args.mu {
        return Ok((mu, None));
    }
    let target = args.target_offdiag.unwrap_or(0.0017);
    let mu = calibrate_mu(args.dim, target, args.samples, RngStream::new(seed, 0))?;
    Ok((mu, Some(target)))
}

/// Build matrices and grid for everything except the ideal model; `r2` is
/// supplied by the caller because `dmin` sweeps it.
fn resolve_model(args: &ModelArgs, r2: f64, seed: u64) -> Result<ResolvedModel> {
    match args.model {
        ModelKind::Ideal => Ok(ResolvedModel {
            kind: args.model,
            grid: None,
            matrices: Vec::new(),
            mu: None,
            descriptor: "ideal".into(),
        }),
        ModelKind::Uniform => {
            let grid = ModeGrid::from_dim(args.dim, args.q_measured)?;
            let matrix = uniform_crosstalk(args.dim, r2.sqrt(), None)?;
            let descriptor = matrix.provenance.to_string();
            Ok(ResolvedModel {
                kind: args.model,
                grid: Some(grid),
                matrices: vec![matrix],
                mu: None,
                descriptor,
            })
        }
        ModelKind::Random => {
            let grid = ModeGrid::from_dim(args.dim, args.q_measured)?;
            let (mu, _) = resolve_mu(args, seed)?;
            let matrices: Vec<CrosstalkMatrix> = (0..args.samples)
                .into_par_iter()
                .map(|i| sample_random_crosstalk(args.dim, mu, RngStream::new(seed, i)))
                .collect::<Result<_>>()?;
            Ok(ResolvedModel {
                kind: args.model,
                grid: Some(grid),
                matrices,
                mu: Some(mu),
                descriptor: format!(
                    "random-ensemble(mu={mu},seed={seed},samples={})",
                    args.samples
                ),
            })
        }
        ModelKind::File => {
            let path = args.matrix_file.as_ref().ok_or_else(|| {
                Error::InvalidParameter("--model file requires --matrix-file <path>".into())
            })?;
            let matrix = load_matrix(path)?;
            let grid = ModeGrid::from_dim(matrix.dim, args.q_measured)?;
            let descriptor = matrix.provenance.to_string();
            Ok(ResolvedModel {
                kind: args.model,
                grid: Some(grid),
                matrices: vec![matrix],
                mu: None,
                descriptor,
            })
        }
    }
}

fn exact_w2f(c: &CrosstalkMatrix, grid: &ModeGrid, theta: f64, x: f64) -> Result<f64> {
    let scene = SceneParams::new(x, theta, 1.0)?;
    Ok(fisher_exact(&demux_probabilities(c, grid, &scene)?)?.w2f)
}

fn model_config_json(args: &ModelArgs, mu: Option<f64>, target: Option<f64>) -> Value {
    json!({
        "model": args.model.as_str(),
        "dim": args.dim,
        "q_measured": args.q_measured,
        "r2": args.r2.raw(),
        "mu": mu,
        "target_offdiag": target,
        "samples": args.samples,
        "theta": args.theta,
        "matrix_file": args.matrix_file.as_ref().map(|p| p.display().to_string()),
    })
}

fn merge_config(command: &str, model: Value, extra: Value, seed: u64, format: Format) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("command".into(), json!(command));
    if let Value::Object(m) = model {
        obj.extend(m);
    }
    if let Value::Object(m) = extra {
        obj.extend(m);
    }
    obj.insert("seed".into(), json!(seed));
    obj.insert("format".into(), json!(format.as_str()));
    Value::Object(obj)
}

fn cmd_fisher_curve(common: &Common, args: &FisherCurveArgs) -> Result<()> {
    let format = common.format_or(Format::Csv);
    let r2 = args.model.r2.single("--r2")?;
    let resolved = resolve_model(&args.model, r2, common.seed)?;
    let target = match args.model.model {
        ModelKind::Random => args
            .model
            .mu
            .is_none()
            .then(|| args.model.target_offdiag.unwrap_or(0.0017)),
        _ => None,
    };
    let xs = args.x_grid.values();

    // Direct-imaging baseline, one quadrature per grid point.
    let di: Option<Vec<f64>> = if args.direct_imaging {
        Some(
            xs.par_iter()
                .map(|&x| Ok(fisher_direct_imaging(x, args.model.theta)?.w2f))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut rows = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let (mean, std, std_sqrt, n_samples) = match resolved.kind {
            ModelKind::Ideal => (
                fisher_ideal_closed_form(args.model.q_measured, x)?.w2f,
                0.0,
                0.0,
                1u64,
            ),
            ModelKind::Uniform | ModelKind::File => {
                let grid = resolved.grid.as_ref().expect("grid resolved");
                let v = exact_w2f(&resolved.matrices[0], grid, args.model.theta, x)?;
                (v, 0.0, 0.0, 1u64)
            }
            ModelKind::Random => {
                let grid = resolved.grid.as_ref().expect("grid resolved");
                let values: Vec<f64> = resolved
                    .matrices
                    .par_iter()
                    .map(|c| exact_w2f(c, grid, args.model.theta, x))
                    .collect::<Result<_>>()?;
                let (mean, std) = mean_std(&values);
                let sqrts: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
                let (_, std_sqrt) = mean_std(&sqrts);
                (mean, std, std_sqrt, resolved.matrices.len() as u64)
            }
        };
        let mut row = vec![
            ("x", Field::Float(x)),
            ("theta", Field::Float(args.model.theta)),
            ("q_measured", Field::Int(u64::from(args.model.q_measured))),
            ("mean_w2F", Field::Float(mean)),
            ("std_w2F", Field::Float(std)),
            ("n_samples", Field::Int(n_samples)),
            ("model", Field::Text(resolved.descriptor.clone())),
        ];
        if let Some(di) = &di {
            row.push(("direct_imaging_w2F", Field::Float(di[i])));
        }
        // Ensemble spread of sqrt(w2F), useful for error bands on
        // square-root plots; carried in JSON only.
        row.push(("std_sqrt_w2F", Field::Float(std_sqrt)));
        rows.push(row);
    }

    let mut csv_columns = vec![
        "x",
        "theta",
        "q_measured",
        "mean_w2F",
        "std_w2F",
        "n_samples",
        "model",
    ];
    if args.direct_imaging {
        csv_columns.push("direct_imaging_w2F");
    }
    let config = merge_config(
        "fisher-curve",
        model_config_json(&args.model, resolved.mu, target),
        json!({
            "x_grid": args.x_grid.raw(),
            "direct_imaging": args.direct_imaging,
        }),
        common.seed,
        format,
    );
    let table = Table { csv_columns, rows };
    emit(common.out.as_deref(), &render_table(format, &config, &table))
}

/// An information curve with memoized evaluations, so the `x` scan grid is
/// shared across the photon-number sweep (the curve itself is N-independent).
struct MemoCurve<'a> {
    cache: RefCell<HashMap<u64, f64>>,
    eval: Box<dyn Fn(f64) -> Result<f64> + 'a>,
}

impl<'a> MemoCurve<'a> {
    fn new(eval: Box<dyn Fn(f64) -> Result<f64> + 'a>) -> Self {
        MemoCurve {
            cache: RefCell::new(HashMap::new()),
            eval,
        }
    }

    fn get(&self, x: f64) -> Result<f64> {
        let key = x.to_bits();
        if let Some(v) = self.cache.borrow().get(&key) {
            return Ok(*v);
        }
        let v = (self.eval)(x)?;
        self.cache.borrow_mut().insert(key, v);
        Ok(v)
    }
}

fn cmd_dmin(common: &Common, args: &DminArgs) -> Result<()> {
    let format = common.format_or(Format::Csv);
    let r2_values = args.model.r2.values();
    if args.model.model != ModelKind::Uniform && r2_values.len() > 1 {
        return Err(Error::InvalidParameter(
            "only --model uniform supports an |r|^2 sweep".into(),
        ));
    }
    let n_values = args.n_photons.values();
    let theta = args.model.theta;
    let q = args.model.q_measured;

    let mut rows = Vec::new();
    let mut mu_used = None;
    let mut target_used = None;
    for &r2 in &r2_values {
        let resolved = resolve_model(&args.model, r2, common.seed)?;
        mu_used = resolved.mu;
        if args.model.model == ModelKind::Random && args.model.mu.is_none() {
            target_used = Some(args.model.target_offdiag.unwrap_or(0.0017));
        }
        let curve: MemoCurve = match resolved.kind {
            ModelKind::Ideal => {
                MemoCurve::new(Box::new(move |x| Ok(fisher_ideal_closed_form(q, x)?.w2f)))
            }
            ModelKind::Uniform | ModelKind::File => {
                let grid = *resolved.grid.as_ref().expect("grid resolved");
                let matrix = resolved.matrices[0].clone();
                MemoCurve::new(Box::new(move |x| exact_w2f(&matrix, &grid, theta, x)))
            }
            ModelKind::Random => {
                let grid = *resolved.grid.as_ref().expect("grid resolved");
                let matrices = resolved.matrices.clone();
                MemoCurve::new(Box::new(move |x| {
                    let values: Vec<f64> = matrices
                        .par_iter()
                        .map(|c| exact_w2f(c, &grid, theta, x))
                        .collect::<Result<_>>()?;
                    Ok(mean_std(&values).0)
                }))
            }
        };
        // Analytic comparison: exact ideal law, or the uniform asymptote with
        // the mean off-diagonal power standing in for |r|^2.
        let ident_r2 = resolved.identified_r2();
        for &n in &n_values {
            let solved = minimal_resolvable_distance(|x| curve.get(x), n)?;
            let analytic = if ident_r2 > 0.0 {
                let p_scat = (resolved.matrices[0].dim as f64 - 1.0) * ident_r2;
                dmin_uniform(n, ident_r2.sqrt(), p_scat.min(1.0 - 1e-12), theta)?
            } else {
                dmin_ideal(n)?
            };
            let di = dmin_direct_imaging(n)?;
            let (dmin_field, status) = match solved.dmin_over_2w {
                Some(v) => (Field::Float(v), "ok"),
                None => (Field::Float(f64::NAN), "unresolvable"),
            };
            let mut row = vec![("N", Field::Float(n))];
            if args.model.model == ModelKind::Uniform {
                row.push(("r2", Field::Float(r2)));
            }
            row.extend([
                ("dmin_over_2w", dmin_field),
                (
                    "dmin_analytic",
                    Field::Float(analytic.dmin_over_2w.unwrap_or(f64::NAN)),
                ),
                ("status", Field::Text(status.into())),
                ("model", Field::Text(resolved.descriptor.clone())),
                // JSON extras: the direct-imaging asymptote and bracket count.
                (
                    "dmin_analytic_direct_imaging",
                    Field::Float(di.dmin_over_2w.unwrap_or(f64::NAN)),
                ),
                ("n_brackets", Field::Int(solved.brackets.len() as u64)),
            ]);
            rows.push(row);
        }
    }

    let mut csv_columns = vec!["N"];
    if args.model.model == ModelKind::Uniform {
        csv_columns.push("r2");
    }
    csv_columns.extend(["dmin_over_2w", "dmin_analytic", "status", "model"]);
    let config = merge_config(
        "dmin",
        model_config_json(&args.model, mu_used, target_used),
        json!({ "n_photons": args.n_photons.raw() }),
        common.seed,
        format,
    );
    let table = Table { csv_columns, rows };
    emit(common.out.as_deref(), &render_table(format, &config, &table))
}

fn cmd_audit_matrix(common: &Common, args: &AuditMatrixArgs) -> Result<()> {
    let format = common.json_only("audit-matrix")?;
    let matrix = load_matrix(&args.matrix)?;
    let grid = ModeGrid::from_dim(matrix.dim, args.q_measured)?;
    let stats = matrix.stats();
    let ident_r2 = stats.avg_offdiag;
    let p_scat = (matrix.dim as f64 - 1.0) * ident_r2;

    // Small-separation information coefficient, exact and predicted.
    let x_small = 0.01;
    let w2f_small = exact_w2f(&matrix, &grid, args.theta, x_small)?;
    let generic = GenericEntries::from_matrix(&matrix, &grid)
        .and_then(|e| fisher_generic_smalld(&e, args.theta, x_small))
        .map(|fi| fi.w2f / (x_small * x_small));
    let (generic_coeff, generic_note) = match generic {
        Ok(v) => (json!(v), Value::Null),
        Err(e) => (Value::Null, json!(e.to_string())),
    };

    let curve = MemoCurve::new(Box::new(|x| exact_w2f(&matrix, &grid, args.theta, x)));
    let mut dmin_rows = Vec::new();
    let mut first_beating = None;
    for &n in &args.n_photons.values() {
        let solved = minimal_resolvable_distance(|x| curve.get(x), n)?;
        let analytic = if ident_r2 > 0.0 {
            dmin_uniform(n, ident_r2.sqrt(), p_scat.min(1.0 - 1e-12), args.theta)?
                .dmin_over_2w
        } else {
            dmin_ideal(n)?.dmin_over_2w
        };
        let di = dmin_direct_imaging(n)?.dmin_over_2w.unwrap();
        let beats = solved.dmin_over_2w.map(|v| v < di);
        if first_beating.is_none() && beats == Some(true) {
            first_beating = Some(n);
        }
        dmin_rows.push(json!({
            "n_photons": n,
            "dmin_over_2w": solved.dmin_over_2w,
            "status": if solved.dmin_over_2w.is_some() { "ok" } else { "unresolvable" },
            "dmin_analytic": analytic,
            "dmin_analytic_direct_imaging": di,
            "beats_direct_imaging": beats,
        }));
    }

    let report = json!({
        "path": args.matrix.display().to_string(),
        "dim": matrix.dim,
        "q_measured": args.q_measured,
        "theta": args.theta,
        "unitarity_deviation": matrix.unitarity_deviation(),
        "unitary": matrix.unitarity_deviation() <= crate::crosstalk::LOADED_UNITARY_WARN,
        "determinant_modulus": matrix.determinant_modulus(),
        "stats": { "avg_diag": stats.avg_diag, "avg_offdiag": stats.avg_offdiag },
        "identified_r2": ident_r2,
        "scattering_probability": p_scat,
        "small_x": {
            "x": x_small,
            "w2f_exact": w2f_small,
            "coefficient_exact": w2f_small / (x_small * x_small),
            "coefficient_generic_prediction": generic_coeff,
            "generic_prediction_note": generic_note,
        },
        "dmin_table": dmin_rows,
        "crossover": {
            // Demux keeps beating direct imaging asymptotically while
            // |r|^2 / (1 - P_scat)^2 stays below 1/8.
            "lhs": if ident_r2 > 0.0 { json!(ident_r2 / ((1.0 - p_scat) * (1.0 - p_scat))) } else { json!(0.0) },
            "threshold": 0.125,
            "beats_direct_imaging_asymptotically":
                uniform_beats_direct_imaging(ident_r2.sqrt(), p_scat),
            "first_n_beating_direct_imaging": first_beating,
        },
    });
    let config = merge_config(
        "audit-matrix",
        json!({
            "matrix": args.matrix.display().to_string(),
            "q_measured": args.q_measured,
            "theta": args.theta,
            "n_photons": args.n_photons.raw(),
        }),
        json!({}),
        common.seed,
        format,
    );
    emit(common.out.as_deref(), &render_report(&config, &report))
}

fn cmd_mle_verify(common: &Common, args: &MleVerifyArgs) -> Result<()> {
    let format = common.json_only("mle-verify")?;
    let r2 = args.model.r2.single("--r2")?;
    let resolved = resolve_model(&args.model, r2, common.seed)?;
    let theta = args.model.theta;
    let q = args.model.q_measured;

    // The estimator needs the model as a function of the unknown x only; for
    // the random model that means one concrete matrix (sample index 0).
    let family: Box<dyn Fn(f64) -> Result<ProbabilityModel> + Sync> = match resolved.kind {
        ModelKind::Ideal => Box::new(move |x| {
            let grid = ModeGrid::new(q, q)?;
            ideal_probabilities(&grid, &SceneParams::new(x, theta, 1.0)?)
        }),
        _ => {
            let grid = *resolved.grid.as_ref().expect("grid resolved");
            let matrix = resolved.matrices[0].clone();
            Box::new(move |x| {
                demux_probabilities(&matrix, &grid, &SceneParams::new(x, theta, 1.0)?)
            })
        }
    };

    let scene = SceneParams::new(args.x, theta, args.n_photons)?;
    let config_mc = CrbConfig::new(scene, args.trials, RngStream::new(common.seed, 0));
    let (report, estimates) = crb_experiment_detailed(&family, &config_mc)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    let config = merge_config(
        "mle-verify",
        model_config_json(&args.model, resolved.mu, None),
        json!({
            "x": args.x,
            "n_photons": args.n_photons,
            "trials": args.trials,
            "search": [config_mc.search.0, config_mc.search.1],
            "per_trial": args.per_trial.as_ref().map(|p| p.display().to_string()),
        }),
        common.seed,
        format,
    );
    if let Some(path) = &args.per_trial {
        let rows = estimates
            .iter()
            .enumerate()
            .map(|(i, e)| {
                vec![
                    ("trial", Field::Int(i as u64)),
                    ("x_hat", Field::Float(e.x_hat)),
                    ("log_likelihood", Field::Float(e.log_likelihood)),
                    ("boundary", Field::Int(u64::from(e.boundary))),
                ]
            })
            .collect();
        let table = Table {
            csv_columns: vec!["trial", "x_hat", "log_likelihood", "boundary"],
            rows,
        };
        emit(Some(path), &render_table(Format::Csv, &config, &table))?;
    }
    let report_json = serde_json::to_value(&report).expect("report serializes");
    emit(common.out.as_deref(), &render_report(&config, &report_json))
}

fn cmd_calibrate_mu(common: &Common, args: &CalibrateMuArgs) -> Result<()> {
    let format = common.format_or(Format::Csv);
    let stream = RngStream::new(common.seed, 0);
    let mu = calibrate_mu(args.dim, args.target_offdiag, args.samples, stream)?;
    let per_sample = crate::crosstalk::ensemble_offdiag(args.dim, mu, args.samples, stream)?;
    let (mean, std) = mean_std(&per_sample);

    let config = merge_config(
        "calibrate-mu",
        json!({
            "dim": args.dim,
            "target_offdiag": args.target_offdiag,
            "samples": args.samples,
        }),
        json!({}),
        common.seed,
        format,
    );
    let table = Table {
        csv_columns: vec![
            "dim",
            "target_offdiag",
            "samples",
            "mu",
            "achieved_mean_offdiag",
            "achieved_rel_std",
        ],
        rows: vec![vec![
            ("dim", Field::Int(args.dim as u64)),
            ("target_offdiag", Field::Float(args.target_offdiag)),
            ("samples", Field::Int(args.samples)),
            ("mu", Field::Float(mu)),
            ("achieved_mean_offdiag", Field::Float(mean)),
            ("achieved_rel_std", Field::Float(std / mean)),
        ]],
    };
    emit(common.out.as_deref(), &render_table(format, &config, &table))
}
