//! Command-line front end: replica predictions, tuning, Monte Carlo runs and
//! BPSK error-probability curves.
//!
//! Every subcommand produces a flat list of rows. CSV and JSON outputs are
//! two serializations of the same rows, so they carry identical fields.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use asymrls::bpsk::{bpsk_optimal_lambda, BpskError, Relaxation, Theta2Variant};
use asymrls::harness::{run_experiment, ConfigError, InstanceConfig};
use asymrls::replica::{predict, ReplicaError};
use asymrls::tuner::{tune_lambda, tune_weights, TuneError, TuneOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "asymrls", version, about = "Large-system predictions and simulations for regularized least squares")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the replica fixed point and print the predicted distortions.
    Predict(Common),
    /// Tune lambda (and block weights for multi-block configs).
    Tune(Common),
    /// Monte Carlo trials next to the replica prediction.
    Simulate(SimulateArgs),
    /// Error probability of BPSK ridge recovery against SNR at tuned lambda.
    BpskCurve(CurveArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Maximum number of worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Record per-trial wall time (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RelaxationArg {
    Ordinary,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Printed,
    Rederived,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Measurements per sample; repeat for several curves.
    #[arg(long = "rho", default_values_t = vec![0.7, 1.0])]
    pub rho: Vec<f64>,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    pub snr_min: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub snr_max: f64,
    /// Grid spacing in dB.
    #[arg(long, default_value_t = 1.0)]
    pub snr_step: f64,
    #[arg(long, value_enum, default_value_t = RelaxationArg::Ordinary)]
    pub relaxation: RelaxationArg,
    /// Closed form used for the unconstrained decoupled noise.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[command(flatten)]
    pub output: Output,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERICAL, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<ReplicaError> for Failure {
    fn from(e: ReplicaError) -> Self {
        match e {
            ReplicaError::NonConvergence { .. } | ReplicaError::NegativeTheta2 { .. } => Failure::numerical(e.to_string()),
            _ => Failure::config(e.to_string()),
        }
    }
}

impl From<TuneError> for Failure {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::AllSolvesFailed => Failure::numerical(e.to_string()),
            TuneError::Invalid(_) => Failure::config(e.to_string()),
        }
    }
}

impl From<BpskError> for Failure {
    fn from(e: BpskError) -> Self {
        match e {
            BpskError::Replica(r) => r.into(),
            BpskError::Tune(t) => t.into(),
            BpskError::Invalid(_) => Failure::config(e.to_string()),
            BpskError::NonConvergence { .. } | BpskError::DenominatorNonpositive(_) => Failure::numerical(e.to_string()),
        }
    }
}

/// One row of `predict` output per configured distortion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictRow {
    pub config_hash: String,
    pub distortion: String,
    pub prediction: f64,
    pub chi: f64,
    pub p: f64,
    pub tau: f64,
    pub theta2: f64,
    pub residual: f64,
    pub iterations: usize,
    /// `lambda` as written in the objective.
    pub lambda: f64,
    /// `lambda` in the fixed-point equations.
    pub lambda_engine: f64,
}

/// `tune` output: one `optimum` row, then one `trace` row per evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneRow {
    pub kind: &'static str,
    pub config_hash: String,
    pub distortion_kind: String,
    pub lambda: f64,
    pub lambda_engine: f64,
    /// Block weights joined by `;`.
    pub weights: String,
    pub distortion: f64,
    pub gradient: Option<f64>,
    pub boundary: Option<bool>,
}

/// `simulate` output: `trial` rows, then `mean`, `stderr` and `prediction`
/// rows per distortion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateRow {
    pub kind: &'static str,
    pub config_hash: String,
    pub trial: Option<usize>,
    pub seed: Option<u64>,
    pub distortion: String,
    pub value: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub objective: Option<f64>,
    pub kkt: Option<f64>,
    pub error: Option<String>,
    pub wall_time_s: Option<f64>,
}

/// `bpsk-curve` output: one row per `(rho, SNR)` point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    #[serde(rename = "inv_sigma2_dB")]
    pub inv_sigma2_db: f64,
    pub rho: f64,
    pub relaxation: &'static str,
    pub lambda_star: f64,
    pub tau: f64,
    pub theta: f64,
    #[serde(rename = "P_E")]
    pub p_e: f64,
    /// The same estimator with the matrix normalized to entry variance `1/M`.
    pub lambda_star_var_1_m: f64,
    pub boundary: bool,
    pub variant: &'static str,
    pub gradient: f64,
    pub r1: f64,
    pub r2: f64,
}

fn load_config(path: &Path) -> Result<InstanceConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    InstanceConfig::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn predict_rows(cfg: &InstanceConfig) -> Result<Vec<PredictRow>, Failure> {
    let problem = cfg.replica_problem()?;
    let hash = cfg.hash();
    cfg.distortions
        .iter()
        .map(|d| {
            let (s, v) = predict(&problem, &cfg.replica, d)?;
            Ok(PredictRow {
                config_hash: hash.clone(),
                distortion: d.id(),
                prediction: v,
                chi: s.chi,
                p: s.p,
                tau: s.tau,
                theta2: s.theta2,
                residual: s.residual,
                iterations: s.iterations,
                lambda: cfg.penalty.lambda,
                lambda_engine: problem.lambda,
            })
        })
        .collect()
}

fn join_weights(w: &[f64]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn tune_rows(cfg: &InstanceConfig) -> Result<Vec<TuneRow>, Failure> {
    let problem = cfg.replica_problem()?;
    let d = cfg.distortions[0];
    let result = if problem.blocks.len() > 1 {
        tune_weights(&problem, &cfg.replica, &d, &cfg.tune)?
    } else {
        tune_lambda(&problem, &cfg.replica, &d, &cfg.tune)?
    };
    let hash = cfg.hash();
    let to_objective = |l: f64| cfg.replica.scaling.objective_lambda(l);
    let mut rows = vec![TuneRow {
        kind: "optimum",
        config_hash: hash.clone(),
        distortion_kind: d.id(),
        lambda: to_objective(result.lambda_star),
        lambda_engine: result.lambda_star,
        weights: join_weights(&result.weights_star),
        distortion: result.distortion_star,
        gradient: Some(result.gradient),
        boundary: Some(result.boundary),
    }];
    rows.extend(result.trace.iter().map(|t| TuneRow {
        kind: "trace",
        config_hash: hash.clone(),
        distortion_kind: d.id(),
        lambda: to_objective(t.lambda),
        lambda_engine: t.lambda,
        weights: join_weights(&t.weights),
        distortion: t.distortion,
        gradient: None,
        boundary: None,
    }));
    Ok(rows)
}

/// Rows and whether every trial succeeded.
pub fn simulate_rows(cfg: &InstanceConfig, trials: usize, timing: bool) -> Result<(Vec<SimulateRow>, bool), Failure> {
    let summary = run_experiment(cfg, trials, timing)?;
    let ids: Vec<String> = cfg.distortions.iter().map(|d| d.id()).collect();
    let blank = |kind: &'static str, distortion: &str, value: Option<f64>| SimulateRow {
        kind,
        config_hash: summary.config_hash.clone(),
        trial: None,
        seed: None,
        distortion: distortion.to_string(),
        value,
        converged: None,
        iterations: None,
        objective: None,
        kkt: None,
        error: None,
        wall_time_s: None,
    };
    let mut rows = Vec::new();
    for rec in &summary.records {
        for (j, id) in ids.iter().enumerate() {
            rows.push(SimulateRow {
                trial: Some(rec.trial),
                seed: Some(rec.seed),
                converged: rec.report.map(|r| r.converged),
                iterations: rec.report.map(|r| r.iterations),
                objective: rec.report.map(|r| r.objective),
                kkt: rec.report.map(|r| r.kkt),
                error: rec.error.clone(),
                wall_time_s: rec.wall_time_s,
                ..blank("trial", id, rec.distortions.get(j).copied())
            });
        }
    }
    for agg in &summary.aggregate {
        let finite = |v: f64| Some(v).filter(|v| v.is_finite());
        rows.push(blank("mean", &agg.distortion, finite(agg.mean)));
        rows.push(blank("stderr", &agg.distortion, finite(agg.std_error)));
        let mut pred = blank("prediction", &agg.distortion, agg.prediction);
        pred.error = summary.replica_error.clone();
        rows.push(pred);
    }
    let all_ok = summary.records.iter().all(|r| r.error.is_none());
    Ok((rows, all_ok))
}

/// SNR grid in dB from `min` to `max` inclusive.
pub fn snr_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>, Failure> {
    if !(min.is_finite() && max.is_finite() && step > 0.0 && max >= min) {
        return Err(Failure::config(format!("snr range needs min <= max and step > 0, got {min}..{max} step {step}")));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| min + i as f64 * step).collect())
}

pub fn curve_rows(
    rhos: &[f64],
    snr_db: &[f64],
    relaxation: Relaxation,
    variant: Theta2Variant,
    opts: &TuneOptions,
) -> Result<Vec<CurveRow>, Failure> {
    if rhos.is_empty() {
        return Err(Failure::config("--rho: at least one value is required"));
    }
    let points: Vec<(f64, f64)> = rhos.iter().flat_map(|&r| snr_db.iter().map(move |&s| (r, s))).collect();
    points
        .par_iter()
        .map(|&(rho, db)| {
            let sigma2 = 10f64.powf(-db / 10.0);
            let opt = bpsk_optimal_lambda(rho, sigma2, relaxation, variant, opts)?;
            let p = opt.point;
            Ok(CurveRow {
                inv_sigma2_db: db,
                rho,
                relaxation: relaxation.id(),
                lambda_star: p.lambda,
                tau: p.tau,
                theta: p.theta,
                p_e: p.p_e,
                lambda_star_var_1_m: p.lambda / rho,
                boundary: opt.boundary,
                variant: match relaxation {
                    Relaxation::Ordinary => variant.id(),
                    Relaxation::Box => "fixed_point",
                },
                gradient: opt.gradient,
                r1: p.residuals.0,
                r2: p.residuals.1,
            })
        })
        .collect()
}

/// Serializes `rows` as CSV with a header, or as a JSON array of objects.
pub fn render<T: Serialize>(rows: &[T], format: Format) -> Result<Vec<u8>, Failure> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| Failure::config(e.to_string()))?;
            }
            w.into_inner().map_err(|e| Failure::config(e.to_string()))
        }
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(rows).map_err(|e| Failure::config(e.to_string()))?;
            v.push(b'\n');
            Ok(v)
        }
    }
}

fn emit<T: Serialize>(rows: &[T], output: &Output, out: &mut dyn Write) -> Result<(), Failure> {
    let bytes = render(rows, output.format)?;
    match &output.out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display()))),
        None => out.write_all(&bytes).map_err(|e| Failure::config(format!("cannot write output: {e}"))),
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, Failure> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::config("--threads must be >= 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Predict(args) => {
            let cfg = load_config(&args.config)?;
            let rows = with_threads(args.output.threads, || predict_rows(&cfg))??;
            emit(&rows, &args.output, out)
        }
        Command::Tune(args) => {
            let cfg = load_config(&args.config)?;
            let rows = with_threads(args.output.threads, || tune_rows(&cfg))??;
            emit(&rows, &args.output, out)
        }
        Command::Simulate(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let (rows, all_ok) = with_threads(args.output.threads, || simulate_rows(&cfg, args.trials, args.timing))??;
            emit(&rows, &args.output, out)?;
            if all_ok {
                Ok(())
            } else {
                Err(Failure::numerical("some trials failed; see the error column"))
            }
        }
        Command::BpskCurve(args) => {
            let relaxation = match args.relaxation {
                RelaxationArg::Ordinary => Relaxation::Ordinary,
                RelaxationArg::Box => Relaxation::Box,
            };
            let variant = match args.variant {
                None => Theta2Variant::VALIDATED,
                Some(VariantArg::Printed) => Theta2Variant::Printed,
                Some(VariantArg::Rederived) => Theta2Variant::Rederived,
            };
            let grid = snr_grid(args.snr_min, args.snr_max, args.snr_step)?;
            let opts = TuneOptions::default();
            let rows = with_threads(args.output.threads, || curve_rows(&args.rho, &grid, relaxation, variant, &opts))??;
            emit(&rows, &args.output, out)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_grid_is_inclusive() {
        let g = snr_grid(-5.0, 10.0, 1.0).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[15], 10.0);
        assert!(snr_grid(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn missing_config_names_path() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(["asymrls", "predict", "--config", "/nonexistent/cfg.json"], &mut out, &mut err);
        assert_eq!(code, EXIT_CONFIG);
        assert!(String::from_utf8(err).unwrap().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn csv_and_json_carry_the_same_fields() {
        let rows = curve_rows(&[1.0], &[0.0], Relaxation::Ordinary, Theta2Variant::VALIDATED, &TuneOptions::default()).unwrap();
        let csv = String::from_utf8(render(&rows, Format::Csv).unwrap()).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&render(&rows, Format::Json).unwrap()).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let keys: Vec<&str> = json[0].as_object().unwrap().keys().map(String::as_str).collect();
        let mut sorted = header.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, keys);
        assert_eq!(&header[..7], &["inv_sigma2_dB", "rho", "relaxation", "lambda_star", "tau", "theta", "P_E"]);
    }
}
