//! Experiment configuration, random instances and Monte Carlo runs that put
//! empirical distortions next to the large-system predictions.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoupled::{DecoupledSystem, DistortionSpec};
use crate::gamp::{gamp_solve, reference_solve, GampOptions, MatrixKind, ReferenceOptions, SolveReport, SolverError};
use crate::penalty::{PenaltyError, PenaltySpec};
use crate::replica::{predict, ReplicaBlock, ReplicaError, ReplicaOptions, ReplicaProblem, ReplicaState};
use crate::special::norm_cdf;
use crate::signal::{BlockSignalModel, Field, SignalConfig, SignalError};
use crate::spectral::{SpectralModel, VarianceConvention};
use crate::tuner::TuneOptions;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

impl ConfigError {
    fn invalid(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MatrixModel {
    IidGauss { variance: VarianceConvention },
    /// `M` orthonormal rows, so `A A^T = I`.
    RowOrthogonal,
}

impl MatrixModel {
    pub fn kind(self) -> MatrixKind {
        match self {
            MatrixModel::IidGauss { .. } => MatrixKind::Iid,
            MatrixModel::RowOrthogonal => MatrixKind::RowOrthogonal,
        }
    }

    /// Limiting eigenvalue law of `A^T A` for aspect ratio `rho`.
    pub fn spectrum(self, rho: f64) -> Result<SpectralModel, ReplicaError> {
        Ok(match self {
            MatrixModel::IidGauss { variance } => SpectralModel::mp_preset(rho, variance)?,
            MatrixModel::RowOrthogonal => SpectralModel::row_orthogonal(rho)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Gamp,
    Reference,
}

fn default_distortions() -> Vec<DistortionSpec> {
    vec![DistortionSpec::SquaredError]
}

/// One experiment: problem size, matrix model, noise, signal and penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub n: usize,
    pub rho: f64,
    pub matrix: MatrixModel,
    pub sigma2: f64,
    pub signal: SignalConfig,
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "default_distortions")]
    pub distortions: Vec<DistortionSpec>,
    /// Replaces the matrix-derived spectrum in predictions; such configs
    /// cannot be simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralModel>,
    #[serde(default)]
    pub replica: ReplicaOptions,
    #[serde(default)]
    pub tune: TuneOptions,
}

impl InstanceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: InstanceConfig = serde_json::from_str(text).map_err(|e| ConfigError::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn m(&self) -> usize {
        (self.rho * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::invalid("n", "must be >= 1"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(ConfigError::invalid("rho", format!("must be > 0, got {}", self.rho)));
        }
        if self.m() == 0 {
            return Err(ConfigError::invalid("rho", format!("round(rho * n) must be >= 1, got rho = {}", self.rho)));
        }
        if self.matrix == MatrixModel::RowOrthogonal && self.m() > self.n {
            return Err(ConfigError::invalid("matrix.model", "row_orthogonal needs rho <= 1"));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(ConfigError::invalid("sigma2", format!("must be >= 0, got {}", self.sigma2)));
        }
        self.signal.validate("signal")?;
        self.penalty.validate("penalty")?;
        if self.penalty.blocks.len() != self.signal.blocks.len() {
            return Err(ConfigError::invalid(
                "penalty.blocks",
                format!("{} penalty blocks for {} signal blocks", self.penalty.blocks.len(), self.signal.blocks.len()),
            ));
        }
        if self.distortions.is_empty() {
            return Err(ConfigError::invalid("distortions", "at least one distortion is required"));
        }
        if self.tune.grid_points < 3 || !(self.tune.lambda_min > 0.0 && self.tune.lambda_max > self.tune.lambda_min) {
            return Err(ConfigError::invalid("tune", "need 0 < lambda_min < lambda_max and grid_points >= 3"));
        }
        Ok(())
    }

    /// Extra checks before a finite-size run.
    pub fn validate_for_simulation(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if self.spectral.is_some() {
            return Err(ConfigError::invalid("spectral", "an explicit spectrum is prediction-only; remove it to simulate"));
        }
        if self.signal.field != Field::Real {
            return Err(ConfigError::invalid("signal.field", "simulation supports real signals only"));
        }
        if self.solver == SolverKind::Gamp && self.matrix == MatrixModel::RowOrthogonal {
            return Err(ConfigError::invalid("solver", "gamp requires an iid_gauss matrix; use \"reference\""));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn signal_model(&self) -> Result<BlockSignalModel, ConfigError> {
        Ok(BlockSignalModel::from_config(self.n, &self.signal)?)
    }

    /// Replica problem for this config, with the objective's `lambda` mapped
    /// to the engine convention selected in `replica.scaling`.
    pub fn replica_problem(&self) -> Result<ReplicaProblem, ReplicaError> {
        let spectral = match &self.spectral {
            Some(s) => s.clone(),
            None => self.matrix.spectrum(self.rho)?,
        };
        let blocks = self
            .signal
            .blocks
            .iter()
            .zip(&self.penalty.blocks)
            .map(|(b, p)| ReplicaBlock { fraction: b.frac, prior: b.prior, penalty: *p })
            .collect();
        let problem = ReplicaProblem {
            spectral,
            blocks,
            support: self.penalty.support,
            lambda: self.replica.scaling.engine_lambda(self.penalty.lambda),
            sigma2: self.sigma2,
            field: self.signal.field,
        };
        problem.validate()?;
        Ok(problem)
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `k`; depends only on `(master, k)`.
pub fn trial_seed(master: u64, k: u64) -> u64 {
    splitmix64(master.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub a: Array2<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Orthonormalizes the rows of `a` in place by two passes of modified Gram–Schmidt.
fn orthonormalize_rows(a: &mut Array2<f64>) {
    let m = a.nrows();
    for _pass in 0..2 {
        for i in 0..m {
            for k in 0..i {
                let dot = a.row(i).dot(&a.row(k));
                let rk = a.row(k).to_owned();
                a.row_mut(i).scaled_add(-dot, &rk);
            }
            let nrm = a.row(i).dot(&a.row(i)).sqrt();
            a.row_mut(i).mapv_inplace(|v| v / nrm);
        }
    }
}

/// `A`, `x` and `y = A x + z` for one trial seed. The three draws use
/// separate streams, so changing one model leaves the others untouched.
pub fn generate_instance(cfg: &InstanceConfig, seed: u64) -> Result<Instance, ConfigError> {
    let (m, n) = (cfg.m(), cfg.n);
    let model = cfg.signal_model()?;
    let mut rng_a = stream(seed, 0);
    let mut a = Array2::from_shape_simple_fn((m, n), || rng_a.sample::<f64, _>(StandardNormal));
    match cfg.matrix {
        MatrixModel::IidGauss { variance } => {
            let sd = variance.entry_variance(m, n).sqrt();
            a.mapv_inplace(|v| v * sd);
        }
        MatrixModel::RowOrthogonal => orthonormalize_rows(&mut a),
    }
    let x = model.sample_with(&mut stream(seed, 1));
    let mut rng_z = stream(seed, 2);
    let sd = cfg.sigma2.sqrt();
    let ax = a.dot(&ndarray::ArrayView1::from(&x));
    let y = ax.iter().map(|&v| v + sd * rng_z.sample::<f64, _>(StandardNormal)).collect();
    Ok(Instance { a, x, y })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub trial: usize,
    pub seed: u64,
    /// One value per configured distortion, in config order; empty on failure.
    pub distortions: Vec<f64>,
    pub predictions: Vec<f64>,
    pub report: Option<SolveReport>,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSummary {
    pub distortion: String,
    pub mean: f64,
    pub std_error: f64,
    pub prediction: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub master_seed: u64,
    pub replica: Option<ReplicaState>,
    pub replica_error: Option<String>,
    pub aggregate: Vec<DistortionSummary>,
    pub records: Vec<ExperimentRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Solves one instance with the configured solver.
pub fn solve_instance(
    cfg: &InstanceConfig,
    inst: &Instance,
    model: &BlockSignalModel,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    match cfg.solver {
        SolverKind::Gamp => {
            let opts = GampOptions { matrix: cfg.matrix.kind(), ..Default::default() };
            gamp_solve(&inst.a, &inst.y, &cfg.penalty, model, &opts).map(|(s, r)| (s.estimate, r))
        }
        SolverKind::Reference => reference_solve(&inst.a, &inst.y, &cfg.penalty, model, &ReferenceOptions::default()),
    }
}

/// Runs `trials` independent trials. Solver failures are recorded in the
/// affected record and excluded from the aggregate. Results do not depend on
/// the thread count; wall times are recorded only when `timing` is set.
pub fn run_experiment(cfg: &InstanceConfig, trials: usize, timing: bool) -> Result<ExperimentSummary, ConfigError> {
    if trials == 0 {
        return Err(ConfigError::invalid("trials", "must be >= 1"));
    }
    cfg.validate_for_simulation()?;
    let model = cfg.signal_model()?;
    let hash = cfg.hash();

    let (replica, replica_error, predictions) = match cfg.replica_problem() {
        Ok(problem) => {
            let mut state = None;
            let mut preds = Vec::new();
            let mut err = None;
            for d in &cfg.distortions {
                match predict(&problem, &cfg.replica, d) {
                    Ok((s, v)) => {
                        state = Some(s);
                        preds.push(v);
                    }
                    Err(e) => {
                        err = Some(e.to_string());
                        preds.push(f64::NAN);
                    }
                }
            }
            (state, err, preds)
        }
        Err(e) => (None, Some(e.to_string()), vec![f64::NAN; cfg.distortions.len()]),
    };

    let records: Vec<ExperimentRecord> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let seed = trial_seed(cfg.seed, k as u64);
            let start = std::time::Instant::now();
            let inst = generate_instance(cfg, seed).expect("validated config");
            let mut rec = ExperimentRecord {
                config_hash: hash.clone(),
                trial: k,
                seed,
                distortions: Vec::new(),
                predictions: predictions.clone(),
                report: None,
                error: None,
                wall_time_s: None,
            };
            match solve_instance(cfg, &inst, &model) {
                Ok((est, report)) => {
                    rec.distortions = cfg.distortions.iter().map(|d| empirical_distortion(d, &est, &inst.x)).collect();
                    rec.report = Some(report);
                }
                Err(SolverError::NonConvergence { report, .. }) => {
                    rec.report = Some(report);
                    rec.error = Some(format!("no convergence after {} iterations", report.iterations));
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            if timing {
                rec.wall_time_s = Some(start.elapsed().as_secs_f64());
            }
            rec
        })
        .collect();

    let aggregate = cfg
        .distortions
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let vals: Vec<f64> = records.iter().filter(|r| r.error.is_none()).map(|r| r.distortions[j]).collect();
            let (mean, std_error) = mean_and_stderr(&vals);
            DistortionSummary {
                distortion: d.id(),
                mean,
                std_error,
                prediction: predictions.get(j).copied().filter(|v| v.is_finite()),
                trials: vals.len(),
            }
        })
        .collect();

    Ok(ExperimentSummary { config_hash: hash, master_seed: cfg.seed, replica, replica_error, aggregate, records })
}

/// Kolmogorov–Smirnov distance between the empirical law of `estimate` and
/// the mixture over `truth` of the channel's conditional laws of `x_hat`.
pub fn decoupling_ks(system: &DecoupledSystem, truth: &[f64], estimate: &[f64]) -> f64 {
    let n = estimate.len();
    if n == 0 {
        return 0.0;
    }
    let theta = system.theta2.sqrt();
    let mut sorted = estimate.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mixture = |level: f64| truth.iter().map(|&x| norm_cdf((level - x) / theta)).sum::<f64>() / truth.len() as f64;
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < n {
        let t = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == t {
            j += 1;
        }
        let (a, b) = system.preimage(t);
        // Just below t the empirical CDF is i/n; at t it is j/n.
        worst = worst.max((i as f64 / n as f64 - mixture(a)).abs());
        worst = worst.max((j as f64 / n as f64 - mixture(b)).abs());
        i = j;
    }
    worst
}

/// `N^-1 sum_n d(x_hat_n, x_n)` with compensated summation.
pub fn empirical_distortion(d: &DistortionSpec, estimate: &[f64], truth: &[f64]) -> f64 {
    let mut acc = Kahan::default();
    for (&e, &t) in estimate.iter().zip(truth) {
        acc.add(d.evaluate(e, t));
    }
    acc.sum / estimate.len() as f64
}

/// Sample mean and standard error of the mean; `NaN` for empty input and a
/// zero error for a single value.
pub fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mut s = Kahan::default();
    for &v in vals {
        s.add(v);
    }
    let mean = s.sum / n;
    if vals.len() == 1 {
        return (mean, 0.0);
    }
    let mut q = Kahan::default();
    for &v in vals {
        q.add((v - mean) * (v - mean));
    }
    (mean, (q.sum / (n - 1.0) / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(model: MatrixModel) -> InstanceConfig {
        let text = r#"{
            "n": 40, "rho": 0.5,
            "matrix": {"model": "iid_gauss", "variance": "var-1/N"},
            "sigma2": 0.0,
            "signal": {"blocks": [{"frac": 1.0, "prior": "bernoulli_gauss", "mu": 0.2}]},
            "penalty": {"lambda": 0.1, "blocks": [{"family": "l1"}]},
            "seed": 7
        }"#;
        let mut cfg = InstanceConfig::from_json(text).unwrap();
        cfg.matrix = model;
        cfg
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let cfg = config(MatrixModel::IidGauss { variance: VarianceConvention::PerSample });
        let inst = generate_instance(&cfg, 3).unwrap();
        let ax = inst.a.dot(&ndarray::ArrayView1::from(&inst.x));
        assert!(ax.iter().zip(&inst.y).all(|(a, b)| a == b));
    }

    #[test]
    fn row_orthogonal_rows() {
        let cfg = config(MatrixModel::RowOrthogonal);
        let inst = generate_instance(&cfg, 11).unwrap();
        let g = inst.a.dot(&inst.a.t());
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trial_seeds_are_stable_prefixes() {
        let a: Vec<u64> = (0..5).map(|k| trial_seed(9, k)).collect();
        let b: Vec<u64> = (0..3).map(|k| trial_seed(9, k)).collect();
        assert_eq!(&a[..3], &b[..]);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn config_errors_name_fields() {
        let bad = r#"{"n": 0, "rho": 0.5, "matrix": {"model": "row_orthogonal"}, "sigma2": 0.1,
            "signal": {"blocks": [{"frac": 1.0, "prior": "bpsk"}]},
            "penalty": {"blocks": [{"family": "l2_half"}]}}"#;
        match InstanceConfig::from_json(bad).unwrap_err() {
            ConfigError::Invalid { path, .. } => assert_eq!(path, "n"),
            e => panic!("{e}"),
        }
        let bad = bad.replace("\"n\": 0", "\"n\": 10").replace("\"frac\": 1.0", "\"frac\": 0.5");
        let e = InstanceConfig::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("signal.blocks"), "{e}");
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, se) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}
