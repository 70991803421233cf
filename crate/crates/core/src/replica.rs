//! Fixed point of the large-system characterization of regularized least
//! squares and the resulting asymptotic distortion.
//!
//! With `R` the R-transform of the Gram spectrum and `omega = -chi / lambda`:
//!
//! ```text
//! tau    = lambda / R(omega)
//! theta2 = R(omega)^-2 d/dchi [ (sigma2 chi - lambda p) R(omega) ]   (p held fixed)
//!        = sigma2 / R + (p - sigma2 chi / lambda) R' / R^2
//! chi    = sum_j f_j tau E[x_hat'],   p = sum_j f_j E|x_hat - x|^2
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoupled::{average_distortion, ChannelError, DecoupledSystem, DistortionSpec, ProxScaling};
use crate::penalty::{BlockPenalty, SupportSet};
use crate::signal::{Field, ScalarPrior};
use crate::spectral::{SpectralError, SpectralModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplicaError {
    #[error("invalid replica problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("fixed point did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64, last: ReplicaState },
    #[error("noise variance of the decoupled channel is not positive ({theta2:e}) at chi={chi}, p={p}")]
    NegativeTheta2 { chi: f64, p: f64, theta2: f64 },
}

/// How the `chi`-derivative inside `theta2` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Product rule with `R'`.
    #[default]
    Analytic,
    /// Central difference with step `max(1e-6, 1e-6 |chi|)`.
    FiniteDifference,
}

/// Which expectation feeds the `chi` update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiPath {
    /// `tau E[x_hat']` (covariance form in the complex field).
    #[default]
    Derivative,
    /// `(tau / theta2) E[(x_hat - x) z]`
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicaOptions {
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub scaling: ProxScaling,
    pub derivative: DerivativeMode,
    pub chi_path: ChiPath,
}

impl Default for ReplicaOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iter: 10_000,
            tol: 1e-10,
            scaling: ProxScaling::Tau,
            derivative: DerivativeMode::Analytic,
            chi_path: ChiPath::Derivative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub chi: f64,
    pub p: f64,
    pub tau: f64,
    pub theta2: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaBlock {
    pub fraction: f64,
    pub prior: ScalarPrior,
    pub penalty: BlockPenalty,
}

/// Everything the fixed point depends on. `lambda` is the engine's
/// regularization parameter; see [`ProxScaling::engine_lambda`] for its
/// relation to the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaProblem {
    pub spectral: SpectralModel,
    pub blocks: Vec<ReplicaBlock>,
    pub support: SupportSet,
    pub lambda: f64,
    pub sigma2: f64,
    pub field: Field,
}

impl ReplicaProblem {
    pub fn validate(&self) -> Result<(), ReplicaError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(ReplicaError::Invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(ReplicaError::Invalid(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if self.blocks.is_empty() {
            return Err(ReplicaError::Invalid("at least one block is required".into()));
        }
        let total: f64 = self.blocks.iter().map(|b| b.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || self.blocks.iter().any(|b| !(b.fraction > 0.0)) {
            return Err(ReplicaError::Invalid(format!("block fractions must be positive and sum to 1, got {total}")));
        }
        if self.field == Field::Complex && self.support != SupportSet::Reals {
            return Err(ReplicaError::Invalid("complex field requires the unconstrained support".into()));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn with_weights(&self, weights: &[f64]) -> Self {
        let mut out = self.clone();
        for (b, &w) in out.blocks.iter_mut().zip(weights) {
            b.penalty = b.penalty.with_weight(w);
        }
        out
    }

    pub fn weights(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.penalty.weight).collect()
    }

    /// `sum_j f_j E|x|^2`
    pub fn second_moment(&self) -> f64 {
        self.blocks.iter().map(|b| b.fraction * b.prior.second_moment()).sum()
    }

    /// `(tau, theta2)` from `(chi, p)`.
    pub fn tau_theta2(&self, chi: f64, p: f64, mode: DerivativeMode) -> Result<(f64, f64), ReplicaError> {
        let lam = self.lambda;
        let s2 = self.sigma2;
        let r = self.spectral.r_transform(-chi / lam)?;
        let theta2 = match mode {
            DerivativeMode::Analytic => {
                let dr = self.spectral.r_transform_derivative(-chi / lam)?;
                s2 / r + (p - s2 * chi / lam) * dr / (r * r)
            }
            DerivativeMode::FiniteDifference => {
                let h = 1e-6f64.max(1e-6 * chi.abs());
                let f = |c: f64| -> Result<f64, ReplicaError> {
                    Ok((s2 * c - lam * p) * self.spectral.r_transform(-c / lam)?)
                };
                (f(chi + h)? - f(chi - h)?) / (2.0 * h) / (r * r)
            }
        };
        Ok((lam / r, theta2))
    }

    pub fn systems(&self, tau: f64, theta2: f64, scaling: ProxScaling) -> Result<Vec<(f64, DecoupledSystem)>, ReplicaError> {
        self.blocks
            .iter()
            .map(|b| {
                Ok((
                    b.fraction,
                    DecoupledSystem::new(b.prior, b.penalty, self.support, self.field, tau, theta2, scaling)?,
                ))
            })
            .collect()
    }

    /// One application of the fixed-point map: `(chi, p) -> (tau, theta2, chi', p')`.
    pub fn update(&self, chi: f64, p: f64, opts: &ReplicaOptions) -> Result<(f64, f64, f64, f64), ReplicaError> {
        let (tau, theta2) = self.tau_theta2(chi, p, opts.derivative)?;
        if !(theta2 > 0.0) {
            return Err(ReplicaError::NegativeTheta2 { chi, p, theta2 });
        }
        let (mut chi_new, mut p_new) = (0.0, 0.0);
        for (f, sys) in self.systems(tau, theta2, opts.scaling)? {
            let m = sys.moments();
            let c = match opts.chi_path {
                ChiPath::Derivative => m.chi(),
                ChiPath::Covariance => m.chi_covariance,
            };
            chi_new += f * c;
            p_new += f * m.p;
        }
        Ok((tau, theta2, chi_new, p_new))
    }
}

fn rel_change(new: f64, old: f64) -> f64 {
    let diff = (new - old).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / new.abs().max(old.abs())
    }
}

/// Damped Picard iteration on `(chi, p)` from `chi = p = E|x|^2`.
pub fn solve_fixed_point(problem: &ReplicaProblem, opts: &ReplicaOptions) -> Result<ReplicaState, ReplicaError> {
    problem.validate()?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(ReplicaError::Invalid(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let start = problem.second_moment();
    solve_from(problem, opts, start, start)
}

/// Same as [`solve_fixed_point`] from a given starting point.
pub fn solve_from(problem: &ReplicaProblem, opts: &ReplicaOptions, chi0: f64, p0: f64) -> Result<ReplicaState, ReplicaError> {
    let (mut chi, mut p) = (chi0, p0);
    let d = opts.damping;
    let mut residual = f64::INFINITY;
    let mut last = (0.0, 0.0);
    for it in 1..=opts.max_iter {
        let (tau, theta2, chi_new, p_new) = problem.update(chi, p, opts)?;
        last = (tau, theta2);
        residual = (chi_new - chi).abs().max((p_new - p).abs());
        let change = rel_change(chi_new, chi).max(rel_change(p_new, p));
        if change <= opts.tol || residual <= opts.tol {
            // report the parameters consistent with the final (chi, p)
            let (chi, p) = (chi_new, p_new);
            let (tau, theta2) = problem.tau_theta2(chi, p, opts.derivative)?;
            if !(theta2 > 0.0) {
                return Err(ReplicaError::NegativeTheta2 { chi, p, theta2 });
            }
            let (_, _, c2, p2) = problem.update(chi, p, opts)?;
            let residual = (c2 - chi).abs().max((p2 - p).abs());
            return Ok(ReplicaState { chi, p, tau, theta2, residual, iterations: it });
        }
        chi = (1.0 - d) * chi + d * chi_new;
        p = (1.0 - d) * p + d * p_new;
    }
    Err(ReplicaError::NonConvergence {
        iterations: opts.max_iter,
        residual,
        last: ReplicaState { chi, p, tau: last.0, theta2: last.1, residual, iterations: opts.max_iter },
    })
}

/// Relative residuals of the four fixed-point relations at `state`:
/// `[tau, theta2, chi, p]`.
pub fn fixed_point_residuals(problem: &ReplicaProblem, state: &ReplicaState, opts: &ReplicaOptions) -> Result<[f64; 4], ReplicaError> {
    let (tau, theta2, chi, p) = problem.update(state.chi, state.p, opts)?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    Ok([rel(tau, state.tau), rel(theta2, state.theta2), rel(chi, state.chi), rel(p, state.p)])
}

/// Block-weighted `E d(x_hat; x)` at a converged state.
pub fn asymptotic_distortion(
    problem: &ReplicaProblem,
    state: &ReplicaState,
    opts: &ReplicaOptions,
    d: &DistortionSpec,
) -> Result<f64, ReplicaError> {
    let systems = problem.systems(state.tau, state.theta2, opts.scaling)?;
    Ok(average_distortion(&systems, d)?)
}

/// Solves the fixed point and evaluates `d`.
pub fn predict(problem: &ReplicaProblem, opts: &ReplicaOptions, d: &DistortionSpec) -> Result<(ReplicaState, f64), ReplicaError> {
    let state = solve_fixed_point(problem, opts)?;
    let dist = asymptotic_distortion(problem, &state, opts, d)?;
    Ok((state, dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::VarianceConvention;

    fn bpsk_ridge(rho: f64, conv: VarianceConvention, lambda: f64, sigma2: f64) -> ReplicaProblem {
        ReplicaProblem {
            spectral: SpectralModel::mp_preset(rho, conv).unwrap(),
            blocks: vec![ReplicaBlock { fraction: 1.0, prior: ScalarPrior::Bpsk, penalty: BlockPenalty::l2_half(1.0) }],
            support: SupportSet::Reals,
            lambda,
            sigma2,
            field: Field::Real,
        }
    }

    #[test]
    fn ridge_tau_solves_quadratic_per_sample_convention() {
        for &(rho, lam) in &[(1.0, 1.0), (0.7, 0.1), (1.5, 10.0), (0.5, 1.0)] {
            let pr = bpsk_ridge(rho, VarianceConvention::PerSample, lam, 0.1);
            let st = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
            let q = rho * st.tau * st.tau + (rho - lam - 1.0) * st.tau - lam;
            assert!(q.abs() < 1e-8, "rho={rho} lam={lam} tau={} q={q}", st.tau);
        }
    }

    #[test]
    fn least_squares_limit() {
        let pr = bpsk_ridge(2.0, VarianceConvention::PerSample, 1e-8, 0.04);
        let st = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
        assert!((st.theta2 - 0.04).abs() < 1e-6, "{}", st.theta2);
    }

    #[test]
    fn dominant_penalty_pins_zero() {
        let mut pr = bpsk_ridge(1.0, VarianceConvention::PerSample, 1.0, 0.1);
        pr.blocks[0].penalty = BlockPenalty::l1(1e9);
        let st = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
        assert!((st.p - 1.0).abs() < 1e-9);
        assert!(st.chi.abs() < 1e-9);
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let mut pr = bpsk_ridge(0.8, VarianceConvention::PerMeasurement, 0.3, 0.05);
        pr.blocks[0] = ReplicaBlock {
            fraction: 1.0,
            prior: ScalarPrior::BernoulliGauss { mu: 0.2, variance: 1.0 },
            penalty: BlockPenalty::l1(1.0),
        };
        let a = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
        let opts = ReplicaOptions { derivative: DerivativeMode::FiniteDifference, ..Default::default() };
        let b = solve_fixed_point(&pr, &opts).unwrap();
        assert!((a.theta2 - b.theta2).abs() < 1e-7 * a.theta2);
        let res = fixed_point_residuals(&pr, &a, &ReplicaOptions::default()).unwrap();
        assert!(res.iter().all(|&r| r <= 1e-9), "{res:?}");
    }

    #[test]
    fn half_tau_scaling_is_lambda_rescale() {
        let mut pr = bpsk_ridge(0.6, VarianceConvention::PerMeasurement, 0.4, 0.05);
        pr.blocks[0].prior = ScalarPrior::BernoulliGauss { mu: 0.15, variance: 1.0 };
        pr.blocks[0].penalty = BlockPenalty::l1(1.0);
        let d = DistortionSpec::SquaredError;
        let (_, a) = predict(&pr, &ReplicaOptions::default(), &d).unwrap();
        let half = ReplicaOptions { scaling: ProxScaling::HalfTau, ..Default::default() };
        let (_, b) = predict(&pr.with_lambda(0.8), &half, &d).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }
}
