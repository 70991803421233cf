//! Antipodal (±1) signals recovered by ridge regression, with and without
//! the box constraint `[-1, 1]`, followed by a sign decision.
//!
//! `rho` is the number of measurements per sample and the Gram spectrum is
//! the Marchenko–Pastur law of entries with variance `1/N`; `lambda` is the
//! engine parameter, so the decoupled estimate of the unconstrained problem is
//! `y / (1 + tau)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoupled::{DistortionSpec, ProxScaling};
use crate::penalty::{BlockPenalty, SupportSet};
use crate::replica::{solve_fixed_point, ReplicaBlock, ReplicaError, ReplicaOptions, ReplicaProblem};
use crate::signal::{Field, ScalarPrior};
use crate::special::{gaussian_partial_moments, norm_pdf, q_function};
use crate::spectral::{SpectralModel, VarianceConvention};
use crate::tuner::{lambda_gradient, minimize_log_scalar, TuneError, TuneOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BpskError {
    #[error("rho (1 + tau)^2 - 1 = {0:e} is not positive; the decoupled noise is unbounded")]
    DenominatorNonpositive(f64),
    #[error("box fixed point did not converge (residuals {r1:e}, {r2:e} at tau={tau}, theta={theta})")]
    NonConvergence { r1: f64, r2: f64, tau: f64, theta: f64 },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
    #[error(transparent)]
    Tune(#[from] TuneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Unconstrained ridge.
    #[default]
    Ordinary,
    /// Ridge over `[-1, 1]`.
    Box,
}

impl Relaxation {
    pub fn id(self) -> &'static str {
        match self {
            Relaxation::Ordinary => "ordinary",
            Relaxation::Box => "box",
        }
    }

    pub fn support(self) -> SupportSet {
        match self {
            Relaxation::Ordinary => SupportSet::Reals,
            Relaxation::Box => SupportSet::Box,
        }
    }
}

/// Closed forms for the decoupled noise of the unconstrained problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theta2Variant {
    /// `(tau^2 + sigma2) / (rho (1 + tau)^2 - 1)`
    Printed,
    /// `(sigma2 (1 + tau)^2 + tau^2) / (rho (1 + tau)^2 - 1)`, the back-substituted
    /// fixed point of the general equations.
    Rederived,
}

impl Theta2Variant {
    /// The variant that agrees with simulation (checked by the acceptance suite).
    pub const VALIDATED: Theta2Variant = Theta2Variant::Rederived;

    pub fn id(self) -> &'static str {
        match self {
            Theta2Variant::Printed => "printed",
            Theta2Variant::Rederived => "rederived",
        }
    }
}

/// Positive root of `rho tau^2 + (rho - lambda - 1) tau - lambda = 0`.
pub fn ordinary_tau(lambda: f64, rho: f64) -> f64 {
    let b = lambda + 1.0 - rho;
    let disc = (b * b + 4.0 * lambda * rho).sqrt();
    if b >= 0.0 {
        (b + disc) / (2.0 * rho)
    } else {
        // avoids cancellation when lambda is small and rho > 1
        2.0 * lambda / (disc - b)
    }
}

pub fn ordinary_theta2(tau: f64, sigma2: f64, rho: f64, variant: Theta2Variant) -> Result<f64, BpskError> {
    let den = rho * (1.0 + tau).powi(2) - 1.0;
    if !(den > 0.0) {
        return Err(BpskError::DenominatorNonpositive(den));
    }
    let num = match variant {
        Theta2Variant::Printed => tau * tau + sigma2,
        Theta2Variant::Rederived => sigma2 * (1.0 + tau).powi(2) + tau * tau,
    };
    Ok(num / den)
}

/// `Q(1 / theta)`
pub fn error_probability(theta: f64) -> f64 {
    if theta == 0.0 {
        return 0.0;
    }
    q_function(1.0 / theta)
}

/// Residuals of the box-relaxation pair in `(tau, theta)`, with `load`
/// multiplying `theta` and `theta^2` on the right-hand sides:
///
/// ```text
/// r1 = 2 phi(eta) + (xi/beta) int_{-eta}^{beta} t^2 Dt + xi phi(beta) + lambda/beta - load theta - xi phi(eta)
/// r2 = sigma2 + 4 Q(eta) + (xi/beta)^2 int_{-eta}^{beta} (t - beta)^2 Dt - load theta^2
/// ```
///
/// with `beta = tau/theta`, `xi = tau/(1+tau)`, `eta = (2+tau)/theta`.
/// The first relation reads `load tau = lambda + chi` and the second
/// `load theta^2 = sigma2 + p`, so `load = rho` matches [`ordinary_tau`].
pub fn box_residuals(tau: f64, theta: f64, lambda: f64, sigma2: f64, load: f64) -> (f64, f64) {
    let beta = tau / theta;
    let xi = tau / (1.0 + tau);
    let eta = (2.0 + tau) / theta;
    let (m0, m1, m2) = gaussian_partial_moments(-eta, beta);
    // int (t - beta)^2 Dt = m2 - 2 beta m1 + beta^2 m0
    let centered = m2 - 2.0 * beta * m1 + beta * beta * m0;
    let r1 = 2.0 * norm_pdf(eta) + xi / beta * m2 + xi * norm_pdf(beta) + lambda / beta - load * theta - xi * norm_pdf(eta);
    let r2 = sigma2 + 4.0 * q_function(eta) + (xi / beta).powi(2) * centered - load * theta * theta;
    (r1, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpskPoint {
    pub rho: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub tau: f64,
    pub theta: f64,
    pub relaxation: Relaxation,
    pub beta: f64,
    pub xi: f64,
    pub eta: f64,
    pub p_e: f64,
    /// `(r1, r2)` for the box relaxation, zeros otherwise.
    pub residuals: (f64, f64),
}

impl BpskPoint {
    fn new(rho: f64, sigma2: f64, lambda: f64, tau: f64, theta: f64, relaxation: Relaxation, residuals: (f64, f64)) -> Self {
        Self {
            rho,
            sigma2,
            lambda,
            tau,
            theta,
            relaxation,
            beta: tau / theta,
            xi: tau / (1.0 + tau),
            eta: (2.0 + tau) / theta,
            p_e: error_probability(theta),
            residuals,
        }
    }
}

fn check(lambda: f64, rho: f64, sigma2: f64) -> Result<(), BpskError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(BpskError::Invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(BpskError::Invalid(format!("rho must be > 0, got {rho}")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(BpskError::Invalid(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    Ok(())
}

pub fn ordinary_point(lambda: f64, rho: f64, sigma2: f64, variant: Theta2Variant) -> Result<BpskPoint, BpskError> {
    check(lambda, rho, sigma2)?;
    let tau = ordinary_tau(lambda, rho);
    let theta = ordinary_theta2(tau, sigma2, rho, variant)?.sqrt();
    Ok(BpskPoint::new(rho, sigma2, lambda, tau, theta, Relaxation::Ordinary, (0.0, 0.0)))
}

/// Replica problem for the BPSK ridge setup.
pub fn replica_problem(lambda: f64, rho: f64, sigma2: f64, relaxation: Relaxation) -> Result<ReplicaProblem, BpskError> {
    Ok(ReplicaProblem {
        spectral: SpectralModel::mp_preset(rho, VarianceConvention::PerSample).map_err(ReplicaError::from)?,
        blocks: vec![ReplicaBlock { fraction: 1.0, prior: ScalarPrior::Bpsk, penalty: BlockPenalty::l2_half(1.0) }],
        support: relaxation.support(),
        lambda,
        sigma2,
        field: Field::Real,
    })
}

/// Solves the box pair: damped iteration of the general fixed point from the
/// ordinary solution, then Newton on `(tau, theta)` until both residuals are
/// at most `1e-10`.
pub fn box_fixed_point(lambda: f64, rho: f64, sigma2: f64) -> Result<BpskPoint, BpskError> {
    check(lambda, rho, sigma2)?;
    let problem = replica_problem(lambda, rho, sigma2, Relaxation::Box)?;
    let opts = ReplicaOptions { scaling: ProxScaling::Tau, ..Default::default() };
    let start = solve_fixed_point(&problem, &opts)?;
    let (mut tau, mut theta) = (start.tau, start.theta2.sqrt());
    let res = |t: f64, th: f64| box_residuals(t, th, lambda, sigma2, rho);
    let mut r = res(tau, theta);
    let norm = |r: (f64, f64)| r.0.abs().max(r.1.abs());
    for _ in 0..50 {
        if norm(r) <= 1e-14 {
            break;
        }
        let (ht, hth) = (1e-7 * tau.max(1e-3), 1e-7 * theta);
        let (a1, a2) = res(tau + ht, theta);
        let (b1, b2) = res(tau - ht, theta);
        let (c1, c2) = res(tau, theta + hth);
        let (d1, d2) = res(tau, theta - hth);
        let j11 = (a1 - b1) / (2.0 * ht);
        let j21 = (a2 - b2) / (2.0 * ht);
        let j12 = (c1 - d1) / (2.0 * hth);
        let j22 = (c2 - d2) / (2.0 * hth);
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let dt = (r.0 * j22 - r.1 * j12) / det;
        let dth = (j11 * r.1 - j21 * r.0) / det;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let (nt, nth) = (tau - step * dt, theta - step * dth);
            if nt > 0.0 && nth > 0.0 {
                let nr = res(nt, nth);
                if norm(nr) < norm(r) {
                    tau = nt;
                    theta = nth;
                    r = nr;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if norm(r) > 1e-10 {
        return Err(BpskError::NonConvergence { r1: r.0, r2: r.1, tau, theta });
    }
    Ok(BpskPoint::new(rho, sigma2, lambda, tau, theta, Relaxation::Box, r))
}

pub fn bpsk_point(lambda: f64, rho: f64, sigma2: f64, relaxation: Relaxation, variant: Theta2Variant) -> Result<BpskPoint, BpskError> {
    match relaxation {
        Relaxation::Ordinary => ordinary_point(lambda, rho, sigma2, variant),
        Relaxation::Box => box_fixed_point(lambda, rho, sigma2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpskOptimum {
    pub point: BpskPoint,
    /// `|dP_E/dlambda|` at the optimum.
    pub gradient: f64,
    pub boundary: bool,
}

/// Tunes `lambda` to minimize the error probability.
pub fn bpsk_optimal_lambda(
    rho: f64,
    sigma2: f64,
    relaxation: Relaxation,
    variant: Theta2Variant,
    opts: &TuneOptions,
) -> Result<BpskOptimum, BpskError> {
    let f = |lam: f64| bpsk_point(lam, rho, sigma2, relaxation, variant).ok().map(|p| p.p_e);
    let m = minimize_log_scalar(&f, opts.lambda_min, opts.lambda_max, opts.grid_points, opts.starts, opts.rel_tol)?;
    let point = bpsk_point(m.argmin, rho, sigma2, relaxation, variant)?;
    Ok(BpskOptimum { point, gradient: lambda_gradient(&f, m.argmin), boundary: m.boundary })
}

/// The distortion used for tuning BPSK recovery.
pub const SIGN_ERROR: DistortionSpec = DistortionSpec::SignError;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replica::asymptotic_distortion;

    #[test]
    fn tau_examples() {
        assert!((ordinary_tau(1.0, 1.0) - 0.5 * (1.0 + 5f64.sqrt())).abs() < 1e-15);
        assert!(ordinary_tau(1e-12, 2.0) < 1e-11);
        let t = ordinary_tau(1.0, 0.5);
        assert!((t - 3.561_552_812_808_830_3).abs() < 1e-12);
    }

    #[test]
    fn theta2_examples() {
        let s2 = 0.3;
        assert!((ordinary_theta2(0.0, s2, 2.0, Theta2Variant::Printed).unwrap() - s2).abs() < 1e-15);
        let tau = ordinary_tau(1.0, 1.0);
        let v = ordinary_theta2(tau, 1.0, 1.0, Theta2Variant::Printed).unwrap();
        assert!((v - (tau * tau + 1.0) / ((1.0 + tau).powi(2) - 1.0)).abs() < 1e-15);
        assert!((v - 0.618_034).abs() < 1e-6);
        assert!(matches!(ordinary_theta2(0.0, 1.0, 1.0, Theta2Variant::Printed), Err(BpskError::DenominatorNonpositive(_))));
    }

    #[test]
    fn error_probability_values() {
        assert_eq!(error_probability(0.0), 0.0);
        assert!((error_probability(1e300) - 0.5).abs() < 1e-15);
        assert!((error_probability(1.0) - 0.158_655_253_931_457).abs() < 1e-14);
    }

    #[test]
    fn rederived_variant_is_engine_fixed_point() {
        for &(lam, rho, s2) in &[(0.3, 1.0, 0.1), (1.0, 0.7, 0.01), (5.0, 1.5, 1.0)] {
            let pr = replica_problem(lam, rho, s2, Relaxation::Ordinary).unwrap();
            let st = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
            let closed = ordinary_point(lam, rho, s2, Theta2Variant::Rederived).unwrap();
            assert!((st.tau - closed.tau).abs() < 1e-9 * closed.tau);
            assert!((st.theta2 - closed.theta * closed.theta).abs() < 1e-8 * st.theta2);
        }
    }

    #[test]
    fn box_solution_substitutes_back() {
        let pt = box_fixed_point(1.0, 1.0, 0.1).unwrap();
        let (r1, r2) = box_residuals(pt.tau, pt.theta, 1.0, 0.1, 1.0);
        assert!(r1.abs() <= 1e-10 && r2.abs() <= 1e-10);
        // engine with box support at the same point
        let pr = replica_problem(1.0, 1.0, 0.1, Relaxation::Box).unwrap();
        let st = solve_fixed_point(&pr, &ReplicaOptions::default()).unwrap();
        assert!((st.tau - pt.tau).abs() < 1e-8 && (st.theta2.sqrt() - pt.theta).abs() < 1e-8);
        let pe = asymptotic_distortion(&pr, &st, &ReplicaOptions::default(), &SIGN_ERROR).unwrap();
        assert!((pe - pt.p_e).abs() < 1e-8);
    }

    #[test]
    fn box_not_worse_than_ordinary() {
        let opts = TuneOptions::default();
        for &(rho, s2) in &[(1.0, 0.1), (0.7, 0.3)] {
            let o = bpsk_optimal_lambda(rho, s2, Relaxation::Ordinary, Theta2Variant::Rederived, &opts).unwrap();
            let b = bpsk_optimal_lambda(rho, s2, Relaxation::Box, Theta2Variant::Rederived, &opts).unwrap();
            assert!(b.point.p_e <= o.point.p_e + 1e-9, "{rho} {s2}: {} vs {}", b.point.p_e, o.point.p_e);
        }
    }
}
