//! The decoupled scalar channel `y = x + z`, `z ~ N(0, theta2)`, followed by
//! the block's prox, and exact expectations over it.
//!
//! For real signals the prox is piecewise affine in `y`, so every moment is a
//! finite sum of truncated Gaussian moments. Complex signals use the radial
//! soft threshold with closed forms for Gaussian parts and a one-dimensional
//! Rician integral for nonzero atoms.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::penalty::{BlockPenalty, Piece, SupportSet};
use crate::quadrature::legendre_adaptive;
use crate::signal::{ComplexComponent, Field, PriorComponent, ScalarPrior};
use crate::special::{
    bessel_i01_scaled, exp_first_moment, gaussian_partial_moments, norm_cdf, norm_interval, norm_pdf,
    upper_gamma_three_halves,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid decoupled system: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// How the prox multiplier follows the decoupled parameter `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxScaling {
    /// `c = tau`: the engine's `lambda` is half the data-fit scale of the objective.
    #[default]
    Tau,
    /// `c = tau / 2`: the engine's `lambda` equals the data-fit scale.
    HalfTau,
}

impl ProxScaling {
    pub fn multiplier(self, tau: f64) -> f64 {
        match self {
            ProxScaling::Tau => tau,
            ProxScaling::HalfTau => 0.5 * tau,
        }
    }

    /// Engine `lambda` for an objective `(1/lambda_obj) ||y - A v||^2 + u(v)`.
    pub fn engine_lambda(self, objective_lambda: f64) -> f64 {
        match self {
            ProxScaling::Tau => 0.5 * objective_lambda,
            ProxScaling::HalfTau => objective_lambda,
        }
    }

    /// Inverse of [`ProxScaling::engine_lambda`].
    pub fn objective_lambda(self, engine_lambda: f64) -> f64 {
        match self {
            ProxScaling::Tau => 2.0 * engine_lambda,
            ProxScaling::HalfTau => engine_lambda,
        }
    }
}

/// Per-sample distortion measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionSpec {
    SquaredError,
    /// `1{sgn(x_hat) != sgn(x)}`
    SignError,
    /// `1{(|x_hat| > threshold) != (x != 0)}`
    SupportError { threshold: f64 },
}

impl DistortionSpec {
    pub fn id(&self) -> String {
        match self {
            DistortionSpec::SquaredError => "squared_error".into(),
            DistortionSpec::SignError => "sign_error".into(),
            DistortionSpec::SupportError { threshold } => format!("support_error({threshold})"),
        }
    }

    /// Per-sample distortion for a real estimate.
    pub fn evaluate(&self, estimate: f64, truth: f64) -> f64 {
        match *self {
            DistortionSpec::SquaredError => (estimate - truth).powi(2),
            DistortionSpec::SignError => {
                let sgn = |v: f64| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                };
                (sgn(estimate) != sgn(truth)) as u8 as f64
            }
            DistortionSpec::SupportError { threshold } => {
                ((estimate.abs() > threshold) != (truth != 0.0)) as u8 as f64
            }
        }
    }
}

/// Moments of one decoupled channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMoments {
    /// `E|x_hat - x|^2`
    pub p: f64,
    /// `tau E[d x_hat / d y]`; `None` in the complex field.
    pub chi_derivative: Option<f64>,
    /// `(tau / theta2) E[(x_hat - x) conj(z)]`
    pub chi_covariance: f64,
}

impl ChannelMoments {
    /// The response term used by the fixed point: derivative form when
    /// available, covariance form otherwise.
    pub fn chi(&self) -> f64 {
        self.chi_derivative.unwrap_or(self.chi_covariance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupledSystem {
    pub prior: ScalarPrior,
    pub penalty: BlockPenalty,
    pub support: SupportSet,
    pub field: Field,
    pub tau: f64,
    pub theta2: f64,
    pub scaling: ProxScaling,
}

// Largest y at which x_hat <= level (monotone prox), -inf if none.
fn upper_level(pieces: &[Piece], level: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for q in pieces {
        let cand = if q.slope == 0.0 {
            if q.offset <= level {
                q.hi
            } else {
                continue;
            }
        } else {
            let y = (level - q.offset) / q.slope;
            if y >= q.hi {
                q.hi
            } else if y <= q.lo {
                continue;
            } else {
                y
            }
        };
        best = best.max(cand);
    }
    best
}

// Smallest y at which x_hat >= level, +inf if none.
fn lower_level(pieces: &[Piece], level: f64) -> f64 {
    let mut best = f64::INFINITY;
    for q in pieces {
        let cand = if q.slope == 0.0 {
            if q.offset >= level {
                q.lo
            } else {
                continue;
            }
        } else {
            let y = (level - q.offset) / q.slope;
            if y <= q.lo {
                q.lo
            } else if y >= q.hi {
                continue;
            } else {
                y
            }
        };
        best = best.min(cand);
    }
    best
}

impl DecoupledSystem {
    pub fn new(
        prior: ScalarPrior,
        penalty: BlockPenalty,
        support: SupportSet,
        field: Field,
        tau: f64,
        theta2: f64,
        scaling: ProxScaling,
    ) -> Result<Self, ChannelError> {
        let sys = Self { prior, penalty, support, field, tau, theta2, scaling };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.theta2.is_finite() && self.theta2 > 0.0) {
            return Err(ChannelError::Invalid(format!("theta2 must be > 0, got {}", self.theta2)));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(ChannelError::Invalid(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.field == Field::Complex && self.support != SupportSet::Reals {
            return Err(ChannelError::Unsupported("complex field requires the unconstrained support".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self) -> f64 {
        self.scaling.multiplier(self.tau)
    }

    /// The decoupled estimate for a real observation.
    pub fn estimate(&self, y: f64) -> f64 {
        self.penalty.prox(y, self.multiplier(), self.support)
    }

    /// The decoupled estimate for a complex observation (radial shrinkage).
    pub fn estimate_complex(&self, y: Complex64) -> Complex64 {
        let r = y.norm();
        if r == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let (t, k) = self.threshold_and_gain();
        let g = (r - t).max(0.0) / k;
        y * (g / r)
    }

    fn threshold_and_gain(&self) -> (f64, f64) {
        let c = self.multiplier();
        let (a, b) = self.penalty.coefficients();
        (c * a, 1.0 + c * b)
    }

    pub fn pieces(&self) -> Vec<Piece> {
        self.penalty.prox_pieces(self.multiplier(), self.support)
    }

    pub fn moments(&self) -> ChannelMoments {
        match self.field {
            Field::Real => self.real_moments(),
            Field::Complex => self.complex_moments(),
        }
    }

    pub fn moment_p(&self) -> f64 {
        self.moments().p
    }

    pub fn moment_chi(&self) -> f64 {
        self.moments().chi()
    }

    fn real_moments(&self) -> ChannelMoments {
        let pieces = self.pieces();
        let theta = self.theta2.sqrt();
        let (mut p, mut slope_mean, mut cov) = (0.0, 0.0, 0.0);
        for comp in self.prior.components() {
            match comp {
                PriorComponent::Atom { value: x, weight: w } => {
                    for q in &pieces {
                        let (m0, m1, m2) = gaussian_partial_moments((q.lo - x) / theta, (q.hi - x) / theta);
                        let alpha = q.slope * x + q.offset - x;
                        let beta = q.slope * theta;
                        p += w * (alpha * alpha * m0 + 2.0 * alpha * beta * m1 + beta * beta * m2);
                        slope_mean += w * q.slope * m0;
                        cov += w * theta * (alpha * m1 + beta * m2);
                    }
                }
                PriorComponent::Gaussian { variance: v, weight: w } => {
                    // condition on y ~ N(0, s): x | y ~ N(m y, sc)
                    let s = v + self.theta2;
                    let rs = s.sqrt();
                    let m = v / s;
                    let sc = v * self.theta2 / s;
                    for q in &pieces {
                        let (m0, m1, m2) = gaussian_partial_moments(q.lo / rs, q.hi / rs);
                        let alpha = q.offset;
                        let beta = (q.slope - m) * rs;
                        p += w * (alpha * alpha * m0 + 2.0 * alpha * beta * m1 + beta * beta * m2);
                        slope_mean += w * q.slope * m0;
                        cov += w * (1.0 - m) * rs * (alpha * m1 + beta * m2);
                    }
                    p += w * sc;
                    cov += w * sc;
                }
            }
        }
        ChannelMoments {
            p,
            chi_derivative: Some(self.tau * slope_mean),
            chi_covariance: self.tau * cov / self.theta2,
        }
    }

    fn complex_moments(&self) -> ChannelMoments {
        let (t, k) = self.threshold_and_gain();
        let (mut p, mut cov) = (0.0, 0.0);
        let gaussian = |v: f64| -> (f64, f64) {
            let s = v + self.theta2;
            let m = v / s;
            let sc = v * self.theta2 / s;
            let ut = t * t / s;
            let inner = exp_first_moment(0.0, ut);
            let outer = exp_first_moment(ut, f64::INFINITY);
            let g32 = upper_gamma_three_halves(ut);
            let tail = (-ut).exp();
            let alpha = 1.0 / k - m;
            let tk = t / k;
            let rs = s.sqrt();
            let p = m * m * s * inner + alpha * alpha * s * outer - 2.0 * alpha * tk * rs * g32 + tk * tk * tail + sc;
            let cov = (1.0 - m) * (-m * s * inner + alpha * s * outer - tk * rs * g32) + sc;
            (p, cov)
        };
        for comp in self.prior.complex_components() {
            match comp {
                ComplexComponent::CircularGaussian { variance, weight } => {
                    let (a, b) = gaussian(variance);
                    p += weight * a;
                    cov += weight * b;
                }
                ComplexComponent::Atom { value, weight } if value.norm() == 0.0 => {
                    let (a, b) = gaussian(0.0);
                    p += weight * a;
                    cov += weight * b;
                }
                ComplexComponent::Atom { value, weight } => {
                    let (a, b) = self.rician_moments(value.norm(), t, k);
                    p += weight * a;
                    cov += weight * b;
                }
            }
        }
        ChannelMoments { p, chi_derivative: None, chi_covariance: self.tau * cov / self.theta2 }
    }

    // Moments for a fixed nonzero complex x with |x| = r0; |y| is Rician.
    fn rician_moments(&self, r0: f64, t: f64, k: f64) -> (f64, f64) {
        let th2 = self.theta2;
        let theta = th2.sqrt();
        // density of |y| times e^{-kappa} I_nu(kappa) / (e^{-kappa} I0(kappa)) pieces
        let dens = |r: f64| -> (f64, f64) {
            let kappa = 2.0 * r * r0 / th2;
            let (i0, i1) = bessel_i01_scaled(kappa);
            let base = 2.0 * r / th2 * (-(r - r0).powi(2) / th2).exp();
            (base * i0, base * i1)
        };
        let upper = r0 + t + 40.0 * theta;
        let mut cuts = vec![t, r0.max(t), upper];
        cuts.dedup();
        let integrate = |f: &dyn Fn(f64) -> f64| -> f64 {
            cuts.windows(2).map(|w| legendre_adaptive(w[0], w[1], 1e-15, f)).sum()
        };
        let g = |r: f64| (r - t).max(0.0) / k;
        let p = integrate(&|r| {
            let (d0, d1) = dens(r);
            let gr = g(r);
            d0 * gr * gr - 2.0 * gr * r0 * d1
        }) + r0 * r0;
        let cov = integrate(&|r| {
            let (d0, d1) = dens(r);
            g(r) * (r * d0 - r0 * d1)
        });
        (p, cov)
    }

    /// `E d(x_hat; x)` over the channel.
    pub fn distortion(&self, d: &DistortionSpec) -> Result<f64, ChannelError> {
        match (self.field, d) {
            (_, DistortionSpec::SquaredError) => Ok(self.moment_p()),
            (Field::Real, DistortionSpec::SignError) => Ok(self.real_sign_error()),
            (Field::Real, DistortionSpec::SupportError { threshold }) => Ok(self.real_support_error(*threshold)),
            (Field::Complex, DistortionSpec::SupportError { threshold }) => Ok(self.complex_support_error(*threshold)),
            (Field::Complex, DistortionSpec::SignError) => {
                Err(ChannelError::Unsupported("sign error is defined for real signals only".into()))
            }
        }
    }

    fn real_sign_error(&self) -> f64 {
        let pieces = self.pieces();
        let theta = self.theta2.sqrt();
        // x_hat > 0 iff y > up; x_hat < 0 iff y < down
        let up = upper_level(&pieces, 0.0);
        let down = lower_level(&pieces, 0.0);
        let mut err = 0.0;
        for comp in self.prior.components() {
            match comp {
                PriorComponent::Atom { value: x, weight: w } => {
                    let e = if x > 0.0 {
                        norm_cdf((up - x) / theta)
                    } else if x < 0.0 {
                        1.0 - norm_cdf((down - x) / theta)
                    } else {
                        norm_cdf((down - x) / theta) + 1.0 - norm_cdf((up - x) / theta)
                    };
                    err += w * e;
                }
                PriorComponent::Gaussian { variance: v, weight: w } => {
                    let rs = (v + self.theta2).sqrt();
                    let slope = v.sqrt() / theta;
                    let lim = 40.0;
                    let a = (up / rs).clamp(-lim, lim);
                    let b = (down / rs).clamp(-lim, lim);
                    let pos = legendre_adaptive(-lim, a, 1e-15, &|e: f64| norm_pdf(e) * norm_cdf(slope * e));
                    let neg = legendre_adaptive(b, lim, 1e-15, &|e: f64| norm_pdf(e) * norm_cdf(-slope * e));
                    err += w * (pos + neg);
                }
            }
        }
        err
    }

    fn real_support_error(&self, eps: f64) -> f64 {
        let pieces = self.pieces();
        let theta = self.theta2.sqrt();
        let lo = lower_level(&pieces, -eps);
        let hi = upper_level(&pieces, eps);
        let mut err = 0.0;
        for comp in self.prior.components() {
            match comp {
                PriorComponent::Atom { value: x, weight: w } => {
                    let zero = norm_interval((lo - x) / theta, (hi - x) / theta);
                    err += w * if x == 0.0 { 1.0 - zero } else { zero };
                }
                PriorComponent::Gaussian { variance: v, weight: w } => {
                    let rs = (v + self.theta2).sqrt();
                    err += w * norm_interval(lo / rs, hi / rs);
                }
            }
        }
        err
    }

    fn complex_support_error(&self, eps: f64) -> f64 {
        let (t, k) = self.threshold_and_gain();
        let radius = t + k * eps;
        let th2 = self.theta2;
        let mut err = 0.0;
        for comp in self.prior.complex_components() {
            match comp {
                ComplexComponent::CircularGaussian { variance, weight } => {
                    err += weight * (1.0 - (-radius * radius / (variance + th2)).exp());
                }
                ComplexComponent::Atom { value, weight } if value.norm() == 0.0 => {
                    err += weight * (-radius * radius / th2).exp();
                }
                ComplexComponent::Atom { value, weight } => {
                    let r0 = value.norm();
                    let zero = legendre_adaptive(0.0, radius, 1e-15, &|r: f64| {
                        let (i0, _) = bessel_i01_scaled(2.0 * r * r0 / th2);
                        2.0 * r / th2 * (-(r - r0).powi(2) / th2).exp() * i0
                    });
                    err += weight * zero;
                }
            }
        }
        err
    }

    /// `(a, b)` with `{y : x_hat(y) < t} = (-inf, a)` and `{y : x_hat(y) <= t} = (-inf, b]`.
    pub fn preimage(&self, t: f64) -> (f64, f64) {
        let pieces = self.pieces();
        (lower_level(&pieces, t), upper_level(&pieces, t))
    }

    /// `(P(x_hat < t | x), P(x_hat <= t | x))` for a real channel.
    pub fn conditional_cdf(&self, x: f64, t: f64) -> (f64, f64) {
        let (a, b) = self.preimage(t);
        let theta = self.theta2.sqrt();
        (norm_cdf((a - x) / theta), norm_cdf((b - x) / theta))
    }
}

/// Fraction-weighted average of a distortion over per-block channels.
pub fn average_distortion(systems: &[(f64, DecoupledSystem)], d: &DistortionSpec) -> Result<f64, ChannelError> {
    let mut total = 0.0;
    for (frac, sys) in systems {
        total += frac * sys.distortion(d)?;
    }
    Ok(total)
}
