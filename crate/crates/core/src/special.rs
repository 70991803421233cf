//! Standard normal helpers and truncated Gaussian moments.

use std::f64::consts::{PI, SQRT_2};

/// `1 / sqrt(2 pi)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Gaussian tail `Q(x) = 1 - Phi(x)`.
#[inline]
pub fn q_function(x: f64) -> f64 {
    norm_cdf(-x)
}

/// `P(a <= Z <= b)` for a standard normal `Z`, computed on the side of the
/// mean that avoids cancellation.
pub fn norm_interval(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        q_function(a) - q_function(b)
    } else if b <= 0.0 {
        norm_cdf(b) - norm_cdf(a)
    } else {
        1.0 - q_function(b) - norm_cdf(a)
    }
}

/// Truncated moments `(m0, m1, m2)` with `mk = int_a^b t^k phi(t) dt`.
///
/// Infinite limits are allowed; `a > b` yields zeros.
pub fn gaussian_partial_moments(a: f64, b: f64) -> (f64, f64, f64) {
    if b <= a {
        return (0.0, 0.0, 0.0);
    }
    let m0 = norm_interval(a, b);
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let m1 = pa - pb;
    // t * phi(t) -> 0 at +-inf
    let apa = if a.is_infinite() { 0.0 } else { a * pa };
    let bpb = if b.is_infinite() { 0.0 } else { b * pb };
    let m2 = m0 + apa - bpb;
    (m0, m1, m2)
}

/// `int_a^inf sqrt(u) e^{-u} du`, the upper incomplete gamma function at 3/2.
pub fn upper_gamma_three_halves(a: f64) -> f64 {
    if a <= 0.0 {
        return 0.5 * PI.sqrt();
    }
    if a.is_infinite() {
        return 0.0;
    }
    let r = a.sqrt();
    r * (-a).exp() + 0.5 * PI.sqrt() * libm::erfc(r)
}

/// `int_a^b u e^{-u} du` for `0 <= a <= b <= inf`.
pub fn exp_first_moment(a: f64, b: f64) -> f64 {
    let tail = |x: f64| {
        if x.is_infinite() {
            0.0
        } else {
            (1.0 + x) * (-x).exp()
        }
    };
    tail(a) - tail(b)
}

/// Exponentially scaled modified Bessel functions `(e^{-x} I0(x), e^{-x} I1(x))`
/// for `x >= 0`.
pub fn bessel_i01_scaled(x: f64) -> (f64, f64) {
    assert!(x >= 0.0, "bessel_i01_scaled needs x >= 0");
    if x <= 25.0 {
        // power series, all terms positive
        let q = 0.25 * x * x;
        let (mut t0, mut t1) = (1.0, 0.5 * x);
        let (mut s0, mut s1) = (t0, t1);
        for k in 1..200 {
            let kf = k as f64;
            t0 *= q / (kf * kf);
            t1 *= q / (kf * (kf + 1.0));
            s0 += t0;
            s1 += t1;
            if t0 < 1e-17 * s0 && t1 < 1e-17 * s1 {
                break;
            }
        }
        let e = (-x).exp();
        (s0 * e, s1 * e)
    } else {
        // large-argument expansion, truncated at its smallest term
        let pre = 1.0 / (2.0 * PI * x).sqrt();
        let series = |nu: f64| {
            let mu = 4.0 * nu * nu;
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..60 {
                let kf = k as f64;
                let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
                if next.abs() >= term.abs() {
                    break;
                }
                term = next;
                sum += term;
                if term.abs() < 1e-17 * sum.abs() {
                    break;
                }
            }
            sum
        };
        (pre * series(0.0), pre * series(1.0))
    }
}
