use asymrls::bpsk::error_probability;
use asymrls::special::{gaussian_partial_moments, norm_pdf};
use proptest::prelude::*;

// Composite Simpson rule; the integrands are smooth and the intervals short.
fn simpson(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partial_moments_match_quadrature(a in -8.0..8.0f64, len in 0.0..10.0f64) {
        let b = (a + len).min(9.0);
        let (m0, m1, m2) = gaussian_partial_moments(a, b);
        for (k, m) in [m0, m1, m2].into_iter().enumerate() {
            let q = simpson(a, b, |t| t.powi(k as i32) * norm_pdf(t));
            prop_assert!((m - q).abs() <= 1e-12, "k={k}: {m} vs {q}");
        }
    }

    #[test]
    fn error_probability_increases_with_noise(t in 1e-2..1e2f64, r in 1.001..2.0f64) {
        prop_assert!(error_probability(t * r) > error_probability(t));
    }
}

#[test]
fn infinite_endpoints() {
    let (m0, m1, m2) = gaussian_partial_moments(f64::NEG_INFINITY, f64::INFINITY);
    assert!((m0 - 1.0).abs() < 1e-15 && m1.abs() < 1e-15 && (m2 - 1.0).abs() < 1e-15);
    let (m0, m1, m2) = gaussian_partial_moments(-1.0, f64::INFINITY);
    let q = |k: i32| simpson(-1.0, 40.0, |t| t.powi(k) * norm_pdf(t));
    assert!((m0 - q(0)).abs() < 1e-12 && (m1 - q(1)).abs() < 1e-12 && (m2 - q(2)).abs() < 1e-12);
}
