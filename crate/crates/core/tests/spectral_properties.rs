use asymrls::spectral::{SpectralModel, VarianceConvention};
use proptest::prelude::*;

// 50 log-spaced points on the negative axis inside the range where the
// Stieltjes transform can be inverted below the spectrum.
fn omega_grid(m: &SpectralModel) -> Vec<f64> {
    let lo = m.support().0;
    let reach = if lo > 0.0 { 0.99 * m.stieltjes_real(lo - 1e-9).unwrap().min(10.0) } else { 10.0 };
    let (a, b) = (1e-3f64.ln(), reach.ln());
    (0..50).map(|i| -(a + (b - a) * i as f64 / 49.0).exp()).collect()
}

#[test]
fn closed_forms_match_stieltjes_inversion() {
    let mut models = Vec::new();
    for &rho in &[0.3, 0.7, 1.0, 1.5, 3.0] {
        for conv in VarianceConvention::ALL {
            models.push(SpectralModel::mp_preset(rho, conv).unwrap());
        }
    }
    for &rho in &[0.2, 0.5, 0.9] {
        models.push(SpectralModel::row_orthogonal(rho).unwrap());
    }
    for m in &models {
        for w in omega_grid(m) {
            let closed = m.r_transform(w).unwrap();
            let numeric = m.r_transform_numeric(w).unwrap();
            assert!((closed - numeric).abs() <= 1e-6 * closed.abs().max(1.0), "{m:?} at {w}: {closed} vs {numeric}");
            // The implicit-differentiation oracle cancels two O(1/omega^2)
            // terms, so it is only trusted away from zero.
            if w.abs() < 0.05 {
                continue;
            }
            let dc = m.r_transform_derivative(w).unwrap();
            let dn = m.r_transform_derivative_numeric(w).unwrap();
            assert!((dc - dn).abs() <= 1e-5 * dc.abs().max(1.0), "{m:?} R' at {w}: {dc} vs {dn}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn r_transform_is_continuous_at_zero(rho in 0.1..4.0f64, scale in 0.1..3.0f64) {
        let m = SpectralModel::marchenko_pastur(rho, scale).unwrap();
        let r0 = m.r_transform(0.0).unwrap();
        let d = m.r_transform_derivative(0.0).unwrap();
        let k3 = m.free_cumulants()[2];
        for w in [1e-9, -1e-9, 1e-6, -1e-6, 1e-4, -1e-4] {
            let r = m.r_transform(w).unwrap();
            // Taylor remainder plus rounding
            prop_assert!((r - r0 - d * w).abs() <= 2.0 * k3.abs() * w * w + 1e-14 * r0.abs());
        }
        // across the switch to the closed form
        let (a, b) = (m.r_transform(-1e-4).unwrap(), m.r_transform(-1.0001e-4).unwrap());
        prop_assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn stieltjes_is_monotone_below_the_spectrum(rho in 1.05..4.0f64, d1 in 1e-3..10.0f64, d2 in 1e-3..10.0f64) {
        let m = SpectralModel::mp_preset(rho, VarianceConvention::PerMeasurement).unwrap();
        let lo = m.support().0;
        let (s1, s2) = (lo - d1.max(d2), lo - d1.min(d2));
        prop_assume!(s2 - s1 > 1e-9);
        let (g1, g2) = (m.stieltjes_real(s1).unwrap(), m.stieltjes_real(s2).unwrap());
        let slope = m.stieltjes_real_derivative(s1).unwrap();
        prop_assert!(slope != 0.0);
        prop_assert!((g2 - g1) * slope > 0.0);
    }
}
