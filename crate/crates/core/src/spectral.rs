//! Asymptotic eigenvalue laws of the Gram matrix `J = A^H A` and their
//! Stieltjes and R-transforms.
//!
//! Conventions: `G(s) = int p(x) / (x - s) dx` and `R(w) = G^{-1}(-w) - 1/w`.
//! With these signs `R` is the usual free-probability R-transform, so
//! `R(0)` is the mean eigenvalue and `R'(0)` the eigenvalue variance.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid spectral model: {0}")]
    Invalid(String),
    #[error("Stieltjes transform is singular at s = {0}: point lies in the spectrum")]
    SingularPoint(f64),
    #[error("R-transform argument {0} has no real preimage outside the spectrum")]
    OutOfDomain(f64),
    #[error("Stieltjes inversion did not converge for omega = {omega} (|G(s) + omega| = {residual:e})")]
    NonConvergence { omega: f64, residual: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Entry-variance normalization of an i.i.d. measuring matrix with `M` rows
/// and `N` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceConvention {
    /// Entries with variance `1/M`: mean eigenvalue of `J` is 1.
    #[serde(rename = "var-1/M")]
    PerMeasurement,
    /// Entries with variance `1/N`: mean eigenvalue of `J` is `rho`.
    #[serde(rename = "var-1/N")]
    PerSample,
}

impl VarianceConvention {
    pub const ALL: [VarianceConvention; 2] = [Self::PerMeasurement, Self::PerSample];

    pub fn id(self) -> &'static str {
        match self {
            Self::PerMeasurement => "var-1/M",
            Self::PerSample => "var-1/N",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "var-1/M" => Some(Self::PerMeasurement),
            "var-1/N" => Some(Self::PerSample),
            _ => None,
        }
    }

    /// Variance of one matrix entry for an `m x n` matrix.
    pub fn entry_variance(self, m: usize, n: usize) -> f64 {
        match self {
            Self::PerMeasurement => 1.0 / m as f64,
            Self::PerSample => 1.0 / n as f64,
        }
    }

    /// Eigenvalue scale of the Marchenko–Pastur law for aspect ratio `rho`.
    pub fn mp_scale(self, rho: f64) -> f64 {
        match self {
            Self::PerMeasurement => 1.0 / rho,
            Self::PerSample => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectralKind {
    /// Law of `A^T A` for an `M x N` i.i.d. matrix with `rho = M/N`; all
    /// eigenvalues multiplied by `scale` (free Poisson with rate `rho` and
    /// jump size `scale`).
    MarchenkoPastur { ratio: f64, scale: f64 },
    /// `M` orthonormal rows: eigenvalue 1 with mass `rho`, 0 with mass `1 - rho`.
    RowOrthogonal { ratio: f64 },
    Identity,
    /// Finite mixture of `(eigenvalue, weight)` atoms.
    Tabulated { atoms: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectralKind", into = "SpectralKind")]
pub struct SpectralModel {
    kind: SpectralKind,
}

impl TryFrom<SpectralKind> for SpectralModel {
    type Error = SpectralError;
    fn try_from(kind: SpectralKind) -> Result<Self> {
        SpectralModel::new(kind)
    }
}

impl From<SpectralModel> for SpectralKind {
    fn from(m: SpectralModel) -> Self {
        m.kind
    }
}

// Below this |omega| (relative to the spread of the spectrum) the R-transform
// is evaluated from its free-cumulant series.
const SERIES_RADIUS: f64 = 1e-5;
const ROOT_MAX_ITER: usize = 400;

impl SpectralModel {
    pub fn new(kind: SpectralKind) -> Result<Self> {
        match &kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                if !(ratio.is_finite() && *ratio > 0.0) {
                    return Err(SpectralError::Invalid(format!("ratio must be > 0, got {ratio}")));
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(SpectralError::Invalid(format!("scale must be > 0, got {scale}")));
                }
            }
            SpectralKind::RowOrthogonal { ratio } => {
                if !(ratio.is_finite() && *ratio > 0.0 && *ratio <= 1.0) {
                    return Err(SpectralError::Invalid(format!(
                        "row-orthogonal ratio must lie in (0, 1], got {ratio}"
                    )));
                }
            }
            SpectralKind::Identity => {}
            SpectralKind::Tabulated { atoms } => {
                if atoms.is_empty() {
                    return Err(SpectralError::Invalid("tabulated spectrum has no atoms".into()));
                }
                for &(x, w) in atoms {
                    if !(x.is_finite() && x >= 0.0) {
                        return Err(SpectralError::Invalid(format!("eigenvalue {x} must be >= 0")));
                    }
                    if !(w.is_finite() && w > 0.0) {
                        return Err(SpectralError::Invalid(format!("atom weight {w} must be > 0")));
                    }
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(SpectralError::Invalid(format!("atom weights sum to {total}, expected 1")));
                }
            }
        }
        Ok(Self { kind })
    }

    pub fn marchenko_pastur(ratio: f64, scale: f64) -> Result<Self> {
        Self::new(SpectralKind::MarchenkoPastur { ratio, scale })
    }

    /// Marchenko–Pastur law of an i.i.d. matrix under a named variance convention.
    pub fn mp_preset(ratio: f64, convention: VarianceConvention) -> Result<Self> {
        Self::marchenko_pastur(ratio, convention.mp_scale(ratio))
    }

    pub fn row_orthogonal(ratio: f64) -> Result<Self> {
        Self::new(SpectralKind::RowOrthogonal { ratio })
    }

    pub fn identity() -> Self {
        Self { kind: SpectralKind::Identity }
    }

    pub fn tabulated(atoms: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(SpectralKind::Tabulated { atoms })
    }

    pub fn kind(&self) -> &SpectralKind {
        &self.kind
    }

    /// Atoms of the law, when it is discrete.
    fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match &self.kind {
            SpectralKind::MarchenkoPastur { .. } => None,
            SpectralKind::RowOrthogonal { ratio } => {
                let mut atoms = vec![(1.0, *ratio)];
                if *ratio < 1.0 {
                    atoms.push((0.0, 1.0 - ratio));
                }
                Some(atoms)
            }
            SpectralKind::Identity => Some(vec![(1.0, 1.0)]),
            SpectralKind::Tabulated { atoms } => Some(atoms.clone()),
        }
    }

    /// Smallest and largest point of the support (atoms included).
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let r = ratio.sqrt();
                let hi = scale * (1.0 + r).powi(2);
                let lo = if *ratio <= 1.0 { 0.0 } else { scale * (1.0 - r).powi(2) };
                (lo, hi)
            }
            _ => {
                let atoms = self.atoms().expect("discrete law");
                let lo = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
                let hi = atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// Density of the absolutely continuous part (Marchenko–Pastur only).
    pub fn density(&self, x: f64) -> Option<f64> {
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let r = ratio.sqrt();
                let (a, b) = ((1.0 - r).powi(2), (1.0 + r).powi(2));
                let t = x / scale;
                if t <= a || t >= b {
                    return Some(0.0);
                }
                Some(((b - t) * (t - a)).sqrt() / (2.0 * std::f64::consts::PI * t) / scale)
            }
            _ => None,
        }
    }

    /// Free cumulants `kappa_1..kappa_4`.
    pub fn free_cumulants(&self) -> [f64; 4] {
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                [ratio * scale, ratio * scale.powi(2), ratio * scale.powi(3), ratio * scale.powi(4)]
            }
            _ => {
                let atoms = self.atoms().expect("discrete law");
                let m = |k: i32| atoms.iter().map(|&(x, w)| w * x.powi(k)).sum::<f64>();
                let (m1, m2, m3, m4) = (m(1), m(2), m(3), m(4));
                [
                    m1,
                    m2 - m1 * m1,
                    m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3),
                    m4 - 4.0 * m1 * m3 - 2.0 * m2 * m2 + 10.0 * m1 * m1 * m2 - 5.0 * m1.powi(4),
                ]
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.free_cumulants()[0]
    }

    fn spread(&self) -> f64 {
        let (lo, hi) = self.support();
        (hi - lo).max(hi.abs()).max(1e-300)
    }

    /// Stieltjes transform `G(s)`. Real `s` must lie outside `[lambda_min, lambda_max]`.
    pub fn stieltjes(&self, s: Complex64) -> Result<Complex64> {
        if s.im == 0.0 {
            return self.stieltjes_real(s.re).map(Complex64::from);
        }
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let z = s / scale;
                let roots = mp_roots(z, *ratio);
                let want = s.im.signum();
                let pick = match (roots[0].im * want > 0.0, roots[1].im * want > 0.0) {
                    (true, false) => roots[0],
                    (false, true) => roots[1],
                    _ => {
                        if roots[0].norm() <= roots[1].norm() {
                            roots[0]
                        } else {
                            roots[1]
                        }
                    }
                };
                Ok(pick / scale)
            }
            _ => {
                let atoms = self.atoms().expect("discrete law");
                Ok(atoms.iter().map(|&(x, w)| w / (Complex64::from(x) - s)).sum())
            }
        }
    }

    /// `G(s)` for real `s` outside the closed support hull.
    pub fn stieltjes_real(&self, s: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        if s >= lo && s <= hi {
            return Err(SpectralError::SingularPoint(s));
        }
        Ok(self.g_real_unchecked(s))
    }

    /// `G'(s) = int p(x) / (x - s)^2 dx` for real `s` outside the support hull.
    pub fn stieltjes_real_derivative(&self, s: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        if s >= lo && s <= hi {
            return Err(SpectralError::SingularPoint(s));
        }
        Ok(self.dg_real_unchecked(s))
    }

    // Closed forms extended to the support edges where they stay finite.
    fn g_real_unchecked(&self, s: f64) -> f64 {
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => mp_real_branch(s / scale, *ratio) / scale,
            _ => self
                .atoms()
                .expect("discrete law")
                .iter()
                .map(|&(x, w)| w / (x - s))
                .sum(),
        }
    }

    fn dg_real_unchecked(&self, s: f64) -> f64 {
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let z = s / scale;
                let g = mp_real_branch(z, *ratio);
                // implicit differentiation of z G^2 + (1 + z - rho) G + 1 = 0
                let dg = -(g * g + g) / (2.0 * z * g + 1.0 + z - ratio);
                dg / (scale * scale)
            }
            _ => self
                .atoms()
                .expect("discrete law")
                .iter()
                .map(|&(x, w)| w / (x - s).powi(2))
                .sum(),
        }
    }

    /// Value of `G` at the edge of the support, `+inf` when `G` blows up there.
    /// `upper` selects the right edge (where `G` tends to a negative limit).
    fn edge_value(&self, upper: bool) -> f64 {
        let (lo, hi) = self.support();
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                if upper {
                    -mp_real_branch(hi / scale, *ratio) / scale
                } else if *ratio > 1.0 {
                    mp_real_branch(lo / scale, *ratio) / scale
                } else {
                    f64::INFINITY
                }
            }
            // atoms at both edges
            _ => f64::INFINITY,
        }
    }

    fn series(&self, omega: f64) -> f64 {
        let k = self.free_cumulants();
        k[0] + omega * (k[1] + omega * (k[2] + omega * k[3]))
    }

    fn series_derivative(&self, omega: f64) -> f64 {
        let k = self.free_cumulants();
        k[1] + omega * (2.0 * k[2] + 3.0 * omega * k[3])
    }

    fn near_zero(&self, omega: f64) -> bool {
        omega.abs() * self.spread() < SERIES_RADIUS
    }

    /// R-transform, using closed forms where the law admits one.
    pub fn r_transform(&self, omega: f64) -> Result<f64> {
        if !omega.is_finite() {
            return Err(SpectralError::OutOfDomain(omega));
        }
        if self.near_zero(omega) {
            return Ok(self.series(omega));
        }
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let den = 1.0 - scale * omega;
                if den <= 0.0 {
                    return Err(SpectralError::OutOfDomain(omega));
                }
                Ok(scale * ratio / den)
            }
            SpectralKind::Identity => Ok(1.0),
            SpectralKind::RowOrthogonal { ratio } => {
                if *ratio == 1.0 {
                    return Ok(1.0);
                }
                let d = (1.0 + omega).powi(2) - 4.0 * omega * (1.0 - ratio);
                Ok((omega - 1.0 + d.sqrt()) / (2.0 * omega))
            }
            SpectralKind::Tabulated { .. } => self.r_transform_numeric(omega),
        }
    }

    /// `R'(omega)`, closed form where available, otherwise implicit
    /// differentiation through the numerically inverted Stieltjes transform.
    pub fn r_transform_derivative(&self, omega: f64) -> Result<f64> {
        if self.near_zero(omega) {
            return Ok(self.series_derivative(omega));
        }
        match &self.kind {
            SpectralKind::MarchenkoPastur { ratio, scale } => {
                let den = 1.0 - scale * omega;
                if den <= 0.0 {
                    return Err(SpectralError::OutOfDomain(omega));
                }
                Ok(scale * scale * ratio / (den * den))
            }
            SpectralKind::Identity => Ok(0.0),
            SpectralKind::RowOrthogonal { ratio } => {
                if *ratio == 1.0 {
                    return Ok(0.0);
                }
                // Derivative of the closed form with 1 - sqrt(d) rationalized
                // to avoid cancellation at small omega.
                let r = *ratio;
                let sd = ((1.0 + omega).powi(2) - 4.0 * omega * (1.0 - r)).sqrt();
                Ok(((omega - 1.0 + 2.0 * r) / sd + (2.0 - 4.0 * r - omega) / (1.0 + sd)) / (2.0 * omega))
            }
            _ => self.r_transform_derivative_numeric(omega),
        }
    }

    /// R-transform by root finding on `s -> G(s) + omega` outside the spectrum.
    pub fn r_transform_numeric(&self, omega: f64) -> Result<f64> {
        if omega == 0.0 || self.near_zero(omega) {
            return Ok(self.series(omega));
        }
        if let Some(atoms) = self.atoms() {
            return discrete_r(&atoms, omega);
        }
        let s = self.invert_stieltjes(omega)?;
        Ok(s - 1.0 / omega)
    }

    /// `R'(omega) = 1/omega^2 - 1/G'(s)` with `G(s) = -omega`.
    pub fn r_transform_derivative_numeric(&self, omega: f64) -> Result<f64> {
        if omega == 0.0 || self.near_zero(omega) {
            return Ok(self.series_derivative(omega));
        }
        if let Some(atoms) = self.atoms() {
            let r = discrete_r(&atoms, omega)?;
            // implicit differentiation of sum w / (1 - omega (x - r)) = 1
            let (mut num, mut den) = (0.0, 0.0);
            for &(x, w) in &atoms {
                let d = 1.0 - omega * (x - r);
                num += w * (x - r) / (d * d);
                den += w / (d * d);
            }
            return Ok(num / (omega * den));
        }
        let s = self.invert_stieltjes(omega)?;
        Ok(1.0 / (omega * omega) - 1.0 / self.dg_real_unchecked(s))
    }

    /// Solves `G(s) = -omega` for real `s` below the spectrum (`omega < 0`)
    /// or above it (`omega > 0`).
    pub fn invert_stieltjes(&self, omega: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        let below = omega < 0.0;
        // Work with h(d) = |G| at distance d from the relevant edge; h is
        // decreasing in d on (0, inf).
        let target = omega.abs();
        let edge = self.edge_value(!below);
        if target >= edge {
            return Err(SpectralError::OutOfDomain(omega));
        }
        let point = |d: f64| if below { lo - d } else { hi + d };
        let h = |d: f64| {
            let g = self.g_real_unchecked(point(d));
            if below {
                g
            } else {
                -g
            }
        };
        let dh = |d: f64| {
            // d/dd |G(point(d))|: below: -G'(s); above: -G'(s) as well
            -self.dg_real_unchecked(point(d))
        };
        // bracket [d_near, d_far] with h(d_near) > target > h(d_far)
        let mut d_far = 1.0;
        let mut guard = 0;
        while h(d_far) > target {
            d_far *= 2.0;
            guard += 1;
            if guard > 2000 || !d_far.is_finite() {
                return Err(SpectralError::NonConvergence { omega, residual: f64::NAN });
            }
        }
        let mut d_near = if edge.is_finite() { 0.0 } else { d_far * 0.5 };
        guard = 0;
        while d_near > 0.0 && h(d_near) < target {
            d_near *= 0.5;
            guard += 1;
            if guard > 2000 {
                return Err(SpectralError::NonConvergence { omega, residual: f64::NAN });
            }
        }
        let tol = 1e-12f64.max(4.0 * f64::EPSILON * target);
        let mut d = 0.5 * (d_near + d_far);
        let mut residual = f64::INFINITY;
        for _ in 0..ROOT_MAX_ITER {
            let val = h(d) - target;
            residual = val.abs();
            if residual <= tol {
                return Ok(point(d));
            }
            if val > 0.0 {
                d_near = d;
            } else {
                d_far = d;
            }
            if (d_far - d_near) <= 4.0 * f64::EPSILON * point(d).abs().max(d) {
                return Ok(point(d));
            }
            let step = val / dh(d);
            let newton = d - step;
            d = if newton.is_finite() && newton > d_near && newton < d_far {
                newton
            } else {
                0.5 * (d_near + d_far)
            };
        }
        Err(SpectralError::NonConvergence { omega, residual })
    }
}

// Roots of z G^2 + (1 + z - rho) G + 1 = 0 (our sign convention for G).
// Solves sum_k w_k / (1 - omega (x_k - r)) = 1 for r, which is G(r + 1/omega) = -omega
// without the cancellation in s - 1/omega.
fn discrete_r(atoms: &[(f64, f64)], omega: f64) -> Result<f64> {
    let lo = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let hi = atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let f = |r: f64| -> (f64, f64) {
        let (mut v, mut dv) = (-1.0, 0.0);
        for &(x, w) in atoms {
            let d = 1.0 - omega * (x - r);
            v += w / d;
            dv -= w * omega / (d * d);
        }
        (v, dv)
    };
    // f(a) <= 0 at the edge, f -> +inf at the pole b
    let (mut a, mut b) = if omega < 0.0 { (lo, lo - 1.0 / omega) } else { (hi, hi - 1.0 / omega) };
    let mut r = a;
    for _ in 0..ROOT_MAX_ITER {
        let (v, dv) = f(r);
        if v == 0.0 {
            return Ok(r);
        }
        if v < 0.0 {
            a = r;
        } else {
            b = r;
        }
        if (b - a).abs() <= 2.0 * f64::EPSILON * r.abs().max(1.0) {
            return Ok(r);
        }
        let newton = r - v / dv;
        let inside = if a < b { newton > a && newton < b } else { newton < a && newton > b };
        let next = if newton.is_finite() && inside { newton } else { 0.5 * (a + b) };
        if (next - r).abs() <= 1e-15 * r.abs().max(1.0) {
            return Ok(next);
        }
        r = next;
    }
    Err(SpectralError::NonConvergence { omega, residual: f(r).0.abs() })
}

fn mp_roots(z: Complex64, rho: f64) -> [Complex64; 2] {
    let b = z + 1.0 - rho;
    let disc = (b * b - 4.0 * z).sqrt();
    // stable pair: q = -(b + sgn * disc) / 2, roots q / z and 1 / q
    let q1 = -(b + disc) * 0.5;
    let q2 = -(b - disc) * 0.5;
    let q = if q1.norm() >= q2.norm() { q1 } else { q2 };
    [q / z, Complex64::from(1.0) / q]
}

// Real branch of the unit-scale MP Stieltjes transform outside the support
// (including the finite edge value when rho > 1).
fn mp_real_branch(z: f64, rho: f64) -> f64 {
    if z == 0.0 {
        return 1.0 / (rho - 1.0);
    }
    let b = z + 1.0 - rho;
    let disc = (b * b - 4.0 * z).max(0.0).sqrt();
    let q = -0.5 * (b + b.signum() * disc);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / z, 1.0 / q) };
    // callers only pass points outside the support hull; the mean splits them
    let below = z < rho;
    let pick = |want_positive: bool| {
        let cands = [r1, r2];
        cands
            .iter()
            .copied()
            .filter(|g| if want_positive { *g > 0.0 } else { *g < 0.0 })
            .fold(f64::NAN, |acc: f64, g| if acc.is_nan() || g.abs() < acc.abs() { g } else { acc })
    };
    if below {
        pick(true)
    } else {
        pick(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_atom() -> SpectralModel {
        SpectralModel::tabulated(vec![(0.5, 0.5), (1.5, 0.5)]).unwrap()
    }

    #[test]
    fn identity_stieltjes() {
        let g = SpectralModel::identity().stieltjes_real(-1.0).unwrap();
        assert_eq!(g, 0.5);
    }

    #[test]
    fn two_atom_stieltjes_at_zero() {
        let g = two_atom().stieltjes_real(0.0).unwrap();
        assert!((g - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_inside_support() {
        let err = two_atom().stieltjes_real(1.0).unwrap_err();
        assert_eq!(err, SpectralError::SingularPoint(1.0));
        let mp = SpectralModel::marchenko_pastur(2.0, 1.0).unwrap();
        assert!(matches!(mp.stieltjes_real(1.0), Err(SpectralError::SingularPoint(_))));
    }

    #[test]
    fn identity_r_transform_is_constant() {
        let id = SpectralModel::identity();
        for &w in &[-10.0, -1.0, -1e-3, 0.0, 0.2] {
            assert_eq!(id.r_transform(w).unwrap(), 1.0);
            assert!((id.r_transform_numeric(w).unwrap() - 1.0).abs() < 1e-10, "w={w}");
        }
    }

    #[test]
    fn two_atom_r_transform_matches_bisection() {
        // bisection on G(s) = 1 below the smallest atom
        let m = two_atom();
        let (mut a, mut b) = (-100.0f64, 0.5 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let g = 0.5 / (0.5 - mid) + 0.5 / (1.5 - mid);
            if g > 1.0 {
                b = mid;
            } else {
                a = mid;
            }
        }
        let expected = 0.5 * (a + b) + 1.0;
        let got = m.r_transform(-1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn mp_presets_have_expected_means() {
        let m = SpectralModel::mp_preset(2.0, VarianceConvention::PerMeasurement).unwrap();
        assert!((m.r_transform(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.r_transform(-0.5).unwrap() - 2.0 / 2.5).abs() < 1e-15);
        let n = SpectralModel::mp_preset(2.0, VarianceConvention::PerSample).unwrap();
        assert!((n.r_transform(-0.5).unwrap() - 2.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn mp_closed_form_matches_inversion() {
        for &(ratio, scale) in &[(1.0, 1.0), (0.5, 1.0), (0.5, 2.0), (2.0, 1.0), (2.0, 0.5)] {
            let m = SpectralModel::marchenko_pastur(ratio, scale).unwrap();
            for &w in &[-5.0, -1.0, -0.3, -0.01, 0.01] {
                let closed = m.r_transform(w);
                let numeric = m.r_transform_numeric(w);
                match (closed, numeric) {
                    (Ok(c), Ok(n)) => assert!((c - n).abs() < 1e-9, "rho={ratio} w={w}: {c} vs {n}"),
                    (_, Err(SpectralError::OutOfDomain(_))) => {}
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
    }

    #[test]
    fn out_of_domain_above_edge() {
        // rho > 1: G stays finite at the lower edge, so large |omega| has no preimage
        let m = SpectralModel::marchenko_pastur(4.0, 1.0).unwrap();
        let edge = m.edge_value(false);
        assert!(edge.is_finite());
        assert!(matches!(m.r_transform_numeric(-2.0 * edge), Err(SpectralError::OutOfDomain(_))));
    }

    #[test]
    fn complex_stieltjes_has_positive_imaginary_part() {
        let m = SpectralModel::marchenko_pastur(0.7, 1.0).unwrap();
        for &re in &[-1.0, 0.2, 1.0, 2.5, 4.0] {
            let g = m.stieltjes(Complex64::new(re, 0.1)).unwrap();
            assert!(g.im > 0.0, "re={re} g={g}");
            let gc = m.stieltjes(Complex64::new(re, -0.1)).unwrap();
            assert!((gc - g.conj()).norm() < 1e-14);
        }
    }

    #[test]
    fn row_orthogonal_is_two_atom_law() {
        for &rho in &[0.2, 0.5, 0.9, 1.0] {
            let row = SpectralModel::row_orthogonal(rho).unwrap();
            let mut atoms = vec![(1.0, rho)];
            if rho < 1.0 {
                atoms.push((0.0, 1.0 - rho));
            }
            let tab = SpectralModel::tabulated(atoms).unwrap();
            for &s in &[-3.0, -0.5, 2.0] {
                let a = row.stieltjes_real(s).unwrap();
                let b = tab.stieltjes_real(s).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
            for &w in &[-8.0, -2.0, -1.0, -0.25, -1e-3] {
                let a = row.r_transform(w).unwrap();
                let b = tab.r_transform(w).unwrap();
                assert!((a - b).abs() < 1e-12, "rho={rho} w={w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(SpectralModel::row_orthogonal(1.5).is_err());
        assert!(SpectralModel::marchenko_pastur(0.0, 1.0).is_err());
        assert!(SpectralModel::tabulated(vec![(1.0, 0.3)]).is_err());
        assert!(SpectralModel::tabulated(vec![(-1.0, 1.0)]).is_err());
    }
}
