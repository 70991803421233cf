//! Separable block penalties and their proximal maps.
//!
//! Every shipped family has the form `u(v) = l1 |v| + l2 v^2 / 2` on a closed
//! interval support, so the prox is a clamped, scaled soft threshold and is
//! piecewise affine in its input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::BlockSignalModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("penalty has {got} blocks but the signal model has {expected}")]
    BlockMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSet {
    #[default]
    Reals,
    /// The interval `[-1, 1]`.
    Box,
    NonNegative,
}

impl SupportSet {
    pub fn interval(self) -> (f64, f64) {
        match self {
            SupportSet::Reals => (f64::NEG_INFINITY, f64::INFINITY),
            SupportSet::Box => (-1.0, 1.0),
            SupportSet::NonNegative => (0.0, f64::INFINITY),
        }
    }

    pub fn contains(self, v: f64) -> bool {
        let (lo, hi) = self.interval();
        v >= lo && v <= hi
    }

    pub fn project(self, v: f64) -> f64 {
        let (lo, hi) = self.interval();
        v.clamp(lo, hi)
    }
}

fn unit() -> f64 {
    1.0
}

/// Shape of a block penalty before its weight is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PenaltyFamily {
    /// `|v|`
    L1,
    /// `v^2 / 2`
    L2Half,
    /// `w1 |v| + w2 v^2 / 2`
    Elastic { w1: f64, w2: f64 },
}

impl PenaltyFamily {
    /// `(l1, l2)` coefficients at unit weight.
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            PenaltyFamily::L1 => (1.0, 0.0),
            PenaltyFamily::L2Half => (0.0, 1.0),
            PenaltyFamily::Elastic { w1, w2 } => (w1, w2),
        }
    }

    pub fn is_convex(self) -> bool {
        let (a, b) = self.coefficients();
        a >= 0.0 && b >= 0.0
    }

    pub fn id(self) -> &'static str {
        match self {
            PenaltyFamily::L1 => "l1",
            PenaltyFamily::L2Half => "l2_half",
            PenaltyFamily::Elastic { .. } => "elastic",
        }
    }
}

/// Penalty of one block: `weight * family(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockPenalty {
    #[serde(flatten)]
    pub family: PenaltyFamily,
    #[serde(default = "unit")]
    pub weight: f64,
}

/// Affine piece `x = slope * y + offset` of a prox on the open interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub offset: f64,
}

impl BlockPenalty {
    pub fn new(family: PenaltyFamily, weight: f64) -> Self {
        Self { family, weight }
    }

    pub fn l1(weight: f64) -> Self {
        Self::new(PenaltyFamily::L1, weight)
    }

    pub fn l2_half(weight: f64) -> Self {
        Self::new(PenaltyFamily::L2Half, weight)
    }

    pub fn validate(&self, path: &str) -> Result<(), PenaltyError> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(PenaltyError::Invalid {
                path: format!("{path}.weight"),
                message: format!("must be finite and >= 0, got {}", self.weight),
            });
        }
        if let PenaltyFamily::Elastic { w1, w2 } = self.family {
            for (name, v) in [("w1", w1), ("w2", w2)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(PenaltyError::Invalid {
                        path: format!("{path}.{name}"),
                        message: format!("must be finite and >= 0, got {v}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn with_weight(self, weight: f64) -> Self {
        Self { weight, ..self }
    }

    /// Weighted `(l1, l2)` coefficients.
    pub fn coefficients(&self) -> (f64, f64) {
        let (a, b) = self.family.coefficients();
        (self.weight * a, self.weight * b)
    }

    pub fn value(&self, v: f64) -> f64 {
        let (a, b) = self.coefficients();
        let mut out = 0.0;
        if a != 0.0 {
            out += a * v.abs();
        }
        if b != 0.0 {
            out += 0.5 * b * v * v;
        }
        out
    }

    /// `argmin_{v in support} (y - v)^2 / 2 + c u(v)`.
    pub fn prox(&self, y: f64, c: f64, support: SupportSet) -> f64 {
        let (a, b) = self.coefficients();
        let t = c * a;
        let k = 1.0 + c * b;
        let soft = if y > t {
            (y - t) / k
        } else if y < -t {
            (y + t) / k
        } else {
            0.0
        };
        support.project(soft)
    }

    /// Weak derivative of the prox in `y` (the slope of the active piece).
    pub fn prox_derivative(&self, y: f64, c: f64, support: SupportSet) -> f64 {
        let (a, b) = self.coefficients();
        let t = c * a;
        let k = 1.0 + c * b;
        if y.abs() <= t {
            return 0.0;
        }
        let (lo, hi) = support.interval();
        let soft = (y - t * y.signum()) / k;
        if soft <= lo || soft >= hi {
            0.0
        } else {
            1.0 / k
        }
    }

    /// The prox as affine pieces covering the real line in increasing order.
    pub fn prox_pieces(&self, c: f64, support: SupportSet) -> Vec<Piece> {
        let (a, b) = self.coefficients();
        let t = c * a;
        let k = 1.0 + c * b;
        let (lo, hi) = support.interval();
        let mut cuts = vec![-t, t];
        if hi.is_finite() && hi > 0.0 {
            cuts.push(k * hi + t);
        }
        if lo.is_finite() && lo < 0.0 {
            cuts.push(k * lo - t);
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut edges = Vec::with_capacity(cuts.len() + 2);
        edges.push(f64::NEG_INFINITY);
        edges.extend(cuts);
        edges.push(f64::INFINITY);
        let mut pieces: Vec<Piece> = Vec::with_capacity(edges.len() - 1);
        for w in edges.windows(2) {
            let (l, h) = (w[0], w[1]);
            let probe = if l.is_infinite() && h.is_infinite() {
                0.0
            } else if l.is_infinite() {
                h - 1.0
            } else if h.is_infinite() {
                l + 1.0
            } else {
                0.5 * (l + h)
            };
            let (slope, offset) = if probe > t {
                (1.0 / k, -t / k)
            } else if probe < -t {
                (1.0 / k, t / k)
            } else {
                (0.0, 0.0)
            };
            let raw = slope * probe + offset;
            let (slope, offset) = if raw >= hi {
                (0.0, hi)
            } else if raw <= lo {
                (0.0, lo)
            } else {
                (slope, offset)
            };
            match pieces.last_mut() {
                Some(p) if p.slope == slope && p.offset == offset => p.hi = h,
                _ => pieces.push(Piece { lo: l, hi: h, slope, offset }),
            }
        }
        pieces
    }

    /// Subdifferential of `u` at `v` as a closed interval.
    pub fn subdifferential(&self, v: f64) -> (f64, f64) {
        let (a, b) = self.coefficients();
        let smooth = b * v;
        if v > 0.0 {
            (smooth + a, smooth + a)
        } else if v < 0.0 {
            (smooth - a, smooth - a)
        } else {
            (-a, a)
        }
    }
}

/// Normal cone of the support at `v`, as an interval (`v` assumed feasible).
pub fn normal_cone(support: SupportSet, v: f64) -> (f64, f64) {
    let (lo, hi) = support.interval();
    let upper = if v >= hi { f64::INFINITY } else { 0.0 };
    let lower = if v <= lo { f64::NEG_INFINITY } else { 0.0 };
    (lower, upper)
}

/// Global minimizer of `(y - v)^2 / 2 + c u(v)` over `[lo, hi]` for a black-box `u`.
///
/// Coarse grid of 1024 points, golden section around the best grid point,
/// then a Newton polish by finite differences that is kept only when the
/// objective is locally smooth. Multimodal objectives get the best
/// grid-seeded local optimum.
pub fn prox_generic(u: &dyn Fn(f64) -> f64, y: f64, c: f64, support: (f64, f64)) -> f64 {
    let (lo, hi) = support;
    let obj = |v: f64| 0.5 * (y - v) * (y - v) + c * u(v);
    let anchor = y.clamp(lo, hi);
    // any minimizer lies within this radius of y
    let mut radius = (y * y + 2.0 * c * u(0.0)).sqrt();
    let at_y = u(y);
    if at_y.is_finite() {
        radius = radius.min((2.0 * c * at_y).sqrt());
    }
    let radius = radius.max(1e-12 * y.abs().max(1.0));
    let a = (y - radius).max(lo);
    let b = (y + radius).min(hi);
    if !(a < b) {
        return anchor;
    }
    const GRID: usize = 1024;
    let step = (b - a) / (GRID - 1) as f64;
    let point = |i: usize| if i == GRID - 1 { b } else { a + step * i as f64 };
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..GRID {
        let v = obj(point(i));
        // ties go to the smaller magnitude
        if v < best_val || (v == best_val && point(i).abs() < point(best).abs()) {
            best_val = v;
            best = i;
        }
    }
    let mut l = point(best.saturating_sub(1));
    let mut r = point((best + 1).min(GRID - 1));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = r - g * (r - l);
    let mut x2 = l + g * (r - l);
    let (mut f1, mut f2) = (obj(x1), obj(x2));
    for _ in 0..200 {
        if r - l <= 1e-14 * (l.abs().max(r.abs()).max(1.0)) {
            break;
        }
        if f1 <= f2 {
            r = x2;
            x2 = x1;
            f2 = f1;
            x1 = r - g * (r - l);
            f1 = obj(x1);
        } else {
            l = x1;
            x1 = x2;
            f1 = f2;
            x2 = l + g * (r - l);
            f2 = obj(x2);
        }
    }
    let mut v = 0.5 * (l + r);
    let mut fv = obj(v);
    for (cand, fc) in [(point(best), best_val), (a, obj(a)), (b, obj(b))] {
        if fc < fv {
            v = cand;
            fv = fc;
        }
    }
    // Newton polish; a kink inside the stencil shows up as disagreeing
    // curvatures. One-sided stencils are used next to the bounds.
    for _ in 0..4 {
        let h = 1e-3 * v.abs().max(1e-3);
        let (d1, c_near, c_far) = if v - 2.0 * h >= lo && v + 2.0 * h <= hi {
            let (fm2, fm1, fp1, fp2) = (obj(v - 2.0 * h), obj(v - h), obj(v + h), obj(v + 2.0 * h));
            ((fp1 - fm1) / (2.0 * h), (fp1 - 2.0 * fv + fm1) / (h * h), (fp2 - 2.0 * fv + fm2) / (4.0 * h * h))
        } else {
            let s = if v + 4.0 * h <= hi {
                1.0
            } else if v - 4.0 * h >= lo {
                -1.0
            } else {
                break;
            };
            let (f1, f2, f4) = (obj(v + s * h), obj(v + 2.0 * s * h), obj(v + 4.0 * s * h));
            (s * (-3.0 * fv + 4.0 * f1 - f2) / (2.0 * h), (fv - 2.0 * f1 + f2) / (h * h), (fv - 2.0 * f2 + f4) / (4.0 * h * h))
        };
        if !(c_near > 0.0) || (c_near - c_far).abs() > 1e-4 * c_near {
            break;
        }
        let next = (v - d1 / c_near).clamp(lo, hi);
        if (next - v).abs() > 2.0 * h {
            break;
        }
        let f_next = obj(next);
        // Near the minimum the gain is below rounding, so only a clear
        // increase rejects the step.
        if f_next > fv + 4.0 * f64::EPSILON * fv.abs().max(1.0) {
            break;
        }
        let done = (next - v).abs() <= 1e-15 * v.abs().max(1.0);
        v = next;
        fv = f_next;
        if done {
            break;
        }
    }
    v
}

fn default_lambda() -> f64 {
    1.0
}

/// Global regularization strength, support set and per-block penalties.
///
/// `lambda` is the data-fit scale of the objective
/// `(1/lambda) ||y - A v||^2 + sum_n u_{j(n)}(v_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub support: SupportSet,
    pub blocks: Vec<BlockPenalty>,
}

impl PenaltySpec {
    pub fn new(lambda: f64, support: SupportSet, blocks: Vec<BlockPenalty>) -> Self {
        Self { lambda, support, blocks }
    }

    pub fn validate(&self, path: &str) -> Result<(), PenaltyError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(PenaltyError::Invalid {
                path: format!("{path}.lambda"),
                message: format!("must be > 0, got {}", self.lambda),
            });
        }
        if self.blocks.is_empty() {
            return Err(PenaltyError::Invalid {
                path: format!("{path}.blocks"),
                message: "at least one block is required".into(),
            });
        }
        for (j, b) in self.blocks.iter().enumerate() {
            b.validate(&format!("{path}.blocks[{j}]"))?;
        }
        Ok(())
    }

    pub fn check_model(&self, model: &BlockSignalModel) -> Result<(), PenaltyError> {
        if self.blocks.len() != model.num_blocks() {
            return Err(PenaltyError::BlockMismatch { expected: model.num_blocks(), got: self.blocks.len() });
        }
        Ok(())
    }

    /// `sum_j sum_{n in block j} u_j(v_n)`.
    pub fn total_penalty(&self, v: &[f64], model: &BlockSignalModel) -> Result<f64, PenaltyError> {
        self.check_model(model)?;
        if v.len() != model.n() {
            return Err(PenaltyError::LengthMismatch { expected: model.n(), got: v.len() });
        }
        Ok(v.iter().enumerate().map(|(i, &x)| self.blocks[model.block_of(i)].value(x)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::ScalarPrior;

    fn l1() -> BlockPenalty {
        BlockPenalty::l1(1.0)
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(l1().prox(3.0, 1.0, SupportSet::Reals), 2.0);
        assert_eq!(l1().prox(0.5, 1.0, SupportSet::Reals), 0.0);
        let ridge = BlockPenalty::l2_half(1.0);
        assert!((ridge.prox(0.7, 2.5, SupportSet::Reals) - 0.2).abs() < 1e-15);
        assert_eq!(ridge.prox(2.0, 1.0, SupportSet::Box), 1.0);
        assert_eq!(ridge.prox(-4.0, 1.0, SupportSet::NonNegative), 0.0);
    }

    #[test]
    fn box_ridge_matches_generic() {
        let ridge = BlockPenalty::l2_half(1.0);
        let g = prox_generic(&|v| 0.5 * v * v, 2.0, 1.0, (-1.0, 1.0));
        assert!((g - 1.0).abs() < 1e-9, "{g}");
        assert_eq!(ridge.prox(2.0, 1.0, SupportSet::Box), 1.0);
    }

    #[test]
    fn generic_examples() {
        assert!((prox_generic(&|v: f64| v.abs(), 3.0, 1.0, (f64::NEG_INFINITY, f64::INFINITY)) - 2.0).abs() < 1e-8);
        assert!((prox_generic(&|_| 0.0, 0.7, 1.0, (f64::NEG_INFINITY, f64::INFINITY)) - 0.7).abs() < 1e-9);
        assert!((prox_generic(&|v| 0.5 * v * v, 1.0, 3.0, (f64::NEG_INFINITY, f64::INFINITY)) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn pieces_reproduce_prox() {
        let pens = [
            l1(),
            BlockPenalty::l2_half(0.5),
            BlockPenalty::new(PenaltyFamily::Elastic { w1: 0.3, w2: 2.0 }, 1.5),
            BlockPenalty::l1(0.0),
        ];
        for p in pens {
            for support in [SupportSet::Reals, SupportSet::Box, SupportSet::NonNegative] {
                for c in [0.1, 1.0, 4.0] {
                    let pieces = p.prox_pieces(c, support);
                    assert_eq!(pieces[0].lo, f64::NEG_INFINITY);
                    assert_eq!(pieces.last().unwrap().hi, f64::INFINITY);
                    for w in pieces.windows(2) {
                        assert_eq!(w[0].hi, w[1].lo);
                    }
                    for i in -80..=80 {
                        let y = i as f64 * 0.1 + 0.013;
                        let piece = pieces.iter().find(|q| y > q.lo && y < q.hi).unwrap();
                        let x = piece.slope * y + piece.offset;
                        assert!((x - p.prox(y, c, support)).abs() < 1e-14);
                        assert_eq!(piece.slope, p.prox_derivative(y, c, support));
                    }
                }
            }
        }
    }

    #[test]
    fn subdifferential_of_l1_at_zero() {
        assert_eq!(BlockPenalty::l1(2.0).subdifferential(0.0), (-2.0, 2.0));
        assert_eq!(BlockPenalty::l2_half(2.0).subdifferential(-1.0), (-2.0, -2.0));
        assert_eq!(normal_cone(SupportSet::Box, 1.0), (0.0, f64::INFINITY));
        assert_eq!(normal_cone(SupportSet::NonNegative, 0.0), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn total_penalty_examples() {
        let one = BlockSignalModel::from_fractions(2, &[(1.0, ScalarPrior::Bpsk)]).unwrap();
        let spec = PenaltySpec::new(1.0, SupportSet::Reals, vec![BlockPenalty::l1(2.0)]);
        assert_eq!(spec.total_penalty(&[1.0, -1.0], &one).unwrap(), 4.0);
        assert_eq!(spec.total_penalty(&[0.0, 0.0], &one).unwrap(), 0.0);
        let two = BlockSignalModel::from_fractions(2, &[(0.5, ScalarPrior::Bpsk), (0.5, ScalarPrior::Bpsk)]).unwrap();
        let spec = PenaltySpec::new(1.0, SupportSet::Reals, vec![l1(), BlockPenalty::l2_half(1.0)]);
        assert_eq!(spec.total_penalty(&[1.0, 2.0], &two).unwrap(), 3.0);
        assert!(matches!(spec.total_penalty(&[1.0], &two), Err(PenaltyError::LengthMismatch { .. })));
    }

    #[test]
    fn config_round_trip() {
        let spec: PenaltySpec = serde_json::from_str(
            r#"{"lambda":0.5,"support":"box","blocks":[{"family":"l1","weight":2},{"family":"elastic","w1":1,"w2":0.5}]}"#,
        )
        .unwrap();
        assert_eq!(spec.support, SupportSet::Box);
        assert_eq!(spec.blocks[0], BlockPenalty::l1(2.0));
        assert_eq!(spec.blocks[1].weight, 1.0);
        let back: PenaltySpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = PenaltySpec::new(-1.0, SupportSet::Reals, vec![l1()]);
        assert!(bad.validate("penalty").unwrap_err().to_string().starts_with("penalty.lambda"));
    }
}
