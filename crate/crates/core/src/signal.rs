//! Block-partitioned signal priors.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{hermite_adaptive, DEFAULT_HERMITE_NODES};
use crate::special::norm_cdf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("quadrature did not stabilize to {tol:e} within {max_nodes} Hermite nodes")]
    QuadratureBudgetExceeded { tol: f64, max_nodes: usize },
}

impl SignalError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    #[default]
    Real,
    Complex,
}

fn unit() -> f64 {
    1.0
}

/// Scalar prior of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prior", rename_all = "snake_case")]
pub enum ScalarPrior {
    /// Nonzero with probability `mu` (the sparsity factor), then `N(0, variance)`.
    BernoulliGauss {
        mu: f64,
        #[serde(default = "unit")]
        variance: f64,
    },
    /// Equiprobable `+1` / `-1`.
    Bpsk,
    Gauss {
        #[serde(default = "unit")]
        variance: f64,
    },
}

/// One mixture component of a real prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorComponent {
    Atom { value: f64, weight: f64 },
    Gaussian { variance: f64, weight: f64 },
}

/// One mixture component of the circularly symmetric complex version of a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComplexComponent {
    Atom { value: Complex64, weight: f64 },
    CircularGaussian { variance: f64, weight: f64 },
}

impl ScalarPrior {
    pub fn validate(&self, path: &str) -> Result<(), SignalError> {
        match *self {
            ScalarPrior::BernoulliGauss { mu, variance } => {
                if !(0.0..=1.0).contains(&mu) {
                    return Err(SignalError::invalid(format!("{path}.mu"), format!("must lie in [0, 1], got {mu}")));
                }
                if !(variance.is_finite() && variance > 0.0) {
                    return Err(SignalError::invalid(
                        format!("{path}.variance"),
                        format!("must be > 0, got {variance}"),
                    ));
                }
            }
            ScalarPrior::Gauss { variance } => {
                if !(variance.is_finite() && variance > 0.0) {
                    return Err(SignalError::invalid(
                        format!("{path}.variance"),
                        format!("must be > 0, got {variance}"),
                    ));
                }
            }
            ScalarPrior::Bpsk => {}
        }
        Ok(())
    }

    /// Per-sample control factor (the sparsity factor for Bernoulli–Gauss).
    pub fn control_factor(&self) -> f64 {
        match *self {
            ScalarPrior::BernoulliGauss { mu, .. } => mu,
            _ => 1.0,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            ScalarPrior::BernoulliGauss { mu, variance } => mu * variance,
            ScalarPrior::Bpsk => 1.0,
            ScalarPrior::Gauss { variance } => variance,
        }
    }

    /// Mixture components with positive weight.
    pub fn components(&self) -> Vec<PriorComponent> {
        let all = match *self {
            ScalarPrior::BernoulliGauss { mu, variance } => vec![
                PriorComponent::Atom { value: 0.0, weight: 1.0 - mu },
                PriorComponent::Gaussian { variance, weight: mu },
            ],
            ScalarPrior::Bpsk => vec![
                PriorComponent::Atom { value: -1.0, weight: 0.5 },
                PriorComponent::Atom { value: 1.0, weight: 0.5 },
            ],
            ScalarPrior::Gauss { variance } => vec![PriorComponent::Gaussian { variance, weight: 1.0 }],
        };
        all.into_iter()
            .filter(|c| match c {
                PriorComponent::Atom { weight, .. } | PriorComponent::Gaussian { weight, .. } => *weight > 0.0,
            })
            .collect()
    }

    /// Circularly symmetric complex counterpart with the same `E|x|^2`: real
    /// and imaginary parts are i.i.d. halves.
    pub fn complex_components(&self) -> Vec<ComplexComponent> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let all = match *self {
            ScalarPrior::BernoulliGauss { mu, variance } => vec![
                ComplexComponent::Atom { value: Complex64::new(0.0, 0.0), weight: 1.0 - mu },
                ComplexComponent::CircularGaussian { variance, weight: mu },
            ],
            ScalarPrior::Bpsk => [(h, h), (h, -h), (-h, h), (-h, -h)]
                .iter()
                .map(|&(re, im)| ComplexComponent::Atom { value: Complex64::new(re, im), weight: 0.25 })
                .collect(),
            ScalarPrior::Gauss { variance } => vec![ComplexComponent::CircularGaussian { variance, weight: 1.0 }],
        };
        all.into_iter()
            .filter(|c| match c {
                ComplexComponent::Atom { weight, .. } | ComplexComponent::CircularGaussian { weight, .. } => {
                    *weight > 0.0
                }
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScalarPrior::BernoulliGauss { mu, variance } => {
                if rng.random::<f64>() < mu {
                    variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            }
            ScalarPrior::Bpsk => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            ScalarPrior::Gauss { variance } => variance.sqrt() * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// Distribution function `P(x <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.components()
            .iter()
            .map(|c| match *c {
                PriorComponent::Atom { value, weight } => {
                    if t >= value {
                        weight
                    } else {
                        0.0
                    }
                }
                PriorComponent::Gaussian { variance, weight } => weight * norm_cdf(t / variance.sqrt()),
            })
            .sum()
    }
}

/// `E f(x)` under `prior`: exact sums over atoms and adaptive Gauss–Hermite
/// (61 nodes, doubled until stable to 1e-10) for Gaussian parts.
pub fn prior_expectation(prior: &ScalarPrior, f: impl Fn(f64) -> f64) -> Result<f64, SignalError> {
    const TOL: f64 = 1e-10;
    let mut total = 0.0;
    for c in prior.components() {
        match c {
            PriorComponent::Atom { value, weight } => total += weight * f(value),
            PriorComponent::Gaussian { variance, weight } => {
                let sd = variance.sqrt();
                let v = hermite_adaptive(DEFAULT_HERMITE_NODES, TOL, |z| f(sd * z)).ok_or(
                    SignalError::QuadratureBudgetExceeded {
                        tol: TOL,
                        max_nodes: crate::quadrature::MAX_HERMITE_NODES,
                    },
                )?;
                total += weight * v;
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub indices: Vec<usize>,
    pub prior: ScalarPrior,
    /// Asymptotic fraction of samples in this block.
    pub fraction: f64,
}

/// Partition of `[N]` into blocks with per-block priors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSignalModel {
    n: usize,
    blocks: Vec<Block>,
    owner: Vec<usize>,
    field: Field,
}

/// Config form of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub frac: f64,
    #[serde(flatten)]
    pub prior: ScalarPrior,
}

/// Config form of the signal model: `{"blocks": [{"frac": 0.5, "prior": "bernoulli_gauss", "mu": 0.1}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub field: Field,
}

impl SignalConfig {
    pub fn validate(&self, path: &str) -> Result<(), SignalError> {
        if self.blocks.is_empty() {
            return Err(SignalError::invalid(format!("{path}.blocks"), "at least one block is required"));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            let p = format!("{path}.blocks[{j}]");
            if !(b.frac.is_finite() && b.frac > 0.0) {
                return Err(SignalError::invalid(format!("{p}.frac"), format!("must be > 0, got {}", b.frac)));
            }
            b.prior.validate(&p)?;
        }
        let total: f64 = self.blocks.iter().map(|b| b.frac).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SignalError::invalid(
                format!("{path}.blocks"),
                format!("fractions must sum to 1, got {total}"),
            ));
        }
        Ok(())
    }

    /// `(fraction, prior)` pairs describing the large-system law.
    pub fn laws(&self) -> Vec<(f64, ScalarPrior)> {
        self.blocks.iter().map(|b| (b.frac, b.prior)).collect()
    }
}

impl BlockSignalModel {
    /// Builds a model from explicit index sets; they must partition `[n]`.
    pub fn new(n: usize, blocks: Vec<Block>, field: Field) -> Result<Self, SignalError> {
        if n == 0 {
            return Err(SignalError::invalid("signal.n", "must be >= 1"));
        }
        if blocks.is_empty() {
            return Err(SignalError::invalid("signal.blocks", "at least one block is required"));
        }
        let mut owner = vec![usize::MAX; n];
        for (j, b) in blocks.iter().enumerate() {
            b.prior.validate(&format!("signal.blocks[{j}]"))?;
            for &i in &b.indices {
                if i >= n {
                    return Err(SignalError::invalid(format!("signal.blocks[{j}]"), format!("index {i} >= n = {n}")));
                }
                if owner[i] != usize::MAX {
                    return Err(SignalError::invalid(
                        format!("signal.blocks[{j}]"),
                        format!("index {i} already belongs to block {}", owner[i]),
                    ));
                }
                owner[i] = j;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(SignalError::invalid("signal.blocks", format!("index {i} is not covered by any block")));
        }
        Ok(Self { n, blocks, owner, field })
    }

    /// Contiguous blocks with sizes `round(cumulative fraction * n)`.
    pub fn from_config(n: usize, cfg: &SignalConfig) -> Result<Self, SignalError> {
        cfg.validate("signal")?;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut cum = 0.0;
        let mut start = 0usize;
        for (j, b) in cfg.blocks.iter().enumerate() {
            cum += b.frac;
            let end = if j + 1 == cfg.blocks.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
            if end <= start {
                return Err(SignalError::invalid(
                    format!("signal.blocks[{j}].frac"),
                    format!("block is empty at n = {n}"),
                ));
            }
            blocks.push(Block { indices: (start..end).collect(), prior: b.prior, fraction: b.frac });
            start = end;
        }
        Self::new(n, blocks, cfg.field)
    }

    pub fn from_fractions(n: usize, laws: &[(f64, ScalarPrior)]) -> Result<Self, SignalError> {
        let cfg = SignalConfig {
            blocks: laws.iter().map(|&(frac, prior)| BlockConfig { frac, prior }).collect(),
            field: Field::Real,
        };
        Self::from_config(n, &cfg)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn field(&self) -> Field {
        self.field
    }

    /// Index of the block holding sample `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.owner[i]
    }

    /// `(fraction, prior)` per block.
    pub fn laws(&self) -> Vec<(f64, ScalarPrior)> {
        self.blocks.iter().map(|b| (b.fraction, b.prior)).collect()
    }

    /// Draws a signal; each entry is independent from its block's prior.
    pub fn sample_signal(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.n).map(|i| self.blocks[self.owner[i]].prior.sample(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg(mu: f64) -> ScalarPrior {
        ScalarPrior::BernoulliGauss { mu, variance: 1.0 }
    }

    #[test]
    fn bpsk_support() {
        let m = BlockSignalModel::from_fractions(4, &[(1.0, ScalarPrior::Bpsk)]).unwrap();
        for seed in 0..20 {
            assert!(m.sample_signal(seed).iter().all(|&x| x == 1.0 || x == -1.0));
        }
    }

    #[test]
    fn zero_sparsity_block_is_zero() {
        let m = BlockSignalModel::from_fractions(100, &[(0.5, bg(0.0)), (0.5, bg(0.5))]).unwrap();
        let x = m.sample_signal(3);
        assert!(m.blocks()[0].indices.iter().all(|&i| x[i] == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = BlockSignalModel::from_fractions(64, &[(0.25, bg(0.2)), (0.75, ScalarPrior::Bpsk)]).unwrap();
        assert_eq!(m.sample_signal(11), m.sample_signal(11));
        assert_ne!(m.sample_signal(11), m.sample_signal(12));
    }

    #[test]
    fn expectations() {
        let v = prior_expectation(&ScalarPrior::Bpsk, |x| x * x).unwrap();
        assert_eq!(v, 1.0);
        let v = prior_expectation(&ScalarPrior::BernoulliGauss { mu: 0.3, variance: 1.0 }, |x| x * x).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        let v = prior_expectation(&ScalarPrior::Gauss { variance: 2.0 }, |x| x.powi(4)).unwrap();
        assert!((v - 12.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_fourth_moment_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ScalarPrior::Gauss { variance: 2.0 };
        let n = 400_000;
        let m4: f64 = (0..n).map(|_| p.sample(&mut rng).powi(4)).sum::<f64>() / n as f64;
        // sd of x^4 with var 2 is sqrt(105*16 - 144) ~ 39.2
        assert!((m4 - 12.0).abs() < 4.0 * 39.2 / (n as f64).sqrt());
    }

    #[test]
    fn constant_expectation_is_one() {
        for p in [bg(0.37), ScalarPrior::Bpsk, ScalarPrior::Gauss { variance: 3.0 }] {
            let v = prior_expectation(&p, |_| 1.0).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn discontinuous_integrand_exhausts_budget() {
        let r = prior_expectation(&ScalarPrior::Gauss { variance: 1.0 }, |x| if x > 0.3 { 1.0 } else { 0.0 });
        assert!(matches!(r, Err(SignalError::QuadratureBudgetExceeded { .. })));
    }

    #[test]
    fn partition_validation() {
        let p = ScalarPrior::Bpsk;
        let overlap = vec![
            Block { indices: vec![0, 1], prior: p, fraction: 0.5 },
            Block { indices: vec![1, 2], prior: p, fraction: 0.5 },
        ];
        assert!(BlockSignalModel::new(3, overlap, Field::Real).is_err());
        let gap = vec![Block { indices: vec![0, 2], prior: p, fraction: 1.0 }];
        assert!(BlockSignalModel::new(3, gap, Field::Real).is_err());
        let ok = vec![
            Block { indices: vec![0, 2], prior: p, fraction: 0.5 },
            Block { indices: vec![1], prior: p, fraction: 0.5 },
        ];
        let m = BlockSignalModel::new(3, ok, Field::Real).unwrap();
        assert_eq!(m.block_of(1), 1);
    }

    #[test]
    fn config_parsing_and_paths() {
        let cfg: SignalConfig = serde_json::from_str(
            r#"{"blocks":[{"frac":0.5,"prior":"bernoulli_gauss","mu":0.1},{"frac":0.5,"prior":"bpsk"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.blocks[0].prior, bg(0.1));
        let m = BlockSignalModel::from_config(10, &cfg).unwrap();
        assert_eq!(m.blocks()[0].indices, (0..5).collect::<Vec<_>>());
        let bad: SignalConfig =
            serde_json::from_str(r#"{"blocks":[{"frac":0.5,"prior":"bernoulli_gauss","mu":1.5},{"frac":0.5,"prior":"bpsk"}]}"#)
                .unwrap();
        let err = bad.validate("signal").unwrap_err().to_string();
        assert!(err.starts_with("signal.blocks[0].mu"), "{err}");
        let sum: SignalConfig = serde_json::from_str(r#"{"blocks":[{"frac":0.4,"prior":"bpsk"}]}"#).unwrap();
        assert!(sum.validate("signal").is_err());
    }
}
