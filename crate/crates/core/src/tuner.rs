//! Choosing `lambda` and block weights by minimizing predicted distortion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoupled::DistortionSpec;
use crate::replica::{predict, ReplicaOptions, ReplicaProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("no parameter value on the search grid produced a converged prediction")]
    AllSolvesFailed,
    #[error("invalid tuning request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneOptions {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grid_points: usize,
    /// Relative tolerance on the returned argument.
    pub rel_tol: f64,
    /// Number of best grid points used as golden-section starts.
    pub starts: usize,
    pub max_cycles: usize,
    pub cycle_tol: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            lambda_min: 1e-4,
            lambda_max: 1e3,
            grid_points: 25,
            rel_tol: 1e-4,
            starts: 3,
            max_cycles: 50,
            cycle_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub lambda_star: f64,
    pub weights_star: Vec<f64>,
    pub distortion_star: f64,
    pub trace: Vec<TraceEntry>,
    /// `|dD/dlambda|` at the optimum by central difference with step `1e-3 lambda`.
    pub gradient: f64,
    /// The optimum sits on an end of the search range.
    pub boundary: bool,
}

impl TuningResult {
    /// `|dD/dlambda| <= rel * D`
    pub fn is_stationary(&self, rel: f64) -> bool {
        self.gradient <= rel * self.distortion_star
    }
}

/// Minimizer of a scalar objective over `[lo, hi]` on a log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMinimum {
    pub argmin: f64,
    pub value: f64,
    pub boundary: bool,
    pub evaluations: Vec<(f64, f64)>,
}

fn golden_log(f: &dyn Fn(f64) -> Option<f64>, lo: f64, hi: f64, rel_tol: f64, evals: &mut Vec<(f64, f64)>) -> Option<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut eval = |t: f64| -> f64 {
        let x = t.exp();
        let v = f(x).unwrap_or(f64::INFINITY);
        if v.is_finite() {
            evals.push((x, v));
        }
        v
    };
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    while b - a > rel_tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = eval(x2);
        }
    }
    let (x, v) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    v.is_finite().then(|| (x.exp(), v))
}

/// Log-spaced grid, then golden section from the best `starts` grid points,
/// each bracketed by its grid neighbours. Grid evaluations run in parallel.
pub fn minimize_log_scalar(
    f: &(dyn Fn(f64) -> Option<f64> + Sync),
    lo: f64,
    hi: f64,
    grid_points: usize,
    starts: usize,
    rel_tol: f64,
) -> Result<ScalarMinimum, TuneError> {
    if !(lo > 0.0 && hi > lo && grid_points >= 3) {
        return Err(TuneError::Invalid(format!("bad search range [{lo}, {hi}] with {grid_points} points")));
    }
    let (l0, l1) = (lo.ln(), hi.ln());
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| {
            if i == grid_points - 1 {
                hi
            } else {
                (l0 + (l1 - l0) * i as f64 / (grid_points - 1) as f64).exp()
            }
        })
        .collect();
    let values: Vec<Option<f64>> = grid.par_iter().map(|&x| f(x).filter(|v| v.is_finite())).collect();
    let mut evaluations: Vec<(f64, f64)> =
        grid.iter().zip(&values).filter_map(|(&x, v)| v.map(|v| (x, v))).collect();
    if evaluations.is_empty() {
        return Err(TuneError::AllSolvesFailed);
    }
    let mut order: Vec<usize> = (0..grid_points).filter(|&i| values[i].is_some()).collect();
    order.sort_by(|&i, &j| values[i].unwrap().total_cmp(&values[j].unwrap()));
    let mut best = (grid[order[0]], values[order[0]].unwrap());
    for &i in order.iter().take(starts.max(1)) {
        let a = grid[i.saturating_sub(1)];
        let b = grid[(i + 1).min(grid_points - 1)];
        if let Some((x, v)) = golden_log(f, a, b, rel_tol, &mut evaluations) {
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    let boundary = (best.0 / lo).ln() <= 2.0 * rel_tol || (hi / best.0).ln() <= 2.0 * rel_tol;
    Ok(ScalarMinimum { argmin: best.0, value: best.1, boundary, evaluations })
}

fn distortion_at(problem: &ReplicaProblem, opts: &ReplicaOptions, d: &DistortionSpec) -> Option<f64> {
    predict(problem, opts, d).ok().map(|(_, v)| v)
}

/// Central-difference `|dD/dlambda|` with step `1e-3 lambda`.
pub fn lambda_gradient(f: &dyn Fn(f64) -> Option<f64>, lambda: f64) -> f64 {
    let h = 1e-3 * lambda;
    match (f(lambda + h), f(lambda - h)) {
        (Some(a), Some(b)) => ((a - b) / (2.0 * h)).abs(),
        _ => f64::INFINITY,
    }
}

/// Tunes `lambda` with the block weights held fixed.
pub fn tune_lambda(
    problem: &ReplicaProblem,
    replica: &ReplicaOptions,
    d: &DistortionSpec,
    opts: &TuneOptions,
) -> Result<TuningResult, TuneError> {
    let f = |lam: f64| distortion_at(&problem.with_lambda(lam), replica, d);
    let m = minimize_log_scalar(&f, opts.lambda_min, opts.lambda_max, opts.grid_points, opts.starts, opts.rel_tol)?;
    let weights = problem.weights();
    let trace = m
        .evaluations
        .iter()
        .map(|&(lambda, distortion)| TraceEntry { lambda, weights: weights.clone(), distortion })
        .collect();
    Ok(TuningResult {
        lambda_star: m.argmin,
        weights_star: weights,
        distortion_star: m.value,
        trace,
        gradient: lambda_gradient(&f, m.argmin),
        boundary: m.boundary,
    })
}

/// Cyclic coordinate descent over `(w_2, ..., w_J, lambda)` with `w_1 = 1`:
/// scaling every weight and `lambda` together leaves the estimator unchanged,
/// so one weight is redundant.
pub fn tune_weights(
    problem: &ReplicaProblem,
    replica: &ReplicaOptions,
    d: &DistortionSpec,
    opts: &TuneOptions,
) -> Result<TuningResult, TuneError> {
    let mut base = tune_lambda(&problem.with_weights(&vec![1.0; problem.blocks.len()]), replica, d, opts)?;
    let mut lambda = base.lambda_star;
    let mut weights = base.weights_star.clone();
    let mut best = base.distortion_star;
    let mut trace = std::mem::take(&mut base.trace);
    let j = weights.len();
    for _cycle in 0..opts.max_cycles {
        let start = best;
        for k in 1..j {
            let f = |w: f64| {
                let mut ws = weights.clone();
                ws[k] = w;
                distortion_at(&problem.with_weights(&ws).with_lambda(lambda), replica, d)
            };
            let cur = weights[k];
            if let Ok(m) = minimize_log_scalar(&f, cur * 1e-2, cur * 1e2, 9, 2, opts.rel_tol * 1e-2) {
                for &(w, v) in &m.evaluations {
                    let mut ws = weights.clone();
                    ws[k] = w;
                    trace.push(TraceEntry { lambda, weights: ws, distortion: v });
                }
                if m.value < best {
                    best = m.value;
                    weights[k] = m.argmin;
                }
            }
        }
        let f = |lam: f64| distortion_at(&problem.with_weights(&weights).with_lambda(lam), replica, d);
        if let Ok(m) = minimize_log_scalar(&f, lambda * 1e-2, lambda * 1e2, 9, 2, opts.rel_tol * 1e-2) {
            for &(lam, v) in &m.evaluations {
                trace.push(TraceEntry { lambda: lam, weights: weights.clone(), distortion: v });
            }
            if m.value < best {
                best = m.value;
                lambda = m.argmin;
            }
        }
        if start - best <= opts.cycle_tol * best.abs() {
            break;
        }
    }
    let f = |lam: f64| distortion_at(&problem.with_weights(&weights).with_lambda(lam), replica, d);
    let gradient = lambda_gradient(&f, lambda);
    let boundary = lambda <= opts.lambda_min * (1.0 + opts.rel_tol) || lambda >= opts.lambda_max * (1.0 - opts.rel_tol);
    Ok(TuningResult { lambda_star: lambda, weights_star: weights, distortion_star: best, trace, gradient, boundary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_minimum() {
        let f = |x: f64| Some((x.ln() - 1.5).powi(2) + 0.25);
        let m = minimize_log_scalar(&f, 1e-4, 1e3, 25, 3, 1e-6).unwrap();
        assert!((m.argmin.ln() - 1.5).abs() < 1e-5);
        assert!(!m.boundary);
        assert!(m.evaluations.iter().all(|&(_, v)| v >= m.value));
    }

    #[test]
    fn flags_boundary() {
        let f = |x: f64| Some(x);
        let m = minimize_log_scalar(&f, 1e-4, 1e3, 25, 3, 1e-4).unwrap();
        assert!(m.boundary);
        assert!(m.argmin < 1.001e-4);
    }

    #[test]
    fn all_failed() {
        let f = |_: f64| None;
        assert_eq!(minimize_log_scalar(&f, 1e-4, 1e3, 25, 3, 1e-4).unwrap_err(), TuneError::AllSolvesFailed);
    }
}
