//! Finite-size solvers for
//!
//! ```text
//! minimize_v  (1/lambda) ||y - A v||^2 + sum_n u_{j(n)}(v_n)   over v in X^N
//! ```
//!
//! [`gamp_solve`] is max-sum GAMP with scalar variances; [`reference_solve`]
//! is restarted FISTA and serves as ground truth; [`kkt_check`] measures
//! first-order optimality of any candidate.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::penalty::{normal_cone, PenaltyError, PenaltySpec};
use crate::signal::BlockSignalModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("penalty block {block} is not convex")]
    Nonconvex { block: usize },
    #[error("message passing needs an i.i.d. matrix; got the `{0}` model")]
    UnsupportedMatrix(String),
    #[error("estimate diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("no convergence after {} iterations (kkt residual {:e})", report.iterations, report.kkt)]
    NonConvergence { estimate: Vec<f64>, report: SolveReport, trace: Vec<TraceRecord> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub kkt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    /// `||x_new - x_old|| / ||x_new||` for the undamped proposal `x_new`.
    pub change: f64,
    /// Per-coordinate squared error against the true signal when known.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GampState {
    pub estimate: Vec<f64>,
    /// Scalar input-side variance.
    pub tau_x: f64,
    /// Output-side residual; carries the Onsager memory.
    pub s_hat: Vec<f64>,
    pub tau_s: f64,
    /// Damping factor in use when the iteration stopped.
    pub damping: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    #[default]
    Iid,
    RowOrthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GampOptions {
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Declared model of the matrix; only i.i.d. matrices are accepted.
    pub matrix: MatrixKind,
    /// True signal, used only to record the MSE trace.
    pub truth: Option<Vec<f64>>,
}

impl Default for GampOptions {
    fn default() -> Self {
        Self { damping: 0.7, max_iter: 1000, tol: 1e-8, matrix: MatrixKind::Iid, truth: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { max_iter: 100_000, kkt_tol: 1e-10 }
    }
}

const MIN_DAMPING: f64 = 0.05;
const WINDOW: usize = 10;
const RECOVERY: usize = 20;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `A v`; row-major matrices take a contiguous fast path.
pub(crate) fn mul(a: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    match a.as_slice() {
        Some(data) if a.ncols() > 0 => data.chunks_exact(a.ncols()).map(|row| dot(row, v)).collect(),
        _ => a.dot(&ArrayView1::from(v)).to_vec(),
    }
}

/// `A^T r`
pub(crate) fn mul_t(a: &Array2<f64>, r: &[f64]) -> Vec<f64> {
    match a.as_slice() {
        Some(data) if a.ncols() > 0 => {
            let mut out = vec![0.0; a.ncols()];
            for (row, &ri) in data.chunks_exact(a.ncols()).zip(r) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += ri * x;
                }
            }
            out
        }
        _ => a.t().dot(&ArrayView1::from(r)).to_vec(),
    }
}

/// `(A v, A^T (y - A v))` in one sweep over the rows of a row-major matrix.
fn residual_gradient(a: &Array2<f64>, y: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match a.as_slice() {
        Some(data) if a.ncols() > 0 => {
            let mut av = Vec::with_capacity(a.nrows());
            let mut g = vec![0.0; a.ncols()];
            for (row, &yi) in data.chunks_exact(a.ncols()).zip(y) {
                let ai = dot(row, v);
                av.push(ai);
                let ri = yi - ai;
                for (o, &x) in g.iter_mut().zip(row) {
                    *o += ri * x;
                }
            }
            (av, g)
        }
        _ => {
            let av = mul(a, v);
            let r: Vec<f64> = y.iter().zip(&av).map(|(yi, ai)| yi - ai).collect();
            let g = mul_t(a, &r);
            (av, g)
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_inputs(a: &Array2<f64>, y: &[f64], penalty: &PenaltySpec, model: &BlockSignalModel) -> Result<(), SolverError> {
    penalty.validate("penalty")?;
    penalty.check_model(model)?;
    let (m, n) = a.dim();
    if y.len() != m {
        return Err(SolverError::Dimension(format!("y has length {}, A has {m} rows", y.len())));
    }
    if model.n() != n {
        return Err(SolverError::Dimension(format!("signal model has N = {}, A has {n} columns", model.n())));
    }
    for (j, b) in penalty.blocks.iter().enumerate() {
        let (l1, l2) = b.coefficients();
        if !(b.family.is_convex() && l1 >= 0.0 && l2 >= 0.0) {
            return Err(SolverError::Nonconvex { block: j });
        }
    }
    Ok(())
}

/// `(1/lambda) ||y - A v||^2 + sum_n u(v_n)`
pub fn objective(
    a: &Array2<f64>,
    y: &[f64],
    penalty: &PenaltySpec,
    model: &BlockSignalModel,
    v: &[f64],
) -> Result<f64, SolverError> {
    let av = mul(a, v);
    let fit: f64 = y.iter().zip(&av).map(|(yi, ai)| (yi - ai) * (yi - ai)).sum();
    Ok(fit / penalty.lambda + penalty.total_penalty(v, model)?)
}

fn interval_distance(g: f64, (lo, hi): (f64, f64)) -> f64 {
    if g < lo {
        lo - g
    } else if g > hi {
        g - hi
    } else {
        0.0
    }
}

fn kkt_from_gradient(g: &[f64], penalty: &PenaltySpec, model: &BlockSignalModel, v: &[f64]) -> f64 {
    let half = 0.5 * penalty.lambda;
    let mut worst = 0.0f64;
    for (i, (&gi, &vi)) in g.iter().zip(v).enumerate() {
        let (s_lo, s_hi) = penalty.blocks[model.block_of(i)].subdifferential(vi);
        let (c_lo, c_hi) = normal_cone(penalty.support, vi);
        let set = (half * (s_lo + c_lo), half * (s_hi + c_hi));
        worst = worst.max(interval_distance(gi, set));
    }
    worst
}

/// Largest distance between `A^T (y - A v)` and `(lambda/2) (du(v_n) + N_X(v_n))`.
///
/// This is zero exactly at minimizers. Infeasible points get `+inf`.
pub fn kkt_check(
    a: &Array2<f64>,
    y: &[f64],
    penalty: &PenaltySpec,
    model: &BlockSignalModel,
    v: &[f64],
) -> Result<f64, SolverError> {
    check_inputs(a, y, penalty, model)?;
    if v.len() != model.n() {
        return Err(SolverError::Dimension(format!("estimate has length {}, expected {}", v.len(), model.n())));
    }
    if v.iter().any(|&x| !penalty.support.contains(x)) {
        return Ok(f64::INFINITY);
    }
    let (_, g) = residual_gradient(a, y, v);
    Ok(kkt_from_gradient(&g, penalty, model, v))
}

fn prox_all(penalty: &PenaltySpec, model: &BlockSignalModel, r: &[f64], c: f64) -> Vec<f64> {
    r.iter()
        .enumerate()
        .map(|(i, &ri)| penalty.blocks[model.block_of(i)].prox(ri, c, penalty.support))
        .collect()
}

/// Max-sum GAMP for the objective above with a scalar-variance approximation.
///
/// The output channel is Gaussian with variance `lambda / 2`, so its denoiser
/// is linear; the input denoiser is the block prox with multiplier `tau_r`.
/// The damping factor halves when the estimate change grows twice in a row
/// without net progress over ten iterations, and creeps back after a calm
/// stretch of 20 iterations.
///
/// The output step is row-local, so each iteration makes a single sweep over
/// `A` that forms `A x_new`, the damped residual `s_hat` and `A^T s_hat`.
pub fn gamp_solve(
    a: &Array2<f64>,
    y: &[f64],
    penalty: &PenaltySpec,
    model: &BlockSignalModel,
    opts: &GampOptions,
) -> Result<(GampState, SolveReport), SolverError> {
    if opts.matrix != MatrixKind::Iid {
        return Err(SolverError::UnsupportedMatrix("row_orthogonal".into()));
    }
    check_inputs(a, y, penalty, model)?;
    let owned;
    let a = if a.is_standard_layout() {
        a
    } else {
        owned = a.as_standard_layout().into_owned();
        &owned
    };
    let (m, n) = a.dim();
    let data = a.as_slice().expect("standard layout");
    let frob = data.iter().map(|x| x * x).sum::<f64>();
    let (row_energy, col_energy) = (frob / m as f64, frob / n as f64);
    let gamma = 0.5 * penalty.lambda;
    let y_norm = norm2(y).sqrt();

    // Everything the output step needs from one sweep.
    struct Sweep {
        fit: f64,
        s_diff: f64,
        s_norm: f64,
        ats: Vec<f64>,
    }
    // `ax` holds A x for the damped iterate; `x_new` is the fresh prox output
    // whose image is mixed in with weight `beta_x`. `s_hat` is damped with
    // `beta_s` towards the undamped output.
    let sweep = |x_new: &[f64], ax: &mut [f64], s_hat: &mut [f64], beta_x: f64, beta_s: f64, tau_p: f64| -> Sweep {
        let mut out = Sweep { fit: 0.0, s_diff: 0.0, s_norm: 0.0, ats: vec![0.0; n] };
        let denom = gamma + tau_p;
        for (i, row) in data.chunks_exact(n.max(1)).enumerate().take(m) {
            let fresh = if n > 0 { dot(row, x_new) } else { 0.0 };
            out.fit += (y[i] - fresh) * (y[i] - fresh);
            ax[i] = beta_x * fresh + (1.0 - beta_x) * ax[i];
            // Onsager-corrected output estimate and linear output denoiser.
            let s_new = (y[i] - (ax[i] - tau_p * s_hat[i])) / denom;
            out.s_diff += (s_new - s_hat[i]) * (s_new - s_hat[i]);
            out.s_norm += s_new * s_new;
            let s = beta_s * s_new + (1.0 - beta_s) * s_hat[i];
            s_hat[i] = s;
            for (o, &v) in out.ats.iter_mut().zip(row) {
                *o += s * v;
            }
        }
        out
    };

    let mut x = vec![0.0; n];
    let mut ax = vec![0.0; m];
    let mut tau_x = (norm2(y) / frob).max(1e-12);
    let mut s_hat = vec![0.0; m];
    // The first output step is undamped.
    let first = sweep(&x, &mut ax, &mut s_hat, 1.0, 1.0, row_energy * tau_x);
    let mut ats = first.ats;
    let mut tau_s = 1.0 / (gamma + row_energy * tau_x);
    let mut beta = opts.damping;
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut increases = 0;
    let mut calm = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;

    for it in 1..=opts.max_iter {
        let tau_r = 1.0 / (col_energy * tau_s);
        let r: Vec<f64> = x.iter().zip(&ats).map(|(xi, gi)| xi + tau_r * gi).collect();
        let x_new = prox_all(penalty, model, &r, tau_r);
        let slope = r
            .iter()
            .enumerate()
            .map(|(i, &ri)| penalty.blocks[model.block_of(i)].prox_derivative(ri, tau_r, penalty.support))
            .sum::<f64>()
            / n as f64;
        let tau_x_new = tau_r * slope;

        // Changes are measured on the undamped proposals, so a small damping
        // factor cannot fake convergence.
        let diff = x_new.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let xn_new = norm2(&x_new).sqrt();
        let change = if xn_new > 0.0 { diff / xn_new } else { diff };

        let beta_x = beta;
        for (xi, xn) in x.iter_mut().zip(&x_new) {
            *xi = beta_x * xn + (1.0 - beta_x) * *xi;
        }
        // Damping of a feasible point with the previous one stays feasible.
        tau_x = (beta_x * tau_x_new + (1.0 - beta_x) * tau_x).max(1e-300);
        let xn = norm2(&x).sqrt();
        if !xn.is_finite() || xn > 1e8 * y_norm.max(f64::MIN_POSITIVE) {
            return Err(SolverError::Diverged { iteration: it });
        }

        // Divergence guard: two consecutive increases of the change with no
        // net progress over the last `WINDOW` iterations halve the damping
        // factor. Contracting iterations often oscillate, so a bare increase
        // is not evidence of divergence. A calm stretch lets it recover.
        let stalled = it > WINDOW && change >= trace[trace.len() - WINDOW].change;
        if change > last_change {
            increases += 1;
            if increases >= 2 && stalled {
                beta = (0.5 * beta).max(MIN_DAMPING);
                increases = 0;
                calm = 0;
            }
        } else {
            increases = 0;
        }
        if stalled {
            calm = 0;
        } else {
            calm += 1;
            if calm >= RECOVERY && beta < opts.damping {
                beta = (1.25 * beta).min(opts.damping);
                calm = 0;
            }
        }
        last_change = change;

        let tau_p = row_energy * tau_x;
        let sw = sweep(&x_new, &mut ax, &mut s_hat, beta_x, beta, tau_p);
        ats = sw.ats;
        tau_s = beta / (gamma + tau_p) + (1.0 - beta) * tau_s;

        // The reported estimate is the prox output, which has exact zeros and
        // boundary values; the damped iterate only drives the recursion.
        let obj = sw.fit / penalty.lambda + penalty.total_penalty(&x_new, model)?;
        let mse = opts
            .truth
            .as_ref()
            .map(|t| t.iter().zip(&x_new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64);
        trace.push(TraceRecord { iteration: it, objective: obj, change, mse });
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, x_new.clone()));
        }

        let s_norm = sw.s_norm.sqrt();
        let s_change = if s_norm > 0.0 { sw.s_diff.sqrt() / s_norm } else { sw.s_diff.sqrt() };
        if it > 1 && change <= opts.tol && s_change <= opts.tol {
            let kkt = kkt_check(a, y, penalty, model, &x_new)?;
            let report = SolveReport { converged: true, iterations: it, objective: obj, kkt };
            let state = GampState { estimate: x_new, tau_x, s_hat, tau_s, damping: beta, iterations: it, trace };
            return Ok((state, report));
        }
    }
    let (obj, estimate) = best.expect("at least one iteration");
    let kkt = kkt_check(a, y, penalty, model, &estimate)?;
    Err(SolverError::NonConvergence {
        estimate,
        report: SolveReport { converged: false, iterations: opts.max_iter, objective: obj, kkt },
        trace,
    })
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta`, by Sturm-count bisection.
fn tridiagonal_top(alpha: &[f64], beta: &[f64]) -> f64 {
    let k = alpha.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = if i > 0 { beta[i - 1].abs() } else { 0.0 } + if i + 1 < k { beta[i].abs() } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    // Number of eigenvalues strictly below `x`.
    let below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..k {
            let off = if i > 0 { beta[i - 1] * beta[i - 1] } else { 0.0 };
            d = alpha[i] - x - off / d;
            if d == 0.0 {
                d = -f64::EPSILON * (x.abs() + 1.0);
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) < k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Largest singular value squared of `A`: Lanczos on `A^T A` with full
/// reorthogonalization, stopped once the top Ritz value settles to `rel_tol`.
///
/// Ritz values approach from below, so callers needing an upper bound should
/// add a margin.
pub fn spectral_norm_sq(a: &Array2<f64>, rel_tol: f64) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // A fixed, unstructured start vector; all-ones can be orthogonal to the
    // top eigenvector of structured matrices.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_749_895).fract()).collect();
    let nv = norm2(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let max_steps = n.min(500);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut est = 0.0;
    for _ in 0..max_steps {
        let mut w = mul_t(a, &mul(a, &v));
        let al = dot(&v, &w);
        alpha.push(al);
        basis.push(v);
        // Two passes of Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
        }
        let next = tridiagonal_top(&alpha, &beta);
        let b = norm2(&w).sqrt();
        if b <= 1e-14 * next.abs().max(f64::MIN_POSITIVE) || (next - est).abs() <= rel_tol * next {
            return next.max(0.0);
        }
        est = next;
        beta.push(b);
        v = w.into_iter().map(|x| x / b).collect();
    }
    est.max(0.0)
}

/// FISTA with function-value restart; stops once [`kkt_check`] is below
/// `kkt_tol`.
///
/// Each iteration makes one sweep over `A`: the residual and gradient at the
/// new point come together, and those at the extrapolated point follow by
/// linearity.
pub fn reference_solve(
    a: &Array2<f64>,
    y: &[f64],
    penalty: &PenaltySpec,
    model: &BlockSignalModel,
    opts: &ReferenceOptions,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    check_inputs(a, y, penalty, model)?;
    let n = a.ncols();
    let lam = penalty.lambda;
    // The margin covers the Ritz value approaching from below.
    let lip = (2.0 / lam) * spectral_norm_sq(a, 1e-10) * (1.0 + 1e-3);
    if lip == 0.0 {
        let x = prox_all(penalty, model, &vec![0.0; n], 1.0);
        let obj = objective(a, y, penalty, model, &x)?;
        let kkt = kkt_check(a, y, penalty, model, &x)?;
        return Ok((x, SolveReport { converged: kkt <= opts.kkt_tol, iterations: 0, objective: obj, kkt }));
    }
    let step = 1.0 / lip;
    // Strong convexity of the penalty sets the momentum schedule; with
    // `mu = 0` it is plain FISTA.
    let mu = penalty.blocks.iter().map(|b| b.coefficients().1).fold(f64::INFINITY, f64::min).max(0.0);
    let q = step * mu / (1.0 + step * mu);
    let fval = |ax: &[f64], x: &[f64]| -> Result<f64, SolverError> {
        let fit: f64 = y.iter().zip(ax).map(|(yi, ai)| (yi - ai) * (yi - ai)).sum();
        Ok(fit / lam + penalty.total_penalty(x, model)?)
    };

    let mut x = prox_all(penalty, model, &vec![0.0; n], 1.0);
    let (ax, mut gx) = residual_gradient(a, y, &x);
    let mut f_old = fval(&ax, &x)?;
    let mut kkt = kkt_from_gradient(&gx, penalty, model, &x);
    if kkt <= opts.kkt_tol {
        return Ok((x, SolveReport { converged: true, iterations: 0, objective: f_old, kkt }));
    }
    let mut z = x.clone();
    let mut gz = gx.clone();
    let mut t = 1.0f64;
    let mut plain = false;
    for it in 1..=opts.max_iter {
        let u: Vec<f64> = z.iter().zip(&gz).map(|(zi, gi)| zi + step * (2.0 / lam) * gi).collect();
        let x_new = prox_all(penalty, model, &u, step);
        let (ax_new, g_new) = residual_gradient(a, y, &x_new);
        let f_new = fval(&ax_new, &x_new)?;
        if f_new > f_old && !plain {
            // Restart: drop momentum and take a plain step from x next time.
            // That step cannot increase the objective, so it is accepted even
            // when rounding says otherwise.
            t = 1.0;
            z.clone_from(&x);
            gz.clone_from(&gx);
            plain = true;
            continue;
        }
        plain = false;
        let a_t = 1.0 - q * t * t;
        let t_new = 0.5 * (a_t + (a_t * a_t + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_new * (1.0 + step * mu - t_new * step * mu);
        for i in 0..n {
            z[i] = x_new[i] + mom * (x_new[i] - x[i]);
            gz[i] = g_new[i] + mom * (g_new[i] - gx[i]);
        }
        x = x_new;
        gx = g_new;
        f_old = f_new;
        t = t_new;
        kkt = kkt_from_gradient(&gx, penalty, model, &x);
        if kkt <= opts.kkt_tol {
            return Ok((x, SolveReport { converged: true, iterations: it, objective: f_old, kkt }));
        }
    }
    Err(SolverError::NonConvergence {
        estimate: x,
        report: SolveReport { converged: false, iterations: opts.max_iter, objective: f_old, kkt },
        trace: Vec::new(),
    })
}
