//! Gauss rules used by the expectation backends.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Node count of the default Gauss–Hermite rule.
pub const DEFAULT_HERMITE_NODES: usize = 61;
/// Largest Hermite rule the adaptive doubling may reach.
pub const MAX_HERMITE_NODES: usize = 61 * 8;

#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn hermite_cache() -> &'static Mutex<HashMap<usize, &'static Rule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static Rule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn legendre_cache() -> &'static Mutex<HashMap<usize, &'static Rule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static Rule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Gauss–Hermite rule for the standard normal weight: `E f(Z) ~ sum w_i f(x_i)`.
///
/// Rules are computed once per size and leaked into a process-wide cache.
pub fn hermite_rule(n: usize) -> &'static Rule {
    let mut cache = hermite_cache().lock().expect("quadrature cache poisoned");
    *cache.entry(n).or_insert_with(|| Box::leak(Box::new(compute_hermite(n))))
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn legendre_rule(n: usize) -> &'static Rule {
    let mut cache = legendre_cache().lock().expect("quadrature cache poisoned");
    *cache.entry(n).or_insert_with(|| Box::leak(Box::new(compute_legendre(n))))
}

// Eigenvalues of the Hermite Jacobi matrix (weight e^{-x^2}) by Sturm
// bisection, polished by Newton on the orthonormal functions p_k(x) e^{-x^2/2}
// so nothing overflows for large n. Rescaled to the N(0,1) weight at the end.
fn compute_hermite(n: usize) -> Rule {
    assert!(n >= 1);
    let off2: Vec<f64> = (1..n).map(|k| k as f64 / 2.0).collect();
    // number of eigenvalues below x
    let count = |x: f64| -> usize {
        let mut c = 0;
        let mut q = -x;
        if q < 0.0 {
            c += 1;
        }
        for &b2 in &off2 {
            let prev = if q == 0.0 { f64::EPSILON } else { q };
            q = -x - b2 / prev;
            if q < 0.0 {
                c += 1;
            }
        }
        c
    };
    // (psi_{n-1}, psi_n) at x
    let functions = |x: f64| -> (f64, f64, f64) {
        let mut p1 = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
        let mut p0 = 0.0;
        let mut sum = p1 * p1;
        for j in 0..n {
            let jf = j as f64;
            let p2 = x * (2.0 / (jf + 1.0)).sqrt() * p1 - (jf / (jf + 1.0)).sqrt() * p0;
            p0 = p1;
            p1 = p2;
            if j + 1 < n {
                sum += p1 * p1;
            }
        }
        (p0, p1, sum)
    };
    let bound = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let (mut a, mut b) = (-bound, bound);
        while b - a > 1e-13 * b.abs().max(a.abs()).max(1.0) {
            let mid = 0.5 * (a + b);
            if count(mid) > i {
                b = mid;
            } else {
                a = mid;
            }
        }
        let mut x = 0.5 * (a + b);
        for _ in 0..3 {
            let (pm, pn, _) = functions(x);
            if pm == 0.0 {
                break;
            }
            let step = pn / ((2.0 * n as f64).sqrt() * pm);
            if step.is_finite() && step.abs() < 1e-10 * x.abs().max(1.0) {
                x -= step;
            }
        }
        let (_, _, sum) = functions(x);
        // Christoffel weight e^{-x^2} / sum p_k^2 = 1 / sum psi_k^2, normalized by sqrt(pi)
        nodes.push(x * std::f64::consts::SQRT_2);
        weights.push((-x * x).exp() / sum / std::f64::consts::PI.sqrt());
    }
    Rule { nodes, weights }
}

fn compute_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    Rule { nodes, weights }
}

/// `E f(Z)` for `Z ~ N(0, 1)` with a fixed Hermite rule.
pub fn hermite_expectation(n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let rule = hermite_rule(n);
    rule.nodes.iter().zip(&rule.weights).map(|(&x, &w)| w * f(x)).sum()
}

/// `E f(Z)` with the Hermite rule doubled from `start` nodes until two
/// consecutive rules agree to `tol`. Returns `None` if the budget runs out.
pub fn hermite_adaptive(start: usize, tol: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    let mut n = start;
    let mut prev = hermite_expectation(n, &f);
    while n * 2 <= MAX_HERMITE_NODES {
        n *= 2;
        let next = hermite_expectation(n, &f);
        if (next - prev).abs() <= tol * next.abs().max(1.0) {
            return Some(next);
        }
        prev = next;
    }
    None
}

/// Fixed Gauss–Legendre integral over a finite interval.
pub fn legendre_integral(n: usize, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let rule = legendre_rule(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    half * rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&x, &w)| w * f(mid + half * x))
        .sum::<f64>()
}

/// Globally adaptive Gauss–Legendre: the subinterval with the largest error
/// estimate is bisected until the summed estimate drops below
/// `max(tol, 1e-15 |integral|)` or 4000 subintervals are in use.
pub fn legendre_adaptive(a: f64, b: f64, tol: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    struct Seg {
        a: f64,
        b: f64,
        value: f64,
        err: f64,
    }
    let eval = |a: f64, b: f64| -> Seg {
        let fine = legendre_integral(20, a, b, f);
        let coarse = legendre_integral(10, a, b, f);
        Seg { a, b, value: fine, err: (fine - coarse).abs() }
    };
    let mut segs = vec![eval(a, b)];
    for _ in 0..4000 {
        let total: f64 = segs.iter().map(|s| s.value).sum();
        let err: f64 = segs.iter().map(|s| s.err).sum();
        if err <= tol.max(1e-15 * total.abs()) {
            break;
        }
        let (worst, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .expect("non-empty");
        let seg = segs.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if !(mid > seg.a && mid < seg.b) {
            segs.push(seg);
            break;
        }
        segs.push(eval(seg.a, mid));
        segs.push(eval(mid, seg.b));
    }
    segs.iter().map(|s| s.value).sum()
}
