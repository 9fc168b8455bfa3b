//! Gauss-Hermite and Gauss-Legendre quadrature rules.
//!
//! Nodes are found by interlacing bisection on the orthonormal
//! three-term recurrences, weights by the Christoffel function; both are
//! deterministic and need no linear algebra. Used to marginalize
//! continuous noise exactly in estimator checks.

use alloc::vec;
use alloc::vec::Vec;

/// Orthonormal polynomial values p_0..p_n at x for the Hermite weight
/// exp(-x^2).
fn hermite_column(n: usize, x: f64) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0 / libm::sqrt(libm::sqrt(core::f64::consts::PI));
    if n >= 1 {
        p[1] = x * libm::sqrt(2.0) * p[0];
    }
    for k in 1..n {
        let a = libm::sqrt(2.0 / (k as f64 + 1.0));
        let b = libm::sqrt(k as f64 / (k as f64 + 1.0));
        p[k + 1] = a * x * p[k] - b * p[k - 1];
    }
    p
}

/// Orthonormal Legendre values p_0..p_n at x on [-1, 1] with weight 1.
fn legendre_column(n: usize, x: f64) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0 / libm::sqrt(2.0);
    let coef = |k: usize| {
        let k = k as f64;
        (k + 1.0) / libm::sqrt((2.0 * k + 1.0) * (2.0 * k + 3.0))
    };
    if n >= 1 {
        p[1] = x * p[0] / coef(0);
    }
    for k in 1..n {
        p[k + 1] = (x * p[k] - coef(k - 1) * p[k - 1]) / coef(k);
    }
    p
}

/// Zeros of the degree-n member of an orthonormal family, by interlacing
/// bisection: the zeros of degree k+1 strictly interlace those of degree
/// k extended with the interval endpoints.
fn zeros_by_interlacing(n: usize, lo: f64, hi: f64, eval: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let mut prev: Vec<f64> = Vec::new();
    for k in 1..=n {
        let mut brackets = Vec::with_capacity(k + 1);
        brackets.push(lo);
        brackets.extend_from_slice(&prev);
        brackets.push(hi);
        let mut zs = Vec::with_capacity(k);
        for w in brackets.windows(2) {
            let (mut a, mut b) = (w[0], w[1]);
            let fa = eval(k, a);
            debug_assert!(fa * eval(k, b) < 0.0, "bracket must straddle a zero");
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let fm = eval(k, m);
                if fm == 0.0 {
                    a = m;
                    b = m;
                    break;
                }
                if fa * fm < 0.0 {
                    b = m;
                } else {
                    a = m;
                }
                if b - a < 1e-15 * (1.0 + libm::fabs(m)) {
                    break;
                }
            }
            zs.push(0.5 * (a + b));
        }
        prev = zs;
    }
    prev
}

/// Nodes and weights for ∫ exp(-x^2) g(x) dx ≈ Σ w_i g(x_i).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let bound = libm::sqrt(2.0 * n as f64 + 1.0) + 2.0;
    let nodes = zeros_by_interlacing(n, -bound, bound, |k, x| hermite_column(k, x)[k]);
    let weights = nodes
        .iter()
        .map(|&x| {
            let col = hermite_column(n - 1, x);
            1.0 / col.iter().map(|p| p * p).sum::<f64>()
        })
        .collect();
    (nodes, weights)
}

/// Nodes and weights for E[g(Z)] with Z standard normal.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_hermite(n);
    let sqrt2 = libm::sqrt(2.0);
    let inv_sqrt_pi = 1.0 / libm::sqrt(core::f64::consts::PI);
    (
        xs.iter().map(|x| x * sqrt2).collect(),
        ws.iter().map(|w| w * inv_sqrt_pi).collect(),
    )
}

/// Nodes and weights for ∫_{-1}^{1} g(x) dx ≈ Σ w_i g(x_i).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let nodes = zeros_by_interlacing(n, -1.0, 1.0, |k, x| legendre_column(k, x)[k]);
    let weights = nodes
        .iter()
        .map(|&x| {
            let col = legendre_column(n - 1, x);
            1.0 / col.iter().map(|p| p * p).sum::<f64>()
        })
        .collect();
    (nodes, weights)
}

/// Nodes and weights for ∫_a^b g(x) dx.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| w * half).collect(),
    )
}
