//! Conjugate gradient for symmetric positive definite operators given as
//! closures (matrix-free; the Fisher is only ever touched through
//! matrix-vector products).

use crate::linalg::{axpy, dot, norm2};

/// Approximately solve `A x = b` for SPD `A`.
///
/// Stops when `||A x - b|| <= tol * ||b||` or after `iters` iterations;
/// returns `x = 0` immediately for `b = 0`.
pub fn conjugate_gradient<F>(apply_a: F, b: &[f64], iters: usize, tol: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return x;
    }
    let mut r = b.to_vec(); // r = b - A*0
    let mut p = r.clone();
    let mut rs_old = dot(&r, &r);
    let threshold = tol * b_norm;
    for _ in 0..iters {
        if rs_old.sqrt() <= threshold {
            break;
        }
        let ap = apply_a(&p);
        let p_ap = dot(&p, &ap);
        if p_ap <= 0.0 || !p_ap.is_finite() {
            break; // operator not SPD along p; keep the best iterate so far
        }
        let alpha = rs_old / p_ap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= threshold {
            break;
        }
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    x
}
