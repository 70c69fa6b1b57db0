use super::params::{axpy, dot};
use crate::error::{Error, Result};

/// Solves `A x = b` for symmetric positive definite `A` given as a
/// matrix-vector product. Stops once `||A x - b|| <= tol * ||b||` or after
/// `iters` iterations.
pub fn conjugate_gradient<F>(mut matvec: F, b: &[f64], iters: usize, tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let b_norm = rr.sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    for _ in 0..iters {
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        let ap = matvec(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rr.is_finite() {
            return Err(Error::NonFinite("conjugate gradient"));
        }
        if pap <= 0.0 {
            // Curvature vanished along p; x is the best we can do.
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conjugate gradient"));
    }
    Ok(x)
}
