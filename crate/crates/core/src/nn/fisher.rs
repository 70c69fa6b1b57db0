use std::borrow::Borrow;

use rayon::prelude::*;

use super::gaussian::{kl, GaussianHead};
use super::params::axpy;

/// A differentiable map from parameters and an input to a diagonal Gaussian.
pub trait GaussianPolicyModel: Sync {
    type Input: Sync;

    fn n_params(&self) -> usize;

    fn head(&self, params: &[f64], input: &Self::Input) -> GaussianHead;

    /// Head plus its directional derivative `(d mu, d log_std)` along `tangent`.
    fn head_jvp(
        &self,
        params: &[f64],
        input: &Self::Input,
        tangent: &[f64],
    ) -> (GaussianHead, Vec<f64>, Vec<f64>);

    /// Accumulates `J^T [d_mu; d_log_std]` into `grad`.
    fn head_vjp(
        &self,
        params: &[f64],
        input: &Self::Input,
        d_mu: &[f64],
        d_log_std: &[f64],
        grad: &mut [f64],
    );
}

/// Sums `f(i, acc)` over `0..n` into a `dim`-vector. Work is cut into a
/// number of chunks that depends only on `n`, and chunk partials are added
/// in index order, so the result does not depend on the thread count.
pub fn par_accumulate<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunk = n.div_ceil(32).max(4);
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            for i in c * chunk..n.min((c + 1) * chunk) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in &partials {
        axpy(1.0, p, &mut total);
    }
    total
}

/// Deterministic parallel mean of a scalar function over `0..n`.
pub fn par_mean<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n == 0 {
        return 0.0;
    }
    let values: Vec<f64> = (0..n).into_par_iter().map(&f).collect();
    values.iter().sum::<f64>() / n as f64
}

/// Mean `KL(old_i || head(params, input_i))` over the batch.
pub fn mean_kl<M: GaussianPolicyModel, X: Borrow<M::Input> + Sync>(
    model: &M,
    params: &[f64],
    inputs: &[X],
    old_heads: &[GaussianHead],
) -> f64 {
    par_mean(inputs.len(), |i| kl(&old_heads[i], &model.head(params, inputs[i].borrow())))
}

/// `(H + damping I) v` where `H` is the Hessian, at `params`, of the batch
/// mean `KL(pi_params || pi_theta)` with respect to `theta`.
///
/// At the expansion point the Hessian equals the Gauss-Newton form
/// `J^T F J`, with `F = diag(1/sigma^2)` on the mean outputs and `2` on the
/// log-std outputs, so it is computed exactly with one forward-mode and one
/// reverse-mode pass per sample.
pub fn fisher_vector_product<M: GaussianPolicyModel, X: Borrow<M::Input> + Sync>(
    model: &M,
    params: &[f64],
    inputs: &[X],
    v: &[f64],
    damping: f64,
) -> Vec<f64> {
    let n = inputs.len();
    let dim = model.n_params();
    let mut out = par_accumulate(n, dim, |i, acc| {
        let input = inputs[i].borrow();
        let (head, d_mu, d_ls) = model.head_jvp(params, input, v);
        let w_mu: Vec<f64> = d_mu
            .iter()
            .zip(&head.log_std)
            .map(|(d, s)| d * (-2.0 * s).exp())
            .collect();
        let w_ls: Vec<f64> = d_ls.iter().map(|d| 2.0 * d).collect();
        model.head_vjp(params, input, &w_mu, &w_ls, acc);
    });
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for (o, vi) in out.iter_mut().zip(v) {
        *o = *o * scale + damping * vi;
    }
    out
}
