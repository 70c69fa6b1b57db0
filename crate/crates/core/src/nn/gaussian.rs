use rand::Rng;
use rand_distr::StandardNormal;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian parameterized by mean and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mu: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mu.len(), log_std.len());
        GaussianHead { mu, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s.exp() * eps
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_std).all(|v| v.is_finite())
    }
}

pub fn log_density(head: &GaussianHead, w: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), head.dim());
    let mut total = 0.0;
    for ((x, m), s) in w.iter().zip(&head.mu).zip(&head.log_std) {
        let z = (x - m) * (-s).exp();
        total += -0.5 * z * z - s - HALF_LN_2PI;
    }
    total
}

/// Gradient of `log_density` with respect to `(mu, log_std)`.
pub fn log_density_grad(head: &GaussianHead, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mu = Vec::with_capacity(w.len());
    let mut d_log_std = Vec::with_capacity(w.len());
    for ((x, m), s) in w.iter().zip(&head.mu).zip(&head.log_std) {
        let inv_var = (-2.0 * s).exp();
        let diff = x - m;
        d_mu.push(diff * inv_var);
        d_log_std.push(diff * diff * inv_var - 1.0);
    }
    (d_mu, d_log_std)
}

/// `KL(p || q)` in closed form.
pub fn kl(p: &GaussianHead, q: &GaussianHead) -> f64 {
    debug_assert_eq!(p.dim(), q.dim());
    let mut total = 0.0;
    for i in 0..p.dim() {
        let (sp, sq) = (p.log_std[i], q.log_std[i]);
        let diff = p.mu[i] - q.mu[i];
        let var_ratio = (2.0 * (sp - sq)).exp();
        total += sq - sp + 0.5 * (var_ratio + diff * diff * (-2.0 * sq).exp()) - 0.5;
    }
    total.max(0.0)
}

/// Gradient of `KL(p || q)` with respect to `q`'s `(mu, log_std)`.
pub fn kl_grad_q(p: &GaussianHead, q: &GaussianHead) -> (Vec<f64>, Vec<f64>) {
    let n = p.dim();
    let mut d_mu = vec![0.0; n];
    let mut d_log_std = vec![0.0; n];
    for i in 0..n {
        let inv_var_q = (-2.0 * q.log_std[i]).exp();
        let diff = q.mu[i] - p.mu[i];
        let var_p = (2.0 * p.log_std[i]).exp();
        d_mu[i] = diff * inv_var_q;
        d_log_std[i] = 1.0 - (var_p + diff * diff) * inv_var_q;
    }
    (d_mu, d_log_std)
}
