use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::params::{axpy, dot};
use crate::nn::{par_accumulate, Layout, Mlp};
use crate::rng;

/// State-value network: tanh MLP with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub net: Mlp,
    pub layout: Layout,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

impl CriticNet {
    /// All-zero parameters; estimates are 0 everywhere.
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(1);
        let mut layout = Layout::new();
        let net = Mlp::new(&mut layout, "critic", &sizes);
        let params = vec![0.0; layout.len()];
        CriticNet { net, layout, params }
    }

    /// Glorot-initialized hidden layers, zero output layer.
    pub fn new(input: usize, hidden: &[usize], seed: u64, name: &str) -> Self {
        let mut c = Self::zeros(input, hidden);
        let mut r = rng::stream(seed, name);
        c.net.init(&mut c.params, &mut r, 0.0);
        c
    }

    pub fn input_size(&self) -> usize {
        self.net.input_size()
    }

    pub fn estimate(&self, state: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.params, state)?[0])
    }

    fn estimate_with(&self, params: &[f64], state: &[f64]) -> f64 {
        self.net.forward(params, state).expect("checked input size")[0]
    }

    pub fn mse(&self, states: &[Vec<f64>], targets: &[f64]) -> f64 {
        mse_at(self, &self.params, states, targets)
    }

    /// Full-batch L-BFGS on the mean squared error against frozen `targets`.
    /// Only loss-decreasing steps are taken, so the final loss never exceeds
    /// the initial one.
    pub fn fit(&mut self, states: &[Vec<f64>], targets: &[f64], max_iters: usize) -> Result<FitReport> {
        if states.is_empty() {
            return Err(Error::EmptyBatch("critic fit"));
        }
        if states.len() != targets.len() {
            return Err(Error::Shape { expected: states.len(), got: targets.len() });
        }
        for s in states {
            if s.len() != self.input_size() {
                return Err(Error::Shape { expected: self.input_size(), got: s.len() });
            }
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("critic targets"));
        }
        let initial = mse_at(self, &self.params, states, targets);
        if !initial.is_finite() {
            return Err(Error::CriticDiverged { initial, batch: states.len() });
        }
        let mut x = self.params.clone();
        let (mut f, mut g) = mse_and_grad(self, &x, states, targets);
        let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut iterations = 0;
        while iterations < max_iters {
            if dot(&g, &g).sqrt() < 1e-12 {
                break;
            }
            let mut dir = two_loop(&g, &memory);
            let mut slope = dot(&dir, &g);
            if !(slope < 0.0) {
                memory.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut step = if memory.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..30 {
                let mut trial = x.clone();
                axpy(step, &dir, &mut trial);
                let (ft, gt) = mse_and_grad(self, &trial, states, targets);
                if !ft.is_finite() {
                    step *= 0.5;
                    continue;
                }
                if ft <= f + 1e-4 * step * slope && ft < f {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, ft, gt)) = accepted else {
                break;
            };
            let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 {
                if memory.len() == 10 {
                    memory.pop_front();
                }
                memory.push_back((s, y, 1.0 / sy));
            }
            x = trial;
            f = ft;
            g = gt;
            iterations += 1;
        }
        if !f.is_finite() {
            return Err(Error::CriticDiverged { initial, batch: states.len() });
        }
        self.params = x;
        Ok(FitReport { initial_loss: initial, final_loss: f, iterations })
    }
}

fn mse_at(c: &CriticNet, params: &[f64], states: &[Vec<f64>], targets: &[f64]) -> f64 {
    // Same chunked summation as `mse_and_grad`, so both agree bit for bit.
    let total = par_accumulate(states.len(), 1, |i, acc| {
        let e = c.estimate_with(params, &states[i]) - targets[i];
        acc[0] += e * e;
    });
    total[0] / states.len().max(1) as f64
}

fn mse_and_grad(c: &CriticNet, params: &[f64], states: &[Vec<f64>], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = states.len();
    let dim = params.len();
    // Slot `dim` carries the loss so one pass yields both.
    let mut acc = par_accumulate(n, dim + 1, |i, acc| {
        let cache = c.net.forward_cached(params, &states[i]).expect("checked input size");
        let e = cache.output()[0] - targets[i];
        acc[dim] += e * e;
        c.net.backward(params, &cache, &[2.0 * e], &mut acc[..dim]);
    });
    let loss = acc.pop().unwrap() / n as f64;
    for v in &mut acc {
        *v /= n as f64;
    }
    (loss, acc)
}

fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter().map(|v| -v).collect()
}
