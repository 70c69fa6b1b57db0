use rand::Rng;

use super::params::Layout;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stacked GRU encoder returning the top layer's final hidden state.
///
/// Gate order within the stacked `3H` blocks is reset, update, candidate:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gru {
    input: usize,
    hidden: usize,
    layers: usize,
    offset: usize,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    steps: Vec<Vec<StepCache>>,
    output: Vec<f64>,
}

impl GruCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

struct LayerOffsets {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

impl Gru {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize, layers: usize) -> Self {
        assert!(layers >= 1 && hidden >= 1);
        let offset = layout.len();
        for l in 0..layers {
            let n_in = if l == 0 { input } else { hidden };
            layout.push(format!("{name}.l{l}.w_ih"), &[3 * hidden, n_in]);
            layout.push(format!("{name}.l{l}.w_hh"), &[3 * hidden, hidden]);
            layout.push(format!("{name}.l{l}.b_ih"), &[3 * hidden]);
            layout.push(format!("{name}.l{l}.b_hh"), &[3 * hidden]);
        }
        Gru {
            input,
            hidden,
            layers,
            offset,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn n_params(&self) -> usize {
        (0..self.layers).map(|l| self.layer_size(l)).sum()
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params()
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    fn layer_size(&self, l: usize) -> usize {
        let h3 = 3 * self.hidden;
        h3 * self.layer_input(l) + h3 * self.hidden + 2 * h3
    }

    fn offsets(&self, l: usize) -> LayerOffsets {
        let start = self.offset + (0..l).map(|k| self.layer_size(k)).sum::<usize>();
        let h3 = 3 * self.hidden;
        let w_hh = start + h3 * self.layer_input(l);
        let b_ih = w_hh + h3 * self.hidden;
        LayerOffsets {
            w_ih: start,
            w_hh,
            b_ih,
            b_hh: b_ih + h3,
        }
    }

    /// Uniform in `[-1/sqrt(H), 1/sqrt(H)]`, scaled by `scale`.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, scale: f64) {
        let k = scale / (self.hidden as f64).sqrt();
        for p in &mut params[self.param_range()] {
            *p = rng.random_range(-k..=k);
        }
    }

    fn check(&self, sequence: &[Vec<f64>]) -> Result<()> {
        if sequence.is_empty() {
            return Err(Error::InvalidArgument("gru input sequence is empty".into()));
        }
        for x in sequence {
            if x.len() != self.input {
                return Err(Error::Shape {
                    expected: self.input,
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, sequence)?.output)
    }

    pub fn forward_cached(&self, params: &[f64], sequence: &[Vec<f64>]) -> Result<GruCache> {
        self.check(sequence)?;
        let hs = self.hidden;
        let mut inputs: Vec<Vec<f64>> = sequence.to_vec();
        let mut steps = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let o = self.offsets(l);
            let n_in = self.layer_input(l);
            let mut h = vec![0.0; hs];
            let mut layer_steps = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let gi = affine(params, o.w_ih, o.b_ih, 3 * hs, n_in, x);
                let gh = affine(params, o.w_hh, o.b_hh, 3 * hs, hs, &h);
                let mut r = vec![0.0; hs];
                let mut z = vec![0.0; hs];
                let mut n = vec![0.0; hs];
                let mut h_new = vec![0.0; hs];
                for j in 0..hs {
                    r[j] = sigmoid(gi[j] + gh[j]);
                    z[j] = sigmoid(gi[hs + j] + gh[hs + j]);
                    n[j] = (gi[2 * hs + j] + r[j] * gh[2 * hs + j]).tanh();
                    h_new[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
                }
                layer_steps.push(StepCache {
                    x: x.clone(),
                    h_prev: std::mem::replace(&mut h, h_new),
                    r,
                    z,
                    n,
                    gh_n: gh[2 * hs..].to_vec(),
                });
                outputs.push(h.clone());
            }
            steps.push(layer_steps);
            inputs = outputs;
        }
        let output = inputs.pop().unwrap();
        Ok(GruCache { steps, output })
    }

    /// Backpropagation through time from `d(loss)/d(final hidden)`.
    /// Accumulates parameter gradients into `grad`.
    pub fn backward(&self, params: &[f64], cache: &GruCache, d_out: &[f64], grad: &mut [f64]) {
        let hs = self.hidden;
        let t_len = cache.steps[0].len();
        let mut d_seq: Vec<Vec<f64>> = vec![vec![0.0; hs]; t_len];
        d_seq[t_len - 1].copy_from_slice(d_out);
        for l in (0..self.layers).rev() {
            let o = self.offsets(l);
            let n_in = self.layer_input(l);
            let mut dh_next = vec![0.0; hs];
            let mut dx_seq = vec![Vec::new(); t_len];
            for t in (0..t_len).rev() {
                let c = &cache.steps[l][t];
                let mut dgi = vec![0.0; 3 * hs];
                let mut dgh = vec![0.0; 3 * hs];
                let mut dh_prev = vec![0.0; hs];
                for j in 0..hs {
                    let dh = d_seq[t][j] + dh_next[j];
                    let dn = dh * (1.0 - c.z[j]);
                    let dz = dh * (c.h_prev[j] - c.n[j]);
                    dh_prev[j] = dh * c.z[j];
                    let da_n = dn * (1.0 - c.n[j] * c.n[j]);
                    let dr = da_n * c.gh_n[j];
                    let da_r = dr * c.r[j] * (1.0 - c.r[j]);
                    let da_z = dz * c.z[j] * (1.0 - c.z[j]);
                    dgi[j] = da_r;
                    dgh[j] = da_r;
                    dgi[hs + j] = da_z;
                    dgh[hs + j] = da_z;
                    dgi[2 * hs + j] = da_n;
                    dgh[2 * hs + j] = da_n * c.r[j];
                }
                let dx = affine_backward(params, grad, o.w_ih, o.b_ih, 3 * hs, n_in, &c.x, &dgi);
                let dhh = affine_backward(params, grad, o.w_hh, o.b_hh, 3 * hs, hs, &c.h_prev, &dgh);
                for j in 0..hs {
                    dh_prev[j] += dhh[j];
                }
                dh_next = dh_prev;
                dx_seq[t] = dx;
            }
            d_seq = dx_seq;
        }
    }

    /// Final hidden state and its derivative along parameter tangent
    /// `dparams` (inputs are treated as constants).
    pub fn jvp(
        &self,
        params: &[f64],
        dparams: &[f64],
        sequence: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(sequence)?;
        let hs = self.hidden;
        let mut inputs: Vec<(Vec<f64>, Vec<f64>)> = sequence
            .iter()
            .map(|x| (x.clone(), vec![0.0; x.len()]))
            .collect();
        for l in 0..self.layers {
            let o = self.offsets(l);
            let n_in = self.layer_input(l);
            let mut h = vec![0.0; hs];
            let mut dh = vec![0.0; hs];
            let mut outputs = Vec::with_capacity(inputs.len());
            for (x, dx) in &inputs {
                let (gi, dgi) = affine_jvp(params, dparams, o.w_ih, o.b_ih, 3 * hs, n_in, x, dx);
                let (gh, dgh) = affine_jvp(params, dparams, o.w_hh, o.b_hh, 3 * hs, hs, &h, &dh);
                let mut h_new = vec![0.0; hs];
                let mut dh_new = vec![0.0; hs];
                for j in 0..hs {
                    let r = sigmoid(gi[j] + gh[j]);
                    let dr = r * (1.0 - r) * (dgi[j] + dgh[j]);
                    let z = sigmoid(gi[hs + j] + gh[hs + j]);
                    let dz = z * (1.0 - z) * (dgi[hs + j] + dgh[hs + j]);
                    let n = (gi[2 * hs + j] + r * gh[2 * hs + j]).tanh();
                    let dn = (1.0 - n * n) * (dgi[2 * hs + j] + dr * gh[2 * hs + j] + r * dgh[2 * hs + j]);
                    h_new[j] = (1.0 - z) * n + z * h[j];
                    dh_new[j] = -dz * n + (1.0 - z) * dn + dz * h[j] + z * dh[j];
                }
                h = h_new;
                dh = dh_new;
                outputs.push((h.clone(), dh.clone()));
            }
            inputs = outputs;
        }
        Ok(inputs.pop().unwrap())
    }
}

fn affine(params: &[f64], w: usize, b: usize, n_out: usize, n_in: usize, x: &[f64]) -> Vec<f64> {
    (0..n_out)
        .map(|o| {
            let row = &params[w + o * n_in..w + (o + 1) * n_in];
            params[b + o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn affine_jvp(
    params: &[f64],
    dparams: &[f64],
    w: usize,
    b: usize,
    n_out: usize,
    n_in: usize,
    x: &[f64],
    dx: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n_out];
    let mut dy = vec![0.0; n_out];
    for o in 0..n_out {
        let row = w + o * n_in;
        let mut s = params[b + o];
        let mut ds = dparams[b + o];
        for i in 0..n_in {
            s += params[row + i] * x[i];
            ds += dparams[row + i] * x[i] + params[row + i] * dx[i];
        }
        y[o] = s;
        dy[o] = ds;
    }
    (y, dy)
}

#[allow(clippy::too_many_arguments)]
fn affine_backward(
    params: &[f64],
    grad: &mut [f64],
    w: usize,
    b: usize,
    n_out: usize,
    n_in: usize,
    x: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n_in];
    for o in 0..n_out {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        grad[b + o] += g;
        let row = w + o * n_in;
        for i in 0..n_in {
            grad[row + i] += g * x[i];
            dx[i] += g * params[row + i];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::central_difference;
    use crate::rng;

    fn random_net(seed: u64) -> (Gru, Vec<f64>) {
        let mut layout = Layout::new();
        let gru = Gru::new(&mut layout, "g", 3, 4, 2);
        let mut params = vec![0.0; layout.len()];
        gru.init(&mut params, &mut rng::stream(seed, "test"), 2.0);
        (gru, params)
    }

    #[test]
    fn zero_weights_and_inputs_stay_zero() {
        let mut layout = Layout::new();
        let gru = Gru::new(&mut layout, "g", 3, 4, 2);
        let params = vec![0.0; layout.len()];
        let h = gru.forward(&params, &vec![vec![0.0; 3]; 5]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn output_length_is_hidden_size() {
        let (gru, params) = random_net(1);
        for t in 1..6 {
            assert_eq!(gru.forward(&params, &vec![vec![0.5; 3]; t]).unwrap().len(), 4);
        }
    }

    #[test]
    fn history_length_matters() {
        let (gru, params) = random_net(2);
        let last = vec![0.2, -0.4, 0.9];
        let one = gru.forward(&params, std::slice::from_ref(&last)).unwrap();
        let two = gru.forward(&params, &[vec![1.0, 0.5, -0.3], last]).unwrap();
        assert!(one.iter().zip(&two).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (gru, params) = random_net(3);
        assert!(gru.forward(&params, &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (gru, params) = random_net(4);
        let seq = vec![vec![0.3, -0.1, 0.8], vec![-0.5, 0.2, 0.1], vec![0.9, 0.4, -0.7]];
        let w = [0.5, -1.0, 0.25, 2.0];
        let loss = |p: &[f64]| -> f64 {
            let h = gru.forward(p, &seq).unwrap();
            h.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let cache = gru.forward_cached(&params, &seq).unwrap();
        let mut grad = vec![0.0; params.len()];
        gru.backward(&params, &cache, &w, &mut grad);
        let fd = central_difference(&loss, &params, 1e-5);
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-8 + 1e-6 * b.abs(), "{a} vs {b}");
        }
        let tangent: Vec<f64> = (0..params.len()).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
        let (_, dh) = gru.jvp(&params, &tangent, &seq).unwrap();
        let lhs: f64 = dh.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = grad.iter().zip(&tangent).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
