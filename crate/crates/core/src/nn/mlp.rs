use rand::Rng;

use super::params::Layout;
use crate::error::{Error, Result};

/// Fully connected net: affine layers with tanh between them and a linear
/// output layer. Weights live in a shared flat vector starting at `offset`;
/// each layer stores its `out x in` weight matrix row-major, then its bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
    offset: usize,
}

/// Activations of every layer, input first, output last.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("nonempty")
    }
}

impl Mlp {
    /// Registers the layers in `layout` under `name` and returns the net.
    pub fn new(layout: &mut Layout, name: &str, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let offset = layout.len();
        for l in 0..sizes.len() - 1 {
            layout.push(format!("{name}.l{l}.weight"), &[sizes[l + 1], sizes[l]]);
            layout.push(format!("{name}.l{l}.bias"), &[sizes[l + 1]]);
        }
        Mlp {
            sizes: sizes.to_vec(),
            offset,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of (weight, bias) of layer `l` within the flat vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.offset;
        for k in 0..l {
            off += self.sizes[k + 1] * self.sizes[k] + self.sizes[k + 1];
        }
        (off, off + self.sizes[l + 1] * self.sizes[l])
    }

    /// Uniform Glorot init for hidden layers; the output layer is scaled by
    /// `out_scale`. Biases start at zero.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, out_scale: f64) {
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_offsets(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == self.n_layers() { out_scale } else { 1.0 };
            for p in &mut params[w..b] {
                *p = scale * rng.random_range(-limit..=limit);
            }
            for p in &mut params[b..b + fan_out] {
                *p = 0.0;
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, params: &[f64], x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = activations.last().unwrap();
            let mut z = params[b..b + n_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &params[w + o * n_in..w + (o + 1) * n_in];
                *zo += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(MlpCache { activations })
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`
    /// and returns `d(loss)/d(input)`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        d_out: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut dz = d_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w, b) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.activations[l];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let g = dz[o];
                if g == 0.0 {
                    continue;
                }
                grad[b + o] += g;
                let row = w + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += g * input[i];
                    d_in[i] += g * params[row + i];
                }
            }
            if l > 0 {
                for (d, a) in d_in.iter_mut().zip(input) {
                    *d *= 1.0 - a * a;
                }
            }
            dz = d_in;
        }
        dz
    }

    /// Forward-mode derivative: output and its directional derivative along
    /// parameter tangent `dparams` and input tangent `dx`.
    pub fn jvp(
        &self,
        params: &[f64],
        dparams: &[f64],
        x: &[f64],
        dx: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        let mut da = dx.to_vec();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = params[b..b + n_out].to_vec();
            let mut dz = dparams[b..b + n_out].to_vec();
            for o in 0..n_out {
                let row = w + o * n_in;
                let mut s = 0.0;
                let mut ds = 0.0;
                for i in 0..n_in {
                    s += params[row + i] * a[i];
                    ds += dparams[row + i] * a[i] + params[row + i] * da[i];
                }
                z[o] += s;
                dz[o] += ds;
            }
            if l + 1 < self.n_layers() {
                for (zo, dzo) in z.iter_mut().zip(dz.iter_mut()) {
                    let t = zo.tanh();
                    *dzo *= 1.0 - t * t;
                    *zo = t;
                }
            }
            a = z;
            da = dz;
        }
        Ok((a, da))
    }
}
