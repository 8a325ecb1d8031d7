//! Fully connected networks with hand-written forward and backward passes.
//!
//! Each layer computes `z = x W + b` with `W` stored row-major as
//! `(fan_in, fan_out)`. Hidden layers apply the activation; the output layer
//! is linear. Parameters for the whole network live in one flat slice, laid
//! out layer by layer as `[W_0, b_0, W_1, b_1, ...]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a = f(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Intermediate values retained by [`MlpSpec::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    dims: Vec<(usize, usize)>,
    fingerprint: u64,
    /// Input to each layer (the post-activation of the previous one).
    layer_inputs: Vec<Mat>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Mat>,
}

impl MlpCache {
    pub fn pre_activations(&self) -> &[Mat] {
        &self.pre_activations
    }
}

fn fingerprint(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        h ^= p.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ params.len() as u64
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::shape("MlpSpec", "positive layer widths", format!(
                "{input_dim} -> {hidden_dims:?} -> {output_dim}"
            )));
        }
        Ok(MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        })
    }

    /// `(fan_in, fan_out)` for every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Named blocks (`{prefix}.l{i}.weight`, `{prefix}.l{i}.bias`) in storage order.
    pub fn block_names(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            out.push((format!("{prefix}.l{i}.weight"), vec![fan_in, fan_out]));
            out.push((format!("{prefix}.l{i}.bias"), vec![fan_out]));
        }
        out
    }

    /// Scaled uniform init: weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, and the output layer multiplied by `output_scale`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, output_scale: f64) -> Vec<f64> {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut params = Vec::with_capacity(self.param_count());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..=limit) * scale);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::shape("mlp params", expected, params.len()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &Mat) -> Result<(Mat, MlpCache)> {
        self.check_params(params)?;
        if input.cols() != self.input_dim {
            return Err(Error::shape("mlp layer 0 input", self.input_dim, input.cols()));
        }
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let rows = input.rows();
        let mut layer_inputs = Vec::with_capacity(dims.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut x = input.clone();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &params[offset..offset + fan_in * fan_out];
            let b = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;

            let mut z = Mat::zeros(rows, fan_out);
            for r in 0..rows {
                let xr = x.row(r);
                let zr = z.row_mut(r);
                zr.copy_from_slice(b);
                for (i, &xi) in xr.iter().enumerate() {
                    let wi = &w[i * fan_out..(i + 1) * fan_out];
                    for (zj, &wij) in zr.iter_mut().zip(wi) {
                        *zj += xi * wij;
                    }
                }
            }
            layer_inputs.push(x);
            if l == last {
                x = z;
            } else {
                let mut a = z.clone();
                for v in a.data_mut() {
                    *v = self.activation.apply(*v);
                }
                pre_activations.push(z);
                x = a;
            }
        }
        let cache = MlpCache {
            dims,
            fingerprint: fingerprint(params),
            layer_inputs,
            pre_activations,
        };
        Ok((x, cache))
    }

    /// Returns `(param_grad, input_grad)` for the loss gradient `output_grad`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        output_grad: &Mat,
    ) -> Result<(Vec<f64>, Mat)> {
        self.check_params(params)?;
        let dims = self.layer_dims();
        if cache.dims != dims {
            return Err(Error::shape("mlp cache", format!("{dims:?}"), format!("{:?}", cache.dims)));
        }
        if cache.fingerprint != fingerprint(params) {
            return Err(Error::shape("mlp cache", "cache from these params", "stale cache"));
        }
        let rows = cache.layer_inputs[0].rows();
        if output_grad.rows() != rows || output_grad.cols() != self.output_dim {
            return Err(Error::shape(
                "mlp output grad",
                format!("{rows}x{}", self.output_dim),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }

        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(off);
            off += (fan_in + 1) * fan_out;
        }

        let mut grad = vec![0.0; off];
        let mut delta = output_grad.clone();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            let x = &cache.layer_inputs[l];

            {
                let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
                for r in 0..rows {
                    let dr = delta.row(r);
                    for (gbj, &dj) in gb.iter_mut().zip(dr) {
                        *gbj += dj;
                    }
                    for (i, &xi) in x.row(r).iter().enumerate() {
                        let gwi = &mut gw[i * fan_out..(i + 1) * fan_out];
                        for (g, &dj) in gwi.iter_mut().zip(dr) {
                            *g += xi * dj;
                        }
                    }
                }
            }

            let w = &params[w_off..b_off];
            let mut dx = Mat::zeros(rows, fan_in);
            for r in 0..rows {
                let dr = delta.row(r);
                let dxr = dx.row_mut(r);
                for (i, dxi) in dxr.iter_mut().enumerate() {
                    let wi = &w[i * fan_out..(i + 1) * fan_out];
                    let mut s = 0.0;
                    for (&wij, &dj) in wi.iter().zip(dr) {
                        s += wij * dj;
                    }
                    *dxi = s;
                }
            }
            if l > 0 {
                let z = &cache.pre_activations[l - 1];
                // layer_inputs[l] holds f(z) for the previous hidden layer
                for ((d, &zi), &ai) in dx.data_mut().iter_mut().zip(z.data()).zip(x.data()) {
                    *d *= self.activation.derivative(zi, ai);
                }
            }
            delta = dx;
        }
        Ok((grad, delta))
    }
}
