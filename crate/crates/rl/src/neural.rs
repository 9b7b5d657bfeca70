//! Dense tanh networks with hand-written backpropagation, a fixed-variance
//! Gaussian policy head and Adam.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Multilayer perceptron: tanh on hidden layers, identity on the output.
/// Parameters live in one flat vector; layer `l` stores a row-major
/// `fan_in x fan_out` weight block followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Per-layer activations of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    /// Zero-initialized network with the given layer widths.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                w_off: off,
                b_off: off + w[0] * w[1],
            };
            off = layer.b_off + w[1];
            layers.push(layer);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
            params: vec![0.0; off],
        })
    }

    /// Orthogonal initialization with gain `hidden_gain` on every layer but
    /// the last, which uses `output_gain`; biases start at zero.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.clone().iter().enumerate() {
            let gain = if l == last { output_gain } else { hidden_gain };
            let w = orthogonal_matrix(layer.fan_in, layer.fan_out, rng);
            for (dst, src) in net.params[layer.w_off..layer.b_off].iter_mut().zip(w) {
                *dst = gain * src;
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let layer = self.layers[l];
        ArrayView2::from_shape((layer.fan_in, layer.fan_out), &self.params[layer.w_off..layer.b_off]).unwrap()
    }

    fn bias(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.b_off..layer.b_off + layer.fan_out]
    }

    /// Weight block of layer `l` (row-major `fan_in x fan_out`) and its bias.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let layer = self.layers[l];
        (&self.params[layer.w_off..layer.b_off], self.bias(l))
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass over a batch (one sample per row), keeping activations.
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for l in 0..self.layers.len() {
            let mut z = acts[l].dot(&self.weight(l));
            let b = self.bias(l);
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if l != last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(ForwardCache { acts })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.acts.pop().unwrap())
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of `sum(upstream * output)` with respect to every parameter,
    /// flattened like [`Mlp::params`].
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape {
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let gw = cache.acts[l].t().dot(&delta);
            let mut dst = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), &mut grads[layer.w_off..layer.b_off]).unwrap();
            dst.assign(&gw);
            let gb = delta.sum_axis(Axis(0));
            grads[layer.b_off..layer.b_off + layer.fan_out].copy_from_slice(gb.as_slice().unwrap());
            if l > 0 {
                let mut prev = delta.dot(&self.weight(l).t());
                prev.zip_mut_with(&cache.acts[l], |d, &a| *d *= 1.0 - a * a);
                delta = prev;
            }
        }
        Ok(grads)
    }
}

/// `fan_in x fan_out` matrix (row-major) with orthonormal rows or columns,
/// whichever are fewer.
fn orthogonal_matrix<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    // Gram-Schmidt on k vectors of length d, then lay them out as columns
    // (fan_in >= fan_out) or rows.
    let (d, k) = if fan_in >= fan_out { (fan_in, fan_out) } else { (fan_out, fan_in) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; fan_in * fan_out];
    for i in 0..fan_in {
        for j in 0..fan_out {
            out[i * fan_out + j] = if fan_in >= fan_out { vecs[j][i] } else { vecs[i][j] };
        }
    }
    out
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `sum_d [-((a_d - mu_d) / sigma_d)^2 / 2 - ln sigma_d - ln(2 pi) / 2]`
pub fn gaussian_log_prob(mean: &[f64], action: &[f64], sigma: &[f64]) -> f64 {
    mean.iter()
        .zip(action)
        .zip(sigma)
        .map(|((m, a), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Entropy of a diagonal Gaussian; constant for a fixed `sigma`.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    sigma.iter().map(|s| 0.5 + 0.5 * (2.0 * PI).ln() + s.ln()).sum()
}

/// Diagonal Gaussian over raw actions whose mean is an [`Mlp`] output.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub sigma: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(net: Mlp, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != net.output_dim() {
            return Err(Error::Shape {
                expected: net.output_dim(),
                got: sigma.len(),
            });
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Architecture("sigma must be positive".into()));
        }
        Ok(Self { net, sigma })
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward_one(obs)
    }

    /// Draws `mean + sigma * z`; the action is not clamped.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean(obs)?;
        Ok(self.sample_around(&mean, rng))
    }

    pub fn sample_around<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(mean, &action, &self.sigma);
        (action, lp)
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(gaussian_log_prob(&self.mean(obs)?, action, &self.sigma))
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
