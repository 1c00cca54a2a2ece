//! Small fully connected networks with tanh hidden layers, hand-written
//! backpropagation and the two optimizers the crate needs.
//!
//! Parameters live in one flat vector so optimizers, gradient clipping and
//! finite-difference checks can treat a network as a plain `&mut [f64]`.
//! Weights are stored input-major (`w[j * outputs + o]`), which keeps both the
//! forward pass over sparse one-hot inputs and the backward pass contiguous.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::seed::Rng;

/// Network input: dense values, or the indices of the inputs equal to one
/// (all others zero).
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Dense(&'a [f64]),
    OneHot(&'a [u32]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer outputs saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&[], Vec::as_slice)
    }
}

impl Mlp {
    /// All-zero network with the given layer sizes (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid layer sizes");
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; count] }
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases. The output layer is
    /// additionally scaled by `output_scale`.
    pub fn new(sizes: &[usize], output_scale: f64, rng: &mut Rng) -> Self {
        let mut net = Self::zeros(sizes);
        let layers = net.layer_count();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let scale = if l + 1 == layers { output_scale } else { 1.0 };
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound) * scale;
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    /// Rebuilds a network from stored sizes and parameters.
    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        let expected = Self::zeros(&sizes).params.len();
        (params.len() == expected).then_some(Mlp { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Forward pass; the output is `acts.output()`.
    pub fn forward(&self, input: Input<'_>, acts: &mut Activations) {
        let layers = self.layer_count();
        acts.layers.resize_with(layers, Vec::new);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (done, rest) = acts.layers.split_at_mut(l);
            let z = &mut rest[0];
            z.clear();
            z.extend_from_slice(bias);
            let accumulate = |z: &mut [f64], j: usize, x: f64| {
                for (zo, &w) in z.iter_mut().zip(&weights[j * n_out..(j + 1) * n_out]) {
                    *zo += x * w;
                }
            };
            if l == 0 {
                match input {
                    Input::Dense(x) => {
                        debug_assert_eq!(x.len(), n_in);
                        for (j, &xj) in x.iter().enumerate() {
                            if xj != 0.0 {
                                accumulate(z, j, xj);
                            }
                        }
                    }
                    Input::OneHot(active) => {
                        for &j in active {
                            accumulate(z, j as usize, 1.0);
                        }
                    }
                }
            } else {
                for (j, &xj) in done[l - 1].iter().enumerate() {
                    accumulate(z, j, xj);
                }
            }
            if l + 1 < layers {
                for v in z.iter_mut() {
                    *v = math::tanh(*v);
                }
            }
            offset += n_in * n_out + n_out;
        }
    }

    /// Convenience forward pass returning a fresh output vector.
    pub fn predict(&self, input: Input<'_>) -> Vec<f64> {
        let mut acts = Activations::default();
        self.forward(input, &mut acts);
        acts.output().to_vec()
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`
    /// for the pass recorded in `acts` on `input`.
    pub fn backward(&self, input: Input<'_>, acts: &Activations, d_output: &[f64], grads: &mut [f64]) {
        let layers = self.layer_count();
        debug_assert_eq!(grads.len(), self.params.len());
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = d_output.to_vec();
        let mut prev_delta = Vec::new();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            for (g, &d) in grads[b_off..b_off + n_out].iter_mut().zip(&delta) {
                *g += d;
            }
            let add_row = |grads: &mut [f64], j: usize, x: f64, delta: &[f64]| {
                let row = &mut grads[w_off + j * n_out..w_off + (j + 1) * n_out];
                for (g, &d) in row.iter_mut().zip(delta) {
                    *g += x * d;
                }
            };
            if l == 0 {
                match input {
                    Input::Dense(x) => {
                        for (j, &xj) in x.iter().enumerate() {
                            if xj != 0.0 {
                                add_row(grads, j, xj, &delta);
                            }
                        }
                    }
                    Input::OneHot(active) => {
                        for &j in active {
                            add_row(grads, j as usize, 1.0, &delta);
                        }
                    }
                }
            } else {
                let below = &acts.layers[l - 1];
                prev_delta.clear();
                for (j, &xj) in below.iter().enumerate() {
                    add_row(grads, j, xj, &delta);
                    let w_row = &self.params[w_off + j * n_out..w_off + (j + 1) * n_out];
                    let back: f64 = w_row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                    // tanh'(z) = 1 - tanh(z)^2
                    prev_delta.push(back * (1.0 - xj * xj));
                }
                core::mem::swap(&mut delta, &mut prev_delta);
            }
        }
    }
}

pub fn l2_norm(values: &[f64]) -> f64 {
    math::sqrt(values.iter().map(|v| v * v).sum())
}

/// Rescales all gradient slices jointly so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let bias2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.epsilon);
        }
    }
}

/// Gradient descent with heavy-ball momentum: `v = momentum * v + g`,
/// `p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(num_params: usize, learning_rate: f64, momentum: f64) -> Self {
        Momentum { learning_rate, momentum, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}
