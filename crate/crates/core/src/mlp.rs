//! A small fully connected velocity network `v(x, t)` with exact gradients.
//!
//! The network input is the state concatenated with time, `(x || t)`, so a
//! network over R^d has layer sizes `[d + 1, h_1, ..., h_k, d]`. Hidden layers
//! use the configured activation; the output layer is affine.
//!
//! All parameters live in one flat buffer. Layer `l` (fan-in `n`, fan-out
//! `m`) stores an `m x n` row-major weight matrix followed by `m` biases.
//! Gradients and Adam moments use the same layout.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MlpError;
use crate::field::VelocityField;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// One `(x, t) -> target` regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
}

/// Batch loss and its gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    /// `(1/B) * sum_b ||target_b - f(x_b, t_b)||^2`.
    pub loss: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    data: Vec<f64>,
}

fn parameter_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<(), MlpError> {
    if layer_sizes.len() < 2 {
        return Err(MlpError::TooFewLayers);
    }
    if layer_sizes.contains(&0) {
        return Err(MlpError::ZeroWidth);
    }
    let output = layer_sizes[layer_sizes.len() - 1];
    if layer_sizes[0] != output + 1 {
        return Err(MlpError::InputDimension {
            expected: output + 1,
            got: layer_sizes[0],
        });
    }
    Ok(())
}

impl MlpParams {
    pub fn from_flat(
        layer_sizes: Vec<usize>,
        activation: Activation,
        data: Vec<f64>,
    ) -> Result<Self, MlpError> {
        validate_sizes(&layer_sizes)?;
        let expected = parameter_count(&layer_sizes);
        if data.len() != expected {
            return Err(MlpError::ParameterCount {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|p| !p.is_finite()) {
            return Err(MlpError::NonFiniteParameter(i));
        }
        Ok(Self {
            layer_sizes,
            activation,
            data,
        })
    }

    pub fn zeros(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, MlpError> {
        validate_sizes(&layer_sizes)?;
        let n = parameter_count(&layer_sizes);
        Self::from_flat(layer_sizes, activation, vec![0.0; n])
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(
        layer_sizes: Vec<usize>,
        activation: Activation,
        seed: u64,
    ) -> Result<Self, MlpError> {
        let mut params = Self::zeros(layer_sizes, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..params.num_layers() {
            let (fan_in, fan_out) = params.layer_shape(l);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (start, _) = params.layer_offsets(l);
            for w in &mut params.data[start..start + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    /// `[d + 1, hidden..., d]`, the layout of a velocity network over R^d.
    pub fn velocity_layout(dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        sizes
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Dimension of the state space the network acts on.
    pub fn state_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    /// Offsets of layer `l`'s weights and biases in the flat buffer.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.layer_sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = self.layer_shape(l);
        (start, start + fan_in * fan_out)
    }

    /// Row-major weights and the bias vector of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_offsets(l);
        let fan_out = self.layer_sizes[l + 1];
        (&self.data[w..b], &self.data[b..b + fan_out])
    }

    fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layer_offsets(l);
        let fan_out = self.layer_sizes[l + 1];
        let (weights, rest) = self.data[w..b + fan_out].split_at_mut(b - w);
        (weights, rest)
    }

    /// Overwrites layer `l`. Panics on a shape mismatch.
    pub fn set_layer(&mut self, l: usize, weights: &[f64], bias: &[f64]) {
        let (w, b) = self.layer_mut(l);
        w.copy_from_slice(weights);
        b.copy_from_slice(bias);
    }

    /// Network output at `(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>, MlpError> {
        let expected = self.layer_sizes[0] - 1;
        if x.len() != expected {
            return Err(MlpError::InputDimension {
                expected,
                got: x.len(),
            });
        }
        Ok(self.forward_unchecked(x, t))
    }

    fn forward_unchecked(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(t);
        let mut acts = vec![input];
        self.forward_into(&mut acts);
        acts.pop().expect("output layer")
    }

    /// Fills `acts[1..]` from `acts[0]`. `acts[l]` is the input of layer `l`;
    /// the last entry is the network output.
    fn forward_into(&self, acts: &mut Vec<Vec<f64>>) {
        acts.truncate(1);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (fan_in, _) = self.layer_shape(l);
            let input = &acts[l];
            let mut out: Vec<f64> = b
                .iter()
                .zip(w.chunks_exact(fan_in))
                .map(|(bias, row)| bias + dot(row, input))
                .collect();
            if l != last {
                for z in &mut out {
                    *z = self.activation.apply(*z);
                }
            }
            acts.push(out);
        }
    }

    /// Exact gradient of the mean squared error over `batch`.
    ///
    /// Examples are accumulated in batch order, so the result is bitwise
    /// reproducible.
    pub fn gradient(&self, batch: &[Example]) -> Result<MlpGradient, MlpError> {
        if batch.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        let dim = self.state_dim();
        for ex in batch {
            if ex.x.len() != dim || ex.target.len() != dim {
                return Err(MlpError::InputDimension {
                    expected: dim,
                    got: if ex.x.len() != dim {
                        ex.x.len()
                    } else {
                        ex.target.len()
                    },
                });
            }
        }

        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.data.len()];
        let mut loss = 0.0;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_sizes.len());
        let offsets: Vec<(usize, usize)> = (0..self.num_layers())
            .map(|l| self.layer_offsets(l))
            .collect();

        for ex in batch {
            let mut input = Vec::with_capacity(dim + 1);
            input.extend_from_slice(&ex.x);
            input.push(ex.t);
            acts.clear();
            acts.push(input);
            self.forward_into(&mut acts);

            let output = &acts[self.num_layers()];
            // dL/dy for this example.
            let mut delta: Vec<f64> = output
                .iter()
                .zip(&ex.target)
                .map(|(y, target)| {
                    let r = target - y;
                    loss += r * r;
                    -2.0 * scale * r
                })
                .collect();

            for l in (0..self.num_layers()).rev() {
                let (fan_in, _) = self.layer_shape(l);
                let (w_off, b_off) = offsets[l];
                let input = &acts[l];
                for (k, d) in delta.iter().enumerate() {
                    let row = &mut grad[w_off + k * fan_in..w_off + (k + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[b_off + k] += d;
                }
                if l == 0 {
                    break;
                }
                let (w, _) = self.layer(l);
                let mut upstream = vec![0.0; fan_in];
                for (k, d) in delta.iter().enumerate() {
                    for (u, wk) in upstream.iter_mut().zip(&w[k * fan_in..(k + 1) * fan_in]) {
                        *u += wk * d;
                    }
                }
                for (u, a) in upstream.iter_mut().zip(input) {
                    *u *= self.activation.derivative_from_output(*a);
                }
                delta = upstream;
            }
        }

        Ok(MlpGradient {
            loss: loss * scale,
            values: grad,
        })
    }

    /// Mean squared error over `batch` without gradients.
    pub fn loss(&self, batch: &[Example]) -> Result<f64, MlpError> {
        if batch.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        let mut total = 0.0;
        for ex in batch {
            let y = self.forward(&ex.x, ex.t)?;
            total += y
                .iter()
                .zip(&ex.target)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }

    /// Upper bound on `||output||_2` for tanh networks with at least one
    /// hidden layer: `||W_last||_F * sqrt(width) + ||b_last||_2`.
    pub fn output_bound(&self) -> Option<f64> {
        if self.activation != Activation::Tanh || self.num_layers() < 2 {
            return None;
        }
        let last = self.num_layers() - 1;
        let (w, b) = self.layer(last);
        let (width, _) = self.layer_shape(last);
        Some(norm(w) * (width as f64).sqrt() + norm(b))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: (0..self.num_layers())
                .map(|l| self.layer(l).0.to_vec())
                .collect(),
            biases: (0..self.num_layers())
                .map(|l| self.layer(l).1.to_vec())
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, MlpError> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(MlpError::UnsupportedVersion(ckpt.format_version));
        }
        let mut params = Self::zeros(ckpt.layer_sizes.clone(), ckpt.activation)?;
        if ckpt.weights.len() != params.num_layers() || ckpt.biases.len() != params.num_layers() {
            return Err(MlpError::Checkpoint(format!(
                "expected {} layers of weights and biases",
                params.num_layers()
            )));
        }
        for l in 0..params.num_layers() {
            let (fan_in, fan_out) = params.layer_shape(l);
            if ckpt.weights[l].len() != fan_in * fan_out || ckpt.biases[l].len() != fan_out {
                return Err(MlpError::Checkpoint(format!(
                    "layer {l} has the wrong shape"
                )));
            }
            params.set_layer(l, &ckpt.weights[l], &ckpt.biases[l]);
        }
        if let Some(i) = params.data.iter().position(|p| !p.is_finite()) {
            return Err(MlpError::NonFiniteParameter(i));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MlpError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        let text = fs::read_to_string(path).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl VelocityField for MlpParams {
    fn dim(&self) -> Option<usize> {
        Some(self.state_dim())
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward_unchecked(x, t)
    }
}

/// On-disk network format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Row-major `fan_out x fan_in` matrices, one per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Adam hyperparameters and moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptState {
    pub fn new(params: &MlpParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params.num_params()],
            v: vec![0.0; params.num_params()],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut MlpParams, grad: &[f64], opt: &mut OptState) -> Result<(), MlpError> {
    if grad.len() != params.num_params() || opt.m.len() != params.num_params() {
        return Err(MlpError::ParameterCount {
            expected: params.num_params(),
            got: if grad.len() != params.num_params() {
                grad.len()
            } else {
                opt.m.len()
            },
        });
    }
    opt.step += 1;
    let step = opt.step as i32;
    let correction1 = 1.0 - opt.beta1.powi(step);
    let correction2 = 1.0 - opt.beta2.powi(step);
    for (((p, g), m), v) in params
        .data
        .iter_mut()
        .zip(grad)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}
