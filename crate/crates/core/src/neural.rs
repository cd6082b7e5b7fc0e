//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Weights are stored row-major per layer (`out × in`). All arithmetic is in
//! `f64` so that central finite differences can verify the gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Multi-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

/// Gradients shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Per-layer outputs of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

fn sparse_enough(x: &[f64]) -> Option<Vec<usize>> {
    if x.len() < 32 {
        return None;
    }
    let nz: Vec<usize> = x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    (nz.len() * 2 < x.len()).then_some(nz)
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `hidden` is used between layers,
    /// `output` on the last layer.
    pub fn new(layer_sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Mlp, NeuralError> {
        if layer_sizes.len() < 2 {
            return Err(NeuralError::InvalidArchitecture(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(NeuralError::InvalidArchitecture("layer sizes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { layer_sizes: layer_sizes.to_vec(), hidden, output, weights, biases, seed })
    }

    /// Builds a network from explicit parameters, validating shapes.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        hidden: Activation,
        output: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Mlp, NeuralError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NeuralError::InvalidArchitecture(format!("bad layer sizes {layer_sizes:?}")));
        }
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(NeuralError::Shape { expected: layers, got: weights.len().min(biases.len()) });
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let expected = pair[0]
                .checked_mul(pair[1])
                .ok_or_else(|| NeuralError::InvalidArchitecture("layer too large".into()))?;
            if weights[l].len() != expected {
                return Err(NeuralError::Shape { expected, got: weights[l].len() });
            }
            if biases[l].len() != pair[1] {
                return Err(NeuralError::Shape { expected: pair[1], got: biases[l].len() });
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(NeuralError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Mlp { layer_sizes, hidden, output, weights, biases, seed })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    fn slices(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.weights.iter().zip(self.biases.iter()).flat_map(|(w, b)| [w, b])
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NeuralError> {
        if input.len() != self.input_dim() {
            return Err(NeuralError::Shape { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let n_in = self.layer_sizes[l];
        let w = &self.weights[l];
        let act = self.activation(l);
        let mut out = self.biases[l].clone();
        match sparse_enough(x) {
            Some(nz) => {
                for (o, z) in out.iter_mut().enumerate() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    *z += nz.iter().map(|&i| row[i] * x[i]).sum::<f64>();
                }
            }
            None => {
                for (o, z) in out.iter_mut().enumerate() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    *z += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        out.iter_mut().for_each(|z| *z = act.apply(*z));
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for l in 0..self.weights.len() {
            x = self.layer_forward(l, &x);
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace, NeuralError> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layer_sizes.len());
        activations.push(input.to_vec());
        for l in 0..self.weights.len() {
            let next = self.layer_forward(l, activations.last().unwrap());
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `d_output` (gradient of a scalar w.r.t. the network
    /// output) through `trace`, accumulating parameter gradients into `grads`.
    /// Returns the gradient w.r.t. the input when `want_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        d_output: &[f64],
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        assert_eq!(d_output.len(), self.output_dim(), "d_output length");
        let mut delta: Vec<f64> = d_output.to_vec();
        for l in (0..self.weights.len()).rev() {
            let act = self.activation(l);
            let out = &trace.activations[l + 1];
            delta.iter_mut().zip(out).for_each(|(d, &a)| *d *= act.derivative_from_output(a));
            let x = &trace.activations[l];
            let n_in = self.layer_sizes[l];
            let gw = &mut grads.weights[l];
            let nz = sparse_enough(x);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                match &nz {
                    Some(nz) => nz.iter().for_each(|&i| row[i] += d * x[i]),
                    None => row.iter_mut().zip(x).for_each(|(g, &xi)| *g += d * xi),
                }
            }
            grads.biases[l].iter_mut().zip(&delta).for_each(|(g, &d)| *g += d);
            if l == 0 && !want_input_grad {
                return None;
            }
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                prev.iter_mut().zip(row).for_each(|(p, &wi)| *p += d * wi);
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Mean squared error `(1/N) Σ ‖f(x_i) − y_i‖²` and its exact gradient.
    pub fn mse_gradients<X: AsRef<[f64]>, Y: AsRef<[f64]>>(
        &self,
        inputs: &[X],
        targets: &[Y],
    ) -> Result<(f64, Gradients), NeuralError> {
        if inputs.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        if inputs.len() != targets.len() {
            return Err(NeuralError::Shape { expected: inputs.len(), got: targets.len() });
        }
        let n = inputs.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            let (x, y) = (x.as_ref(), y.as_ref());
            if y.len() != self.output_dim() {
                return Err(NeuralError::Shape { expected: self.output_dim(), got: y.len() });
            }
            let trace = self.forward_trace(x)?;
            let d: Vec<f64> = trace.output().iter().zip(y).map(|(o, t)| o - t).collect();
            loss += d.iter().map(|v| v * v).sum::<f64>();
            let d_out: Vec<f64> = d.iter().map(|v| 2.0 * v / n).collect();
            self.backward(&trace, &d_out, &mut grads, false);
        }
        Ok((loss / n, grads))
    }

    pub fn mse<X: AsRef<[f64]>, Y: AsRef<[f64]>>(&self, inputs: &[X], targets: &[Y]) -> Result<f64, NeuralError> {
        if inputs.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            let (x, y) = (x.as_ref(), y.as_ref());
            let out = self.forward(x)?;
            loss += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
        }
        Ok(loss / inputs.len() as f64)
    }

    /// `self ← tau·source + (1 − tau)·self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (dst, src) in self.slices_mut().zip(source.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = tau * s + (1.0 - tau) * *d);
        }
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            layer_sizes: self.layer_sizes.clone(),
            activations: Activations { hidden: self.hidden, output: self.output },
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Mlp, NeuralError> {
        let file: MlpFile = serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Mlp::try_from(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Activations {
    pub hidden: Activation,
    pub output: Activation,
}

/// JSON checkpoint of one network; weights are row-major per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpFile {
    pub layer_sizes: Vec<usize>,
    pub activations: Activations,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

impl TryFrom<MlpFile> for Mlp {
    type Error = NeuralError;

    fn try_from(f: MlpFile) -> Result<Mlp, NeuralError> {
        Mlp::from_parts(f.layer_sizes, f.activations.hidden, f.activations.output, f.weights, f.biases, f.seed)
    }
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Mlp, D::Error> {
        Mlp::try_from(MlpFile::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = net.slices().map(|s| vec![0.0; s.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to `net`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NeuralError> {
        let shapes_match = net.slices().zip(grads.slices()).all(|(p, g)| p.len() == g.len())
            && net.slices().count() == grads.slices().count()
            && self.m.len() == grads.slices().count()
            && self.m.iter().zip(grads.slices()).all(|(m, g)| m.len() == g.len());
        if !shapes_match {
            return Err(NeuralError::Shape { expected: net.num_params(), got: grads.slices().map(<[f64]>::len).sum() });
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let params = net.weights.iter_mut().zip(net.biases.iter_mut()).flat_map(|(w, b)| [w, b]);
        for (((p, g), m), v) in params.zip(grads.slices()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Max over parameters of `|analytic − central difference| / max(1, |analytic|)`
/// for the MSE loss on the given batch.
pub fn finite_difference_check(
    net: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    h: f64,
) -> Result<f64, NeuralError> {
    let (_, analytic) = net.mse_gradients(inputs, targets)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let layers = net.weights.len();
    for slot in 0..2 * layers {
        let (l, is_bias) = (slot / 2, slot % 2 == 1);
        let len = if is_bias { net.biases[l].len() } else { net.weights[l].len() };
        for i in 0..len {
            fn param(m: &mut Mlp, l: usize, i: usize, is_bias: bool) -> &mut f64 {
                if is_bias {
                    &mut m.biases[l][i]
                } else {
                    &mut m.weights[l][i]
                }
            }
            let orig = *param(&mut probe, l, i, is_bias);
            *param(&mut probe, l, i, is_bias) = orig + h;
            let up = probe.mse(inputs, targets)?;
            *param(&mut probe, l, i, is_bias) = orig - h;
            let down = probe.mse(inputs, targets)?;
            *param(&mut probe, l, i, is_bias) = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = if is_bias { analytic.biases[l][i] } else { analytic.weights[l][i] };
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
