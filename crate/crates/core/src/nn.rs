//! Small fully-connected networks with hand-written backpropagation, plus
//! the adaptive-moment optimizer that trains them.
//!
//! Weights are stored one matrix per layer with shape `[outputs, inputs]`.
//! Hidden layers share one activation; the output layer is always linear.
//! Batched routines take inputs as `[batch, features]` row matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output value.
    #[inline]
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Parameters of a multilayer perceptron. Also used as the container for
/// parameter gradients, which share the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden_activation: Activation,
}

/// Post-activation values of every layer for a batch, kept for the backward pass.
/// `layers[0]` is the input; the last entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("cache always holds the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.layers.pop().expect("cache always holds the input")
    }
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, tanh hidden layers.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            weights,
            biases,
            hidden_activation: Activation::Tanh,
        })
    }

    /// Builds a network from explicit parameters, checking that layer
    /// dimensions chain and that every entry is finite.
    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden_activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(format!(
                "need matching non-empty weight and bias lists, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            check_len("bias length", w.nrows(), b.len())?;
            if k > 0 {
                check_len("layer input size", weights[k - 1].nrows(), w.ncols())?;
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {k} has non-finite entries")));
            }
        }
        Ok(Self {
            weights,
            biases,
            hidden_activation,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            hidden_activation: self.hidden_activation,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.weights.iter().map(|w| w.nrows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.nrows()).unwrap_or(0)
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Sets the output layer to zero so the network initially maps everything to zero.
    pub fn zero_output_layer(&mut self) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(w) = self.weights.last_mut() {
            w.mapv_inplace(|v| v * factor);
        }
    }

    /// Parameters flattened layer by layer: row-major weights, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend(w.iter().copied());
            flat.extend(b.iter().copied());
        }
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_from_flat(flat)?;
        Ok(out)
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    /// Single-sample evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), input.len())?;
        let mut current = input.to_vec();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.activation_for(k);
            current = w
                .rows()
                .into_iter()
                .zip(b.iter())
                .map(|(row, &bias)| {
                    let z = row.iter().zip(&current).map(|(a, x)| a * x).sum::<f64>() + bias;
                    act.apply(z)
                })
                .collect();
        }
        Ok(current)
    }

    /// Reverse-mode derivative of `upstream · forward(input)` with respect to
    /// the parameters and the input.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        check_len("network input", self.input_dim(), input.len())?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .expect("row vector shape");
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .expect("row vector shape");
        let cache = self.forward_batch(x.view())?;
        let (grads, input_grad) = self.backward_batch(&cache, up.view())?;
        Ok((grads, input_grad.row(0).to_vec()))
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        check_len("network input", self.input_dim(), input.ncols())?;
        let mut layers = Vec::with_capacity(self.weights.len() + 1);
        layers.push(input.to_owned());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = layers[k].dot(&w.t());
            z += b;
            let act = self.activation_for(k);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            layers.push(z);
        }
        Ok(ForwardCache { layers })
    }

    /// Gradients summed over the batch rows, and the per-row input gradients.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Mlp, Array2<f64>)> {
        check_len("upstream gradient", self.output_dim(), upstream.ncols())?;
        check_len("upstream batch", cache.layers[0].nrows(), upstream.nrows())?;
        let n_layers = self.weights.len();
        let mut grad_w = Vec::with_capacity(n_layers);
        let mut grad_b = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_owned();
        for k in (0..n_layers).rev() {
            grad_w.push(delta.t().dot(&cache.layers[k]));
            grad_b.push(delta.sum_axis(Axis(0)));
            let mut back = delta.dot(&self.weights[k]);
            if k > 0 {
                let act = self.activation_for(k - 1);
                if act != Activation::Identity {
                    back.zip_mut_with(&cache.layers[k], |d, &y| *d *= act.slope_from_output(y));
                }
            }
            delta = back;
        }
        grad_w.reverse();
        grad_b.reverse();
        let grads = Mlp {
            weights: grad_w,
            biases: grad_b,
            hidden_activation: self.hidden_activation,
        };
        Ok((grads, delta))
    }

    /// Forward-mode directional derivative of the outputs along a parameter
    /// direction (a Jacobian-vector product), for every row in the cache.
    pub fn jvp_batch(&self, cache: &ForwardCache, direction: &Mlp) -> Result<Array2<f64>> {
        check_len("direction layers", self.weights.len(), direction.weights.len())?;
        let batch = cache.layers[0].nrows();
        let mut tangent = Array2::<f64>::zeros((batch, self.input_dim()));
        for (k, w) in self.weights.iter().enumerate() {
            let dw = &direction.weights[k];
            let db = &direction.biases[k];
            if dw.raw_dim() != w.raw_dim() {
                return Err(Error::Shape {
                    context: "direction layer",
                    expected: w.len(),
                    actual: dw.len(),
                });
            }
            let mut dz = tangent.dot(&w.t()) + cache.layers[k].dot(&dw.t());
            dz += db;
            let act = self.activation_for(k);
            if act != Activation::Identity {
                dz.zip_mut_with(&cache.layers[k + 1], |d, &y| *d *= act.slope_from_output(y));
            }
            tangent = dz;
        }
        Ok(tangent)
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output size, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

/// Closed-form parameter count for a chain of dense layers.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

/// Input sizes followed by hidden sizes followed by the output size.
pub fn layer_chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.step_size.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates of the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// In-place update of a flat parameter vector. Nothing is modified if any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], config: &AdamConfig) -> Result<()> {
        config.validate()?;
        check_len("optimizer parameters", self.len(), params.len())?;
        check_len("optimizer gradients", self.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at parameter index {i}",
                grads[i]
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= config.step_size * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        Ok(())
    }
}

/// Functional form of one optimizer step on a network.
pub fn optimizer_step(
    params: &Mlp,
    grads: &Mlp,
    state: &AdamState,
    config: &AdamConfig,
) -> Result<(Mlp, AdamState)> {
    let mut flat = params.to_flat();
    let mut next_state = state.clone();
    next_state.step(&mut flat, &grads.to_flat(), config)?;
    Ok((params.with_flat(&flat)?, next_state))
}
