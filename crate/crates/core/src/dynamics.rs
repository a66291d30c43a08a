//! Learned Gaussian transition models.
//!
//! A model maps `(s, a)` to a diagonal Gaussian over the next state. The
//! network sees standardized inputs and emits `[mean_delta; log_variance]`;
//! the reported mean is always the absolute next state `s + mean_delta`.
//! Training minimizes
//!
//! ```text
//! Σ_i (μ_i - s'_i)ᵀ Σ_i⁻¹ (μ_i - s'_i) + log det Σ_i
//! ```
//!
//! without the usual ½ factor or `2π` constant.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{layer_chain, AdamConfig, AdamState, Mlp};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_NORMALIZER_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Teacher,
    Student,
}

impl Owner {
    pub fn name(self) -> &'static str {
        match self {
            Owner::Teacher => "teacher",
            Owner::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_len("gaussian variance", mean.len(), variance.len())?;
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!(
                "invalid gaussian: mean {mean:?} variance {variance:?}"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Natural-log density at `x`, including all normalizing constants.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("density point", self.dim(), x.len())?;
        Ok(-0.5
            * self
                .mean
                .iter()
                .zip(&self.variance)
                .zip(x)
                .map(|((m, v), x)| (x - m) * (x - m) / v + v.ln() + LOG_2PI)
                .sum::<f64>())
    }
}

/// Feature standardization fitted to the contents of a transition buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    fn fit<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [f64])>, dim: usize) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for (s, a) in rows {
            count += 1;
            for (i, v) in s.iter().chain(a).enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(MIN_NORMALIZER_STD))
            .collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogVarianceBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for LogVarianceBounds {
    fn default() -> Self {
        Self {
            min: -10.0,
            max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDynamicsModel {
    trunk: Mlp,
    normalizer: Normalizer,
    owner: Owner,
    state_dim: usize,
    action_dim: usize,
    log_var_bounds: LogVarianceBounds,
}

/// One observed transition `(s, a, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// Batched model outputs: absolute means and clamped log-variances, one row per sample.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl BatchPrediction {
    pub fn row(&self, i: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: self.mean.row(i).to_vec(),
            variance: self.log_var.row(i).iter().map(|lv| lv.exp()).collect(),
        }
    }
}

impl GaussianDynamicsModel {
    /// Fresh model whose output layer is zero: it predicts `s' = s` with unit variance.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        owner: Owner,
        log_var_bounds: LogVarianceBounds,
        seed: u64,
    ) -> Result<Self> {
        if !(log_var_bounds.min < log_var_bounds.max) {
            return Err(Error::Config(format!(
                "log-variance bounds must satisfy min < max, got {log_var_bounds:?}"
            )));
        }
        let mut trunk = Mlp::new(&layer_chain(state_dim + action_dim, hidden, 2 * state_dim), seed)?;
        trunk.zero_output_layer();
        Ok(Self {
            trunk,
            normalizer: Normalizer::identity(state_dim + action_dim),
            owner,
            state_dim,
            action_dim,
            log_var_bounds,
        })
    }

    /// Reassembles a model from stored parts (used by checkpoint loading).
    pub fn from_parts(
        trunk: Mlp,
        normalizer: Normalizer,
        owner: Owner,
        state_dim: usize,
        action_dim: usize,
        log_var_bounds: LogVarianceBounds,
    ) -> Result<Self> {
        check_len("dynamics trunk input", state_dim + action_dim, trunk.input_dim())?;
        check_len("dynamics trunk output", 2 * state_dim, trunk.output_dim())?;
        check_len("normalizer mean", state_dim + action_dim, normalizer.mean.len())?;
        check_len("normalizer std", state_dim + action_dim, normalizer.std.len())?;
        if normalizer.std.iter().any(|s| !(*s >= MIN_NORMALIZER_STD)) {
            return Err(Error::Config("normalizer std below floor".into()));
        }
        Ok(Self {
            trunk,
            normalizer,
            owner,
            state_dim,
            action_dim,
            log_var_bounds,
        })
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn log_var_bounds(&self) -> LogVarianceBounds {
        self.log_var_bounds
    }

    fn input_matrix(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("state batch width", self.state_dim, states.ncols())?;
        check_len("action batch width", self.action_dim, actions.ncols())?;
        check_len("action batch rows", states.nrows(), actions.nrows())?;
        let mut input = ndarray::concatenate![Axis(1), states, actions];
        for (j, mut col) in input.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.normalizer.mean[j], self.normalizer.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(input)
    }

    fn clamp_log_var(&self, raw: f64) -> f64 {
        raw.clamp(self.log_var_bounds.min, self.log_var_bounds.max)
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<DiagonalGaussian> {
        check_len("state", self.state_dim, s.len())?;
        check_len("action", self.action_dim, a.len())?;
        let states = ArrayView2::from_shape((1, s.len()), s).expect("row shape");
        let actions = ArrayView2::from_shape((1, a.len()), a).expect("row shape");
        Ok(self.predict_batch(states, actions)?.row(0))
    }

    pub fn predict_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<BatchPrediction> {
        let input = self.input_matrix(states, actions)?;
        let out = self.trunk.forward_batch(input.view())?.into_output();
        Ok(self.split_output(states, &out))
    }

    fn split_output(&self, states: ArrayView2<f64>, out: &Array2<f64>) -> BatchPrediction {
        let d = self.state_dim;
        let mean = &states + &out.slice(s![.., ..d]);
        let log_var = out.slice(s![.., d..]).mapv(|v| self.clamp_log_var(v));
        BatchPrediction { mean, log_var }
    }

    /// Summed loss over the batch and its gradient with respect to the trunk.
    pub fn nll_loss(&self, batch: &[Transition]) -> Result<(f64, Mlp)> {
        if batch.is_empty() {
            return Err(Error::Usage("negative log-likelihood of an empty batch".into()));
        }
        let (states, actions, next) = stack(batch, self.state_dim, self.action_dim)?;
        self.nll_loss_arrays(states.view(), actions.view(), next.view())
    }

    fn nll_loss_arrays(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        next: ArrayView2<f64>,
    ) -> Result<(f64, Mlp)> {
        let d = self.state_dim;
        let input = self.input_matrix(states, actions)?;
        let cache = self.trunk.forward_batch(input.view())?;
        let out = cache.output();
        let mut upstream = Array2::<f64>::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..out.nrows() {
            for j in 0..d {
                let raw_lv = out[[i, d + j]];
                let lv = self.clamp_log_var(raw_lv);
                let inv_var = (-lv).exp();
                let residual = states[[i, j]] + out[[i, j]] - next[[i, j]];
                loss += residual * residual * inv_var + lv;
                upstream[[i, j]] = 2.0 * residual * inv_var;
                let inside = raw_lv > self.log_var_bounds.min && raw_lv < self.log_var_bounds.max;
                upstream[[i, d + j]] = if inside {
                    1.0 - residual * residual * inv_var
                } else {
                    0.0
                };
            }
        }
        let (grads, _) = self.trunk.backward_batch(&cache, upstream.view())?;
        Ok((loss, grads))
    }

    /// Mean per-sample loss over everything in the buffer.
    pub fn mean_loss(&self, buffer: &TransitionBuffer) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::Usage("loss over an empty buffer".into()));
        }
        let (states, actions, next) = buffer.arrays(self.state_dim, self.action_dim)?;
        let pred = self.predict_batch(states.view(), actions.view())?;
        let mut total = 0.0;
        for ((m, lv), x) in pred.mean.iter().zip(pred.log_var.iter()).zip(next.iter()) {
            total += (m - x) * (m - x) * (-lv).exp() + lv;
        }
        Ok(total / buffer.len() as f64)
    }

    /// Refits the normalizer to the buffer, then runs `epochs` shuffled
    /// minibatch passes of Adam on the mean per-sample loss.
    pub fn fit<R: Rng>(
        &self,
        buffer: &TransitionBuffer,
        epochs: usize,
        batch_size: usize,
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<GaussianDynamicsModel> {
        if buffer.owner() != self.owner {
            return Err(Error::Usage(format!(
                "{} model cannot be fit on {} transitions",
                self.owner.name(),
                buffer.owner().name()
            )));
        }
        if buffer.is_empty() {
            return Err(Error::Usage("cannot fit a dynamics model on an empty buffer".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("dynamics batch size must be positive".into()));
        }
        adam.validate()?;
        let mut model = self.clone();
        model.normalizer = Normalizer::fit(
            buffer.iter().map(|t| (t.state.as_slice(), t.action.as_slice())),
            self.state_dim + self.action_dim,
        );
        if epochs == 0 {
            return Ok(model);
        }
        let (states, actions, next) = buffer.arrays(self.state_dim, self.action_dim)?;
        let mut flat = model.trunk.to_flat();
        let mut state = AdamState::new(flat.len());
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        let mut batch_index = 0usize;
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                let s = states.select(Axis(0), chunk);
                let a = actions.select(Axis(0), chunk);
                let n = next.select(Axis(0), chunk);
                let (loss, grads) = model.nll_loss_arrays(s.view(), a.view(), n.view())?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite dynamics loss at batch {batch_index}"
                    )));
                }
                let scale = 1.0 / chunk.len() as f64;
                let g: Vec<f64> = grads.to_flat().into_iter().map(|v| v * scale).collect();
                state
                    .step(&mut flat, &g, adam)
                    .map_err(|e| Error::Numeric(format!("dynamics batch {batch_index}: {e}")))?;
                model.trunk.set_from_flat(&flat)?;
                batch_index += 1;
            }
        }
        Ok(model)
    }
}

fn stack(batch: &[Transition], state_dim: usize, action_dim: usize) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let n = batch.len();
    let mut states = Array2::zeros((n, state_dim));
    let mut actions = Array2::zeros((n, action_dim));
    let mut next = Array2::zeros((n, state_dim));
    for (i, t) in batch.iter().enumerate() {
        check_len("transition state", state_dim, t.state.len())?;
        check_len("transition action", action_dim, t.action.len())?;
        check_len("transition next state", state_dim, t.next_state.len())?;
        for j in 0..state_dim {
            states[[i, j]] = t.state[j];
            next[[i, j]] = t.next_state[j];
        }
        for j in 0..action_dim {
            actions[[i, j]] = t.action[j];
        }
    }
    Ok((states, actions, next))
}

/// FIFO ring buffer of transitions collected by one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBuffer {
    owner: Owner,
    capacity: usize,
    data: VecDeque<Transition>,
}

impl TransitionBuffer {
    pub fn new(owner: Owner, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("transition buffer capacity must be positive".into()));
        }
        Ok(Self {
            owner,
            capacity,
            data: VecDeque::new(),
        })
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, transition: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(transition);
    }

    pub fn extend(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        for t in transitions {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    fn arrays(&self, state_dim: usize, action_dim: usize) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let (a, b) = self.data.as_slices();
        if b.is_empty() {
            stack(a, state_dim, action_dim)
        } else {
            let joined: Vec<Transition> = self.data.iter().cloned().collect();
            stack(&joined, state_dim, action_dim)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(state_dim: usize, action_dim: usize, owner: Owner, seed: u64) -> GaussianDynamicsModel {
        GaussianDynamicsModel::new(state_dim, action_dim, &[16, 16], owner, LogVarianceBounds::default(), seed)
            .unwrap()
    }

    /// Overwrites the output layer so the trunk emits the given constant `[delta; log_var]`.
    fn constant_output(model: &mut GaussianDynamicsModel, output: &[f64]) {
        let mut flat = model.trunk.to_flat();
        let n = flat.len();
        let out_dim = output.len();
        let hidden = model.trunk.layer_sizes()[model.trunk.layer_sizes().len() - 2];
        let start = n - out_dim * hidden - out_dim;
        for v in &mut flat[start..n - out_dim] {
            *v = 0.0;
        }
        flat[n - out_dim..].copy_from_slice(output);
        model.trunk.set_from_flat(&flat).unwrap();
    }

    fn transition(s: &[f64], a: &[f64], s2: &[f64]) -> Transition {
        Transition {
            state: s.to_vec(),
            action: a.to_vec(),
            next_state: s2.to_vec(),
        }
    }

    /// Independent per-dimension evaluation of the loss.
    fn scalar_loss(mean: &[f64], var: &[f64], next: &[f64]) -> f64 {
        let mut total = 0.0;
        for d in 0..mean.len() {
            total += (mean[d] - next[d]).powi(2) / var[d] + var[d].ln();
        }
        total
    }

    #[test]
    fn fresh_model_predicts_identity_with_unit_variance() {
        let m = model(2, 1, Owner::Teacher, 0);
        let p = m.predict(&[0.3, -0.01], &[0.5]).unwrap();
        assert_eq!(p.mean, vec![0.3, -0.01]);
        assert_eq!(p.variance, vec![1.0, 1.0]);
        assert_eq!(p, m.predict(&[0.3, -0.01], &[0.5]).unwrap());
    }

    #[test]
    fn predict_rejects_wrong_dims() {
        let m = model(2, 1, Owner::Teacher, 0);
        assert!(matches!(m.predict(&[0.3], &[0.5]), Err(Error::Shape { .. })));
        assert!(matches!(m.predict(&[0.3, 0.0], &[]), Err(Error::Shape { .. })));
    }

    #[test]
    fn hand_evaluated_losses() {
        let mut m = model(2, 1, Owner::Teacher, 0);
        let (loss, _) = m.nll_loss(&[transition(&[0.0, 0.0], &[0.0], &[0.0, 0.0])]).unwrap();
        assert_eq!(loss, 0.0);

        // Residual (1, 0) under unit variance.
        let (loss, _) = m.nll_loss(&[transition(&[1.0, 0.0], &[0.0], &[0.0, 0.0])]).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);

        // Zero residual, variance e in both dimensions: log(e^2) = 2.
        constant_output(&mut m, &[0.0, 0.0, 1.0, 1.0]);
        let (loss, _) = m.nll_loss(&[transition(&[0.2, 0.1], &[0.0], &[0.2, 0.1])]).unwrap();
        assert!((loss - 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let m = model(2, 1, Owner::Teacher, 0);
        assert!(matches!(m.nll_loss(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = model(3, 2, Owner::Student, 1);
        let mut flat = m.trunk.to_flat();
        for v in flat.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        m.trunk.set_from_flat(&flat).unwrap();
        let batch: Vec<Transition> = (0..20)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                transition(&s, &a, &s2)
            })
            .collect();
        let (loss, _) = m.nll_loss(&batch).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|t| {
                let p = m.predict(&t.state, &t.action).unwrap();
                scalar_loss(&p.mean, &p.variance, &t.next_state)
            })
            .sum();
        assert!((loss - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{loss} vs {expected}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = model(2, 1, Owner::Teacher, 3);
        let mut flat = m.trunk.to_flat();
        for v in flat.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        m.trunk.set_from_flat(&flat).unwrap();
        let batch: Vec<Transition> = (0..5)
            .map(|_| {
                transition(
                    &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    &[rng.random_range(-1.0..1.0)],
                    &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                )
            })
            .collect();
        let (_, grads) = m.nll_loss(&batch).unwrap();
        let analytic = grads.to_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            plus.trunk.set_from_flat(&fp).unwrap();
            minus.trunk.set_from_flat(&fm).unwrap();
            let numeric = (plus.nll_loss(&batch).unwrap().0 - minus.nll_loss(&batch).unwrap().0) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / scale <= 1e-4 || (analytic[i] - numeric).abs() < 1e-8,
                "param {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let g = DiagonalGaussian::new(vec![0.3, -0.2], vec![0.5, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lo, hi) = (-6.0, 6.0);
        let n = 200_000;
        let area = (hi - lo) * (hi - lo);
        let mut acc = 0.0;
        for _ in 0..n {
            let x = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            acc += g.log_density(&x).unwrap().exp();
        }
        let integral = acc / n as f64 * area;
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = TransitionBuffer::new(Owner::Teacher, 3).unwrap();
        for k in 0..5 {
            b.push(transition(&[k as f64], &[0.0], &[0.0]));
        }
        assert_eq!(b.len(), 3);
        let firsts: Vec<f64> = b.iter().map(|t| t.state[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
        assert!(TransitionBuffer::new(Owner::Teacher, 0).is_err());
    }

    #[test]
    fn fit_refuses_other_owners_data() {
        let m = model(1, 1, Owner::Student, 0);
        let mut b = TransitionBuffer::new(Owner::Teacher, 10).unwrap();
        b.push(transition(&[0.0], &[0.0], &[0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = m.fit(&b, 1, 4, &AdamConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn zero_epochs_only_updates_normalizer() {
        let m = model(1, 1, Owner::Teacher, 0);
        let mut b = TransitionBuffer::new(Owner::Teacher, 10).unwrap();
        b.push(transition(&[1.0], &[0.0], &[1.0]));
        b.push(transition(&[3.0], &[1.0], &[3.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fitted = m.fit(&b, 0, 4, &AdamConfig::default(), &mut rng).unwrap();
        assert_eq!(fitted.trunk, m.trunk);
        assert_eq!(fitted.normalizer.mean, vec![2.0, 0.5]);
        assert_eq!(fitted.normalizer.std, vec![1.0, 0.5]);
    }

    #[test]
    fn learns_constant_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = TransitionBuffer::new(Owner::Teacher, 2000).unwrap();
        for _ in 0..1000 {
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = [rng.random_range(-1.0..1.0)];
            b.push(transition(&s, &a, &[s[0] + 0.1, s[1] + 0.1]));
        }
        let m = model(2, 1, Owner::Teacher, 4);
        let fitted = m.fit(&b, 30, 64, &AdamConfig::default(), &mut rng).unwrap();
        for _ in 0..20 {
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = fitted.predict(&s, &[rng.random_range(-1.0..1.0)]).unwrap();
            assert!((p.mean[0] - s[0] - 0.1).abs() < 1e-3, "{:?}", p.mean);
            assert!((p.mean[1] - s[1] - 0.1).abs() < 1e-3, "{:?}", p.mean);
        }
    }

    #[test]
    fn identity_map_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = TransitionBuffer::new(Owner::Student, 2000).unwrap();
        for _ in 0..1000 {
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            b.push(transition(&s, &[rng.random_range(-1.0..1.0)], &s));
        }
        let m = model(2, 1, Owner::Student, 5);
        let fitted = m.fit(&b, 30, 64, &AdamConfig::default(), &mut rng).unwrap();
        for t in b.iter().take(100) {
            let p = fitted.predict(&t.state, &t.action).unwrap();
            assert!(p.variance.iter().all(|&v| v <= 0.01), "{:?}", p.variance);
        }
    }

    fn mountain_car_buffer(n: usize, seed: u64) -> TransitionBuffer {
        let params = EnvParams::mountain_car();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TransitionBuffer::new(Owner::Teacher, n).unwrap();
        let mut state = env::reset(&params, rng.random());
        while b.len() < n {
            let a = [rng.random_range(-1.0..1.0)];
            let r = env::step(&params, &state, &a).unwrap();
            b.push(transition(&state.values, &a, &r.next_state.values));
            state = if r.done { env::reset(&params, rng.random()) } else { r.next_state };
        }
        b
    }

    #[test]
    fn mountain_car_model_fits_held_out_data() {
        let train = mountain_car_buffer(1000, 10);
        let test = mountain_car_buffer(200, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = GaussianDynamicsModel::new(2, 1, &[64, 64], Owner::Teacher, LogVarianceBounds::default(), 0).unwrap();
        let fitted = m.fit(&train, 50, 256, &AdamConfig::default(), &mut rng).unwrap();
        let mse: f64 = test
            .iter()
            .map(|t| {
                let p = fitted.predict(&t.state, &t.action).unwrap();
                p.mean.iter().zip(&t.next_state).map(|(m, x)| (m - x).powi(2)).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / test.len() as f64;
        assert!(mse < 1e-4, "held-out mse {mse}");
    }

    #[test]
    fn fitting_usually_reduces_buffer_loss() {
        let mut improved = 0;
        for seed in 0..10 {
            let b = mountain_car_buffer(300, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = model(2, 1, Owner::Teacher, seed).fit(&b, 0, 64, &AdamConfig::default(), &mut rng).unwrap();
            let before = m.mean_loss(&b).unwrap();
            let after = m.fit(&b, 5, 64, &AdamConfig::default(), &mut rng).unwrap().mean_loss(&b).unwrap();
            if after <= before {
                improved += 1;
            }
        }
        assert!(improved >= 9, "loss decreased in {improved}/10 runs");
    }
}
