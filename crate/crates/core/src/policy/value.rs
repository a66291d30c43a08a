use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InputScaling;
use crate::error::{check_len, Error, Result};
use crate::nn::{layer_chain, AdamConfig, AdamState, Mlp};

/// State-value baseline `V(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    net: Mlp,
    scaling: InputScaling,
}

impl ValueFunction {
    pub fn new(scaling: InputScaling, hidden: &[usize], seed: u64) -> Result<Self> {
        let net = Mlp::new(&layer_chain(scaling.dim(), hidden, 1), seed)?;
        Ok(Self { net, scaling })
    }

    /// Random hidden layers under a zero output layer, so `V ≡ 0` at the
    /// start. With no reward the advantages are then exactly zero and the
    /// policy is left alone instead of chasing its own baseline's noise.
    pub fn zeros(scaling: InputScaling, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut v = Self::new(scaling, hidden, seed)?;
        v.net.zero_output_layer();
        Ok(v)
    }

    pub fn from_parts(net: Mlp, scaling: InputScaling) -> Result<Self> {
        check_len("value input", scaling.dim(), net.input_dim())?;
        check_len("value output", 1, net.output_dim())?;
        Ok(Self { net, scaling })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn state_dim(&self) -> usize {
        self.scaling.dim()
    }

    #[cfg(test)]
    pub(crate) fn set_output_bias(&mut self, bias: f64) {
        let mut flat = self.net.to_flat();
        *flat.last_mut().expect("non-empty network") = bias;
        self.net.set_from_flat(&flat).expect("same length");
    }

    pub fn predict(&self, s: &[f64]) -> Result<f64> {
        check_len("value state", self.state_dim(), s.len())?;
        Ok(self.net.forward(&self.scaling.apply(s))?[0])
    }

    pub fn predict_batch(&self, states: ArrayView2<f64>) -> Result<Vec<f64>> {
        let input = self.scaling.apply_batch(states)?;
        Ok(self.net.forward_batch(input.view())?.into_output().column(0).to_vec())
    }

    /// Mean squared error over the given states and its gradient.
    pub fn mse(&self, states: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Mlp)> {
        check_len("value targets", states.nrows(), targets.len())?;
        let input = self.scaling.apply_batch(states)?;
        let cache = self.net.forward_batch(input.view())?;
        let n = targets.len() as f64;
        let out = cache.output();
        let mut upstream = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let err = out[[i, 0]] - t;
            loss += err * err / n;
            upstream[[i, 0]] = 2.0 * err / n;
        }
        let (grads, _) = self.net.backward_batch(&cache, upstream.view())?;
        Ok((loss, grads))
    }
}

/// Minibatch squared-error regression of `V(s_i)` onto `targets[i]`.
pub fn fit_value<R: Rng>(
    value_fn: &ValueFunction,
    states: ArrayView2<f64>,
    targets: &[f64],
    epochs: usize,
    batch_size: usize,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<ValueFunction> {
    check_len("value targets", states.nrows(), targets.len())?;
    if batch_size == 0 {
        return Err(Error::Config("value batch size must be positive".into()));
    }
    adam.validate()?;
    let mut fitted = value_fn.clone();
    if epochs == 0 || targets.is_empty() {
        return Ok(fitted);
    }
    let mut flat = fitted.net.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let s = states.select(Axis(0), chunk);
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = fitted.mse(s.view(), &t)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite value loss {loss}")));
            }
            state.step(&mut flat, &grads.to_flat(), adam)?;
            fitted.net.set_from_flat(&flat)?;
        }
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let targets = states.rows().into_iter().map(|r| r[0] * 2.0 - r[1]).collect();
        (states, targets)
    }

    #[test]
    fn zero_targets_are_learned() {
        let (states, _) = data(0, 256);
        let v = ValueFunction::new(InputScaling::identity(2), &[32, 32], 1).unwrap();
        let mut flat = v.net.to_flat();
        let last = flat.len() - 1;
        flat[last] = 1.0;
        let mut v = v;
        v.net.set_from_flat(&flat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fitted = fit_value(&v, states.view(), &vec![0.0; 256], 100, 64, &AdamConfig::default(), &mut rng).unwrap();
        let preds = fitted.predict_batch(states.view()).unwrap();
        let mean_abs = preds.iter().map(|p| p.abs()).sum::<f64>() / preds.len() as f64;
        assert!(mean_abs < 0.05, "{mean_abs}");
    }

    #[test]
    fn zero_targets_keep_a_zero_function_at_zero() {
        let (states, _) = data(4, 64);
        let v = ValueFunction::zeros(InputScaling::identity(2), &[8, 8], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fitted = fit_value(&v, states.view(), &vec![0.0; 64], 3, 16, &AdamConfig::default(), &mut rng).unwrap();
        assert!(fitted.predict_batch(states.view()).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (states, targets) = data(1, 16);
        let v = ValueFunction::new(InputScaling::identity(2), &[8], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(fit_value(&v, states.view(), &targets, 0, 4, &AdamConfig::default(), &mut rng).unwrap(), v);
    }

    #[test]
    fn loss_usually_decreases() {
        let mut decreased = 0;
        for seed in 0..10 {
            let (states, targets) = data(seed, 128);
            let v = ValueFunction::new(InputScaling::identity(2), &[32, 32], seed).unwrap();
            let before = v.mse(states.view(), &targets).unwrap().0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fitted = fit_value(&v, states.view(), &targets, 5, 32, &AdamConfig::default(), &mut rng).unwrap();
            if fitted.mse(states.view(), &targets).unwrap().0 <= before {
                decreased += 1;
            }
        }
        assert!(decreased >= 9, "{decreased}/10");
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let (states, targets) = data(3, 8);
        let v = ValueFunction::new(InputScaling::identity(2), &[6, 6], 2).unwrap();
        let (_, grads) = v.mse(states.view(), &targets).unwrap();
        let analytic = grads.to_flat();
        let flat = v.net.to_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = v.clone();
            let mut minus = v.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            plus.net.set_from_flat(&fp).unwrap();
            minus.net.set_from_flat(&fm).unwrap();
            let numeric = (plus.mse(states.view(), &targets).unwrap().0 - minus.mse(states.view(), &targets).unwrap().0) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / scale <= 1e-4 || (analytic[i] - numeric).abs() < 1e-9);
        }
    }
}
