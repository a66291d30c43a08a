//! Stochastic Gaussian policies and the machinery that trains them: rollout
//! collection, advantage estimation, a value baseline, and trust-region updates.

mod gae;
mod rollout;
mod trpo;
mod value;

pub use gae::{gae_advantages, GaeOutput};
pub use rollout::{collect_rollouts, flatten_steps, Step, Trajectory};
pub use trpo::{conjugate_gradient, trpo_update, TrpoConfig, TrpoOutcome, TrpoStats};
pub use value::{fit_value, ValueFunction};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::LOG_2PI;
use crate::env::EnvParams;
use crate::error::{check_len, Error, Result};
use crate::nn::{layer_chain, ForwardCache, Mlp};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Fixed affine map `(s - offset) * scale` applied before a network sees a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn for_env(params: &EnvParams) -> Self {
        let (offset, scale) = params.observation_scaling();
        Self { offset, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, k))| (v - o) * k)
            .collect()
    }

    pub fn apply_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("state batch width", self.dim(), states.ncols())?;
        let mut out = states.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (o, k) = (self.offset[j], self.scale[j]);
            col.mapv_inplace(|v| (v - o) * k);
        }
        Ok(out)
    }
}

/// `a ~ N(mean_net(s), exp(log_std)^2)` with a state-independent standard
/// deviation. Actions are clipped to the bounds only when handed to the
/// environment; densities always refer to the unclipped sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    mean_net: Mlp,
    log_std: Vec<f64>,
    scaling: InputScaling,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

/// Batched mean-network evaluation retained for gradient computations.
pub struct PolicyBatch {
    cache: ForwardCache,
}

impl PolicyBatch {
    pub fn means(&self) -> &Array2<f64> {
        self.cache.output()
    }
}

impl GaussianPolicy {
    pub fn new(
        hidden: &[usize],
        init_log_std: f64,
        scaling: InputScaling,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        check_len("action bounds", action_low.len(), action_high.len())?;
        let mut mean_net = Mlp::new(&layer_chain(scaling.dim(), hidden, action_low.len()), seed)?;
        mean_net.scale_output_layer(0.1);
        let log_std = vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_low.len()];
        Ok(Self {
            mean_net,
            log_std,
            scaling,
            action_low,
            action_high,
        })
    }

    pub fn for_env(params: &EnvParams, hidden: &[usize], init_log_std: f64, seed: u64) -> Result<Self> {
        let info = params.space_info();
        Self::new(
            hidden,
            init_log_std,
            InputScaling::for_env(params),
            info.action_low,
            info.action_high,
            seed,
        )
    }

    pub fn from_parts(
        mean_net: Mlp,
        log_std: Vec<f64>,
        scaling: InputScaling,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
    ) -> Result<Self> {
        check_len("policy input", scaling.dim(), mean_net.input_dim())?;
        check_len("log_std", mean_net.output_dim(), log_std.len())?;
        check_len("action low", log_std.len(), action_low.len())?;
        check_len("action high", log_std.len(), action_high.len())?;
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite log_std".into()));
        }
        Ok(Self {
            mean_net,
            log_std: log_std.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
            scaling,
            action_low,
            action_high,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.scaling.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean_net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    pub fn set_log_std(&mut self, log_std: &[f64]) {
        for (dst, src) in self.log_std.iter_mut().zip(log_std) {
            *dst = src.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn num_params(&self) -> usize {
        self.mean_net.num_params() + self.log_std.len()
    }

    /// Mean-network parameters followed by the log standard deviations.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.mean_net.to_flat();
        flat.extend_from_slice(&self.log_std);
        flat
    }

    /// Copy with parameters replaced; log standard deviations are clamped to range.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_len("policy parameters", self.num_params(), flat.len())?;
        let split = self.mean_net.num_params();
        let mut out = self.clone();
        out.mean_net.set_from_flat(&flat[..split])?;
        out.set_log_std(&flat[split..]);
        Ok(out)
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len("policy state", self.state_dim(), s.len())?;
        let mean = self.mean_net.forward(&self.scaling.apply(s))?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!("non-finite policy mean {mean:?}")));
        }
        Ok(mean)
    }

    /// Samples an unclipped action and returns it with its log-density.
    pub fn act<R: Rng>(&self, s: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean_action(s)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = rng.sample(StandardNormal);
                m + ls.exp() * z
            })
            .collect();
        let log_prob = gaussian_log_prob(&mean, &self.log_std, &action);
        Ok((action, log_prob))
    }

    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        check_len("policy action", self.action_dim(), a.len())?;
        let mean = self.mean_action(s)?;
        Ok(gaussian_log_prob(&mean, &self.log_std, a))
    }

    pub fn evaluate_batch(&self, states: ArrayView2<f64>) -> Result<PolicyBatch> {
        let input = self.scaling.apply_batch(states)?;
        let cache = self.mean_net.forward_batch(input.view())?;
        Ok(PolicyBatch { cache })
    }

    pub fn log_prob_batch(&self, batch: &PolicyBatch, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let means = batch.means();
        check_len("action batch rows", means.nrows(), actions.nrows())?;
        check_len("action batch width", self.action_dim(), actions.ncols())?;
        Ok(means
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(m, a)| {
                gaussian_log_prob(
                    m.as_slice().expect("contiguous row"),
                    &self.log_std,
                    &a.to_vec(),
                )
            })
            .collect())
    }

    /// Gradient of `Σ_i weights[i] · log π(a_i | s_i)` as a flat vector.
    pub fn weighted_log_prob_grad(
        &self,
        batch: &PolicyBatch,
        actions: ArrayView2<f64>,
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let means = batch.means();
        check_len("gradient weights", means.nrows(), weights.len())?;
        check_len("action batch rows", means.nrows(), actions.nrows())?;
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut upstream = Array2::<f64>::zeros(means.raw_dim());
        let mut log_std_grad = vec![0.0; self.action_dim()];
        for i in 0..means.nrows() {
            for d in 0..self.action_dim() {
                let diff = actions[[i, d]] - means[[i, d]];
                upstream[[i, d]] = weights[i] * diff * inv_var[d];
                log_std_grad[d] += weights[i] * (diff * diff * inv_var[d] - 1.0);
            }
        }
        let (grads, _) = self.mean_net.backward_batch(&batch.cache, upstream.view())?;
        let mut flat = grads.to_flat();
        flat.extend(log_std_grad);
        Ok(flat)
    }

    /// Mean over states of `KL(self(·|s) ‖ other(·|s))`.
    pub fn mean_kl(&self, other: &GaussianPolicy, states: ArrayView2<f64>) -> Result<f64> {
        let own = self.evaluate_batch(states)?;
        let theirs = other.evaluate_batch(states)?;
        Ok(mean_kl_from_means(own.means(), &self.log_std, theirs.means(), &other.log_std))
    }

    /// Product of the Fisher information (the Hessian of the mean KL from
    /// this policy, taken at this policy) with a flat direction vector.
    pub fn fisher_vector_product(&self, batch: &PolicyBatch, direction: &[f64]) -> Result<Vec<f64>> {
        check_len("fisher direction", self.num_params(), direction.len())?;
        let split = self.mean_net.num_params();
        let dir_net = self.mean_net.with_flat(&direction[..split])?;
        let mut jv = self.mean_net.jvp_batch(&batch.cache, &dir_net)?;
        let n = jv.nrows() as f64;
        for (d, mut col) in jv.columns_mut().into_iter().enumerate() {
            let inv_var = (-2.0 * self.log_std[d]).exp();
            col.mapv_inplace(|v| v * inv_var / n);
        }
        let (grads, _) = self.mean_net.backward_batch(&batch.cache, jv.view())?;
        let mut out = grads.to_flat();
        out.extend(direction[split..].iter().map(|v| 2.0 * v));
        Ok(out)
    }
}

pub(crate) fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

pub(crate) fn mean_kl_from_means(
    mean_p: &Array2<f64>,
    log_std_p: &[f64],
    mean_q: &Array2<f64>,
    log_std_q: &[f64],
) -> f64 {
    let n = mean_p.nrows().max(1) as f64;
    let mut total = 0.0;
    for (mp, mq) in mean_p.rows().into_iter().zip(mean_q.rows()) {
        for d in 0..log_std_p.len() {
            let var_p = (2.0 * log_std_p[d]).exp();
            let var_q = (2.0 * log_std_q[d]).exp();
            let diff = mp[d] - mq[d];
            total += log_std_q[d] - log_std_p[d] + (var_p + diff * diff) / (2.0 * var_q) - 0.5;
        }
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(&[8, 8], 0.0, InputScaling::identity(2), vec![-1.0], vec![1.0], seed).unwrap()
    }

    fn random_states(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0))
    }

    fn perturbed(p: &GaussianPolicy, rng: &mut ChaCha8Rng, scale: f64) -> GaussianPolicy {
        let flat: Vec<f64> = p.to_flat().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        p.with_flat(&flat).unwrap()
    }

    #[test]
    fn log_prob_at_mean_unit_std() {
        let p = policy(0);
        let s = [0.2, -0.4];
        let mu = p.mean_action(&s).unwrap();
        let lp = p.log_prob(&s, &mu).unwrap();
        assert!((lp - (-0.5 * LOG_2PI)).abs() < 1e-15);
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_decreases_away_from_mean() {
        let p = policy(0);
        let s = [0.1, 0.1];
        let mu = p.mean_action(&s).unwrap()[0];
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let lp = p.log_prob(&s, &[mu + 0.3 * k as f64]).unwrap();
            assert!(lp < last);
            last = lp;
        }
    }

    #[test]
    fn act_is_deterministic_per_seed_and_consistent() {
        let p = policy(1);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = [a.random_range(-1.0..1.0), a.random_range(-1.0..1.0)];
            let _: f64 = b.random_range(-1.0..1.0);
            let _: f64 = b.random_range(-1.0..1.0);
            let (x, lx) = p.act(&s, &mut a).unwrap();
            let (y, ly) = p.act(&s, &mut b).unwrap();
            assert_eq!(x, y);
            assert_eq!(lx, ly);
            assert!((lx - p.log_prob(&s, &x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn minimal_std_samples_hug_the_mean() {
        let mut p = policy(2);
        p.set_log_std(&[-10.0]);
        assert_eq!(p.log_std(), &[LOG_STD_MIN]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [0.3, 0.3];
        let mu = p.mean_action(&s).unwrap()[0];
        let sigma = LOG_STD_MIN.exp();
        let mut within_three_sigma = 0;
        for _ in 0..1000 {
            let (a, _) = p.act(&s, &mut rng).unwrap();
            let dev = (a[0] - mu).abs();
            assert!(dev < 5.0 * sigma);
            if dev < 3.0 * sigma {
                within_three_sigma += 1;
            }
        }
        // P(|z| < 3) = 0.9973
        assert!(within_three_sigma >= 990, "{within_three_sigma}");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = perturbed(&policy(3), &mut rng, 0.2);
        let states = random_states(&mut rng, 6, 2);
        let actions = random_states(&mut rng, 6, 1);
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |q: &GaussianPolicy| -> f64 {
            let b = q.evaluate_batch(states.view()).unwrap();
            q.log_prob_batch(&b, actions.view())
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(l, w)| l * w)
                .sum()
        };
        let batch = p.evaluate_batch(states.view()).unwrap();
        let analytic = p.weighted_log_prob_grad(&batch, actions.view(), &weights).unwrap();
        let flat = p.to_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (objective(&p.with_flat(&plus).unwrap()) - objective(&p.with_flat(&minus).unwrap())) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / scale <= 1e-4 || (analytic[i] - numeric).abs() < 1e-9,
                "param {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn fisher_product_matches_kl_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = perturbed(&policy(4), &mut rng, 0.2);
        let states = random_states(&mut rng, 10, 2);
        let batch = p.evaluate_batch(states.view()).unwrap();
        let flat = p.to_flat();
        for _ in 0..3 {
            let v: Vec<f64> = (0..flat.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fv = p.fisher_vector_product(&batch, &v).unwrap();
            let quad: f64 = v.iter().zip(&fv).map(|(a, b)| a * b).sum();
            // KL(p ‖ p + h v) ≈ ½ h² vᵀFv
            let h = 1e-4;
            let shifted: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let kl = p.mean_kl(&p.with_flat(&shifted).unwrap(), states.view()).unwrap();
            let numeric = 2.0 * kl / (h * h);
            assert!((quad - numeric).abs() / quad.abs() < 1e-3, "{quad} vs {numeric}");
        }
    }

    #[test]
    fn kl_to_self_is_zero() {
        let p = policy(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states = random_states(&mut rng, 5, 2);
        assert_eq!(p.mean_kl(&p, states.view()).unwrap(), 0.0);
    }

    #[test]
    fn flat_round_trip_clamps_log_std() {
        let p = policy(7);
        let mut flat = p.to_flat();
        *flat.last_mut().unwrap() = 9.0;
        let q = p.with_flat(&flat).unwrap();
        assert_eq!(q.log_std(), &[LOG_STD_MAX]);
        assert_eq!(p.with_flat(&p.to_flat()).unwrap(), p);
    }
}
