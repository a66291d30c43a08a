//! Behavioral cloning of teacher demonstrations and return evaluation.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvParams};
use crate::error::{check_len, Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::policy::{GaussianPolicy, Trajectory};

/// State-action pairs taken from teacher trajectories. Actions are the ones
/// the environment actually received, i.e. after clipping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemonstrationSet {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub epoch: usize,
}

impl DemonstrationSet {
    pub fn from_trajectories(trajectories: &[Trajectory], epoch: usize) -> Self {
        let steps = trajectories.iter().flat_map(|t| &t.steps);
        let (states, actions) = steps.map(|s| (s.state.clone(), s.applied_action.clone())).unzip();
        Self { states, actions, epoch }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn arrays(&self, state_dim: usize, action_dim: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        check_len("demonstration actions", self.states.len(), self.actions.len())?;
        for (s, a) in self.states.iter().zip(&self.actions) {
            check_len("demonstration state", state_dim, s.len())?;
            check_len("demonstration action", action_dim, a.len())?;
        }
        let n = self.len();
        Ok((
            Array2::from_shape_fn((n, state_dim), |(i, j)| self.states[i][j]),
            Array2::from_shape_fn((n, action_dim), |(i, j)| self.actions[i][j]),
        ))
    }
}

/// Mean negative log-likelihood of the demonstrations under `policy`.
pub fn bc_loss(policy: &GaussianPolicy, demos: &DemonstrationSet) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::Usage("behavioral cloning needs at least one demonstration".into()));
    }
    let (states, actions) = demos.arrays(policy.state_dim(), policy.action_dim())?;
    let batch = policy.evaluate_batch(states.view())?;
    let lp = policy.log_prob_batch(&batch, actions.view())?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Minibatch maximum likelihood on the demonstrations; both the mean network
/// and the log standard deviations are trained. Starts from `policy`.
pub fn behavior_clone<R: Rng>(
    policy: &GaussianPolicy,
    demos: &DemonstrationSet,
    epochs: usize,
    batch_size: usize,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<GaussianPolicy> {
    if demos.is_empty() {
        return Err(Error::Usage("behavioral cloning needs at least one demonstration".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("cloning batch size must be positive".into()));
    }
    adam.validate()?;
    let (states, actions) = demos.arrays(policy.state_dim(), policy.action_dim())?;
    let mut current = policy.clone();
    if epochs == 0 {
        return Ok(current);
    }
    let mut flat = current.to_flat();
    let mut opt = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..demos.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let s = states.select(Axis(0), chunk);
            let a = actions.select(Axis(0), chunk);
            let batch = current.evaluate_batch(s.view())?;
            // Descend on −mean log π.
            let w = vec![-1.0 / chunk.len() as f64; chunk.len()];
            let grad = current.weighted_log_prob_grad(&batch, a.view(), &w)?;
            opt.step(&mut flat, &grad, adam)
                .map_err(|e| Error::Numeric(format!("cloning epoch {epoch}: {e}")))?;
            current = current.with_flat(&flat)?;
            // Keep the optimizer's view in sync with the log_std clamp.
            flat = current.to_flat();
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Act with the policy mean.
    Deterministic,
    /// Sample from the policy.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    pub std_return: f64,
    pub per_episode: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(per_episode: Vec<f64>) -> Self {
        let (mean_return, std_return) = mean_std(&per_episode);
        Self {
            mean_return,
            std_return,
            per_episode,
        }
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `n_episodes` complete episodes and reports extrinsic returns.
pub fn evaluate<R: Rng>(
    policy: &GaussianPolicy,
    params: &EnvParams,
    n_episodes: usize,
    rng: &mut R,
    mode: EvalMode,
) -> Result<EvalStats> {
    if n_episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = env::reset(params, rng.random());
        let mut total = 0.0;
        loop {
            let action = match mode {
                EvalMode::Deterministic => policy.mean_action(&state.values)?,
                EvalMode::Stochastic => policy.act(&state.values, rng)?.0,
            };
            let result = env::step(params, &state, &policy.clip_action(&action))?;
            total += result.reward_ext;
            if result.done {
                break;
            }
            state = result.next_state;
        }
        returns.push(total);
    }
    Ok(EvalStats::from_returns(returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{collect_rollouts, InputScaling};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_demos(n: usize, seed: u64) -> DemonstrationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-1.2..0.6), rng.random_range(-0.07..0.07)])
            .collect();
        let actions = states.iter().map(|s| vec![0.5 * s[0]]).collect();
        DemonstrationSet { states, actions, epoch: 0 }
    }

    #[test]
    fn learns_a_linear_target() {
        let params = EnvParams::mountain_car();
        let policy = GaussianPolicy::for_env(&params, &[32, 32], 0.0, 0).unwrap();
        let demos = linear_demos(512, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adam = AdamConfig::default();
        let cloned = behavior_clone(&policy, &demos, 200, 64, &adam, &mut rng).unwrap();
        let held_out = linear_demos(200, 99);
        let err: f64 = held_out
            .states
            .iter()
            .map(|s| (cloned.mean_action(s).unwrap()[0] - 0.5 * s[0]).abs())
            .sum::<f64>()
            / held_out.len() as f64;
        assert!(err < 0.05, "mean abs error {err}");
    }

    #[test]
    fn zero_epochs_leaves_policy_unchanged() {
        let policy = GaussianPolicy::new(&[4], 0.0, InputScaling::identity(2), vec![-1.0], vec![1.0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = behavior_clone(&policy, &linear_demos(8, 1), 0, 4, &AdamConfig::default(), &mut rng).unwrap();
        assert_eq!(out, policy);
    }

    #[test]
    fn empty_demonstrations_are_rejected() {
        let policy = GaussianPolicy::new(&[4], 0.0, InputScaling::identity(2), vec![-1.0], vec![1.0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = behavior_clone(&policy, &DemonstrationSet::default(), 3, 4, &AdamConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn self_cloning_does_not_lose_likelihood() {
        let params = EnvParams::mountain_car();
        let policy = GaussianPolicy::for_env(&params, &[16, 16], -0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs = collect_rollouts(&params, &policy, 1000, &mut rng).unwrap();
        // Unclipped actions, so the demonstrations really are draws from π.
        let demos = DemonstrationSet {
            states: trajs.iter().flat_map(|t| t.steps.iter().map(|s| s.state.clone())).collect(),
            actions: trajs.iter().flat_map(|t| t.steps.iter().map(|s| s.action.clone())).collect(),
            epoch: 0,
        };
        let before = bc_loss(&policy, &demos).unwrap();
        let cloned = behavior_clone(&policy, &demos, 5, 100, &AdamConfig::default(), &mut rng).unwrap();
        assert!(bc_loss(&cloned, &demos).unwrap() <= before);
    }

    #[test]
    fn cloning_loss_is_usually_non_increasing() {
        let params = EnvParams::mountain_car();
        let mut ok = 0;
        for trial in 0..20 {
            let policy = GaussianPolicy::for_env(&params, &[16, 16], 0.0, trial).unwrap();
            let demos = linear_demos(128, trial + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let before = bc_loss(&policy, &demos).unwrap();
            let after = bc_loss(&behavior_clone(&policy, &demos, 3, 32, &AdamConfig::default(), &mut rng).unwrap(), &demos).unwrap();
            if after <= before {
                ok += 1;
            }
        }
        assert!(ok >= 18, "{ok}/20");
    }

    #[test]
    fn zero_force_never_reaches_the_goal() {
        let params = EnvParams::mountain_car();
        let mut policy = GaussianPolicy::for_env(&params, &[8], -5.0, 0).unwrap();
        let flat = vec![0.0; policy.num_params()];
        policy = policy.with_flat(&flat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = evaluate(&policy, &params, 3, &mut rng, EvalMode::Deterministic).unwrap();
        assert_eq!(stats.mean_return, 0.0);
        assert_eq!(stats.per_episode.len(), 3);
    }

    #[test]
    fn single_episode_has_zero_spread() {
        let params = EnvParams::cart_pole_swing_up();
        let policy = GaussianPolicy::for_env(&params, &[8], 0.0, 0).unwrap();
        let stats = evaluate(&policy, &params, 1, &mut ChaCha8Rng::seed_from_u64(1), EvalMode::Stochastic).unwrap();
        assert_eq!(stats.std_return, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let params = EnvParams::cart_pole_swing_up();
        let policy = GaussianPolicy::for_env(&params, &[8], 0.0, 4).unwrap();
        let a = evaluate(&policy, &params, 2, &mut ChaCha8Rng::seed_from_u64(5), EvalMode::Deterministic).unwrap();
        let b = evaluate(&policy, &params, 2, &mut ChaCha8Rng::seed_from_u64(5), EvalMode::Deterministic).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&policy, &params, 0, &mut ChaCha8Rng::seed_from_u64(5), EvalMode::Deterministic).is_err());
    }

    #[test]
    fn demonstrations_use_applied_actions() {
        let params = EnvParams::mountain_car();
        let policy = GaussianPolicy::for_env(&params, &[8], 1.0, 0).unwrap();
        let trajs = collect_rollouts(&params, &policy, 200, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let demos = DemonstrationSet::from_trajectories(&trajs, 7);
        assert_eq!(demos.len(), 200);
        assert_eq!(demos.epoch, 7);
        assert!(demos.actions.iter().all(|a| a[0].abs() <= 1.0));
    }
}
