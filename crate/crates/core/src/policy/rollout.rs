use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GaussianPolicy;
use crate::dynamics::Transition;
use crate::env::{self, DoneReason, EnvParams};
use crate::error::{Error, Result};

/// One environment step taken by a stochastic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    /// Sampled action before clipping; `log_prob` refers to this value.
    pub action: Vec<f64>,
    /// Action after clipping to the environment bounds.
    pub applied_action: Vec<f64>,
    pub reward_ext: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub log_prob: f64,
}

impl Step {
    pub fn transition(&self) -> Transition {
        Transition {
            state: self.state.clone(),
            action: self.applied_action.clone(),
            next_state: self.next_state.clone(),
        }
    }
}

/// One episode, possibly cut short by the rollout budget (`done_reason == None`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub done_reason: Option<DoneReason>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extrinsic_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward_ext).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.done_reason.is_some()
    }
}

/// Runs the policy until exactly `n_steps` steps have been taken, resetting
/// the environment whenever an episode ends.
pub fn collect_rollouts<R: Rng>(
    params: &EnvParams,
    policy: &GaussianPolicy,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if n_steps == 0 {
        return Err(Error::Usage("rollout budget must be at least one step".into()));
    }
    let mut trajectories = Vec::new();
    let mut current = Trajectory::default();
    let mut state = env::reset(params, rng.random());
    for _ in 0..n_steps {
        let (action, log_prob) = policy.act(&state.values, rng)?;
        let applied_action = policy.clip_action(&action);
        let result = env::step(params, &state, &applied_action).map_err(|e| {
            Error::Numeric(format!("episode {}: {e}", trajectories.len()))
        })?;
        current.steps.push(Step {
            state: state.values.clone(),
            action,
            applied_action,
            reward_ext: result.reward_ext,
            next_state: result.next_state.values.clone(),
            done: result.done,
            log_prob,
        });
        if result.done {
            current.done_reason = result.done_reason;
            trajectories.push(std::mem::take(&mut current));
            state = env::reset(params, rng.random());
        } else {
            state = result.next_state;
        }
    }
    if !current.is_empty() {
        trajectories.push(current);
    }
    Ok(trajectories)
}

/// Stacks every step's state and unclipped action into row matrices.
pub fn flatten_steps(trajectories: &[Trajectory]) -> (Array2<f64>, Array2<f64>) {
    let steps: Vec<&Step> = trajectories.iter().flat_map(|t| &t.steps).collect();
    let state_dim = steps.first().map(|s| s.state.len()).unwrap_or(0);
    let action_dim = steps.first().map(|s| s.action.len()).unwrap_or(0);
    let states = Array2::from_shape_fn((steps.len(), state_dim), |(i, j)| steps[i].state[j]);
    let actions = Array2::from_shape_fn((steps.len(), action_dim), |(i, j)| steps[i].action[j]);
    (states, actions)
}
