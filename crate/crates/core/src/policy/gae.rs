use ndarray::Array2;

use super::{Trajectory, ValueFunction};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput {
    /// Advantages standardized to zero mean and unit variance over the batch.
    pub advantages: Vec<f64>,
    /// Advantages before standardization.
    pub raw_advantages: Vec<f64>,
    /// Regression targets for the value function: raw advantage plus `V(s)`.
    pub value_targets: Vec<f64>,
}

/// Generalized advantage estimation over per-step `rewards`, which are
/// aligned with the trajectories' steps. Terminal states bootstrap with 0;
/// time-limit ends and budget-truncated episodes bootstrap with `V(s_last')`.
pub fn gae_advantages(
    trajectories: &[Trajectory],
    value_fn: &ValueFunction,
    gamma: f64,
    lambda: f64,
    rewards: &[Vec<f64>],
) -> Result<GaeOutput> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "gamma and lambda must lie in [0, 1], got {gamma} and {lambda}"
        )));
    }
    check_len("reward trajectories", trajectories.len(), rewards.len())?;
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    let state_dim = value_fn.state_dim();

    // One batched pass for every state plus each trajectory's final next state.
    let mut states = Array2::zeros((total + trajectories.len(), state_dim));
    let mut row = 0;
    for t in trajectories {
        for step in &t.steps {
            check_len("value state", state_dim, step.state.len())?;
            states.row_mut(row).assign(&ndarray::ArrayView1::from(&step.state));
            row += 1;
        }
    }
    for (k, t) in trajectories.iter().enumerate() {
        if let Some(last) = t.steps.last() {
            states.row_mut(total + k).assign(&ndarray::ArrayView1::from(&last.next_state));
        }
    }
    let values = value_fn.predict_batch(states.view())?;

    let mut raw = vec![0.0; total];
    let mut targets = vec![0.0; total];
    let mut offset = 0;
    for (k, (t, r)) in trajectories.iter().zip(rewards).enumerate() {
        check_len("rewards per trajectory", t.len(), r.len())?;
        let terminal = t.done_reason.is_some_and(|d| d.is_terminal());
        let mut next_value = if terminal { 0.0 } else { values[total + k] };
        let mut running = 0.0;
        for i in (0..t.len()).rev() {
            let v = values[offset + i];
            let delta = r[i] + gamma * next_value - v;
            running = delta + gamma * lambda * running;
            raw[offset + i] = running;
            targets[offset + i] = running + v;
            next_value = v;
        }
        offset += t.len();
    }

    Ok(GaeOutput {
        advantages: standardize(&raw),
        raw_advantages: raw,
        value_targets: targets,
    })
}

fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        values.iter().map(|v| v - mean).collect()
    } else {
        values.iter().map(|v| (v - mean) / std).collect()
    }
}
