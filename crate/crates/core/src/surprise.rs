//! Intrinsic rewards built from learned transition models.
//!
//! * Teacher surprise: negative log-likelihood of the realized next state
//!   under the teacher's model (a single-sample cross-entropy estimate).
//! * Student surprise: `KL(P_teacher(·|s,a) ‖ P_student(·|s,a))`, in closed
//!   form because both models are diagonal Gaussians.
//! * Adaptive weights: `η = η₀ / max(1, mean extrinsic reward of a rollout)`.
//!
//! The shaped reward is `r_ext + η_T·teacher_surprise − η_S·student_surprise`.
//! Teacher surprise includes the `½` and `log 2π` terms that the model's
//! training loss omits; they differ by a constant per state dimension.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BatchPrediction, DiagonalGaussian, GaussianDynamicsModel, LOG_2PI};
use crate::error::{check_len, Error, Result};
use crate::policy::{Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurpriseWeights {
    pub eta0_t: f64,
    pub eta0_s: f64,
}

impl SurpriseWeights {
    pub fn new(eta0_t: f64, eta0_s: f64) -> Result<Self> {
        let w = Self { eta0_t, eta0_s };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta0_t", self.eta0_t), ("eta0_s", self.eta0_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "surprise weight `{name}` must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for SurpriseWeights {
    fn default() -> Self {
        Self {
            eta0_t: 0.001,
            eta0_s: 0.001,
        }
    }
}

/// Reward annotations for one step, aligned with the trajectory's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapedTransition {
    pub reward_ext: f64,
    pub r_int: f64,
    pub teacher_surprise: f64,
    pub student_surprise: f64,
    pub eta_t_used: f64,
    pub eta_s_used: f64,
}

impl ShapedTransition {
    fn new(reward_ext: f64, teacher_surprise: f64, student_surprise: f64, eta_t: f64, eta_s: f64) -> Self {
        Self {
            reward_ext,
            r_int: intrinsic_reward(eta_t, teacher_surprise, eta_s, student_surprise),
            teacher_surprise,
            student_surprise,
            eta_t_used: eta_t,
            eta_s_used: eta_s,
        }
    }

    pub fn total(&self) -> f64 {
        self.reward_ext + self.r_int
    }
}

#[inline]
pub fn intrinsic_reward(eta_t: f64, teacher_surprise: f64, eta_s: f64, student_surprise: f64) -> f64 {
    eta_t * teacher_surprise - eta_s * student_surprise
}

/// `−log p(s' | s, a)` under the teacher's model, with all constants.
pub fn teacher_surprise(
    model_t: &GaussianDynamicsModel,
    s: &[f64],
    a: &[f64],
    s_next_observed: &[f64],
) -> Result<f64> {
    let value = -model_t.predict(s, a)?.log_density(s_next_observed)?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite teacher surprise for state {s:?}")))
    }
}

/// `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diagonal(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_len("kl dimension", p.dim(), q.dim())?;
    Ok((0..p.dim())
        .map(|d| {
            kl_term(
                p.mean[d],
                p.variance[d].ln(),
                q.mean[d],
                q.variance[d].ln(),
            )
        })
        .sum())
}

/// One dimension of the closed-form KL, written as
/// `½(r − 1 − ln r) + Δ²/(2σ_q²)` with `r = σ_p²/σ_q²`.
#[inline]
fn kl_term(mean_p: f64, log_var_p: f64, mean_q: f64, log_var_q: f64) -> f64 {
    let log_ratio = log_var_p - log_var_q;
    let ratio = log_ratio.exp();
    let diff = mean_p - mean_q;
    let spread = (0.5 * (ratio - 1.0 - log_ratio)).max(0.0);
    spread + 0.5 * diff * diff * (-log_var_q).exp()
}

pub fn student_surprise(
    model_t: &GaussianDynamicsModel,
    model_s: &GaussianDynamicsModel,
    s: &[f64],
    a: &[f64],
) -> Result<f64> {
    check_len("student model state dim", model_t.state_dim(), model_s.state_dim())?;
    check_len("student model action dim", model_t.action_dim(), model_s.action_dim())?;
    kl_diagonal(&model_t.predict(s, a)?, &model_s.predict(s, a)?)
}

pub fn teacher_surprise_batch(
    model_t: &GaussianDynamicsModel,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    next_states: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    let pred = model_t.predict_batch(states, actions)?;
    check_len("next state rows", states.nrows(), next_states.nrows())?;
    let d = model_t.state_dim();
    let mut out = Vec::with_capacity(states.nrows());
    for i in 0..states.nrows() {
        let mut total = 0.0;
        for j in 0..d {
            let lv = pred.log_var[[i, j]];
            let r = next_states[[i, j]] - pred.mean[[i, j]];
            total += r * r * (-lv).exp() + lv + LOG_2PI;
        }
        let value = 0.5 * total;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite teacher surprise at row {i}")));
        }
        out.push(value);
    }
    Ok(out)
}

pub fn student_surprise_batch(
    model_t: &GaussianDynamicsModel,
    model_s: &GaussianDynamicsModel,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    check_len("student model state dim", model_t.state_dim(), model_s.state_dim())?;
    check_len("student model action dim", model_t.action_dim(), model_s.action_dim())?;
    let p = model_t.predict_batch(states, actions)?;
    let q = model_s.predict_batch(states, actions)?;
    Ok(kl_rows(&p, &q))
}

fn kl_rows(p: &BatchPrediction, q: &BatchPrediction) -> Vec<f64> {
    p.mean
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, mp)| {
            (0..mp.len())
                .map(|j| kl_term(mp[j], p.log_var[[i, j]], q.mean[[i, j]], q.log_var[[i, j]]))
                .sum()
        })
        .collect()
}

/// Adaptive weight `η₀ / max(1, mean(rewards))` over per-transition
/// extrinsic rewards of a rollout.
pub fn eta(eta0: f64, extrinsic_rewards: &[f64]) -> Result<f64> {
    if extrinsic_rewards.is_empty() {
        return Err(Error::Usage("adaptive weight needs a non-empty rollout".into()));
    }
    let mean = extrinsic_rewards.iter().sum::<f64>() / extrinsic_rewards.len() as f64;
    Ok(eta0 / mean.max(1.0))
}

fn step_arrays(steps: &[&Step]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let sd = steps.first().map(|s| s.state.len()).unwrap_or(0);
    let ad = steps.first().map(|s| s.applied_action.len()).unwrap_or(0);
    let states = Array2::from_shape_fn((steps.len(), sd), |(i, j)| steps[i].state[j]);
    let actions = Array2::from_shape_fn((steps.len(), ad), |(i, j)| steps[i].applied_action[j]);
    let next = Array2::from_shape_fn((steps.len(), sd), |(i, j)| steps[i].next_state[j]);
    (states, actions, next)
}

/// Per-step surprise annotations for `steps`, without weighting.
pub fn surprises_for_steps(
    steps: &[&Step],
    model_t: &GaussianDynamicsModel,
    model_s: &GaussianDynamicsModel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if steps.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let (states, actions, next) = step_arrays(steps);
    let teacher = teacher_surprise_batch(model_t, states.view(), actions.view(), next.view())?;
    let student = student_surprise_batch(model_t, model_s, states.view(), actions.view())?;
    Ok((teacher, student))
}

/// Shapes the rewards of one trajectory. `teacher_rollout_rewards` and
/// `student_rollout_rewards` are the per-transition extrinsic rewards of the
/// current epoch's teacher and student rollouts, which set `η_T` and `η_S`.
pub fn shape_trajectory(
    trajectory: &Trajectory,
    model_t: &GaussianDynamicsModel,
    model_s: &GaussianDynamicsModel,
    weights: &SurpriseWeights,
    teacher_rollout_rewards: &[f64],
    student_rollout_rewards: &[f64],
) -> Result<Vec<ShapedTransition>> {
    let mut shaped = shape_rollouts(
        std::slice::from_ref(trajectory),
        model_t,
        model_s,
        weights,
        teacher_rollout_rewards,
        student_rollout_rewards,
    )?;
    Ok(shaped.pop().unwrap_or_default())
}

/// Shapes a whole batch of trajectories with weights computed once.
pub fn shape_rollouts(
    trajectories: &[Trajectory],
    model_t: &GaussianDynamicsModel,
    model_s: &GaussianDynamicsModel,
    weights: &SurpriseWeights,
    teacher_rollout_rewards: &[f64],
    student_rollout_rewards: &[f64],
) -> Result<Vec<Vec<ShapedTransition>>> {
    weights.validate()?;
    let eta_t = eta(weights.eta0_t, teacher_rollout_rewards)?;
    let eta_s = eta(weights.eta0_s, student_rollout_rewards)?;
    let steps: Vec<&Step> = trajectories.iter().flat_map(|t| &t.steps).collect();
    let (teacher, student) = surprises_for_steps(&steps, model_t, model_s)?;
    let mut out = Vec::with_capacity(trajectories.len());
    let mut k = 0;
    for t in trajectories {
        let shaped = t
            .steps
            .iter()
            .map(|step| {
                let s = ShapedTransition::new(step.reward_ext, teacher[k], student[k], eta_t, eta_s);
                k += 1;
                s
            })
            .collect();
        out.push(shaped);
    }
    Ok(out)
}
