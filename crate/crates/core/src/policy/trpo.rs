//! Trust-region policy update: natural-gradient direction from conjugate
//! gradient on Fisher-vector products, scaled to the KL boundary, followed by
//! a backtracking line search.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{mean_kl_from_means, GaussianPolicy};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpoConfig {
    pub kl_limit: f64,
    pub cg_iters: usize,
    pub backtrack_coeff: f64,
    pub backtrack_iters: usize,
    pub damping: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            kl_limit: 0.01,
            cg_iters: 10,
            backtrack_coeff: 0.5,
            backtrack_iters: 10,
            damping: 0.1,
            gamma: 0.99,
            lambda: 0.97,
        }
    }
}

impl TrpoConfig {
    /// Largest mean KL an accepted step may reach.
    pub fn kl_acceptance_bound(&self) -> f64 {
        1.5 * self.kl_limit
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kl_limit > 0.0
            && self.kl_limit.is_finite()
            && self.cg_iters >= 1
            && self.backtrack_coeff > 0.0
            && self.backtrack_coeff < 1.0
            && self.damping >= 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trust-region settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrpoOutcome {
    Accepted,
    /// The surrogate gradient vanished; nothing to do.
    ZeroGradient,
    /// No backtracking step both improved the surrogate and respected the KL bound.
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrpoStats {
    pub outcome: TrpoOutcome,
    /// Mean KL(old ‖ new) of the returned policy.
    pub kl: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub gradient_norm: f64,
    /// Fraction of the full natural step that was taken.
    pub step_fraction: f64,
}

impl TrpoStats {
    pub fn accepted(&self) -> bool {
        self.outcome == TrpoOutcome::Accepted
    }

    pub fn improvement(&self) -> f64 {
        self.surrogate_after - self.surrogate_before
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` given as a closure.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], iters: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr < 1e-20 {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    Ok(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn surrogate(log_probs: &[f64], old_log_probs: &[f64], advantages: &[f64]) -> f64 {
    let n = advantages.len().max(1) as f64;
    log_probs
        .iter()
        .zip(old_log_probs)
        .zip(advantages)
        .map(|((lp, old), adv)| (lp - old).exp() * adv)
        .sum::<f64>()
        / n
}

/// Maximizes `mean(π_new(a|s)/π_old(a|s) · A)` subject to
/// `mean KL(π_old ‖ π_new) ≤ kl_limit`. `actions` are the unclipped
/// behaviour actions. On line-search failure the old policy is returned.
pub fn trpo_update(
    policy: &GaussianPolicy,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    advantages: &[f64],
    config: &TrpoConfig,
) -> Result<(GaussianPolicy, TrpoStats)> {
    config.validate()?;
    check_len("advantages", states.nrows(), advantages.len())?;
    if advantages.is_empty() {
        return Err(Error::Usage("trust-region update on an empty batch".into()));
    }
    let n = advantages.len() as f64;
    let old_batch = policy.evaluate_batch(states)?;
    let old_log_probs = policy.log_prob_batch(&old_batch, actions)?;
    let surrogate_before = surrogate(&old_log_probs, &old_log_probs, advantages);
    if !surrogate_before.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite surrogate {surrogate_before} before update"
        )));
    }
    let unchanged = |outcome, gradient_norm| TrpoStats {
        outcome,
        kl: 0.0,
        surrogate_before,
        surrogate_after: surrogate_before,
        gradient_norm,
        step_fraction: 0.0,
    };

    let weights: Vec<f64> = advantages.iter().map(|a| a / n).collect();
    let gradient = policy.weighted_log_prob_grad(&old_batch, actions, &weights)?;
    let gradient_norm = dot(&gradient, &gradient).sqrt();
    if !gradient_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite surrogate gradient norm {gradient_norm}")));
    }
    if gradient_norm < 1e-12 {
        return Ok((policy.clone(), unchanged(TrpoOutcome::ZeroGradient, gradient_norm)));
    }

    let damped_fvp = |v: &[f64]| -> Result<Vec<f64>> {
        let mut fv = policy.fisher_vector_product(&old_batch, v)?;
        for (f, x) in fv.iter_mut().zip(v) {
            *f += config.damping * x;
        }
        Ok(fv)
    };
    let direction = conjugate_gradient(damped_fvp, &gradient, config.cg_iters)?;
    let curvature = dot(&direction, &damped_fvp(&direction)?);
    if !(curvature > 0.0) || !curvature.is_finite() {
        return Ok((policy.clone(), unchanged(TrpoOutcome::LineSearchFailed, gradient_norm)));
    }
    let step_scale = (2.0 * config.kl_limit / curvature).sqrt();
    let old_params = policy.to_flat();
    let old_means = old_batch.means();

    let mut fraction = 1.0;
    for _ in 0..config.backtrack_iters.max(1) {
        let candidate_params: Vec<f64> = old_params
            .iter()
            .zip(&direction)
            .map(|(p, d)| p + fraction * step_scale * d)
            .collect();
        let candidate = policy.with_flat(&candidate_params)?;
        let batch = candidate.evaluate_batch(states)?;
        let log_probs = candidate.log_prob_batch(&batch, actions)?;
        let surrogate_after = surrogate(&log_probs, &old_log_probs, advantages);
        if !surrogate_after.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite surrogate at step fraction {fraction}: before {surrogate_before}, \
                 gradient norm {gradient_norm}, curvature {curvature}"
            )));
        }
        let kl = mean_kl_from_means(old_means, policy.log_std(), batch.means(), candidate.log_std());
        if surrogate_after > surrogate_before && kl <= config.kl_acceptance_bound() {
            return Ok((
                candidate,
                TrpoStats {
                    outcome: TrpoOutcome::Accepted,
                    kl,
                    surrogate_before,
                    surrogate_after,
                    gradient_norm,
                    step_fraction: fraction,
                },
            ));
        }
        fraction *= config.backtrack_coeff;
    }
    Ok((policy.clone(), unchanged(TrpoOutcome::LineSearchFailed, gradient_norm)))
}
