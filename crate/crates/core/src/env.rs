//! Deterministic sparse-reward control tasks: continuous mountain car and
//! cart-pole swing-up. Teacher and student variants differ only through
//! [`EnvParams`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const MOUNTAIN_CAR_X_MIN: f64 = -1.2;
pub const MOUNTAIN_CAR_X_MAX: f64 = 0.6;
pub const MOUNTAIN_CAR_V_MAX: f64 = 0.07;
const MOUNTAIN_CAR_GRAVITY: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    MountainCar,
    CartPoleSwingUp,
}

impl EnvFamily {
    pub fn name(self) -> &'static str {
        match self {
            EnvFamily::MountainCar => "mountain_car",
            EnvFamily::CartPoleSwingUp => "cart_pole_swing_up",
        }
    }
}

/// Physical and task parameters. Fields that do not apply to the selected
/// family are kept but ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub family: EnvFamily,
    /// Mountain-car force multiplier.
    pub power: f64,
    pub goal_x: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub pole_half_length: f64,
    /// Cart position bound; leaving `[-x_limit, x_limit]` ends the episode.
    pub x_limit: f64,
    pub upright_cosine_threshold: f64,
    pub horizon: usize,
    pub gravity: f64,
    pub timestep: f64,
    /// Integrator substeps per environment step (cart-pole).
    pub substeps: usize,
    /// Newtons applied per unit of action (cart-pole).
    pub force_mag: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self::mountain_car()
    }
}

impl EnvParams {
    pub fn mountain_car() -> Self {
        Self {
            family: EnvFamily::MountainCar,
            power: 0.001,
            goal_x: 0.45,
            pole_mass: 0.1,
            cart_mass: 1.0,
            pole_half_length: 0.5,
            x_limit: 2.4,
            upright_cosine_threshold: 0.8,
            horizon: 1000,
            gravity: 9.8,
            timestep: 0.01,
            substeps: 2,
            force_mag: 10.0,
        }
    }

    pub fn cart_pole_swing_up() -> Self {
        Self {
            family: EnvFamily::CartPoleSwingUp,
            horizon: 500,
            ..Self::mountain_car()
        }
    }

    pub fn for_family(family: EnvFamily) -> Self {
        match family {
            EnvFamily::MountainCar => Self::mountain_car(),
            EnvFamily::CartPoleSwingUp => Self::cart_pole_swing_up(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.invalid_field() {
            Some(name) => Err(Error::Config(format!("invalid environment parameter `{name}`"))),
            None => Ok(()),
        }
    }

    /// Name of the first out-of-range field, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        let checks: [(&'static str, bool); 12] = [
            ("goal_x", self.goal_x.is_finite()),
            ("gravity", self.gravity.is_finite()),
            ("force_mag", self.force_mag >= 0.0 && self.force_mag.is_finite()),
            ("power", self.power > 0.0 && self.power.is_finite()),
            ("pole_mass", self.pole_mass > 0.0 && self.pole_mass.is_finite()),
            ("cart_mass", self.cart_mass > 0.0 && self.cart_mass.is_finite()),
            ("x_limit", self.x_limit > 0.0 && self.x_limit.is_finite()),
            ("horizon", self.horizon >= 1),
            (
                "upright_cosine_threshold",
                self.upright_cosine_threshold > 0.0 && self.upright_cosine_threshold <= 1.0,
            ),
            ("timestep", self.timestep > 0.0 && self.timestep.is_finite()),
            ("substeps", self.substeps >= 1),
            (
                "pole_half_length",
                self.pole_half_length > 0.0 && self.pole_half_length.is_finite(),
            ),
        ];
        checks.iter().find(|(_, ok)| !ok).map(|(name, _)| *name)
    }

    pub fn space_info(&self) -> SpaceInfo {
        let state_dim = match self.family {
            EnvFamily::MountainCar => 2,
            EnvFamily::CartPoleSwingUp => 4,
        };
        SpaceInfo {
            state_dim,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
        }
    }

    /// Fixed affine standardization applied to observations before they
    /// reach policy and value networks: `(s - offset) * scale`.
    pub fn observation_scaling(&self) -> (Vec<f64>, Vec<f64>) {
        match self.family {
            EnvFamily::MountainCar => (vec![-0.3, 0.0], vec![1.0 / 0.9, 1.0 / MOUNTAIN_CAR_V_MAX]),
            EnvFamily::CartPoleSwingUp => (vec![0.0, 0.0, PI, 0.0], vec![0.5, 0.5, 0.5, 0.2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceInfo {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl SpaceInfo {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }
}

/// Mountain car: `[x, v]`. Cart-pole: `[x, x_dot, theta, theta_dot]` with
/// `theta = 0` upright. `t` counts steps taken in the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Goal,
    Horizon,
    Constraint,
}

impl DoneReason {
    /// Episodes that ended in a true terminal state, as opposed to a time limit.
    pub fn is_terminal(self) -> bool {
        !matches!(self, DoneReason::Horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward_ext: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

pub fn reset(params: &EnvParams, rng_seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let values = match params.family {
        EnvFamily::MountainCar => vec![rng.random_range(-0.6..=-0.4), 0.0],
        EnvFamily::CartPoleSwingUp => {
            let mut noise = || rng.random_range(-0.01..=0.01);
            vec![noise(), noise(), PI + noise(), noise()]
        }
    };
    EnvState { values, t: 0 }
}

pub fn step(params: &EnvParams, state: &EnvState, action: &[f64]) -> Result<StepResult> {
    check_len("action", 1, action.len())?;
    if !action[0].is_finite() {
        return Err(Error::Numeric(format!("non-finite action {}", action[0])));
    }
    let a = action[0].clamp(-1.0, 1.0);
    let t = state.t + 1;
    let (values, reward_ext, terminal) = match params.family {
        EnvFamily::MountainCar => mountain_car_step(params, &state.values, a)?,
        EnvFamily::CartPoleSwingUp => cart_pole_step(params, &state.values, a)?,
    };
    let done_reason = terminal.or((t >= params.horizon).then_some(DoneReason::Horizon));
    Ok(StepResult {
        next_state: EnvState { values, t },
        reward_ext,
        done: done_reason.is_some(),
        done_reason,
    })
}

fn mountain_car_step(
    params: &EnvParams,
    s: &[f64],
    a: f64,
) -> Result<(Vec<f64>, f64, Option<DoneReason>)> {
    check_len("mountain car state", 2, s.len())?;
    let (x, v) = (s[0], s[1]);
    let v_next = (v + a * params.power - MOUNTAIN_CAR_GRAVITY * (3.0 * x).cos())
        .clamp(-MOUNTAIN_CAR_V_MAX, MOUNTAIN_CAR_V_MAX);
    let x_next = (x + v_next).clamp(MOUNTAIN_CAR_X_MIN, MOUNTAIN_CAR_X_MAX);
    // The left wall is inelastic.
    let v_next = if x_next <= MOUNTAIN_CAR_X_MIN && v_next < 0.0 {
        0.0
    } else {
        v_next
    };
    if x_next >= params.goal_x {
        Ok((vec![x_next, v_next], 1.0, Some(DoneReason::Goal)))
    } else {
        Ok((vec![x_next, v_next], 0.0, None))
    }
}

fn cart_pole_accelerations(params: &EnvParams, s: &[f64], force: f64) -> (f64, f64) {
    let (theta_dot, theta) = (s[3], s[2]);
    let total_mass = params.cart_mass + params.pole_mass;
    let pole_moment = params.pole_mass * params.pole_half_length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_moment * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (params.gravity * sin - cos * temp)
        / (params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pole_moment * theta_acc * cos / total_mass;
    (x_acc, theta_acc)
}

fn cart_pole_step(
    params: &EnvParams,
    s: &[f64],
    a: f64,
) -> Result<(Vec<f64>, f64, Option<DoneReason>)> {
    check_len("cart-pole state", 4, s.len())?;
    let force = params.force_mag * a;
    let mut next = s.to_vec();
    for _ in 0..params.substeps {
        integrate_cart_pole(params, &mut next, force);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cart-pole state diverged: {next:?}")));
    }
    if next[0].abs() > params.x_limit {
        return Ok((next, 0.0, Some(DoneReason::Constraint)));
    }
    let reward = if next[2].cos() >= params.upright_cosine_threshold {
        1.0
    } else {
        0.0
    };
    Ok((next, reward, None))
}

/// One semi-implicit Euler substep: velocities first, then positions.
fn integrate_cart_pole(params: &EnvParams, s: &mut [f64], force: f64) {
    let dt = params.timestep;
    let (x_acc, theta_acc) = cart_pole_accelerations(params, s, force);
    s[1] += dt * x_acc;
    s[0] += dt * s[1];
    s[3] += dt * theta_acc;
    s[2] += dt * s[3];
}

/// Total mechanical energy of the cart-pole (uniform rod pole), used to
/// check integration quality.
pub fn cart_pole_energy(params: &EnvParams, s: &[f64]) -> f64 {
    let (x_dot, theta, theta_dot) = (s[1], s[2], s[3]);
    let m = params.pole_mass;
    let l = params.pole_half_length;
    let kinetic = 0.5 * (params.cart_mass + m) * x_dot * x_dot
        + m * l * x_dot * theta_dot * theta.cos()
        + 0.5 * (4.0 / 3.0) * m * l * l * theta_dot * theta_dot;
    let potential = m * params.gravity * l * theta.cos();
    kinetic + potential
}
