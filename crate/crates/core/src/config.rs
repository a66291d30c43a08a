//! Experiment configuration: TOML text ⇄ [`ExperimentConfig`], plus the
//! shipped presets.
//!
//! A config file may name a `preset`; keys present in the file override the
//! preset's. Any omitted key takes its default. An environment table that
//! switches `family` starts again from that family's defaults, so
//! `[student_env] family = "cart_pole_swing_up"` gets the cart-pole horizon.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::env::{EnvFamily, EnvParams};
use crate::error::{Error, Result};
use crate::policy::TrpoConfig;
use crate::surprise::SurpriseWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher surprise bonus and student surprise penalty.
    #[default]
    Full,
    /// Teacher surprise bonus only; student surprise is logged but unused.
    SurpriseMaxBaseline,
    /// Extrinsic reward only.
    Plain,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::SurpriseMaxBaseline, Mode::Plain];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SurpriseMaxBaseline => "surprise_max_baseline",
            Mode::Plain => "plain",
        }
    }

    /// Accepts the config spelling and the short command-line spelling.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "surprise_max_baseline" | "surprise-max" | "surprise-max-baseline" => Ok(Mode::SurpriseMaxBaseline),
            "plain" => Ok(Mode::Plain),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected full, surprise-max or plain)"
            ))),
        }
    }

    /// Weights actually used for the teacher's reward in this mode.
    pub fn apply(self, weights: SurpriseWeights) -> SurpriseWeights {
        match self {
            Mode::Full => weights,
            Mode::SurpriseMaxBaseline => SurpriseWeights { eta0_s: 0.0, ..weights },
            Mode::Plain => SurpriseWeights { eta0_t: 0.0, eta0_s: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            init_log_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 5,
            batch_size: 64,
            step_size: 1e-3,
        }
    }
}

/// Shared by the teacher and student transition models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Passes over the buffer per fit.
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            buffer_capacity: 100_000,
            epochs: 20,
            batch_size: 256,
            step_size: 1e-3,
            log_var_min: -10.0,
            log_var_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            step_size: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset this config was derived from; informational once loaded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    /// Teacher rollout steps per trust-region update.
    pub steps_per_epoch: usize,
    pub demo_steps: usize,
    pub student_rollout_steps: usize,
    /// Random-action transitions in the teacher buffer before epoch 0.
    pub warmup_steps: usize,
    pub eval_episodes: usize,
    /// Epochs averaged for "final" returns in comparisons.
    pub final_window: usize,
    /// Write a full training-state checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Dump demonstrations every this many epochs (0: never).
    pub demo_dump_every: usize,
    pub teacher_env: EnvParams,
    pub student_env: EnvParams,
    pub weights: SurpriseWeights,
    pub policy: PolicyConfig,
    pub value: ValueConfig,
    pub trpo: TrpoConfig,
    pub dynamics: DynamicsConfig,
    pub bc: BcConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            mode: Mode::Full,
            epochs: 300,
            steps_per_epoch: 5000,
            demo_steps: 2000,
            student_rollout_steps: 2000,
            warmup_steps: 5000,
            eval_episodes: 5,
            final_window: 10,
            checkpoint_every: 0,
            demo_dump_every: 10,
            teacher_env: EnvParams::mountain_car(),
            student_env: EnvParams::mountain_car(),
            weights: SurpriseWeights::default(),
            policy: PolicyConfig::default(),
            value: ValueConfig::default(),
            trpo: TrpoConfig::default(),
            dynamics: DynamicsConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

/// A failed invariant, named by its dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid {
    pub key: String,
    pub message: String,
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> Invalid {
    Invalid {
        key: key.into(),
        message: message.into(),
    }
}

fn positive_finite(key: &str, v: f64) -> std::result::Result<(), Invalid> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> std::result::Result<(), Invalid> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(key, "must be at least 1"))
    }
}

fn hidden_sizes(key: &str, h: &[usize]) -> std::result::Result<(), Invalid> {
    if h.contains(&0) {
        Err(invalid(key, "hidden layer sizes must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    /// Weights after the mode's overrides.
    pub fn effective_weights(&self) -> SurpriseWeights {
        self.mode.apply(self.weights)
    }

    pub fn check(&self) -> std::result::Result<(), Invalid> {
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        at_least_one("epochs", self.epochs)?;
        at_least_one("steps_per_epoch", self.steps_per_epoch)?;
        at_least_one("demo_steps", self.demo_steps)?;
        at_least_one("student_rollout_steps", self.student_rollout_steps)?;
        at_least_one("warmup_steps", self.warmup_steps)?;
        at_least_one("eval_episodes", self.eval_episodes)?;
        at_least_one("final_window", self.final_window)?;
        for (section, env) in [("teacher_env", &self.teacher_env), ("student_env", &self.student_env)] {
            if let Some(field) = env.invalid_field() {
                return Err(invalid(format!("{section}.{field}"), "out of range"));
            }
        }
        if self.teacher_env.family != self.student_env.family {
            return Err(invalid(
                "student_env.family",
                "teacher and student must share an environment family",
            ));
        }
        for (key, v) in [("weights.eta0_t", self.weights.eta0_t), ("weights.eta0_s", self.weights.eta0_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be finite and nonnegative, got {v}")));
            }
        }
        hidden_sizes("policy.hidden", &self.policy.hidden)?;
        if !self.policy.init_log_std.is_finite() {
            return Err(invalid("policy.init_log_std", "must be finite"));
        }
        hidden_sizes("value.hidden", &self.value.hidden)?;
        at_least_one("value.batch_size", self.value.batch_size)?;
        positive_finite("value.step_size", self.value.step_size)?;
        let t = &self.trpo;
        positive_finite("trpo.kl_limit", t.kl_limit)?;
        at_least_one("trpo.cg_iters", t.cg_iters)?;
        if !(t.backtrack_coeff > 0.0 && t.backtrack_coeff < 1.0) {
            return Err(invalid("trpo.backtrack_coeff", "must lie in (0, 1)"));
        }
        if !(t.damping >= 0.0 && t.damping.is_finite()) {
            return Err(invalid("trpo.damping", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return Err(invalid("trpo.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&t.lambda) {
            return Err(invalid("trpo.lambda", "must lie in [0, 1]"));
        }
        let d = &self.dynamics;
        hidden_sizes("dynamics.hidden", &d.hidden)?;
        at_least_one("dynamics.buffer_capacity", d.buffer_capacity)?;
        at_least_one("dynamics.batch_size", d.batch_size)?;
        positive_finite("dynamics.step_size", d.step_size)?;
        if !(d.log_var_min.is_finite() && d.log_var_max.is_finite() && d.log_var_min < d.log_var_max) {
            return Err(invalid("dynamics.log_var_max", "log-variance bounds need min < max"));
        }
        at_least_one("bc.batch_size", self.bc.batch_size)?;
        positive_finite("bc.step_size", self.bc.step_size)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|e| Error::Config(format!("`{}` {}", e.key, e.message)))
    }

    /// Full TOML rendering; parsing it back yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Name and TOML text of every shipped preset.
pub const PRESETS: [(&str, &str); 7] = [
    ("mountaincar-homogeneous", include_str!("../presets/mountaincar-homogeneous.toml")),
    ("cartpole-homogeneous", include_str!("../presets/cartpole-homogeneous.toml")),
    ("mountaincar-hetero-power", include_str!("../presets/mountaincar-hetero-power.toml")),
    (
        "mountaincar-hetero-power-textintent",
        include_str!("../presets/mountaincar-hetero-power-textintent.toml"),
    ),
    ("cartpole-hetero-xlimit", include_str!("../presets/cartpole-hetero-xlimit.toml")),
    ("cartpole-hetero-polemass", include_str!("../presets/cartpole-hetero-polemass.toml")),
    ("cartpole-sweep-etaS", include_str!("../presets/cartpole-sweep-etaS.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}`; known presets: {}", known.join(", ")))
        })
}

/// Loads a shipped preset by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut config = parse_config(preset_text(name)?)?;
    config.preset = Some(name.to_string());
    Ok(config)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    Error::Parse {
        message: e.message().trim().to_string(),
        line: e.span().map(|s| line_of(text, s.start)),
    }
}

/// Line (1-based) where `key` (dotted, at most one table level) is assigned.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (Some(s), f),
        None => (None, key),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(header.trim().to_string());
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let matches = match (section, current.as_deref()) {
            (None, None) => lhs == field,
            (Some(s), Some(c)) => c == s && lhs == field,
            (Some(s), None) => lhs == format!("{s}.{field}"),
            (None, Some(_)) => false,
        };
        if matches {
            return Some(i + 1);
        }
    }
    None
}

fn table_of(config: &ExperimentConfig) -> Result<Table> {
    Table::try_from(config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

fn env_defaults(family: &Value) -> Result<Table> {
    let family: EnvFamily = family
        .clone()
        .try_into()
        .map_err(|e| Error::Parse { message: format!("bad environment family: {e}"), line: None })?;
    Table::try_from(EnvParams::for_family(family))
        .map_err(|e| Error::Config(format!("cannot serialize environment: {e}")))
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut Table, over: Table) -> Result<()> {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                if key.ends_with("_env") {
                    if let Some(family) = o.get("family") {
                        if b.get("family") != Some(family) {
                            *b = env_defaults(family)?;
                        }
                    }
                }
                merge(b, o)?;
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
    Ok(())
}

/// Parses and validates a config. Errors name the offending key and, when
/// it appears in `text`, its line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    // Typed pass first: toml reports unknown keys and type mismatches with spans.
    let typed: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    let user: Table = toml::from_str(text).map_err(|e| toml_error(text, e))?;

    let mut merged = match &typed.preset {
        Some(name) => {
            let base: Table = toml::from_str(preset_text(name)?)
                .map_err(|e| Error::Config(format!("preset `{name}` is malformed: {e}")))?;
            if base.contains_key("preset") {
                return Err(Error::Config(format!("preset `{name}` may not name another preset")));
            }
            let mut full = table_of(&ExperimentConfig::default())?;
            merge(&mut full, base)?;
            full
        }
        None => table_of(&ExperimentConfig::default())?,
    };
    merge(&mut merged, user)?;
    let config: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Parse {
        message: e.message().trim().to_string(),
        line: None,
    })?;

    config.check().map_err(|bad| Error::Parse {
        message: format!("`{}` {}", bad.key, bad.message),
        line: key_line(text, &bad.key),
    })?;
    Ok(config)
}
