//! The teacher–student training loop.
//!
//! Every epoch runs seven stages in a fixed order (see [`Stage`]). Each stage
//! draws from its own generator, seeded by `(seed, epoch, stage)`, so an
//! epoch's outcome depends only on the state it starts from — which is what
//! makes restoring a checkpoint and re-running an epoch reproduce it exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_model, save_policy, write_file};
use crate::config::{ExperimentConfig, Mode};
use crate::dynamics::{GaussianDynamicsModel, LogVarianceBounds, Owner, Transition, TransitionBuffer};
use crate::env::{self, EnvParams};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::policy::{
    collect_rollouts, fit_value, flatten_steps, gae_advantages, trpo_update, GaussianPolicy, InputScaling,
    Step, Trajectory, TrpoStats, ValueFunction,
};
use crate::student::{behavior_clone, evaluate, mean_std, DemonstrationSet, EvalMode};
use crate::surprise::{shape_rollouts, surprises_for_steps, SurpriseWeights};

/// Version tag written at the top of every metrics file.
pub const METRICS_SCHEMA: &str = "surprise-teach metrics v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    FitTeacherModel,
    UpdateTeacher,
    Demonstrate,
    CloneStudent,
    StudentRollouts,
    FitStudentModel,
    Evaluate,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::FitTeacherModel,
        Stage::UpdateTeacher,
        Stage::Demonstrate,
        Stage::CloneStudent,
        Stage::StudentRollouts,
        Stage::FitStudentModel,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::FitTeacherModel => "fit_teacher_model",
            Stage::UpdateTeacher => "update_teacher",
            Stage::Demonstrate => "demonstrate",
            Stage::CloneStudent => "clone_student",
            Stage::StudentRollouts => "student_rollouts",
            Stage::FitStudentModel => "fit_student_model",
            Stage::Evaluate => "evaluate",
        }
    }

    fn stream(self) -> u64 {
        Stage::ORDER.iter().position(|s| *s == self).expect("listed") as u64
    }
}

fn stage_rng(seed: u64, epoch: usize, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64 + 1) * 16 + stage.stream());
    rng
}

/// Generator for initialization; stream 0 is never used by an epoch stage.
fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Everything needed to continue training. Serializes to JSON losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: ExperimentConfig,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub teacher_policy: GaussianPolicy,
    pub teacher_value: ValueFunction,
    pub teacher_model: GaussianDynamicsModel,
    pub teacher_buffer: TransitionBuffer,
    pub student_policy: GaussianPolicy,
    pub student_model: GaussianDynamicsModel,
    pub student_buffer: TransitionBuffer,
    /// Per-step extrinsic rewards of the student's latest rollouts; sets `η_S`.
    pub student_rewards: Vec<f64>,
}

fn adam(step_size: f64) -> AdamConfig {
    AdamConfig::with_step_size(step_size)
}

fn bounds(config: &ExperimentConfig) -> LogVarianceBounds {
    LogVarianceBounds {
        min: config.dynamics.log_var_min,
        max: config.dynamics.log_var_max,
    }
}

fn transitions(trajectories: &[Trajectory]) -> impl Iterator<Item = Transition> + '_ {
    trajectories.iter().flat_map(|t| t.steps.iter().map(Step::transition))
}

fn step_rewards(trajectories: &[Trajectory]) -> Vec<f64> {
    trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.reward_ext)).collect()
}

/// Transitions under uniformly random actions, for the teacher's warm start.
fn random_transitions(params: &EnvParams, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
    let info = params.space_info();
    let mut out = Vec::with_capacity(n);
    let mut state = env::reset(params, rng.random());
    while out.len() < n {
        let action: Vec<f64> = info
            .action_low
            .iter()
            .zip(&info.action_high)
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect();
        let result = env::step(params, &state, &action)?;
        out.push(Transition {
            state: state.values.clone(),
            action,
            next_state: result.next_state.values.clone(),
        });
        state = if result.done { env::reset(params, rng.random()) } else { result.next_state };
    }
    Ok(out)
}

impl TrainingState {
    /// Fresh networks, a teacher buffer warm-started with random-action
    /// transitions, and a student model fit on the untrained student's rollouts.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed);
        let t_env = &config.teacher_env;
        let s_env = &config.student_env;
        let info = t_env.space_info();
        let p = &config.policy;
        let d = &config.dynamics;

        let teacher_policy = GaussianPolicy::for_env(t_env, &p.hidden, p.init_log_std, rng.random())?;
        let student_policy = GaussianPolicy::for_env(s_env, &p.hidden, p.init_log_std, rng.random())?;
        let teacher_value = ValueFunction::zeros(InputScaling::for_env(t_env), &config.value.hidden, rng.random())?;
        let teacher_model =
            GaussianDynamicsModel::new(info.state_dim, info.action_dim, &d.hidden, Owner::Teacher, bounds(config), rng.random())?;
        let student_model =
            GaussianDynamicsModel::new(info.state_dim, info.action_dim, &d.hidden, Owner::Student, bounds(config), rng.random())?;

        let mut teacher_buffer = TransitionBuffer::new(Owner::Teacher, d.buffer_capacity)?;
        teacher_buffer.extend(random_transitions(t_env, config.warmup_steps, &mut rng)?);

        let mut student_buffer = TransitionBuffer::new(Owner::Student, d.buffer_capacity)?;
        let rollouts = collect_rollouts(s_env, &student_policy, config.student_rollout_steps, &mut rng)?;
        student_buffer.extend(transitions(&rollouts));
        let student_model = student_model.fit(&student_buffer, d.epochs, d.batch_size, &adam(d.step_size), &mut rng)?;

        Ok(Self {
            config: config.clone(),
            epoch: 0,
            teacher_policy,
            teacher_value,
            teacher_model,
            teacher_buffer,
            student_policy,
            student_model,
            student_buffer,
            student_rewards: step_rewards(&rollouts),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Numeric(format!("cannot serialize training state: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            message: format!("training state: {e}"),
            line: Some(e.line()),
        })?;
        state.config.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One metrics row. Every field is a deterministic function of the
/// pre-epoch state; wall-clock time is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Stochastic-policy evaluation in the teacher's environment.
    pub teacher_return_mean: f64,
    pub teacher_return_std: f64,
    /// Mean-action evaluation in the student's environment.
    pub student_return_mean: f64,
    pub student_return_std: f64,
    /// Fraction of this epoch's teacher training episodes that hit the goal.
    pub teacher_goal_rate: f64,
    pub teacher_surprise_mean: f64,
    pub student_surprise_mean: f64,
    pub r_int_mean: f64,
    pub eta_t: f64,
    pub eta_s: f64,
    pub teacher_nll: f64,
    pub student_nll: f64,
    pub trpo_accepted: bool,
    pub trpo_kl: f64,
    pub trpo_improvement: f64,
    pub demo_abs_action_mean: f64,
}

impl EpochMetrics {
    pub const HEADER: [&'static str; 17] = [
        "epoch",
        "teacher_return_mean",
        "teacher_return_std",
        "student_return_mean",
        "student_return_std",
        "teacher_goal_rate",
        "teacher_surprise_mean",
        "student_surprise_mean",
        "r_int_mean",
        "eta_t",
        "eta_s",
        "teacher_nll",
        "student_nll",
        "trpo_accepted",
        "trpo_kl",
        "trpo_improvement",
        "demo_abs_action_mean",
    ];

    fn record(&self) -> Vec<String> {
        let f = |v: f64| v.to_string();
        vec![
            self.epoch.to_string(),
            f(self.teacher_return_mean),
            f(self.teacher_return_std),
            f(self.student_return_mean),
            f(self.student_return_std),
            f(self.teacher_goal_rate),
            f(self.teacher_surprise_mean),
            f(self.student_surprise_mean),
            f(self.r_int_mean),
            f(self.eta_t),
            f(self.eta_s),
            f(self.teacher_nll),
            f(self.student_nll),
            u8::from(self.trpo_accepted).to_string(),
            f(self.trpo_kl),
            f(self.trpo_improvement),
            f(self.demo_abs_action_mean),
        ]
    }

    /// The CSV line for this epoch, without a trailing newline.
    pub fn csv_row(&self) -> String {
        self.record().join(",")
    }

    pub fn csv_header() -> String {
        Self::HEADER.join(",")
    }

    fn check_finite(&self) -> Result<()> {
        let values = [
            self.teacher_return_mean,
            self.teacher_return_std,
            self.student_return_mean,
            self.student_return_std,
            self.teacher_goal_rate,
            self.teacher_surprise_mean,
            self.student_surprise_mean,
            self.r_int_mean,
            self.eta_t,
            self.eta_s,
            self.teacher_nll,
            self.student_nll,
            self.trpo_kl,
            self.trpo_improvement,
            self.demo_abs_action_mean,
        ];
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite metrics in epoch {}: {self:?}", self.epoch)))
        }
    }
}

/// One demonstrated step, as written to the demonstration dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoRow {
    pub epoch: usize,
    /// Step index within its episode.
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub teacher_surprise: f64,
    pub student_surprise: f64,
}

#[derive(Debug, Clone)]
pub struct EpochOutput {
    pub state: TrainingState,
    pub metrics: EpochMetrics,
    pub demos: Vec<DemoRow>,
    /// Full teacher-update statistics, for callers that audit the trust region.
    pub trpo: TrpoStats,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

struct TeacherUpdate {
    policy: GaussianPolicy,
    value: ValueFunction,
    buffer: TransitionBuffer,
    stats: TrpoStats,
    goal_rate: f64,
    teacher_surprise_mean: f64,
    student_surprise_mean: f64,
    r_int_mean: f64,
    eta_t: f64,
    eta_s: f64,
}

/// Stage 2. Deliberately takes only the teacher's environment: the teacher
/// sees the student solely through the student's learned model and rewards.
#[allow(clippy::too_many_arguments)]
fn update_teacher(
    config: &ExperimentConfig,
    teacher_env: &EnvParams,
    policy: &GaussianPolicy,
    value: &ValueFunction,
    buffer: &TransitionBuffer,
    teacher_model: &GaussianDynamicsModel,
    student_model: &GaussianDynamicsModel,
    student_rewards: &[f64],
    weights: &SurpriseWeights,
    rng: &mut ChaCha8Rng,
) -> Result<TeacherUpdate> {
    let trajs = collect_rollouts(teacher_env, policy, config.steps_per_epoch, rng)?;
    let teacher_rewards = step_rewards(&trajs);
    let shaped = shape_rollouts(&trajs, teacher_model, student_model, weights, &teacher_rewards, student_rewards)?;
    let rewards: Vec<Vec<f64>> = shaped.iter().map(|t| t.iter().map(|s| s.total()).collect()).collect();
    let trpo = &config.trpo;
    let gae = gae_advantages(&trajs, value, trpo.gamma, trpo.lambda, &rewards)?;
    let (states, actions) = flatten_steps(&trajs);
    let (new_policy, stats) = trpo_update(policy, states.view(), actions.view(), &gae.advantages, trpo)?;
    let v = &config.value;
    let new_value = fit_value(value, states.view(), &gae.value_targets, v.epochs, v.batch_size, &adam(v.step_size), rng)?;

    let mut new_buffer = buffer.clone();
    new_buffer.extend(transitions(&trajs));

    let flat: Vec<_> = shaped.iter().flatten().collect();
    let finished: Vec<_> = trajs.iter().filter(|t| t.is_complete()).collect();
    let goals = finished
        .iter()
        .filter(|t| t.done_reason == Some(env::DoneReason::Goal))
        .count();
    Ok(TeacherUpdate {
        policy: new_policy,
        value: new_value,
        buffer: new_buffer,
        stats,
        goal_rate: if finished.is_empty() { 0.0 } else { goals as f64 / finished.len() as f64 },
        teacher_surprise_mean: mean(&flat.iter().map(|s| s.teacher_surprise).collect::<Vec<_>>()),
        student_surprise_mean: mean(&flat.iter().map(|s| s.student_surprise).collect::<Vec<_>>()),
        r_int_mean: mean(&flat.iter().map(|s| s.r_int).collect::<Vec<_>>()),
        eta_t: flat.first().map_or(0.0, |s| s.eta_t_used),
        eta_s: flat.first().map_or(0.0, |s| s.eta_s_used),
    })
}

/// Runs one epoch. On error the input state is untouched and the error
/// names the failing stage.
pub fn run_epoch(state: &TrainingState) -> Result<EpochOutput> {
    run_epoch_observed(state, &mut |_| {})
}

/// [`run_epoch`], reporting each stage to `observer` as it starts.
pub fn run_epoch_observed(state: &TrainingState, observer: &mut dyn FnMut(Stage)) -> Result<EpochOutput> {
    let config = &state.config;
    let epoch = state.epoch;
    let seed = config.seed;
    let d = &config.dynamics;
    let weights = config.effective_weights();
    let label = |stage: Stage| move |e: Error| e.at_stage(stage.name());

    // 1. Teacher transition model on everything the teacher has seen.
    let stage = Stage::FitTeacherModel;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let (teacher_model, teacher_nll) = (|| {
        let m = state
            .teacher_model
            .fit(&state.teacher_buffer, d.epochs, d.batch_size, &adam(d.step_size), &mut rng)?;
        let nll = m.mean_loss(&state.teacher_buffer)?;
        Ok((m, nll))
    })()
    .map_err(label(stage))?;

    // 2. Teacher rollouts, shaped rewards, trust-region step.
    let stage = Stage::UpdateTeacher;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let teacher = update_teacher(
        config,
        &config.teacher_env,
        &state.teacher_policy,
        &state.teacher_value,
        &state.teacher_buffer,
        &teacher_model,
        &state.student_model,
        &state.student_rewards,
        &weights,
        &mut rng,
    )
    .map_err(label(stage))?;

    // 3. Fresh demonstrations from the updated teacher.
    let stage = Stage::Demonstrate;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let (demos, demo_rows) = (|| {
        let trajs = collect_rollouts(&config.teacher_env, &teacher.policy, config.demo_steps, &mut rng)?;
        let steps: Vec<&Step> = trajs.iter().flat_map(|t| &t.steps).collect();
        let (ts, ss) = surprises_for_steps(&steps, &teacher_model, &state.student_model)?;
        let mut rows = Vec::with_capacity(steps.len());
        let mut k = 0;
        for traj in &trajs {
            for (t, step) in traj.steps.iter().enumerate() {
                rows.push(DemoRow {
                    epoch,
                    t,
                    state: step.state.clone(),
                    action: step.applied_action.clone(),
                    teacher_surprise: ts[k],
                    student_surprise: ss[k],
                });
                k += 1;
            }
        }
        Ok((DemonstrationSet::from_trajectories(&trajs, epoch), rows))
    })()
    .map_err(label(stage))?;
    let demo_abs_action_mean = mean(&demos.actions.iter().flatten().map(|a| a.abs()).collect::<Vec<_>>());

    // 4. Behavioral cloning, continuing from the current student policy.
    let stage = Stage::CloneStudent;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let bc = &config.bc;
    let student_policy = behavior_clone(&state.student_policy, &demos, bc.epochs, bc.batch_size, &adam(bc.step_size), &mut rng)
        .map_err(label(stage))?;

    // 5. The student acts in its own environment.
    let stage = Stage::StudentRollouts;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let student_trajs = collect_rollouts(&config.student_env, &student_policy, config.student_rollout_steps, &mut rng)
        .map_err(label(stage))?;
    let mut student_buffer = state.student_buffer.clone();
    student_buffer.extend(transitions(&student_trajs));

    // 6. Student transition model, only on the student's own transitions.
    let stage = Stage::FitStudentModel;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let (student_model, student_nll) = (|| {
        let m = state
            .student_model
            .fit(&student_buffer, d.epochs, d.batch_size, &adam(d.step_size), &mut rng)?;
        let nll = m.mean_loss(&student_buffer)?;
        Ok((m, nll))
    })()
    .map_err(label(stage))?;

    // 7. Evaluation and metrics.
    let stage = Stage::Evaluate;
    observer(stage);
    let mut rng = stage_rng(seed, epoch, stage);
    let metrics = (|| {
        let t_eval = evaluate(&teacher.policy, &config.teacher_env, config.eval_episodes, &mut rng, EvalMode::Stochastic)?;
        let s_eval = evaluate(&student_policy, &config.student_env, config.eval_episodes, &mut rng, EvalMode::Deterministic)?;
        let metrics = EpochMetrics {
            epoch,
            teacher_return_mean: t_eval.mean_return,
            teacher_return_std: t_eval.std_return,
            student_return_mean: s_eval.mean_return,
            student_return_std: s_eval.std_return,
            teacher_goal_rate: teacher.goal_rate,
            teacher_surprise_mean: teacher.teacher_surprise_mean,
            student_surprise_mean: teacher.student_surprise_mean,
            r_int_mean: teacher.r_int_mean,
            eta_t: teacher.eta_t,
            eta_s: teacher.eta_s,
            teacher_nll,
            student_nll,
            trpo_accepted: teacher.stats.accepted(),
            trpo_kl: teacher.stats.kl,
            trpo_improvement: teacher.stats.improvement(),
            demo_abs_action_mean,
        };
        metrics.check_finite()?;
        Ok(metrics)
    })()
    .map_err(label(stage))?;

    Ok(EpochOutput {
        state: TrainingState {
            config: config.clone(),
            epoch: epoch + 1,
            teacher_policy: teacher.policy,
            teacher_value: teacher.value,
            teacher_model,
            teacher_buffer: teacher.buffer,
            student_policy,
            student_model,
            student_buffer,
            student_rewards: step_rewards(&student_trajs),
        },
        metrics,
        demos: demo_rows,
        trpo: teacher.stats,
    })
}

/// Output files of one experiment directory.
pub struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    demos: Option<BufWriter<File>>,
}

fn open(path: &Path, append: bool) -> Result<(BufWriter<File>, bool)> {
    let existed = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((BufWriter::new(file), existed))
}

impl RunFiles {
    pub const METRICS: &'static str = "metrics.csv";
    pub const TIMING: &'static str = "timing.csv";
    pub const DEMOS: &'static str = "demos.csv";
    pub const STATE: &'static str = "state.json";
    pub const CONFIG: &'static str = "config.toml";

    /// Creates `dir` if needed. With `append`, existing files are extended
    /// rather than replaced (used when resuming).
    pub fn create(dir: &Path, config: &ExperimentConfig, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(Self::CONFIG), &config.to_toml()?)?;
        let metrics_path = dir.join(Self::METRICS);
        let (mut metrics, existed) = open(&metrics_path, append)?;
        if !existed {
            writeln!(
                metrics,
                "# {METRICS_SCHEMA} seed={} mode={}\n{}",
                config.seed,
                config.mode.name(),
                EpochMetrics::csv_header()
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
        }
        let timing_path = dir.join(Self::TIMING);
        let (mut timing, existed) = open(&timing_path, append)?;
        if !existed {
            writeln!(timing, "epoch,wall_ms").map_err(|e| Error::io(&timing_path, e))?;
        }
        let demos = if config.demo_dump_every > 0 {
            let path = dir.join(Self::DEMOS);
            let (mut w, existed) = open(&path, append)?;
            if !existed {
                let dim = config.teacher_env.space_info().state_dim;
                let states: Vec<String> = (0..dim).map(|i| format!("s{i}")).collect();
                writeln!(w, "epoch,t,{},action,teacher_surprise,student_surprise", states.join(","))
                    .map_err(|e| Error::io(&path, e))?;
            }
            Some(w)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            timing,
            demos,
        })
    }

    fn record(&mut self, out: &EpochOutput, wall_ms: u128) -> Result<()> {
        let path = self.dir.join(Self::METRICS);
        writeln!(self.metrics, "{}", out.metrics.csv_row())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))?;
        let path = self.dir.join(Self::TIMING);
        writeln!(self.timing, "{},{wall_ms}", out.metrics.epoch)
            .and_then(|_| self.timing.flush())
            .map_err(|e| Error::io(&path, e))?;
        let every = out.state.config.demo_dump_every;
        if let Some(w) = self.demos.as_mut().filter(|_| every > 0 && out.metrics.epoch.is_multiple_of(every)) {
            let path = self.dir.join(Self::DEMOS);
            for row in &out.demos {
                let mut fields = vec![row.epoch.to_string(), row.t.to_string()];
                fields.extend(row.state.iter().map(f64::to_string));
                fields.extend(row.action.iter().map(f64::to_string));
                fields.push(row.teacher_surprise.to_string());
                fields.push(row.student_surprise.to_string());
                writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, state: &TrainingState, tagged: bool) -> Result<()> {
        let ckpt = self.dir.join("checkpoints");
        state.save(&ckpt.join(Self::STATE))?;
        if tagged {
            state.save(&ckpt.join(format!("state_epoch{}.json", state.epoch)))?;
        }
        save_policy(&ckpt.join("teacher_policy.txt"), &state.teacher_policy)?;
        save_policy(&ckpt.join("student_policy.txt"), &state.student_policy)?;
        save_model(&ckpt.join("teacher_model.txt"), &state.teacher_model)?;
        save_model(&ckpt.join("student_model.txt"), &state.student_model)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub metrics: Vec<EpochMetrics>,
    pub wall_ms: Vec<u128>,
    pub final_state: TrainingState,
}

/// Trains from a fresh state for `config.epochs` epochs.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentRun> {
    run_experiment_with(config, out_dir, &mut |_| {})
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<ExperimentRun> {
    let files = out_dir.map(|d| RunFiles::create(d, config, false)).transpose()?;
    let state = TrainingState::new(config).map_err(|e| e.at_stage("initialize"))?;
    drive(state, files, on_epoch)
}

/// Continues a restored state until its config's epoch count, appending to
/// the files in `out_dir`.
pub fn continue_experiment(
    state: TrainingState,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<ExperimentRun> {
    let files = out_dir.map(|d| RunFiles::create(d, &state.config, true)).transpose()?;
    drive(state, files, on_epoch)
}

fn drive(
    mut state: TrainingState,
    mut files: Option<RunFiles>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<ExperimentRun> {
    let mut metrics = Vec::new();
    let mut wall_ms = Vec::new();
    while state.epoch < state.config.epochs {
        let start = Instant::now();
        let out = run_epoch(&state)?;
        let ms = start.elapsed().as_millis();
        if let Some(f) = files.as_mut() {
            f.record(&out, ms)?;
            let every = out.state.config.checkpoint_every;
            if every > 0 && out.state.epoch.is_multiple_of(every) {
                f.checkpoint(&out.state, true)?;
            }
        }
        on_epoch(&out.metrics);
        metrics.push(out.metrics);
        wall_ms.push(ms);
        state = out.state;
    }
    if let Some(f) = files.as_ref() {
        f.checkpoint(&state, false)?;
    }
    Ok(ExperimentRun {
        metrics,
        wall_ms,
        final_state: state,
    })
}

/// Teacher and student returns averaged over the last `window` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalReturns {
    pub teacher: f64,
    pub student: f64,
}

pub fn final_returns(metrics: &[EpochMetrics], window: usize) -> Option<FinalReturns> {
    let tail = &metrics[metrics.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return None;
    }
    let n = tail.len() as f64;
    Some(FinalReturns {
        teacher: tail.iter().map(|m| m.teacher_return_mean).sum::<f64>() / n,
        student: tail.iter().map(|m| m.student_return_mean).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    /// `Err` holds the failure message; such runs count as missing.
    pub outcome: std::result::Result<FinalReturns, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub mode: Mode,
    pub n_ok: usize,
    pub n_missing: usize,
    pub teacher_mean: f64,
    pub teacher_std: f64,
    pub student_mean: f64,
    pub student_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub runs: Vec<RunSummary>,
}

/// Header of the comparison CSV, after its `#` version line.
pub const COMPARISON_HEADER: &str =
    "kind,mode,seed,n_ok,n_missing,teacher_mean,teacher_std,student_mean,student_std,status";

impl ComparisonTable {
    /// One row per mode, in first-seen order, over that mode's successful seeds.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut modes: Vec<Mode> = Vec::new();
        for r in &self.runs {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let runs: Vec<&RunSummary> = self.runs.iter().filter(|r| r.mode == mode).collect();
                let ok: Vec<FinalReturns> = runs.iter().filter_map(|r| r.outcome.clone().ok()).collect();
                let (teacher_mean, teacher_std) = mean_std(&ok.iter().map(|f| f.teacher).collect::<Vec<_>>());
                let (student_mean, student_std) = mean_std(&ok.iter().map(|f| f.student).collect::<Vec<_>>());
                AggregateRow {
                    mode,
                    n_ok: ok.len(),
                    n_missing: runs.len() - ok.len(),
                    teacher_mean,
                    teacher_std,
                    student_mean,
                    student_std,
                }
            })
            .collect()
    }

    pub fn aggregate_for(&self, mode: Mode) -> Option<AggregateRow> {
        self.aggregate().into_iter().find(|a| a.mode == mode)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Numeric(format!("cannot format comparison table: {e}"));
        for r in &self.runs {
            let seed = r.seed.to_string();
            let record: Vec<String> = match &r.outcome {
                Ok(f) => vec![
                    "run".into(), r.mode.name().into(), seed, "1".into(), "0".into(),
                    f.teacher.to_string(), String::new(), f.student.to_string(), String::new(), "ok".into(),
                ],
                Err(msg) => vec![
                    "run".into(), r.mode.name().into(), seed, "0".into(), "1".into(),
                    String::new(), String::new(), String::new(), String::new(), format!("missing: {msg}"),
                ],
            };
            w.write_record(&record).map_err(to_err)?;
        }
        for a in self.aggregate() {
            let record = [
                "aggregate".to_string(),
                a.mode.name().into(),
                String::new(),
                a.n_ok.to_string(),
                a.n_missing.to_string(),
                a.teacher_mean.to_string(),
                a.teacher_std.to_string(),
                a.student_mean.to_string(),
                a.student_std.to_string(),
                if a.n_ok == 0 { "missing".into() } else { "ok".into() },
            ];
            w.write_record(&record).map_err(to_err)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?)
            .expect("csv output is UTF-8");
        Ok(format!("# surprise-teach comparison v1\n{COMPARISON_HEADER}\n{body}"))
    }
}

/// Config for one cell of a comparison grid.
pub fn comparison_config(config: &ExperimentConfig, mode: Mode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        seed,
        ..config.clone()
    }
}

/// Runs one grid cell; failures become a missing entry instead of an error.
/// With `out_dir`, the run writes to `out_dir/<mode>/seed<seed>`.
pub fn comparison_run(config: &ExperimentConfig, mode: Mode, seed: u64, out_dir: Option<&Path>) -> RunSummary {
    let cfg = comparison_config(config, mode, seed);
    let dir = out_dir.map(|d| d.join(mode.name()).join(format!("seed{seed}")));
    let outcome = run_experiment(&cfg, dir.as_deref())
        .and_then(|run| {
            final_returns(&run.metrics, cfg.final_window)
                .ok_or_else(|| Error::Usage("run produced no epochs".into()))
        })
        .map_err(|e| e.to_string());
    RunSummary { mode, seed, outcome }
}

/// Every mode × seed, sequentially. Parallel callers can use
/// [`comparison_run`] per cell and collect into a [`ComparisonTable`].
pub fn run_comparison(
    config: &ExperimentConfig,
    modes: &[Mode],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<ComparisonTable> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("a comparison needs at least one mode and one seed".into()));
    }
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &mode in modes {
        for &seed in seeds {
            runs.push(comparison_run(config, mode, seed, out_dir));
        }
    }
    let table = ComparisonTable { runs };
    if let Some(dir) = out_dir {
        write_file(&dir.join("comparison.csv"), &table.to_csv()?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PolicyConfig;

    /// Seconds-scale config for exercising the loop.
    pub(crate) fn tiny(mode: Mode) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            mode,
            epochs: 2,
            steps_per_epoch: 200,
            demo_steps: 100,
            student_rollout_steps: 100,
            warmup_steps: 200,
            eval_episodes: 1,
            final_window: 2,
            demo_dump_every: 1,
            policy: PolicyConfig {
                hidden: vec![8],
                init_log_std: 0.0,
            },
            ..ExperimentConfig::default()
        };
        c.value.hidden = vec![8];
        c.value.epochs = 1;
        c.dynamics.hidden = vec![8];
        c.dynamics.epochs = 1;
        c.dynamics.batch_size = 64;
        c.bc.epochs = 1;
        c.teacher_env.horizon = 100;
        c.student_env.horizon = 100;
        c
    }

    #[test]
    fn stages_run_in_order() {
        let state = TrainingState::new(&tiny(Mode::Full)).unwrap();
        let mut seen = Vec::new();
        run_epoch_observed(&state, &mut |s| seen.push(s)).unwrap();
        assert_eq!(seen, Stage::ORDER);
    }

    #[test]
    fn plain_mode_has_no_intrinsic_reward() {
        let state = TrainingState::new(&tiny(Mode::Plain)).unwrap();
        let out = run_epoch(&state).unwrap();
        assert_eq!(out.metrics.eta_t, 0.0);
        assert_eq!(out.metrics.eta_s, 0.0);
        assert_eq!(out.metrics.r_int_mean, 0.0);
    }

    #[test]
    fn baseline_mode_logs_but_ignores_student_surprise() {
        let state = TrainingState::new(&tiny(Mode::SurpriseMaxBaseline)).unwrap();
        let out = run_epoch(&state).unwrap();
        assert!(out.metrics.student_surprise_mean > 0.0);
        assert_eq!(out.metrics.eta_s, 0.0);
        assert!(out.metrics.eta_t > 0.0);
        let expected = out.metrics.eta_t * out.metrics.teacher_surprise_mean;
        assert!((out.metrics.r_int_mean - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn epochs_are_deterministic() {
        let a = run_experiment(&tiny(Mode::Full), None).unwrap();
        let b = run_experiment(&tiny(Mode::Full), None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn teacher_update_ignores_student_environment() {
        let state = TrainingState::new(&tiny(Mode::Full)).unwrap();
        let mut perturbed = state.clone();
        perturbed.config.student_env.power *= 3.0;
        perturbed.config.student_env.goal_x = 0.3;
        let a = run_epoch(&state).unwrap();
        let b = run_epoch(&perturbed).unwrap();
        assert_eq!(a.state.teacher_policy, b.state.teacher_policy);
        assert_eq!(a.state.teacher_model, b.state.teacher_model);
        assert_eq!(a.trpo, b.trpo);
        assert_eq!(a.demos, b.demos);
    }

    #[test]
    fn student_model_only_sees_student_transitions() {
        let state = TrainingState::new(&tiny(Mode::Full)).unwrap();
        let out = run_epoch(&state).unwrap();
        assert_eq!(out.state.student_buffer.owner(), Owner::Student);
        assert_eq!(out.state.student_model.owner(), Owner::Student);
        assert_eq!(out.state.student_buffer.len(), 200);
        // Fitting the student's model on teacher data is refused outright.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(out.state.student_model.fit(&out.state.teacher_buffer, 1, 8, &AdamConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn restoring_a_checkpoint_reproduces_the_next_epoch() {
        let state = TrainingState::new(&tiny(Mode::Full)).unwrap();
        let first = run_epoch(&state).unwrap();
        let restored = TrainingState::from_json(&first.state.to_json().unwrap()).unwrap();
        assert_eq!(restored, first.state);
        let a = run_epoch(&first.state).unwrap();
        let b = run_epoch(&restored).unwrap();
        assert_eq!(a.metrics.csv_row(), b.metrics.csv_row());
    }

    #[test]
    fn stage_failures_are_labelled_and_leave_state_alone() {
        let mut state = TrainingState::new(&tiny(Mode::Full)).unwrap();
        state.config.bc.batch_size = 0;
        let before = state.clone();
        match run_epoch(&state) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "clone_student"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state, before);
    }

    #[test]
    fn experiment_writes_its_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut config = tiny(Mode::Full);
        config.seed = 3;
        run_experiment(&config, Some(&out)).unwrap();
        let metrics = std::fs::read_to_string(out.join(RunFiles::METRICS)).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "# surprise-teach metrics v1 seed=3 mode=full");
        assert_eq!(lines[1], EpochMetrics::csv_header());
        assert_eq!(lines.len(), 4);
        let demos = std::fs::read_to_string(out.join(RunFiles::DEMOS)).unwrap();
        assert!(demos.starts_with("epoch,t,s0,s1,action,teacher_surprise,student_surprise\n"));
        assert_eq!(demos.lines().count(), 1 + 2 * 100);
        assert!(out.join("checkpoints").join(RunFiles::STATE).exists());
        assert!(out.join("checkpoints/student_policy.txt").exists());
    }

    #[test]
    fn comparison_aggregates_per_mode() {
        let config = tiny(Mode::Full);
        let table = run_comparison(&config, &[Mode::Full, Mode::SurpriseMaxBaseline], &[0, 1], None).unwrap();
        assert_eq!(table.runs.len(), 4);
        let agg = table.aggregate();
        assert_eq!(agg.len(), 2);
        assert!(agg.iter().all(|a| a.n_ok == 2 && a.n_missing == 0));
        let csv = table.to_csv().unwrap();
        assert_eq!(csv.lines().filter(|l| l.starts_with("aggregate,")).count(), 2);
    }

    #[test]
    fn single_cell_comparison_equals_that_run() {
        let config = tiny(Mode::Plain);
        let table = run_comparison(&config, &[Mode::Plain], &[5], None).unwrap();
        let run = run_experiment(&comparison_config(&config, Mode::Plain, 5), None).unwrap();
        let f = final_returns(&run.metrics, config.final_window).unwrap();
        let a = table.aggregate_for(Mode::Plain).unwrap();
        assert_eq!((a.teacher_mean, a.student_mean), (f.teacher, f.student));
        assert_eq!((a.teacher_std, a.student_std), (0.0, 0.0));
    }

    #[test]
    fn failed_seeds_are_recorded_as_missing() {
        let table = ComparisonTable {
            runs: vec![
                RunSummary { mode: Mode::Full, seed: 0, outcome: Ok(FinalReturns { teacher: 1.0, student: 0.5 }) },
                RunSummary { mode: Mode::Full, seed: 1, outcome: Err("stage `evaluate` failed, badly".into()) },
            ],
        };
        let a = table.aggregate_for(Mode::Full).unwrap();
        assert_eq!((a.n_ok, a.n_missing, a.student_mean), (1, 1, 0.5));
        let csv = table.to_csv().unwrap();
        assert!(csv.contains("\"missing: stage `evaluate` failed, badly\""));
        assert!(run_comparison(&tiny(Mode::Full), &[], &[0], None).is_err());
    }
}
