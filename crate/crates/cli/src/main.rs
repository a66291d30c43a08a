//! `surprise-teach` — train, compare, sweep and evaluate teacher/student runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use surprise_teach::checkpoint::load_policy;
use surprise_teach::config::{self, parse_config, ExperimentConfig, Mode, PRESETS};
use surprise_teach::orchestrator::{comparison_run, run_experiment_with, ComparisonTable, RunSummary};
use surprise_teach::student::{evaluate, mean_std, EvalMode};

/// Output directory used when neither `--out` nor this variable is given.
const DEFAULT_OUT: &str = "runs";
/// Overrides the default output directory; `--out` still wins.
const OUT_ENV: &str = "SURPRISE_TEACH_OUT";

#[derive(Parser)]
#[command(name = "surprise-teach", version, about = "Surprise-driven teacher/student training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one teacher/student pair.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        out: OutDir,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Print one line per epoch.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Run every mode × seed and write `comparison.csv`.
    Compare {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        out: OutDir,
        /// Modes to compare.
        #[arg(long, value_parser = parse_mode, value_delimiter = ',', default_value = "full,surprise-max")]
        mode: Vec<Mode>,
        #[command(flatten)]
        grid: SeedGrid,
    },
    /// Vary the student-surprise weight in full mode and write `sweep.csv`.
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        out: OutDir,
        /// Student-surprise weights to try.
        #[arg(long = "eta-s", value_delimiter = ',', default_value = "0.001,0.005")]
        eta_s: Vec<f64>,
        #[command(flatten)]
        grid: SeedGrid,
    },
    /// Evaluate a saved policy and print return statistics.
    Eval {
        /// Policy checkpoint (e.g. `checkpoints/student_policy.txt`).
        checkpoint: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
        /// Which environment of the config to evaluate in.
        #[arg(long, value_enum, default_value_t = Side::Teacher)]
        env: Side,
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample actions instead of acting with the mean.
        #[arg(long)]
        stochastic: bool,
    },
    /// List presets, or print one.
    Presets { name: Option<String> },
}

#[derive(Args)]
struct ConfigSource {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `presets`).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct OutDir {
    /// Output directory (default: $SURPRISE_TEACH_OUT, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SeedGrid {
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Runs in flight at once.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Teacher,
    Student,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
                parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
            }
            (None, Some(name)) => Ok(config::preset(name)?),
            (None, None) => Ok(ExperimentConfig::default()),
        }
    }
}

impl OutDir {
    fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn run_grid(cells: Vec<(ExperimentConfig, Mode, u64, PathBuf)>, workers: usize) -> Result<Vec<RunSummary>> {
    let pool = pool(workers)?;
    let runs = pool.install(|| {
        cells
            .par_iter()
            .map(|(cfg, mode, seed, dir)| {
                let summary = comparison_run(cfg, *mode, *seed, Some(dir));
                match &summary.outcome {
                    Ok(f) => eprintln!("{} seed {seed}: teacher {:.3} student {:.3}", mode.name(), f.teacher, f.student),
                    Err(e) => eprintln!("{} seed {seed}: failed: {e}", mode.name()),
                }
                summary
            })
            .collect()
    });
    Ok(runs)
}

fn train(cfg: ExperimentConfig, out: &Path, verbose: bool) -> Result<()> {
    let run = run_experiment_with(&cfg, Some(out), &mut |m| {
        if verbose {
            eprintln!(
                "epoch {:>4}  teacher {:>8.3}  student {:>8.3}  goal {:.2}",
                m.epoch, m.teacher_return_mean, m.student_return_mean, m.teacher_goal_rate
            );
        }
    })?;
    let last = run.metrics.last().context("run produced no epochs")?;
    println!(
        "{} epochs, seed {}, mode {}: teacher {:.3}, student {:.3} -> {}",
        run.metrics.len(),
        cfg.seed,
        cfg.mode.name(),
        last.teacher_return_mean,
        last.student_return_mean,
        out.display()
    );
    Ok(())
}

fn compare(cfg: ExperimentConfig, out: &Path, modes: &[Mode], grid: &SeedGrid) -> Result<()> {
    if modes.is_empty() || grid.seeds.is_empty() {
        bail!("a comparison needs at least one mode and one seed");
    }
    let cells = modes
        .iter()
        .flat_map(|&m| grid.seeds.iter().map(move |&s| (m, s)))
        .map(|(m, s)| (cfg.clone(), m, s, out.to_path_buf()))
        .collect();
    let table = ComparisonTable {
        runs: run_grid(cells, grid.workers)?,
    };
    let csv = table.to_csv()?;
    write(&out.join("comparison.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

const SWEEP_HEADER: &str = "kind,eta0_s,seed,n_ok,teacher_mean,teacher_std,student_mean,student_std,status";

fn sweep(cfg: ExperimentConfig, out: &Path, etas: &[f64], grid: &SeedGrid) -> Result<()> {
    if etas.is_empty() || grid.seeds.is_empty() {
        bail!("a sweep needs at least one weight and one seed");
    }
    let mut cells = Vec::new();
    for &eta in etas {
        let mut c = cfg.clone();
        c.weights.eta0_s = eta;
        c.validate()?;
        for &seed in &grid.seeds {
            cells.push((c.clone(), Mode::Full, seed, out.join(format!("eta_s_{eta}"))));
        }
    }
    let runs = run_grid(cells, grid.workers)?;
    let mut lines = vec!["# surprise-teach sweep v1".to_string(), SWEEP_HEADER.to_string()];
    let by_eta: Vec<(f64, &[RunSummary])> = etas.iter().copied().zip(runs.chunks(grid.seeds.len())).collect();
    for (eta, chunk) in &by_eta {
        for r in chunk.iter() {
            lines.push(match &r.outcome {
                Ok(f) => format!("run,{eta},{},1,{},,{},,ok", r.seed, f.teacher, f.student),
                Err(e) => format!("run,{eta},{},0,,,,,\"missing: {}\"", r.seed, e.replace('"', "'")),
            });
        }
    }
    for (eta, chunk) in &by_eta {
        let ok: Vec<_> = chunk.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let (tm, ts) = mean_std(&ok.iter().map(|f| f.teacher).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&ok.iter().map(|f| f.student).collect::<Vec<_>>());
        let status = if ok.is_empty() { "missing" } else { "ok" };
        lines.push(format!("aggregate,{eta},,{},{tm},{ts},{sm},{ss},{status}", ok.len()));
    }
    let csv = lines.join("\n") + "\n";
    write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            source,
            out,
            seed,
            mode,
            verbose,
        } => {
            let mut cfg = source.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            train(cfg, &out.resolve(), verbose)
        }
        Command::Compare {
            source,
            out,
            mode,
            grid,
        } => compare(source.load()?, &out.resolve(), &mode, &grid),
        Command::Sweep {
            source,
            out,
            eta_s,
            grid,
        } => sweep(source.load()?, &out.resolve(), &eta_s, &grid),
        Command::Eval {
            checkpoint,
            source,
            env,
            eval_episodes,
            seed,
            stochastic,
        } => {
            let cfg = source.load()?;
            let policy = load_policy(&checkpoint)?;
            let params = match env {
                Side::Teacher => &cfg.teacher_env,
                Side::Student => &cfg.student_env,
            };
            let mode = if stochastic { EvalMode::Stochastic } else { EvalMode::Deterministic };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = evaluate(&policy, params, eval_episodes, &mut rng, mode)?;
            println!(
                "episodes {}  mean_return {}  std_return {}",
                stats.per_episode.len(),
                stats.mean_return,
                stats.std_return
            );
            Ok(())
        }
        Command::Presets { name: None } => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            Ok(())
        }
        Command::Presets { name: Some(name) } => {
            print!("{}", config::preset_text(&name)?);
            Ok(())
        }
    }
}

/// The error chain on one line. Library errors already embed their cause in
/// their message, so causes that repeat the previous line are skipped.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
