//! `fieldforge`: train neural fields with stochastically preconditioned
//! queries and run the standard ablations from one experiment file.
//!
//! ```text
//! fieldforge <subcommand> --config exp.toml [--seed N] [--jobs K] [--out DIR]
//! ```
//!
//! Subcommands: `fit` (one run, full artifacts), `ablate-alpha0`,
//! `ablate-noise`, `ablate-samples` (one-knob studies), `sweep`
//! (hyperparameter grid, paired with/without preconditioning), `extract`
//! and `export-alpha-map` (read checkpoints back).
//!
//! Exit codes: 0 on success, 1 for config or usage errors, 2 for numeric
//! failures such as divergence.

pub mod ablate;
pub mod config;
pub mod export;
pub mod runs;
pub mod source;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use fieldforge_core::diffcore::DiffError;
use fieldforge_core::geometry::GeometryError;
use fieldforge_core::tasks::TaskError;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or usage; exit code 1.
    #[error("config error: {0}")]
    Config(String),
    /// Numeric failure at run time; exit code 2.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl From<TaskError> for CliError {
    fn from(err: TaskError) -> Self {
        match err {
            // Everything the user can fix by editing files maps to exit 1;
            // what went wrong numerically maps to exit 2.
            TaskError::Config(msg) => CliError::Config(msg),
            TaskError::Parse(msg) => CliError::Config(msg),
            TaskError::Io(e) => CliError::Config(e.to_string()),
            TaskError::Field(e) => CliError::Config(e.to_string()),
            TaskError::Geometry(e) => CliError::from(e),
            TaskError::Diff(e) => CliError::from(e),
            diverged @ TaskError::Diverged { .. } => CliError::Run(diverged.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(err: GeometryError) -> Self {
        CliError::Config(err.to_string())
    }
}

impl From<DiffError> for CliError {
    fn from(err: DiffError) -> Self {
        match err {
            DiffError::Checkpoint(msg) => CliError::Config(format!("checkpoint: {msg}")),
            DiffError::Io(e) => CliError::Config(e.to_string()),
            numeric => CliError::Run(numeric.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fieldforge", version, about = "Neural field training with query noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one field and write its full artifact set.
    Fit(RunArgs),
    /// Sweep the initial noise amplitude over shapes and seeds.
    AblateAlpha0(RunArgs),
    /// Compare noise kernels at one amplitude against the off baseline.
    AblateNoise(RunArgs),
    /// Vary the number of averaged displacements per query.
    AblateSamples(RunArgs),
    /// Hyperparameter grid, each cell run with and without preconditioning.
    Sweep(RunArgs),
    /// Extract the zero level set of a checkpointed field.
    Extract(CheckpointArgs),
    /// Rasterize the trained amplitude grid of a checkpoint.
    ExportAlphaMap(CheckpointArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides FIELDFORGE_SEED and the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Experiment file (TOML) the checkpoint was trained from.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to read parameters from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed recorded in output metadata; overrides FIELDFORGE_SEED and the
    /// config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A loaded experiment plus the resolved seed and output directory.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

/// Like [`Session`] but for subcommands that read a checkpoint.
pub struct ExtractSession {
    pub cfg: ExperimentConfig,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

/// Seed precedence: `--seed`, then `FIELDFORGE_SEED`, then the config.
fn resolve_seed(flag: Option<u64>, from_config: u64) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("FIELDFORGE_SEED") {
        Ok(text) => text.trim().parse().map_err(|_| {
            CliError::Config(format!("FIELDFORGE_SEED must be an unsigned integer, got {text:?}"))
        }),
        Err(_) => Ok(from_config),
    }
}

impl Session {
    pub fn from_args(args: &RunArgs) -> Result<Self, CliError> {
        let cfg = ExperimentConfig::load(&args.config)?;
        let seed = resolve_seed(args.seed, cfg.seed)?;
        let out = args.out.clone().unwrap_or_else(|| cfg.out.clone());
        Ok(Session { cfg, seed, out, jobs: args.jobs.max(1) })
    }
}

impl ExtractSession {
    pub fn from_args(args: &CheckpointArgs) -> Result<Self, CliError> {
        let cfg = ExperimentConfig::load(&args.config)?;
        let seed = resolve_seed(args.seed, cfg.seed)?;
        let out = args.out.clone().unwrap_or_else(|| cfg.out.clone());
        Ok(ExtractSession { cfg, checkpoint: args.checkpoint.clone(), out, seed })
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(args) => runs::cmd_fit(&Session::from_args(&args)?),
        Command::AblateAlpha0(args) => ablate::cmd_ablate_alpha0(&Session::from_args(&args)?),
        Command::AblateNoise(args) => ablate::cmd_ablate_noise(&Session::from_args(&args)?),
        Command::AblateSamples(args) => ablate::cmd_ablate_samples(&Session::from_args(&args)?),
        Command::Sweep(args) => sweep::cmd_sweep(&Session::from_args(&args)?),
        Command::Extract(args) => export::cmd_extract(&ExtractSession::from_args(&args)?),
        Command::ExportAlphaMap(args) => {
            export::cmd_export_alpha_map(&ExtractSession::from_args(&args)?)
        }
    }
}

/// Runs `n` independent jobs on up to `jobs` threads. Results come back in
/// job order no matter which thread finished first.
pub(crate) fn run_jobs<T, F>(jobs: usize, n: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = jobs.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = job(i);
                *slots[i].lock().expect("job slot poisoned") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("job slot poisoned").expect("job ran"))
        .collect()
}

/// An optional CSV cell: the value, or empty.
pub(crate) fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes a CSV with a header and the standard metadata trailer.
pub(crate) fn write_table(
    path: &Path,
    header: &str,
    rows: &[String],
    hash: u64,
    seed: u64,
) -> Result<(), CliError> {
    let mut text = String::with_capacity(rows.len() * 64 + 128);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    text.push_str(&format!("# config_hash={hash:016x} seed={seed}\n"));
    std::fs::write(path, text).map_err(TaskError::from)?;
    Ok(())
}
