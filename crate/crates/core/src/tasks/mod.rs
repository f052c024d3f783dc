//! Training loops and objectives: image fitting, SDF reconstruction from
//! oriented points, and direct SDF regression, each optionally run under
//! stochastic query preconditioning.
//!
//! Shared plumbing lives here: the preconditioning config and its runtime
//! driver, run reports with CSV emission, config hashing, and the task
//! error type. The tasks themselves are in [`image`] and [`sdf`].
//!
//! Randomness discipline: every step draws its batch from
//! `stream(seed, Batch, step)` and its query noise from
//! `stream(seed, Noise, step)`. Because zero-amplitude shifts consume no
//! noise draws, a run with preconditioning disabled and a run with a
//! constant zero amplitude see identical random streams and produce
//! bitwise-identical traces.

pub mod image;
pub mod sdf;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, NodeId, ParamStore, Tape};
use crate::fields::{DomainBounds, FieldError, QueryShift};
use crate::geometry::GeometryError;
use crate::precond::{
    adaptive_shift, draw_shift, AlphaGrid, AlphaSchedule, NoiseKernel,
};
use rand_chacha::ChaCha8Rng;

pub use image::{fit_image, psnr, ImageBuffer, ImageFitConfig, ImageFitResult};
pub use sdf::{
    fit_sdf_direct, fit_sdf_points, loss_mape, loss_sdf_points, sample_direct_batch,
    DirectSdfConfig, SdfBatch, SdfEval, SdfFitResult, SdfLossTerms, SdfPointsConfig,
};

/// Losses above this are treated as divergence and abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

// ---- preconditioning config ----

/// How query preconditioning is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpMode {
    /// Plain queries; the baseline.
    Off,
    /// One global amplitude per step from [`SpConfig::schedule`].
    Scheduled,
    /// Trainable per-region amplitudes from [`SpConfig::adaptive`].
    Adaptive,
}

/// Trainable amplitude-grid settings for [`SpMode::Adaptive`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveAlphaConfig {
    /// Vertices per axis of the amplitude grid.
    pub resolution: usize,
    /// Initial amplitude everywhere; must be positive, since rectified
    /// cells that start at zero receive no gradient and can never grow.
    pub alpha_init: f64,
    /// Learning rate for the amplitude block (the field itself uses the
    /// task learning rate).
    pub lr: f64,
}

impl Default for AdaptiveAlphaConfig {
    fn default() -> Self {
        Self { resolution: 16, alpha_init: 0.03, lr: 1e-2 }
    }
}

/// Declarative preconditioning settings, embedded in every task config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpConfig {
    pub mode: SpMode,
    pub kernel: NoiseKernel,
    /// Independent displacements averaged per query (1 = standard).
    pub n_samples: usize,
    /// Amplitude schedule for [`SpMode::Scheduled`].
    pub schedule: AlphaSchedule,
    /// Amplitude grid for [`SpMode::Adaptive`].
    pub adaptive: AdaptiveAlphaConfig,
}

impl Default for SpConfig {
    fn default() -> Self {
        Self {
            mode: SpMode::Scheduled,
            kernel: NoiseKernel::Gaussian,
            n_samples: 1,
            schedule: AlphaSchedule::ExpDecay {
                alpha0: 0.02,
                end_step: None,
                floor_ratio: crate::precond::DEFAULT_FLOOR_RATIO,
            },
            adaptive: AdaptiveAlphaConfig::default(),
        }
    }
}

impl SpConfig {
    pub fn off() -> Self {
        Self { mode: SpMode::Off, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.n_samples == 0 {
            return Err(TaskError::Config("sp.n_samples must be at least 1".into()));
        }
        if let SpMode::Scheduled = self.mode {
            let a0 = self.schedule.alpha0();
            if !a0.is_finite() || a0 < 0.0 {
                return Err(TaskError::Config(
                    "sp.schedule alpha0 must be finite and non-negative".into(),
                ));
            }
        }
        if let SpMode::Adaptive = self.mode {
            let a = self.adaptive;
            if a.resolution < 2 {
                return Err(TaskError::Config(
                    "sp.adaptive.resolution must be at least 2".into(),
                ));
            }
            if !(a.alpha_init > 0.0) {
                return Err(TaskError::Config(
                    "sp.adaptive.alpha_init must be positive (zero cells cannot recover)"
                        .into(),
                ));
            }
            if !(a.lr > 0.0) {
                return Err(TaskError::Config("sp.adaptive.lr must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Runtime preconditioning state for one training run. Built from
/// [`SpConfig`] once the parameter store exists (the adaptive mode registers
/// its amplitude block).
#[derive(Debug, Clone)]
pub enum SpState {
    Off,
    Scheduled { kernel: NoiseKernel, schedule: AlphaSchedule },
    Adaptive { grid: AlphaGrid },
}

#[derive(Debug, Clone)]
pub struct SpDriver {
    pub state: SpState,
    pub n_samples: usize,
}

impl SpDriver {
    pub fn from_config(
        cfg: &SpConfig,
        store: &mut ParamStore,
        domain: &DomainBounds,
    ) -> Result<Self, TaskError> {
        cfg.validate()?;
        let state = match cfg.mode {
            SpMode::Off => SpState::Off,
            SpMode::Scheduled => SpState::Scheduled {
                kernel: cfg.kernel,
                schedule: cfg.schedule.clone(),
            },
            SpMode::Adaptive => SpState::Adaptive {
                grid: AlphaGrid::new(
                    store,
                    domain,
                    cfg.adaptive.resolution,
                    cfg.adaptive.alpha_init,
                ),
            },
        };
        Ok(Self { state, n_samples: cfg.n_samples })
    }

    /// One query displacement for the point `x`. Zero-amplitude situations
    /// return [`QueryShift::None`] without consuming randomness.
    pub fn shift(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &[f64],
        step: u64,
        total_steps: u64,
        rng: &mut ChaCha8Rng,
    ) -> QueryShift {
        match &self.state {
            SpState::Off => QueryShift::None,
            SpState::Scheduled { kernel, schedule } => {
                draw_shift(*kernel, schedule.alpha_at(step, total_steps), x.len(), rng)
            }
            SpState::Adaptive { grid } => adaptive_shift(tape, store, grid, x, rng),
        }
    }

    /// Scalar amplitude summary for the report's alpha column: the schedule
    /// value, the grid mean, or zero when disabled.
    pub fn alpha_summary(&self, store: &ParamStore, step: u64, total_steps: u64) -> f64 {
        match &self.state {
            SpState::Off => 0.0,
            SpState::Scheduled { schedule, .. } => schedule.alpha_at(step, total_steps),
            SpState::Adaptive { grid } => grid.stats(store).mean,
        }
    }

    pub fn grid(&self) -> Option<&AlphaGrid> {
        match &self.state {
            SpState::Adaptive { grid } => Some(grid),
            _ => None,
        }
    }
}

// ---- run reports ----

/// One logged training row. Quality metrics are present only at evaluation
/// steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub loss: f64,
    pub alpha: f64,
    pub psnr: Option<f64>,
    pub chamfer: Option<f64>,
}

/// Everything a finished run reports. The CSV emission is byte-deterministic
/// for a given (config, seed); wall time is kept out of the CSV for exactly
/// that reason.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub config_hash: u64,
    pub steps: u64,
    /// Mean loss over the final tenth of the steps (at least one), a
    /// converged-loss summary robust to single-step noise.
    pub final_loss: f64,
    pub final_psnr: Option<f64>,
    pub final_chamfer: Option<f64>,
    pub wall: Duration,
}

impl RunReport {
    /// CSV with a header row and a trailing metadata comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,alpha,psnr,chamfer\n");
        for r in &self.rows {
            let psnr = r.psnr.map(|v| v.to_string()).unwrap_or_default();
            let chamfer = r.chamfer.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss, r.alpha, psnr, chamfer
            ));
        }
        out.push_str(&format!(
            "# config_hash={:016x} seed={}\n",
            self.config_hash, self.seed
        ));
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), TaskError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Accumulates rows and the converged-loss window during a run.
#[derive(Debug)]
pub(crate) struct ReportBuilder {
    rows: Vec<ReportRow>,
    tail_losses: Vec<f64>,
    tail_start: u64,
    steps: u64,
    seed: u64,
    config_hash: u64,
    started: std::time::Instant,
}

impl ReportBuilder {
    pub(crate) fn new(steps: u64, seed: u64, config_hash: u64) -> Self {
        let tail = (steps / 10).max(1);
        Self {
            rows: Vec::new(),
            tail_losses: Vec::new(),
            tail_start: steps.saturating_sub(tail),
            steps,
            seed,
            config_hash,
            started: std::time::Instant::now(),
        }
    }

    pub(crate) fn on_step(&mut self, step: u64, loss: f64) -> Result<(), TaskError> {
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(TaskError::Diverged { step, loss });
        }
        if step >= self.tail_start {
            self.tail_losses.push(loss);
        }
        Ok(())
    }

    pub(crate) fn log(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub(crate) fn finish(self) -> RunReport {
        let final_loss = if self.tail_losses.is_empty() {
            f64::NAN
        } else {
            self.tail_losses.iter().sum::<f64>() / self.tail_losses.len() as f64
        };
        let final_psnr = self.rows.iter().rev().find_map(|r| r.psnr);
        let final_chamfer = self.rows.iter().rev().find_map(|r| r.chamfer);
        RunReport {
            rows: self.rows,
            seed: self.seed,
            config_hash: self.config_hash,
            steps: self.steps,
            final_loss,
            final_psnr,
            final_chamfer,
            wall: self.started.elapsed(),
        }
    }
}

/// Whether `step` (0-based) is an evaluation step under cadence
/// `eval_every`: every `eval_every`-th completed step and always the last.
pub(crate) fn is_eval_step(step: u64, steps: u64, eval_every: u64) -> bool {
    let done = step + 1;
    done == steps || (eval_every > 0 && done % eval_every == 0)
}

// ---- config hashing ----

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable hash of a config: the canonical serialization of the parsed
/// struct, so reordering keys in the source file does not change it.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let text = toml::to_string(cfg).unwrap_or_else(|e| format!("unserializable: {e}"));
    fnv1a64(text.as_bytes())
}

/// Builds the mean of `parts` on the tape; a single part passes through
/// untouched so one-sample runs carry no averaging overhead.
pub(crate) fn average_nodes(tape: &mut Tape, parts: &[NodeId]) -> NodeId {
    if parts.len() == 1 {
        return parts[0];
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Per-step learning rates: a base rate, optional overrides for lookup
/// tables (hash levels, dense grids) and the adaptive amplitude block, all
/// decayed by a shared exponential factor over the run. Decay tames the
/// limit cycle Adam falls into on absolute-value objectives, whose step
/// size never shrinks on its own.
#[derive(Debug)]
pub(crate) struct LrSchedule {
    base: f64,
    overrides: Vec<(crate::diffcore::BlockId, f64)>,
    decay: f64,
    steps: u64,
}

impl LrSchedule {
    pub(crate) fn new(
        store: &ParamStore,
        base: f64,
        decay: f64,
        steps: u64,
        table_lr: Option<f64>,
        sp: &SpDriver,
        sp_lr: f64,
    ) -> Self {
        let mut overrides = Vec::new();
        if let Some(lr) = table_lr {
            for (id, name) in store.block_ids() {
                if name.starts_with("hashgrid.") || name == "grid" {
                    overrides.push((id, lr));
                }
            }
        }
        if let Some(grid) = sp.grid() {
            overrides.push((grid.block_id(), sp_lr));
        }
        Self { base, overrides, decay, steps }
    }

    /// Sets the optimizer's rates for `step`: the configured rates times
    /// `decay^(step/steps)`, reaching the `decay` multiplier at the end.
    pub(crate) fn apply(&self, adam: &mut crate::diffcore::Adam, step: u64) {
        let f = self.decay.powf(step as f64 / self.steps.max(1) as f64);
        adam.set_lr(self.base * f);
        for &(b, r) in &self.overrides {
            adam.set_block_lr(b, r * f);
        }
    }
}

pub(crate) fn validate_lr_decay(decay: f64) -> Result<(), TaskError> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(TaskError::Config(format!(
            "lr_decay must be in (0, 1], got {decay}"
        )));
    }
    Ok(())
}
