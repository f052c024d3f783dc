//! The experiment file: one TOML document describing a task, its data
//! source, and the settings every subcommand shares.
//!
//! Unknown keys are rejected during parsing so typos surface as config
//! errors naming the offending key instead of silently running defaults.
//! Every field has a default, so the empty document is a valid experiment
//! (a hashgrid image fit of a builtin test card).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fieldforge_core::extract::ExtractionConfig;
use fieldforge_core::tasks::{DirectSdfConfig, ImageFitConfig, SdfPointsConfig, SpConfig};

use crate::CliError;

/// Which training loop the experiment drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Image,
    SdfPoints,
    SdfDirect,
}

/// Where the supervision comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// A named procedural shape or test image; see [`crate::source`].
    Builtin,
    /// Triangle mesh file, normalized into the unit cube on load.
    Obj,
    /// Oriented point cloud file, normalized into the unit square/cube.
    Xyz,
    /// PGM/PPM image file.
    Pnm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// Builtin name for [`SourceKind::Builtin`].
    pub name: String,
    /// File path for the file-backed kinds.
    pub path: PathBuf,
    /// Training cloud size for point-based fitting.
    pub points: usize,
    /// Raster size for builtin images.
    pub width: usize,
    pub height: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::Builtin,
            name: "rings".into(),
            path: PathBuf::new(),
            points: 2048,
            width: 64,
            height: 64,
        }
    }
}

/// Evaluation settings shared by the SDF tasks and the extract subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extraction: ExtractionConfig,
    /// Points sampled from an extracted mesh for the Chamfer metric.
    pub chamfer_samples: usize,
    /// Points sampled from the source geometry as the Chamfer reference.
    pub reference_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extraction: ExtractionConfig::default(),
            chamfer_samples: 2048,
            reference_samples: 4096,
        }
    }
}

/// Settings consumed by the `ablate-*` subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Initial amplitudes for `ablate-alpha0`, as fractions of the domain
    /// diagonal. Must include 0 (the baseline) and reach at least 4%.
    pub alpha0_fracs: Vec<f64>,
    /// Per-query displacement counts for `ablate-samples`.
    pub sample_counts: Vec<usize>,
    /// Builtin shapes the ablation repeats over; empty means the
    /// experiment's own source only.
    pub shapes: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            alpha0_fracs: vec![0.0, 0.005, 0.01, 0.02, 0.04, 0.08],
            sample_counts: vec![1, 2, 4],
            shapes: Vec::new(),
        }
    }
}

/// Axes of the hyperparameter grid for the `sweep` subcommand. Every
/// combination becomes one cell, run once with preconditioning as
/// configured and once with it disabled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Field (MLP) learning rates.
    pub lr: Vec<f64>,
    /// Lookup-table learning rates.
    pub table_lr: Vec<f64>,
    /// Finest hashgrid level resolutions.
    pub max_resolution: Vec<u32>,
    /// Hash table sizes, log2.
    pub table_size_log2: Vec<u32>,
    /// A run counts as a success when its PSNR reaches this (image task)...
    pub success_psnr: f64,
    /// ...or its Chamfer distance falls below this (SDF tasks).
    pub success_chamfer: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lr: vec![1e-3, 1e-2],
            table_lr: vec![1e-2, 1e-1],
            max_resolution: vec![64, 512],
            table_size_log2: vec![11, 15],
            success_psnr: 30.0,
            success_chamfer: 5e-3,
        }
    }
}

/// One experiment: a task with its data source plus the knobs of every
/// subcommand. Only the section matching [`ExperimentConfig::task`] is
/// consumed by a run; the others ride along untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Master seed; `--seed` and `FIELDFORGE_SEED` override it.
    pub seed: u64,
    /// Seeds for multi-seed subcommands; empty derives three consecutive
    /// seeds from the master.
    pub seeds: Vec<u64>,
    /// Output directory; `--out` overrides it.
    pub out: PathBuf,
    pub source: SourceConfig,
    pub image: ImageFitConfig,
    pub sdf_points: SdfPointsConfig,
    pub sdf_direct: DirectSdfConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Image,
            seed: 0,
            seeds: Vec::new(),
            out: PathBuf::from("runs"),
            source: SourceConfig::default(),
            image: ImageFitConfig::default(),
            sdf_points: SdfPointsConfig::default(),
            sdf_direct: DirectSdfConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rejects settings the active task cannot run with. The inactive task
    /// sections are left unchecked so one file can host several tasks.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.task {
            TaskKind::Image => self.image.validate()?,
            TaskKind::SdfPoints => self.sdf_points.validate()?,
            TaskKind::SdfDirect => self.sdf_direct.validate()?,
        }
        self.eval.extraction.validate().map_err(CliError::Config)?;
        if self.eval.chamfer_samples == 0 {
            return Err(CliError::Config("eval.chamfer_samples must be at least 1".into()));
        }
        if self.eval.reference_samples == 0 {
            return Err(CliError::Config("eval.reference_samples must be at least 1".into()));
        }
        if self.source.points == 0 {
            return Err(CliError::Config("source.points must be at least 1".into()));
        }
        if matches!(self.source.kind, SourceKind::Builtin)
            && (self.source.width == 0 || self.source.height == 0)
        {
            return Err(CliError::Config(
                "source.width and source.height must be at least 1".into(),
            ));
        }
        for &f in &self.ablation.alpha0_fracs {
            if !f.is_finite() || f < 0.0 {
                return Err(CliError::Config(format!(
                    "ablation.alpha0_fracs must be finite and non-negative, got {f}"
                )));
            }
        }
        if self.ablation.sample_counts.iter().any(|&c| c == 0) {
            return Err(CliError::Config(
                "ablation.sample_counts entries must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization; parsing it back is the identity.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }

    /// Seeds for multi-seed subcommands, honoring an overridden master.
    pub fn seed_list(&self, master: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..3).map(|k| master.wrapping_add(k)).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The preconditioning section of the active task.
    pub fn active_sp(&self) -> &SpConfig {
        match self.task {
            TaskKind::Image => &self.image.sp,
            TaskKind::SdfPoints => &self.sdf_points.sp,
            TaskKind::SdfDirect => &self.sdf_direct.sp,
        }
    }

    pub fn active_sp_mut(&mut self) -> &mut SpConfig {
        match self.task {
            TaskKind::Image => &mut self.image.sp,
            TaskKind::SdfPoints => &mut self.sdf_points.sp,
            TaskKind::SdfDirect => &mut self.sdf_direct.sp,
        }
    }

    pub fn steps(&self) -> u64 {
        match self.task {
            TaskKind::Image => self.image.steps,
            TaskKind::SdfPoints => self.sdf_points.steps,
            TaskKind::SdfDirect => self.sdf_direct.steps,
        }
    }

    /// The field representation of the active task.
    pub fn active_field(&self) -> &fieldforge_core::fields::FieldConfig {
        match self.task {
            TaskKind::Image => &self.image.field,
            TaskKind::SdfPoints => &self.sdf_points.field,
            TaskKind::SdfDirect => &self.sdf_direct.field,
        }
    }

    /// Name of the task's quality metric, as written to CSV columns.
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            TaskKind::Image => "psnr",
            TaskKind::SdfPoints | TaskKind::SdfDirect => "chamfer",
        }
    }

    /// Whether larger metric values mean better quality.
    pub fn higher_is_better(&self) -> bool {
        matches!(self.task, TaskKind::Image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_serialize_to_a_fixed_point() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_document_is_a_valid_experiment() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.task, TaskKind::Image);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = toml::from_str::<ExperimentConfig>("lambda = 1\n").unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
        let err =
            toml::from_str::<ExperimentConfig>("[sdf_points]\nlambdas = [1.0]\n").unwrap_err();
        assert!(err.to_string().contains("lambdas"), "{err}");
    }

    #[test]
    fn bad_task_values_fail_validation_with_the_key_name() {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskKind::SdfPoints;
        cfg.sdf_points.lambda[1] = -3.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.eval.chamfer_samples = 0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("chamfer_samples"), "{err}");
    }

    #[test]
    fn seed_lists_derive_from_the_master_when_absent() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.seed_list(10), vec![10, 11, 12]);
        cfg.seeds = vec![5, 9];
        assert_eq!(cfg.seed_list(10), vec![5, 9]);
    }

    #[test]
    fn source_key_order_does_not_change_the_hash() {
        let a: ExperimentConfig =
            toml::from_str("seed = 3\ntask = \"image\"").unwrap();
        let b: ExperimentConfig =
            toml::from_str("task = \"image\"\nseed = 3").unwrap();
        assert_eq!(
            fieldforge_core::tasks::config_hash(&a),
            fieldforge_core::tasks::config_hash(&b)
        );
    }
}
