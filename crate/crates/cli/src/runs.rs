//! Executing one training run and writing the `fit` subcommand's artifacts.
//!
//! Everything written here except timing is a pure function of the parsed
//! config and the seed: reports, checkpoints, rendered images, extracted
//! geometry, and amplitude maps are byte-identical across re-runs.

use std::path::Path;

use fieldforge_core::diffcore::{save_checkpoint, ParamStore};
use fieldforge_core::extract::{marching_cubes, marching_squares, Contour2};
use fieldforge_core::fields::Field;
use fieldforge_core::tasks::{
    config_hash, fit_image, fit_sdf_direct, fit_sdf_points, ImageBuffer, ImageFitResult,
    RunReport, SdfFitResult, SpDriver, SpMode, TaskError,
};

use crate::config::{ExperimentConfig, TaskKind};
use crate::export::write_alpha_artifacts;
use crate::source::PreparedInput;
use crate::{CliError, Session};

/// A finished training run, whichever task produced it.
pub enum TaskOutput {
    Image { result: ImageFitResult, target: ImageBuffer },
    Sdf { result: SdfFitResult },
}

impl TaskOutput {
    pub fn report(&self) -> &RunReport {
        match self {
            TaskOutput::Image { result, .. } => &result.report,
            TaskOutput::Sdf { result } => &result.report,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            TaskOutput::Image { result, .. } => &result.store,
            TaskOutput::Sdf { result } => &result.store,
        }
    }

    pub fn field(&self) -> &Field {
        match self {
            TaskOutput::Image { result, .. } => &result.field,
            TaskOutput::Sdf { result } => &result.field,
        }
    }

    pub fn sp(&self) -> &SpDriver {
        match self {
            TaskOutput::Image { result, .. } => &result.sp,
            TaskOutput::Sdf { result } => &result.sp,
        }
    }

    /// The task's quality metric: PSNR for images, Chamfer for SDFs.
    pub fn quality(&self) -> Option<f64> {
        match self {
            TaskOutput::Image { result, .. } => result.report.final_psnr,
            TaskOutput::Sdf { result } => result.report.final_chamfer,
        }
    }
}

/// Runs the experiment's task against prepared input with one seed.
pub fn execute(
    cfg: &ExperimentConfig,
    input: &PreparedInput,
    seed: u64,
) -> Result<TaskOutput, TaskError> {
    match (cfg.task, input) {
        (TaskKind::Image, PreparedInput::Image(target)) => {
            let result = fit_image(&cfg.image, target, seed)?;
            Ok(TaskOutput::Image { result, target: target.clone() })
        }
        (TaskKind::SdfPoints, PreparedInput::Cloud { cloud, eval }) => {
            let result = fit_sdf_points(&cfg.sdf_points, cloud, Some(eval), seed)?;
            Ok(TaskOutput::Sdf { result })
        }
        (TaskKind::SdfDirect, PreparedInput::Oracle { oracle, eval }) => {
            let result = fit_sdf_direct(&cfg.sdf_direct, oracle, Some(eval), seed)?;
            Ok(TaskOutput::Sdf { result })
        }
        _ => Err(TaskError::Config(
            "task and source kinds do not match; check [source]".into(),
        )),
    }
}

/// Hash covering the whole experiment file, written into CSV trailers.
pub fn experiment_hash(cfg: &ExperimentConfig) -> u64 {
    config_hash(cfg)
}

/// Serializes a contour as one `ax,ay,bx,by` row per segment.
pub fn contour_csv(contour: &Contour2, hash: u64, seed: u64) -> String {
    let mut out = String::from("ax,ay,bx,by\n");
    let verts = contour.vertices();
    for seg in contour.segments() {
        let a = verts[seg[0] as usize];
        let b = verts[seg[1] as usize];
        out.push_str(&format!("{},{},{},{}\n", a[0], a[1], b[0], b[1]));
    }
    out.push_str(&format!("# config_hash={hash:016x} seed={seed}\n"));
    out
}

fn write_geometry_artifacts(
    cfg: &ExperimentConfig,
    out: &TaskOutput,
    dir: &Path,
    seed: u64,
    hash: u64,
) -> Result<(), CliError> {
    let field = out.field();
    let store = out.store();
    let mut sampler = field.sampler(store);
    let domain = field.domain();
    match field.dim() {
        2 => {
            let contour =
                marching_squares(|x| sampler.eval_scalar(x), &domain, &cfg.eval.extraction);
            std::fs::write(dir.join("contour.csv"), contour_csv(&contour, hash, seed))
                .map_err(TaskError::from)?;
        }
        3 => {
            let mesh = marching_cubes(|x| sampler.eval_scalar(x), &domain, &cfg.eval.extraction);
            fieldforge_core::geometry::save_mesh(dir.join("surface.obj"), &mesh)
                .map_err(TaskError::from)?;
        }
        d => {
            return Err(CliError::Config(format!(
                "no geometry artifact for a {d}-dimensional field"
            )))
        }
    }
    Ok(())
}

/// Small key-value summary CSV with the final metrics of a run.
fn metrics_csv(cfg: &ExperimentConfig, report: &RunReport, hash: u64, seed: u64) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("final_loss,{}\n", report.final_loss));
    let quality = match cfg.task {
        TaskKind::Image => report.final_psnr,
        _ => report.final_chamfer,
    };
    if let Some(q) = quality {
        out.push_str(&format!("{},{}\n", cfg.metric_name(), q));
    }
    out.push_str(&format!("# config_hash={hash:016x} seed={seed}\n"));
    out
}

/// Writes the full artifact set of one fit into `dir`.
pub fn write_fit_artifacts(
    cfg: &ExperimentConfig,
    out: &TaskOutput,
    dir: &Path,
    seed: u64,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(TaskError::from)?;
    let hash = experiment_hash(cfg);

    out.report().write_csv(&dir.join("report.csv"))?;
    save_checkpoint(out.store(), &dir.join("checkpoint.ffld")).map_err(TaskError::from)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(TaskError::from)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(cfg, out.report(), hash, seed))
        .map_err(TaskError::from)?;

    match out {
        TaskOutput::Image { result, target } => {
            let rendered = result.render(target.width(), target.height())?;
            let name = if target.channels() == 3 { "final.ppm" } else { "final.pgm" };
            rendered.save_pnm(&dir.join(name))?;
        }
        TaskOutput::Sdf { .. } => write_geometry_artifacts(cfg, out, dir, seed, hash)?,
    }

    if matches!(cfg.active_sp().mode, SpMode::Adaptive) {
        if let Some(grid) = out.sp().grid() {
            write_alpha_artifacts(grid, out.store(), dir, hash, seed)?;
        }
    }
    Ok(())
}

/// The `fit` subcommand: one run, full artifacts, a one-line summary.
pub fn cmd_fit(s: &Session) -> Result<(), CliError> {
    let input = crate::source::prepare(&s.cfg, &s.cfg.source, s.seed)?;
    let out = execute(&s.cfg, &input, s.seed)?;
    write_fit_artifacts(&s.cfg, &out, &s.out, s.seed)?;
    let report = out.report();
    let quality = out
        .quality()
        .map(|q| format!(" {}={q:.6}", s.cfg.metric_name()))
        .unwrap_or_default();
    println!(
        "fit: steps={} final_loss={:.6e}{} wall={:.2}s -> {}",
        report.steps,
        report.final_loss,
        quality,
        report.wall.as_secs_f64(),
        s.out.display()
    );
    Ok(())
}
