//! The `sweep` subcommand: a hyperparameter grid with preconditioning run
//! both ways in every cell.
//!
//! Cell seeds derive from `(master seed, cell index)`, so the paired
//! on/off rows of a cell share data and initialization, and neither the
//! execution order nor `--jobs` can change any row. A crashed or diverged
//! cell contributes `status=failed` rows instead of vanishing, keeping the
//! success counts honest.

use fieldforge_core::fields::ReprKind;
use fieldforge_core::tasks::{fnv1a64, SpConfig, SpMode};

use crate::ablate::{run_variant, write_run_report};
use crate::config::{ExperimentConfig, TaskKind};
use crate::runs::experiment_hash;
use crate::source::prepare;
use crate::{fmt_opt, run_jobs, write_table, CliError, Session};

/// One grid cell: the swept hyperparameter values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub lr: f64,
    pub table_lr: f64,
    pub max_resolution: u32,
    pub table_size_log2: u32,
}

/// Deterministic per-cell seed independent of execution order.
pub fn cell_seed(master: u64, cell: usize) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&master.to_le_bytes());
    bytes[8..].copy_from_slice(&(cell as u64).to_le_bytes());
    fnv1a64(&bytes)
}

/// All cells in row-major axis order (lr outermost).
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>, CliError> {
    let sw = &cfg.sweep;
    for (name, empty) in [
        ("sweep.lr", sw.lr.is_empty()),
        ("sweep.table_lr", sw.table_lr.is_empty()),
        ("sweep.max_resolution", sw.max_resolution.is_empty()),
        ("sweep.table_size_log2", sw.table_size_log2.is_empty()),
    ] {
        if empty {
            return Err(CliError::Config(format!("{name} must list at least one value")));
        }
    }
    let mut cells = Vec::new();
    for &lr in &sw.lr {
        for &table_lr in &sw.table_lr {
            for &max_resolution in &sw.max_resolution {
                for &table_size_log2 in &sw.table_size_log2 {
                    cells.push(SweepCell { lr, table_lr, max_resolution, table_size_log2 });
                }
            }
        }
    }
    Ok(cells)
}

fn apply_cell(cfg: &mut ExperimentConfig, cell: &SweepCell) {
    let (lr, table_lr, field) = match cfg.task {
        TaskKind::Image => {
            (&mut cfg.image.lr, &mut cfg.image.table_lr, &mut cfg.image.field)
        }
        TaskKind::SdfPoints => (
            &mut cfg.sdf_points.lr,
            &mut cfg.sdf_points.table_lr,
            &mut cfg.sdf_points.field,
        ),
        TaskKind::SdfDirect => (
            &mut cfg.sdf_direct.lr,
            &mut cfg.sdf_direct.table_lr,
            &mut cfg.sdf_direct.field,
        ),
    };
    *lr = cell.lr;
    *table_lr = Some(cell.table_lr);
    field.hashgrid.max_resolution = cell.max_resolution;
    field.hashgrid.table_size_log2 = cell.table_size_log2;
}

/// Whether a finished run counts as a success under the sweep thresholds.
pub fn is_success(cfg: &ExperimentConfig, quality: Option<f64>) -> bool {
    match (cfg.task, quality) {
        (TaskKind::Image, Some(q)) => q >= cfg.sweep.success_psnr,
        (TaskKind::SdfPoints | TaskKind::SdfDirect, Some(q)) => q <= cfg.sweep.success_chamfer,
        (_, None) => false,
    }
}

pub fn cmd_sweep(s: &Session) -> Result<(), CliError> {
    if s.cfg.active_field().repr != ReprKind::HashgridMlp {
        return Err(CliError::Config(
            "field.repr: the sweep varies hashgrid capacity, so the active task must use \
             hashgrid_mlp"
                .into(),
        ));
    }
    if s.cfg.active_sp().mode == SpMode::Off {
        return Err(CliError::Config(
            "sp.mode is off; the sweep pairs each cell with a preconditioned run".into(),
        ));
    }
    let cells = sweep_cells(&s.cfg)?;
    let input = prepare(&s.cfg, &s.cfg.source, s.seed)?;

    // Two jobs per cell, preconditioning on then off.
    let mut plan = Vec::with_capacity(cells.len() * 2);
    for (ci, cell) in cells.iter().enumerate() {
        for sp_on in [true, false] {
            let mut cfg = s.cfg.clone();
            apply_cell(&mut cfg, cell);
            if !sp_on {
                let n_samples = cfg.active_sp().n_samples;
                *cfg.active_sp_mut() = SpConfig { n_samples, ..SpConfig::off() };
            }
            plan.push((ci, sp_on, cell_seed(s.seed, ci), cfg));
        }
    }

    let outcomes =
        run_jobs(s.jobs, plan.len(), |i| run_variant(&plan[i].3, &input, plan[i].2));

    std::fs::create_dir_all(&s.out).map_err(fieldforge_core::tasks::TaskError::from)?;
    let mut rows = Vec::with_capacity(plan.len());
    let mut successes = [0usize; 2];
    for ((ci, sp_on, seed, _), outcome) in plan.iter().zip(&outcomes) {
        let cell = &cells[*ci];
        let label = if *sp_on { "on" } else { "off" };
        write_run_report(&s.out, &format!("cell{ci}-{label}"), outcome)?;
        let success = outcome.status == "ok" && is_success(&s.cfg, outcome.quality);
        if success {
            successes[*sp_on as usize] += 1;
        }
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            ci,
            cell.lr,
            cell.table_lr,
            cell.max_resolution,
            cell.table_size_log2,
            label,
            seed,
            s.cfg.metric_name(),
            fmt_opt(outcome.quality),
            fmt_opt(outcome.final_loss),
            outcome.status,
            success as u8
        ));
    }
    write_table(
        &s.out.join("sweep.csv"),
        "cell,lr,table_lr,max_resolution,table_size_log2,sp,seed,metric,quality,final_loss,\
         status,success",
        &rows,
        experiment_hash(&s.cfg),
        s.seed,
    )?;
    println!(
        "sweep: {} cells; successes with preconditioning {}/{}, without {}/{}",
        cells.len(),
        successes[1],
        cells.len(),
        successes[0],
        cells.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_enumerate_the_cartesian_product_in_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.lr = vec![1e-3, 1e-2];
        cfg.sweep.table_lr = vec![0.1];
        cfg.sweep.max_resolution = vec![64, 128];
        cfg.sweep.table_size_log2 = vec![11];
        let cells = sweep_cells(&cfg).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].lr, 1e-3);
        assert_eq!(cells[0].max_resolution, 64);
        assert_eq!(cells[1].max_resolution, 128);
        assert_eq!(cells[2].lr, 1e-2);

        cfg.sweep.table_lr.clear();
        let err = sweep_cells(&cfg).unwrap_err();
        assert!(err.to_string().contains("table_lr"), "{err}");
    }

    #[test]
    fn cell_seeds_differ_by_cell_and_master() {
        let s00 = cell_seed(0, 0);
        assert_eq!(s00, cell_seed(0, 0));
        assert_ne!(s00, cell_seed(0, 1));
        assert_ne!(s00, cell_seed(1, 0));
    }

    #[test]
    fn success_thresholds_follow_the_task_metric() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.success_psnr = 30.0;
        assert!(is_success(&cfg, Some(31.0)));
        assert!(!is_success(&cfg, Some(29.0)));
        assert!(!is_success(&cfg, None));

        cfg.task = TaskKind::SdfPoints;
        cfg.sweep.success_chamfer = 0.01;
        assert!(is_success(&cfg, Some(0.005)));
        assert!(!is_success(&cfg, Some(0.02)));
    }

    #[test]
    fn non_hashgrid_sweeps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.image.field.repr = ReprKind::PlainMlp;
        let s = Session { cfg, seed: 0, out: dir.path().to_path_buf(), jobs: 1 };
        let err = cmd_sweep(&s).unwrap_err();
        assert!(err.to_string().contains("field.repr"), "{err}");
    }

    #[test]
    fn failed_cells_keep_their_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.source.name = "ramp".into();
        cfg.source.width = 8;
        cfg.source.height = 8;
        cfg.image.steps = 12;
        cfg.image.batch_size = 16;
        cfg.image.eval_every = 0;
        cfg.image.field.hidden_width = 8;
        cfg.image.field.hidden_layers = 1;
        cfg.image.field.hashgrid.levels = 2;
        cfg.image.field.hashgrid.table_size_log2 = 8;
        // One sane cell and one that diverges immediately.
        cfg.sweep.lr = vec![1e-3, 1e14];
        cfg.sweep.table_lr = vec![1e-2];
        cfg.sweep.max_resolution = vec![32];
        cfg.sweep.table_size_log2 = vec![8];
        let s = Session { cfg, seed: 0, out: dir.path().to_path_buf(), jobs: 1 };
        cmd_sweep(&s).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 1, "{csv}");
        let failed = lines.iter().filter(|l| l.contains(",failed,")).count();
        assert!(failed >= 2, "diverging cells must still appear: {csv}");
        // Paired rows of one cell share a seed.
        let seed_of = |line: &str| line.split(',').nth(6).unwrap().to_string();
        assert_eq!(seed_of(lines[1]), seed_of(lines[2]));
    }
}
