//! The `ablate-*` subcommands: vary one preconditioning knob, hold
//! everything else fixed, and tabulate quality per variant.
//!
//! Each run gets its own subdirectory with its full report; the top-level
//! CSV holds one row per (variant, seed) in a fixed order independent of
//! execution order, so `--jobs` changes wall time but never output bytes.
//! Wall times go to a separate `timing.csv` since they are the one
//! measurement that legitimately differs between identical runs.

use std::path::Path;
use std::time::Instant;

use fieldforge_core::precond::{AlphaSchedule, NoiseKernel};
use fieldforge_core::tasks::SpMode;

use crate::config::ExperimentConfig;
use crate::runs::{execute, experiment_hash};
use crate::source::{ablation_sources, alpha_for_fraction, prepare, PreparedInput};
use crate::{fmt_opt, run_jobs, write_table, CliError, Session};

/// What one grid run produced. Errors become `failed` rows rather than
/// aborting the grid, so a flaky cell cannot hide the rest of the table.
pub(crate) struct RunOutcome {
    pub quality: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_secs: f64,
    pub status: &'static str,
    pub report_csv: Option<String>,
}

pub(crate) fn run_variant(
    cfg: &ExperimentConfig,
    input: &PreparedInput,
    seed: u64,
) -> RunOutcome {
    let t0 = Instant::now();
    match execute(cfg, input, seed) {
        Ok(out) => RunOutcome {
            quality: out.quality(),
            final_loss: Some(out.report().final_loss),
            wall_secs: t0.elapsed().as_secs_f64(),
            status: "ok",
            report_csv: Some(out.report().to_csv()),
        },
        Err(err) => {
            eprintln!("run failed (seed {seed}): {err}");
            RunOutcome {
                quality: None,
                final_loss: None,
                wall_secs: t0.elapsed().as_secs_f64(),
                status: "failed",
                report_csv: None,
            }
        }
    }
}

/// Writes one run's report into its own subdirectory.
pub(crate) fn write_run_report(
    out_dir: &Path,
    name: &str,
    outcome: &RunOutcome,
) -> Result<(), CliError> {
    if let Some(csv) = &outcome.report_csv {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(fieldforge_core::tasks::TaskError::from)?;
        std::fs::write(dir.join("report.csv"), csv)
            .map_err(fieldforge_core::tasks::TaskError::from)?;
    }
    Ok(())
}

/// Same schedule shape, different initial amplitude.
fn with_alpha0(schedule: &AlphaSchedule, alpha0: f64) -> AlphaSchedule {
    match *schedule {
        AlphaSchedule::Constant { .. } => AlphaSchedule::Constant { alpha0 },
        AlphaSchedule::ExpDecay { end_step, floor_ratio, .. } => {
            AlphaSchedule::ExpDecay { alpha0, end_step, floor_ratio }
        }
        AlphaSchedule::Step { end_step, .. } => AlphaSchedule::Step { alpha0, end_step },
    }
}

/// Mean of the present values; `None` when all are missing.
fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// `ablate-alpha0`: sweep the initial amplitude over shapes and seeds.
pub fn cmd_ablate_alpha0(s: &Session) -> Result<(), CliError> {
    let mut fracs = s.cfg.ablation.alpha0_fracs.clone();
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fracs.dedup();
    if fracs.len() < 2 {
        return Err(CliError::Config(
            "ablation.alpha0_fracs needs at least two distinct values".into(),
        ));
    }
    if fracs[0] != 0.0 {
        return Err(CliError::Config(
            "ablation.alpha0_fracs must include 0 as the baseline".into(),
        ));
    }
    if *fracs.last().unwrap() < 0.04 {
        return Err(CliError::Config(
            "ablation.alpha0_fracs must reach at least 0.04 of the domain diagonal".into(),
        ));
    }

    let shapes = ablation_sources(&s.cfg)?;
    let seeds = s.cfg.seed_list(s.seed);
    let mut inputs = Vec::with_capacity(shapes.len());
    for (_, source) in &shapes {
        inputs.push(prepare(&s.cfg, source, s.seed)?);
    }

    // One job per (shape, frac, seed), shape-major for readable tables.
    struct Job {
        shape: usize,
        frac: f64,
        alpha0: f64,
        seed: u64,
        cfg: ExperimentConfig,
        name: String,
    }
    let mut plan = Vec::new();
    for (si, (label, _)) in shapes.iter().enumerate() {
        for &frac in &fracs {
            let alpha0 = alpha_for_fraction(frac, inputs[si].dim());
            for &seed in &seeds {
                let mut cfg = s.cfg.clone();
                let sp = cfg.active_sp_mut();
                sp.mode = SpMode::Scheduled;
                sp.schedule = with_alpha0(&sp.schedule, alpha0);
                plan.push(Job {
                    shape: si,
                    frac,
                    alpha0,
                    seed,
                    cfg,
                    name: format!("{label}-a{frac}-s{seed}"),
                });
            }
        }
    }

    let outcomes = run_jobs(s.jobs, plan.len(), |i| {
        let job = &plan[i];
        run_variant(&job.cfg, &inputs[job.shape], job.seed)
    });

    std::fs::create_dir_all(&s.out).map_err(fieldforge_core::tasks::TaskError::from)?;
    let mut rows = Vec::with_capacity(plan.len());
    for (job, outcome) in plan.iter().zip(&outcomes) {
        write_run_report(&s.out, &job.name, outcome)?;
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            shapes[job.shape].0,
            job.frac,
            job.alpha0,
            job.seed,
            s.cfg.metric_name(),
            fmt_opt(outcome.quality),
            fmt_opt(outcome.final_loss),
            outcome.status
        ));
    }
    write_table(
        &s.out.join("ablate_alpha0.csv"),
        "shape,alpha0_frac,alpha0,seed,metric,quality,final_loss,status",
        &rows,
        experiment_hash(&s.cfg),
        s.seed,
    )?;

    for (si, (label, _)) in shapes.iter().enumerate() {
        let best = fracs
            .iter()
            .filter_map(|&frac| {
                let mean = mean_present(plan.iter().zip(&outcomes).filter_map(|(j, o)| {
                    (j.shape == si && j.frac == frac).then_some(o.quality)
                }))?;
                Some((frac, mean))
            })
            .reduce(|a, b| {
                let better = if s.cfg.higher_is_better() { b.1 > a.1 } else { b.1 < a.1 };
                if better {
                    b
                } else {
                    a
                }
            });
        match best {
            Some((frac, mean)) => println!(
                "ablate-alpha0 {label}: best alpha0 = {frac} of the diagonal \
                 (mean {} {mean:.6})",
                s.cfg.metric_name()
            ),
            None => println!("ablate-alpha0 {label}: all runs failed"),
        }
    }
    Ok(())
}

/// `ablate-noise`: the three kernels at one amplitude, plus the off baseline.
pub fn cmd_ablate_noise(s: &Session) -> Result<(), CliError> {
    if s.cfg.active_sp().mode == SpMode::Off {
        return Err(CliError::Config(
            "sp.mode is off; ablate-noise needs a scheduled amplitude to compare kernels at"
                .into(),
        ));
    }
    let alpha0 = s.cfg.active_sp().schedule.alpha0();
    let variants: [(&str, Option<NoiseKernel>); 4] = [
        ("off", None),
        ("gaussian", Some(NoiseKernel::Gaussian)),
        ("uniform", Some(NoiseKernel::Uniform)),
        ("squared_gaussian", Some(NoiseKernel::SquaredGaussian)),
    ];
    let seeds = s.cfg.seed_list(s.seed);
    let input = prepare(&s.cfg, &s.cfg.source, s.seed)?;

    let mut plan = Vec::new();
    for (label, kernel) in variants {
        for &seed in &seeds {
            let mut cfg = s.cfg.clone();
            let sp = cfg.active_sp_mut();
            match kernel {
                Some(k) => {
                    sp.mode = SpMode::Scheduled;
                    sp.kernel = k;
                }
                None => sp.mode = SpMode::Off,
            }
            plan.push((label, seed, cfg));
        }
    }

    let outcomes =
        run_jobs(s.jobs, plan.len(), |i| run_variant(&plan[i].2, &input, plan[i].1));

    std::fs::create_dir_all(&s.out).map_err(fieldforge_core::tasks::TaskError::from)?;
    let mut rows = Vec::with_capacity(plan.len());
    for ((label, seed, _), outcome) in plan.iter().zip(&outcomes) {
        write_run_report(&s.out, &format!("{label}-s{seed}"), outcome)?;
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            label,
            alpha0,
            seed,
            s.cfg.metric_name(),
            fmt_opt(outcome.quality),
            fmt_opt(outcome.final_loss),
            outcome.status
        ));
    }
    write_table(
        &s.out.join("ablate_noise.csv"),
        "kernel,alpha0,seed,metric,quality,final_loss,status",
        &rows,
        experiment_hash(&s.cfg),
        s.seed,
    )?;

    for (label, _) in variants {
        let mean = mean_present(
            plan.iter()
                .zip(&outcomes)
                .filter_map(|((l, _, _), o)| (*l == label).then_some(o.quality)),
        );
        println!(
            "ablate-noise {label}: mean {} = {}",
            s.cfg.metric_name(),
            fmt_opt(mean)
        );
    }
    Ok(())
}

/// `ablate-samples`: per-query displacement counts, with wall time.
pub fn cmd_ablate_samples(s: &Session) -> Result<(), CliError> {
    if s.cfg.active_sp().mode == SpMode::Off {
        return Err(CliError::Config(
            "sp.mode is off; ablate-samples varies the per-query sample count".into(),
        ));
    }
    let counts = s.cfg.ablation.sample_counts.clone();
    if counts.is_empty() {
        return Err(CliError::Config("ablation.sample_counts is empty".into()));
    }
    let seeds = s.cfg.seed_list(s.seed);
    let input = prepare(&s.cfg, &s.cfg.source, s.seed)?;

    let mut plan = Vec::new();
    for &count in &counts {
        for &seed in &seeds {
            let mut cfg = s.cfg.clone();
            cfg.active_sp_mut().n_samples = count;
            plan.push((count, seed, cfg));
        }
    }

    let outcomes =
        run_jobs(s.jobs, plan.len(), |i| run_variant(&plan[i].2, &input, plan[i].1));

    std::fs::create_dir_all(&s.out).map_err(fieldforge_core::tasks::TaskError::from)?;
    let mut rows = Vec::with_capacity(plan.len());
    let mut timing = Vec::with_capacity(plan.len());
    for ((count, seed, _), outcome) in plan.iter().zip(&outcomes) {
        write_run_report(&s.out, &format!("k{count}-s{seed}"), outcome)?;
        rows.push(format!(
            "{},{},{},{},{},{}",
            count,
            seed,
            s.cfg.metric_name(),
            fmt_opt(outcome.quality),
            fmt_opt(outcome.final_loss),
            outcome.status
        ));
        timing.push(format!("{},{},{}", count, seed, outcome.wall_secs));
    }
    write_table(
        &s.out.join("ablate_samples.csv"),
        "n_samples,seed,metric,quality,final_loss,status",
        &rows,
        experiment_hash(&s.cfg),
        s.seed,
    )?;
    write_table(
        &s.out.join("timing.csv"),
        "n_samples,seed,wall_secs",
        &timing,
        experiment_hash(&s.cfg),
        s.seed,
    )?;

    for &count in &counts {
        let wall = mean_present(plan.iter().zip(&outcomes).filter_map(|((c, _, _), o)| {
            (*c == count).then_some(Some(o.wall_secs))
        }))
        .unwrap_or(f64::NAN);
        let quality = mean_present(
            plan.iter()
                .zip(&outcomes)
                .filter_map(|((c, _, _), o)| (*c == count).then_some(o.quality)),
        );
        println!(
            "ablate-samples k={count}: mean {} = {}, mean wall = {wall:.3}s",
            s.cfg.metric_name(),
            fmt_opt(quality)
        );
    }
    Ok(())
}
