//! Reading checkpoints back: level-set extraction and amplitude-map export.
//!
//! A checkpoint stores parameter blocks by name in registration order, and
//! field construction is deterministic, so rebuilding the field from the
//! same config lines up its block handles with the loaded store. Extra
//! trailing blocks (the amplitude grid of an adaptive run) are tolerated;
//! any mismatch in the field's own blocks is a config error.

use std::path::Path;

use fieldforge_core::diffcore::{load_checkpoint, ParamStore};
use fieldforge_core::extract::{marching_cubes, marching_squares};
use fieldforge_core::fields::{DomainBounds, Field, FieldConfig};
use fieldforge_core::precond::AlphaGrid;
use fieldforge_core::rng::{stream, Purpose};
use fieldforge_core::tasks::{ImageBuffer, TaskError};

use crate::config::{ExperimentConfig, TaskKind};
use crate::runs::{contour_csv, experiment_hash};
use crate::{CliError, ExtractSession};

/// Raster widths for exported amplitude maps, by dimension.
const MAP_RES_1D: usize = 256;
const MAP_RES_2D: usize = 128;

/// Rebuilds the configured field and checks that the checkpoint's leading
/// blocks match it by name and size.
pub fn field_from_checkpoint(
    field_cfg: &FieldConfig,
    dim: usize,
    checkpoint: &ParamStore,
) -> Result<Field, CliError> {
    let mut fresh = ParamStore::new();
    // Initialization values are irrelevant; the checkpoint supplies them.
    let field = Field::new(
        field_cfg,
        DomainBounds::unit(dim),
        1,
        &mut fresh,
        &mut stream(0, Purpose::Init, 0),
    )
    .map_err(TaskError::from)?;
    let expected = fresh.block_ids().count();
    let found = checkpoint.block_ids().count();
    if found < expected {
        return Err(CliError::Config(format!(
            "checkpoint has {found} parameter blocks, the configured field needs {expected}"
        )));
    }
    for (id, name) in fresh.block_ids() {
        if checkpoint.block_name(id) != name || checkpoint.block_len(id) != fresh.block_len(id) {
            return Err(CliError::Config(format!(
                "checkpoint does not match the configured field at block '{name}'"
            )));
        }
    }
    Ok(field)
}

fn active_field_config(cfg: &ExperimentConfig) -> Result<&FieldConfig, CliError> {
    match cfg.task {
        TaskKind::SdfPoints => Ok(&cfg.sdf_points.field),
        TaskKind::SdfDirect => Ok(&cfg.sdf_direct.field),
        TaskKind::Image => Err(CliError::Config(
            "task: level-set extraction needs a signed-distance task".into(),
        )),
    }
}

/// The `extract` subcommand: checkpoint in, contour or mesh out.
pub fn cmd_extract(s: &ExtractSession) -> Result<(), CliError> {
    let field_cfg = active_field_config(&s.cfg)?;
    let dim = crate::source::source_dim(&s.cfg)?;
    let store = load_checkpoint(&s.checkpoint).map_err(TaskError::from)?;
    let field = field_from_checkpoint(field_cfg, dim, &store)?;
    std::fs::create_dir_all(&s.out).map_err(TaskError::from)?;
    let hash = experiment_hash(&s.cfg);
    let mut sampler = field.sampler(&store);
    let domain = field.domain();
    match dim {
        2 => {
            let contour =
                marching_squares(|x| sampler.eval_scalar(x), &domain, &s.cfg.eval.extraction);
            std::fs::write(s.out.join("contour.csv"), contour_csv(&contour, hash, s.seed))
                .map_err(TaskError::from)?;
            println!(
                "extract: {} vertices, {} segments -> {}",
                contour.vertices().len(),
                contour.segments().len(),
                s.out.join("contour.csv").display()
            );
        }
        3 => {
            let mesh =
                marching_cubes(|x| sampler.eval_scalar(x), &domain, &s.cfg.eval.extraction);
            fieldforge_core::geometry::save_mesh(s.out.join("surface.obj"), &mesh)
                .map_err(TaskError::from)?;
            println!(
                "extract: {} vertices, {} faces -> {}",
                mesh.vertices().len(),
                mesh.faces().len(),
                s.out.join("surface.obj").display()
            );
        }
        d => {
            return Err(CliError::Config(format!(
                "no level-set extraction for a {d}-dimensional field"
            )))
        }
    }
    Ok(())
}

/// Normalizes raster values to `[0, 1]`; a constant raster maps to 0.5
/// everywhere so untrained grids export a uniform image.
fn normalize_map(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// Writes `alpha_map.*` and `alpha_stats.csv` for a trained amplitude grid.
pub fn write_alpha_artifacts(
    grid: &AlphaGrid,
    store: &ParamStore,
    dir: &Path,
    hash: u64,
    seed: u64,
) -> Result<(), CliError> {
    match grid.dim() {
        1 => {
            let map = normalize_map(&grid.sample_map(store, MAP_RES_1D));
            ImageBuffer::new(MAP_RES_1D, 1, 1, map)?.save_pnm(&dir.join("alpha_map.pgm"))?;
        }
        2 => {
            let map = normalize_map(&grid.sample_map(store, MAP_RES_2D));
            ImageBuffer::new(MAP_RES_2D, MAP_RES_2D, 1, map)?
                .save_pnm(&dir.join("alpha_map.pgm"))?;
        }
        3 => {
            // Volumes go out raw (f32, x-fastest) with a sidecar description.
            let res = grid.resolution();
            let map = grid.sample_map(store, res);
            let mut bytes = Vec::with_capacity(map.len() * 4);
            for v in &map {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            std::fs::write(dir.join("alpha_map.raw"), bytes).map_err(TaskError::from)?;
            let stats = grid.stats(store);
            std::fs::write(
                dir.join("alpha_map.meta"),
                format!(
                    "resolution={res} dim=3 dtype=f32le order=x-fastest min={} max={}\n",
                    stats.min, stats.max
                ),
            )
            .map_err(TaskError::from)?;
        }
        d => return Err(CliError::Config(format!("no amplitude map for dim {d}"))),
    }
    let stats = grid.stats(store);
    std::fs::write(
        dir.join("alpha_stats.csv"),
        format!(
            "min,max,mean\n{},{},{}\n# config_hash={hash:016x} seed={seed}\n",
            stats.min, stats.max, stats.mean
        ),
    )
    .map_err(TaskError::from)?;
    Ok(())
}

/// The `export-alpha-map` subcommand: pull the amplitude grid out of a
/// checkpoint and rasterize it.
pub fn cmd_export_alpha_map(s: &ExtractSession) -> Result<(), CliError> {
    let store = load_checkpoint(&s.checkpoint).map_err(TaskError::from)?;
    let block = store.block_id("alpha_grid").ok_or_else(|| {
        CliError::Config(format!(
            "checkpoint {} has no alpha_grid block; train with sp.mode = \"adaptive\"",
            s.checkpoint.display()
        ))
    })?;
    let res = s.cfg.active_sp().adaptive.resolution;
    let len = store.block_len(block);
    let dim = (1..=3)
        .find(|&d| res.checked_pow(d as u32) == Some(len))
        .ok_or_else(|| {
            CliError::Config(format!(
                "alpha_grid block has {len} values, which is no power of \
                 sp.adaptive.resolution = {res}"
            ))
        })?;

    // Rehost the block in a grid built over the matching domain.
    let mut host = ParamStore::new();
    let grid = AlphaGrid::new(&mut host, &DomainBounds::unit(dim), res, 0.0);
    host.block_mut(grid.block_id()).copy_from_slice(store.block(block));

    std::fs::create_dir_all(&s.out).map_err(TaskError::from)?;
    write_alpha_artifacts(&grid, &host, &s.out, experiment_hash(&s.cfg), s.seed)?;
    let stats = grid.stats(&host);
    println!(
        "alpha map: dim={dim} resolution={res} min={:.6} max={:.6} mean={:.6} -> {}",
        stats.min,
        stats.max,
        stats.mean,
        s.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fieldforge_core::diffcore::save_checkpoint;
    use fieldforge_core::fields::ReprKind;

    fn mlp_config(width: usize) -> FieldConfig {
        FieldConfig {
            repr: ReprKind::PlainMlp,
            hidden_width: width,
            hidden_layers: 1,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn checkpoints_round_trip_into_fields() {
        let cfg = mlp_config(8);
        let mut store = ParamStore::new();
        let field = Field::new(
            &cfg,
            DomainBounds::unit(2),
            1,
            &mut store,
            &mut stream(9, Purpose::Init, 0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ffld");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let rebuilt = field_from_checkpoint(&cfg, 2, &loaded).unwrap();

        let mut a = field.sampler(&store);
        let mut b = rebuilt.sampler(&loaded);
        for p in [[0.3, 0.4], [0.9, 0.1], [0.5, 0.5]] {
            // Checkpoints store f32, so agreement is approximate.
            assert!((a.eval_scalar(&p) - b.eval_scalar(&p)).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_configs_are_named_in_the_error() {
        let mut store = ParamStore::new();
        Field::new(
            &mlp_config(8),
            DomainBounds::unit(2),
            1,
            &mut store,
            &mut stream(9, Purpose::Init, 0),
        )
        .unwrap();
        let err = field_from_checkpoint(&mlp_config(16), 2, &store).unwrap_err();
        assert!(err.to_string().contains("block 'mlp.l0.w'"), "{err}");
    }

    #[test]
    fn constant_grids_export_uniform_maps() {
        assert_eq!(normalize_map(&[0.3, 0.3, 0.3]), vec![0.5, 0.5, 0.5]);
        assert_eq!(normalize_map(&[0.0, 0.5, 1.0]), vec![0.0, 0.5, 1.0]);

        let mut host = ParamStore::new();
        let grid = AlphaGrid::new(&mut host, &DomainBounds::unit(2), 4, 0.02);
        let dir = tempfile::tempdir().unwrap();
        write_alpha_artifacts(&grid, &host, dir.path(), 0xabcd, 3).unwrap();
        let img = ImageBuffer::load_pnm(&dir.path().join("alpha_map.pgm")).unwrap();
        assert!(img.data().iter().all(|&v| (v - img.data()[0]).abs() < 1e-9));
        let stats = std::fs::read_to_string(dir.path().join("alpha_stats.csv")).unwrap();
        assert!(stats.contains("0.02,0.02,0.02"), "{stats}");
    }

    #[test]
    fn missing_amplitude_blocks_are_reported_by_name() {
        let mut store = ParamStore::new();
        Field::new(
            &mlp_config(8),
            DomainBounds::unit(2),
            1,
            &mut store,
            &mut stream(9, Purpose::Init, 0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ffld");
        save_checkpoint(&store, &path).unwrap();

        let session = ExtractSession {
            cfg: {
                let mut c = ExperimentConfig::default();
                c.task = TaskKind::SdfPoints;
                c
            },
            checkpoint: path,
            out: dir.path().join("out"),
            seed: 0,
        };
        let err = cmd_export_alpha_map(&session).unwrap_err();
        assert!(err.to_string().contains("alpha_grid"), "{err}");
    }
}
