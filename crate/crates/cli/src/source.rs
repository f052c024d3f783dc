//! Supervision data: builtin test shapes and images, file loading, and the
//! evaluation references that go with them.
//!
//! Data sampling is keyed to the master seed on dedicated stream steps far
//! above any training step, so the same experiment re-run with a different
//! fit seed still trains against the identical cloud and is scored against
//! the identical reference points.

use fieldforge_core::fields::DomainBounds;
use fieldforge_core::geometry::{
    box_with_hole, icosphere, load_mesh, load_points, sample_surface, torus, OrientedPointCloud,
    Polygon2, SdfOracle, TriMesh,
};
use fieldforge_core::rng::{stream, Purpose};
use fieldforge_core::tasks::{ImageBuffer, SdfEval};

use crate::config::{ExperimentConfig, SourceConfig, SourceKind, TaskKind};
use crate::CliError;

/// Stream steps reserved for dataset and reference sampling. Training uses
/// steps below its step count, so these can never collide with it.
const DATA_STEP: u64 = 1 << 40;
const REFERENCE_STEP: u64 = (1 << 40) + 1;

/// Margin left around file-loaded geometry after normalization.
const NORMALIZE_MARGIN: f64 = 0.1;

/// A task's input data, ready to train against.
pub enum PreparedInput {
    Image(ImageBuffer),
    Cloud { cloud: OrientedPointCloud, eval: SdfEval },
    Oracle { oracle: Box<SdfOracle>, eval: SdfEval },
}

impl PreparedInput {
    /// Spatial dimension of the field this input supervises.
    pub fn dim(&self) -> usize {
        match self {
            PreparedInput::Image(img) => {
                if img.height() == 1 {
                    1
                } else {
                    2
                }
            }
            PreparedInput::Cloud { cloud, .. } => cloud.dim(),
            PreparedInput::Oracle { .. } => 3,
        }
    }
}

pub const BUILTIN_IMAGES: [&str; 4] = ["flat", "ramp", "rings", "half_textured"];
pub const BUILTIN_SHAPES: [&str; 4] = ["star2d", "icosphere", "torus", "box_hole"];

/// Center of every builtin shape: the middle of the unit domain.
const CENTER3: [f64; 3] = [0.5, 0.5, 0.5];

/// The 2D builtin: a five-pointed star.
pub fn builtin_star() -> Polygon2 {
    Polygon2::star(5, 0.35, 0.15, [0.5, 0.5])
}

/// The 3D builtins, all sized to fit the unit cube with clearance.
pub fn builtin_mesh(name: &str) -> Option<TriMesh> {
    match name {
        "icosphere" => Some(icosphere(2, 0.3, CENTER3)),
        "torus" => Some(torus(0.28, 0.12, 48, 24, CENTER3)),
        "box_hole" => Some(box_with_hole(0.35, 0.15, 0.2, CENTER3)),
        _ => None,
    }
}

/// Grayscale test cards in `[0, 1]`.
pub fn builtin_image(name: &str, width: usize, height: usize) -> Option<ImageBuffer> {
    let mut img = ImageBuffer::filled(width, height, 1, 0.0).ok()?;
    let (w, h) = (width as f64, height as f64);
    for j in 0..height {
        for i in 0..width {
            let u = (i as f64 + 0.5) / w;
            let v = (j as f64 + 0.5) / h;
            let value = match name {
                "flat" => 0.5,
                "ramp" => u,
                "rings" => {
                    let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                    0.5 + 0.5 * (2.0 * std::f64::consts::PI * 6.0 * r).sin()
                }
                // Left half featureless, right half a high-frequency plaid.
                "half_textured" => {
                    if u < 0.5 {
                        0.55
                    } else {
                        let s = (2.0 * std::f64::consts::PI * 8.0 * u).sin();
                        let t = (2.0 * std::f64::consts::PI * 8.0 * v).sin();
                        0.5 + 0.45 * s * t
                    }
                }
                _ => return None,
            };
            img.data_mut()[j * width + i] = value.clamp(0.0, 1.0);
        }
    }
    Some(img)
}

fn unknown_builtin(name: &str, expected: &[&str]) -> CliError {
    CliError::Config(format!(
        "source.name: unknown builtin '{name}' (expected one of {})",
        expected.join(", ")
    ))
}

fn eval_from_reference(cfg: &ExperimentConfig, reference: Vec<f64>) -> SdfEval {
    let mut eval = SdfEval::new(reference, cfg.eval.extraction);
    eval.chamfer_samples = cfg.eval.chamfer_samples;
    eval
}

fn mesh_input(
    cfg: &ExperimentConfig,
    mesh: TriMesh,
    source: &SourceConfig,
    master: u64,
) -> Result<PreparedInput, CliError> {
    let reference = sample_surface(
        &mesh,
        cfg.eval.reference_samples,
        &mut stream(master, Purpose::Eval, REFERENCE_STEP),
    )?
    .points_flat()
    .to_vec();
    let eval = eval_from_reference(cfg, reference);
    match cfg.task {
        TaskKind::SdfPoints => {
            let cloud =
                sample_surface(&mesh, source.points, &mut stream(master, Purpose::Batch, DATA_STEP))?;
            Ok(PreparedInput::Cloud { cloud, eval })
        }
        TaskKind::SdfDirect => {
            Ok(PreparedInput::Oracle { oracle: Box::new(SdfOracle::new(mesh)), eval })
        }
        TaskKind::Image => Err(CliError::Config(
            "source.kind: mesh sources cannot supervise the image task".into(),
        )),
    }
}

fn star_input(
    cfg: &ExperimentConfig,
    source: &SourceConfig,
    master: u64,
) -> Result<PreparedInput, CliError> {
    if cfg.task != TaskKind::SdfPoints {
        return Err(CliError::Config(
            "source.name: star2d is a 2D boundary and only supervises sdf_points".into(),
        ));
    }
    let star = builtin_star();
    let cloud = star
        .sample_boundary(source.points, &mut stream(master, Purpose::Batch, DATA_STEP))?;
    let reference = star
        .sample_boundary(
            cfg.eval.reference_samples,
            &mut stream(master, Purpose::Eval, REFERENCE_STEP),
        )?
        .points_flat()
        .to_vec();
    let eval = eval_from_reference(cfg, reference);
    Ok(PreparedInput::Cloud { cloud, eval })
}

/// Loads or synthesizes the experiment's input. `source` is usually
/// `cfg.source` but ablations substitute builtin shapes.
pub fn prepare(
    cfg: &ExperimentConfig,
    source: &SourceConfig,
    master: u64,
) -> Result<PreparedInput, CliError> {
    match (cfg.task, source.kind) {
        (TaskKind::Image, SourceKind::Builtin) => {
            builtin_image(&source.name, source.width, source.height)
                .map(PreparedInput::Image)
                .ok_or_else(|| unknown_builtin(&source.name, &BUILTIN_IMAGES))
        }
        (TaskKind::Image, SourceKind::Pnm) => {
            Ok(PreparedInput::Image(ImageBuffer::load_pnm(&source.path)?))
        }
        (TaskKind::Image, _) => Err(CliError::Config(
            "source.kind: the image task needs a builtin or pnm source".into(),
        )),
        (_, SourceKind::Builtin) => {
            if source.name == "star2d" {
                star_input(cfg, source, master)
            } else if let Some(mesh) = builtin_mesh(&source.name) {
                mesh_input(cfg, mesh, source, master)
            } else {
                Err(unknown_builtin(&source.name, &BUILTIN_SHAPES))
            }
        }
        (_, SourceKind::Obj) => {
            let (mesh, _) = load_mesh(&source.path)?.normalized_to_unit_cube(NORMALIZE_MARGIN);
            mesh_input(cfg, mesh, source, master)
        }
        (TaskKind::SdfPoints, SourceKind::Xyz) => {
            let (cloud, _) = load_points(&source.path)?.normalized_to_unit(NORMALIZE_MARGIN);
            // The cloud is all we know of the surface, so it doubles as the
            // Chamfer reference.
            let eval = eval_from_reference(cfg, cloud.points_flat().to_vec());
            Ok(PreparedInput::Cloud { cloud, eval })
        }
        (TaskKind::SdfDirect, SourceKind::Xyz) => Err(CliError::Config(
            "source.kind: direct distance regression needs a mesh (builtin or obj)".into(),
        )),
        (_, SourceKind::Pnm) => Err(CliError::Config(
            "source.kind: image files cannot supervise a distance task".into(),
        )),
    }
}

/// Field dimension implied by the source, without building oracles.
pub fn source_dim(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    match cfg.task {
        TaskKind::Image => match cfg.source.kind {
            SourceKind::Builtin => Ok(if cfg.source.height == 1 { 1 } else { 2 }),
            SourceKind::Pnm => {
                let img = ImageBuffer::load_pnm(&cfg.source.path)?;
                Ok(if img.height() == 1 { 1 } else { 2 })
            }
            _ => Err(CliError::Config(
                "source.kind: the image task needs a builtin or pnm source".into(),
            )),
        },
        TaskKind::SdfDirect => Ok(3),
        TaskKind::SdfPoints => match cfg.source.kind {
            SourceKind::Builtin if cfg.source.name == "star2d" => Ok(2),
            SourceKind::Builtin | SourceKind::Obj => Ok(3),
            SourceKind::Xyz => Ok(load_points(&cfg.source.path)?.dim()),
            SourceKind::Pnm => Err(CliError::Config(
                "source.kind: image files cannot supervise a distance task".into(),
            )),
        },
    }
}

/// The sources an ablation repeats over: the configured shape list, or the
/// experiment's own source when the list is empty.
pub fn ablation_sources(cfg: &ExperimentConfig) -> Result<Vec<(String, SourceConfig)>, CliError> {
    if cfg.ablation.shapes.is_empty() {
        let label = match cfg.source.kind {
            SourceKind::Builtin => cfg.source.name.clone(),
            _ => cfg
                .source
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "source".into()),
        };
        return Ok(vec![(label, cfg.source.clone())]);
    }
    cfg.ablation
        .shapes
        .iter()
        .map(|name| {
            let known = name == "star2d" || builtin_mesh(name).is_some();
            if !known && builtin_image(name, 2, 2).is_none() {
                return Err(unknown_builtin(name, &BUILTIN_SHAPES));
            }
            let mut source = cfg.source.clone();
            source.kind = SourceKind::Builtin;
            source.name = name.clone();
            Ok((name.clone(), source))
        })
        .collect()
}

/// Amplitude corresponding to a fraction of the domain diagonal. Builtin and
/// normalized geometry fills the unit domain, so its diagonal stands in for
/// the data's bounding-box diagonal.
pub fn alpha_for_fraction(frac: f64, dim: usize) -> f64 {
    frac * DomainBounds::unit(dim).diagonal()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experiment(task: TaskKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = task;
        cfg
    }

    #[test]
    fn builtin_images_stay_in_range_and_reject_unknown_names() {
        for name in BUILTIN_IMAGES {
            let img = builtin_image(name, 32, 16).unwrap();
            assert_eq!((img.width(), img.height(), img.channels()), (32, 16, 1));
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "{name}");
        }
        assert!(builtin_image("nope", 8, 8).is_none());
        let err = prepare(&experiment(TaskKind::Image), &SourceConfig {
            name: "nope".into(),
            ..SourceConfig::default()
        }, 0)
        .unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn half_textured_card_is_flat_left_and_busy_right() {
        let img = builtin_image("half_textured", 64, 64).unwrap();
        let variance = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let mut left = Vec::new();
        let mut right = Vec::new();
        for j in 0..64 {
            for i in 0..64 {
                let v = img.pixel(i, j)[0];
                if i < 32 {
                    left.push(v);
                } else {
                    right.push(v);
                }
            }
        }
        assert!(variance(&left) < 1e-12, "left half should be constant");
        assert!(variance(&right) > 0.05, "right half should carry texture");
    }

    #[test]
    fn builtin_shapes_fit_the_unit_domain_with_clearance() {
        for name in ["icosphere", "torus", "box_hole"] {
            let mesh = builtin_mesh(name).unwrap();
            let (lo, hi) = mesh.bounds();
            for j in 0..3 {
                assert!(lo[j] > 0.05 && hi[j] < 0.95, "{name} axis {j}: {lo:?} {hi:?}");
            }
            assert!(mesh.is_watertight(), "{name} must be closed");
        }
        let star = builtin_star();
        let (lo, hi) = star.bounds();
        for j in 0..2 {
            assert!(lo[j] > 0.05 && hi[j] < 0.95);
        }
    }

    #[test]
    fn prepared_clouds_are_deterministic_in_the_master_seed() {
        let mut cfg = experiment(TaskKind::SdfPoints);
        cfg.source.name = "icosphere".into();
        cfg.source.points = 64;
        cfg.eval.reference_samples = 128;
        let take = |master: u64| match prepare(&cfg, &cfg.source, master).unwrap() {
            PreparedInput::Cloud { cloud, eval } => (cloud.points_flat().to_vec(), eval.reference),
            _ => panic!("expected a cloud"),
        };
        let (c1, r1) = take(7);
        let (c2, r2) = take(7);
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        let (c3, _) = take(8);
        assert_ne!(c1, c3, "different masters should sample different clouds");
        assert_eq!(c1.len(), 64 * 3);
        assert_eq!(r1.len(), 128 * 3);
    }

    #[test]
    fn star_source_is_two_dimensional_and_points_only() {
        let mut cfg = experiment(TaskKind::SdfPoints);
        cfg.source.name = "star2d".into();
        cfg.source.points = 32;
        let input = prepare(&cfg, &cfg.source, 1).unwrap();
        assert_eq!(input.dim(), 2);
        assert_eq!(source_dim(&cfg).unwrap(), 2);

        cfg.task = TaskKind::SdfDirect;
        assert!(prepare(&cfg, &cfg.source, 1).is_err());
    }

    #[test]
    fn file_sources_load_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let mesh_path = dir.path().join("far.obj");
        let mesh = icosphere(1, 4.0, [30.0, -2.0, 5.0]);
        fieldforge_core::geometry::save_mesh(&mesh_path, &mesh).unwrap();

        let mut cfg = experiment(TaskKind::SdfPoints);
        cfg.source.kind = SourceKind::Obj;
        cfg.source.path = mesh_path;
        cfg.source.points = 50;
        match prepare(&cfg, &cfg.source, 3).unwrap() {
            PreparedInput::Cloud { cloud, .. } => {
                let (lo, hi) = cloud.bounds();
                for j in 0..3 {
                    assert!(lo[j] >= 0.05 && hi[j] <= 0.95, "axis {j}");
                }
            }
            _ => panic!("expected a cloud"),
        }

        let cloud_path = dir.path().join("pts.xyz");
        let src = sample_surface(&mesh, 80, &mut stream(0, Purpose::Eval, 0)).unwrap();
        fieldforge_core::geometry::save_points(&cloud_path, &src).unwrap();
        cfg.source.kind = SourceKind::Xyz;
        cfg.source.path = cloud_path;
        match prepare(&cfg, &cfg.source, 3).unwrap() {
            PreparedInput::Cloud { cloud, eval } => {
                assert_eq!(cloud.len(), 80);
                assert_eq!(eval.reference.len(), 80 * 3);
            }
            _ => panic!("expected a cloud"),
        }
    }

    #[test]
    fn ablation_shape_lists_expand_to_sources() {
        let mut cfg = experiment(TaskKind::SdfPoints);
        cfg.source.name = "icosphere".into();
        let own = ablation_sources(&cfg).unwrap();
        assert_eq!(own.len(), 1);
        assert_eq!(own[0].0, "icosphere");

        cfg.ablation.shapes = vec!["star2d".into(), "torus".into()];
        let listed = ablation_sources(&cfg).unwrap();
        assert_eq!(listed.len(), 2);
        assert_eq!(listed[1].0, "torus");

        cfg.ablation.shapes = vec!["hexagon".into()];
        assert!(ablation_sources(&cfg).is_err());
    }
}
