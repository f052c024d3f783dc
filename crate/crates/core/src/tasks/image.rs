//! Image regression: fit a field to pixel intensities at pixel centers.
//!
//! Single-row images are treated as 1D signals over the unit interval,
//! which makes this task double as the 1D test bed for comparing trained
//! fields against analytically blurred targets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, ParamStore, Tape};
use crate::fields::{field_query, DomainBounds, Field, FieldConfig};
use crate::rng::{stream, Purpose};
use crate::tasks::{
    average_nodes, config_hash, is_eval_step, validate_lr_decay, LrSchedule,
    ReportBuilder, ReportRow, RunReport, SpConfig, SpDriver, TaskError,
};
use rand::Rng;

/// Dense image in row-major layout, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, TaskError> {
        if width == 0 || height == 0 {
            return Err(TaskError::Config("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(TaskError::Config(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(TaskError::Config(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::Config("image data must be finite".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Constant-intensity image, handy for tests and synthetic targets.
    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: f64,
    ) -> Result<Self, TaskError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let base = (j * self.width + i) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Normalized coordinates of the center of pixel `(i, j)`; a single-row
    /// image yields a 1D coordinate.
    pub fn pixel_center(&self, i: usize, j: usize) -> ([f64; 2], usize) {
        let x = (i as f64 + 0.5) / self.width as f64;
        if self.height == 1 {
            ([x, 0.0], 1)
        } else {
            ([x, (j as f64 + 0.5) / self.height as f64], 2)
        }
    }

    /// Mean squared error against another image of identical shape.
    pub fn mse(&self, other: &ImageBuffer) -> Result<f64, TaskError> {
        if (self.width, self.height, self.channels)
            != (other.width, other.height, other.channels)
        {
            return Err(TaskError::Config(
                "cannot compare images of different shapes".into(),
            ));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Reads a binary PGM (`P5`) or PPM (`P6`) file with maxval up to 255.
    pub fn load_pnm(path: &Path) -> Result<Self, TaskError> {
        let bytes = std::fs::read(path)?;
        Self::parse_pnm(&bytes)
            .map_err(|e| TaskError::Parse(format!("{}: {e}", path.display())))
    }

    fn parse_pnm(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0usize;
        // Header tokens are separated by whitespace; `#` starts a comment
        // that runs to end of line.
        let next_token = |pos: &mut usize| -> Result<String, String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err("unexpected end of header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };

        let magic = next_token(&mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format!("unsupported magic {other:?}, want P5 or P6")),
        };
        let width: usize =
            next_token(&mut pos)?.parse().map_err(|_| "bad width".to_string())?;
        let height: usize =
            next_token(&mut pos)?.parse().map_err(|_| "bad height".to_string())?;
        let maxval: u32 =
            next_token(&mut pos)?.parse().map_err(|_| "bad maxval".to_string())?;
        if maxval == 0 || maxval > 255 {
            return Err(format!("maxval {maxval} out of supported range 1..=255"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * channels;
        let raster = bytes.get(pos..pos + need).ok_or_else(|| {
            format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos)
        })?;
        let data = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
        Self::new(width, height, channels, data).map_err(|e| e.to_string())
    }

    /// Writes binary PGM or PPM with maxval 255, clamping to `[0, 1]`.
    pub fn save_pnm(&self, path: &Path) -> Result<(), TaskError> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out =
            format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Peak signal-to-noise ratio in dB for signals with the given peak,
/// capped at 99 dB so exact reconstructions stay finite and comparable.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * ((peak * peak) / mse).log10()).min(99.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageFitConfig {
    pub field: FieldConfig,
    pub sp: SpConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Optional faster rate for lookup-table blocks (hash levels, dense
    /// grids); `None` trains everything at `lr`.
    pub table_lr: Option<f64>,
    /// Learning-rate multiplier reached by the end of the run via
    /// exponential decay; `1.0` keeps the rate constant.
    pub lr_decay: f64,
    /// Full-image PSNR cadence; `0` evaluates only the final step.
    pub eval_every: u64,
}

impl Default for ImageFitConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            sp: SpConfig::default(),
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            table_lr: None,
            lr_decay: 1.0,
            eval_every: 500,
        }
    }
}

impl ImageFitConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.batch_size == 0 {
            return Err(TaskError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TaskError::Config("lr must be positive and finite".into()));
        }
        if let Some(t) = self.table_lr {
            if !(t > 0.0) || !t.is_finite() {
                return Err(TaskError::Config(
                    "table_lr must be positive and finite".into(),
                ));
            }
        }
        validate_lr_decay(self.lr_decay)?;
        self.sp.validate()
    }
}

#[derive(Debug)]
pub struct ImageFitResult {
    pub report: RunReport,
    pub store: ParamStore,
    pub field: Field,
    pub sp: SpDriver,
}

impl ImageFitResult {
    /// Renders the trained field at the pixel grid of `width`x`height`.
    pub fn render(&self, width: usize, height: usize) -> Result<ImageBuffer, TaskError> {
        render_field(&self.field, &self.store, width, height)
    }
}

/// Evaluates `field` at every pixel center, clamped to `[0, 1]`.
pub fn render_field(
    field: &Field,
    store: &ParamStore,
    width: usize,
    height: usize,
) -> Result<ImageBuffer, TaskError> {
    let channels = field.out_dim();
    let mut data = vec![0.0f64; width * height * channels];
    let mut sampler = field.sampler(store);
    let mut out = vec![0.0f64; channels];
    for j in 0..height {
        for i in 0..width {
            let x = (i as f64 + 0.5) / width as f64;
            if field.dim() == 1 {
                sampler.eval_into(&[x], &mut out);
            } else {
                let y = (j as f64 + 0.5) / height as f64;
                sampler.eval_into(&[x, y], &mut out);
            }
            let base = (j * width + i) * channels;
            for c in 0..channels {
                data[base + c] = out[c].clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(width, height, channels, data)
}

/// Fits a field to `target` with mini-batch L2 regression on pixel centers,
/// optionally perturbing query coordinates per the preconditioning config.
pub fn fit_image(
    cfg: &ImageFitConfig,
    target: &ImageBuffer,
    seed: u64,
) -> Result<ImageFitResult, TaskError> {
    cfg.validate()?;
    let dim = if target.height() == 1 { 1 } else { 2 };
    let domain = DomainBounds::unit(dim);

    let mut store = ParamStore::new();
    let mut init_rng = stream(seed, Purpose::Init, 0);
    let field =
        Field::new(&cfg.field, domain, target.channels(), &mut store, &mut init_rng)?;
    let sp = SpDriver::from_config(&cfg.sp, &mut store, &domain)?;

    let mut adam = Adam::new(&store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let lrs = LrSchedule::new(
        &store,
        cfg.lr,
        cfg.lr_decay,
        cfg.steps,
        cfg.table_lr,
        &sp,
        cfg.sp.adaptive.lr,
    );

    let hash = config_hash(cfg);
    let mut report = ReportBuilder::new(cfg.steps, seed, hash);
    let n_pixels = target.width() * target.height();

    for step in 0..cfg.steps {
        lrs.apply(&mut adam, step);
        let mut batch_rng = stream(seed, Purpose::Batch, step);
        let mut noise_rng = stream(seed, Purpose::Noise, step);
        let mut tape = Tape::new();

        let mut preds = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * target.channels());
        for _ in 0..cfg.batch_size {
            let pix = batch_rng.random_range(0..n_pixels);
            let (i, j) = (pix % target.width(), pix / target.width());
            let (center, d) = target.pixel_center(i, j);
            let x = &center[..d];

            let mut samples = Vec::with_capacity(sp.n_samples);
            for _ in 0..sp.n_samples {
                let shift = sp.shift(&mut tape, &store, x, step, cfg.steps, &mut noise_rng);
                samples.push(field_query(&mut tape, &store, &field, x, &shift));
            }
            preds.push(average_nodes(&mut tape, &samples));
            targets.extend_from_slice(target.pixel(i, j));
        }

        let pred_vec = tape.concat(&preds);
        let target_vec = tape.const_vec(&targets);
        let diff = tape.sub(pred_vec, target_vec);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);

        store.zero_grads();
        let loss_val = tape.backward(&mut store, loss)?;
        adam.step(&mut store)?;
        report.on_step(step, loss_val)?;

        if is_eval_step(step, cfg.steps, cfg.eval_every) {
            let rendered = render_field(&field, &store, target.width(), target.height())?;
            let mse = rendered.mse(target)?;
            report.log(ReportRow {
                step,
                loss: loss_val,
                alpha: sp.alpha_summary(&store, step, cfg.steps),
                psnr: Some(psnr(mse, 1.0)),
                chamfer: None,
            });
        }
    }

    Ok(ImageFitResult { report: report.finish(), store, field, sp })
}
