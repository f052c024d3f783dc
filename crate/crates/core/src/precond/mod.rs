//! Stochastic preconditioning of field queries.
//!
//! Training queries are displaced by zero-mean noise before the field is
//! evaluated, so the optimizer sees a smoothed version of the field without
//! that smoothed field ever being formed: one displaced sample per query is
//! an unbiased single-sample estimate of the locally blurred value. The
//! displacement scale `alpha` either follows a global step schedule (large
//! early, annealed to zero) or is read from a trainable per-region grid.
//! Displaced coordinates are folded back into the domain by reflection at
//! the boundary, which keeps the query density uniform where clamping would
//! pile mass onto the faces.

use arrayvec::ArrayVec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{reflect_axis, BlockId, NodeId, ParamStore, Tape};
use crate::fields::encoding::{dense_vertex_index, multilinear_stencil};
use crate::fields::{field_query, DomainBounds, Field, QueryShift};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Distribution family for the query displacement. Every kernel is
/// calibrated so each component has mean zero and standard deviation equal
/// to the amplitude `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKernel {
    /// Normal with standard deviation `alpha`.
    Gaussian,
    /// Uniform on `[-alpha*sqrt(3), alpha*sqrt(3)]`, hard support bound.
    Uniform,
    /// `sign(z) * z^2` for standard normal `z`, rescaled; heavier tails and
    /// a sharper peak at zero than the Gaussian.
    SquaredGaussian,
}

/// Draws one displacement with per-axis standard deviation `alpha`.
/// `alpha = 0` yields the zero vector under any kernel.
pub fn sample_noise(
    kernel: NoiseKernel,
    alpha: f64,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayVec<f64, 3> {
    assert!(alpha >= 0.0, "noise amplitude must be non-negative");
    let mut d = ArrayVec::new();
    for _ in 0..dim {
        let unit: f64 = match kernel {
            NoiseKernel::Gaussian => rng.sample(StandardNormal),
            NoiseKernel::Uniform => rng.random_range(-SQRT_3..SQRT_3),
            NoiseKernel::SquaredGaussian => {
                // E[z^4] = 3 for standard normal z, so sign(z) z^2 has
                // variance 3 and needs a 1/sqrt(3) rescale.
                let z: f64 = rng.sample(StandardNormal);
                z.signum() * z * z / SQRT_3
            }
        };
        d.push(alpha * unit);
    }
    d
}

/// Folds a coordinate back into `domain` by mirroring at the boundaries,
/// axis by axis. Interior coordinates pass through bitwise unchanged.
pub fn reflect_into_domain(x: &[f64], domain: &DomainBounds) -> ArrayVec<f64, 3> {
    assert_eq!(x.len(), domain.dim());
    let bounds = domain.axis_bounds();
    x.iter().zip(&bounds).map(|(&v, &(lo, hi))| reflect_axis(v, lo, hi).0).collect()
}

/// Default ratio between the final (pre-cutoff) and initial amplitude of
/// [`AlphaSchedule::ExpDecay`].
pub const DEFAULT_FLOOR_RATIO: f64 = 1e-3;

fn default_floor_ratio() -> f64 {
    DEFAULT_FLOOR_RATIO
}

/// Global displacement-amplitude schedule over training steps.
///
/// Schedules that anneal take an explicit `end_step`; when it is `None` the
/// amplitude reaches zero a third of the way through the run, which leaves
/// the remaining steps to sharpen the unblurred field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// Fixed amplitude for the whole run.
    Constant { alpha0: f64 },
    /// Geometric decay from `alpha0` toward `alpha0 * floor_ratio`, cut to
    /// exactly zero at `end_step`.
    ExpDecay {
        alpha0: f64,
        #[serde(default)]
        end_step: Option<u64>,
        #[serde(default = "default_floor_ratio")]
        floor_ratio: f64,
    },
    /// Full amplitude before `end_step`, zero from then on.
    Step {
        alpha0: f64,
        #[serde(default)]
        end_step: Option<u64>,
    },
}

fn resolve_end(end_step: Option<u64>, total_steps: u64) -> u64 {
    end_step.unwrap_or(total_steps / 3).max(1)
}

impl AlphaSchedule {
    /// Amplitude at `step` of a run `total_steps` long.
    pub fn alpha_at(&self, step: u64, total_steps: u64) -> f64 {
        match *self {
            AlphaSchedule::Constant { alpha0 } => alpha0,
            AlphaSchedule::ExpDecay { alpha0, end_step, floor_ratio } => {
                let end = resolve_end(end_step, total_steps);
                if step >= end {
                    0.0
                } else {
                    alpha0 * floor_ratio.powf(step as f64 / end as f64)
                }
            }
            AlphaSchedule::Step { alpha0, end_step } => {
                let end = resolve_end(end_step, total_steps);
                if step >= end {
                    0.0
                } else {
                    alpha0
                }
            }
        }
    }

    /// Initial amplitude.
    pub fn alpha0(&self) -> f64 {
        match *self {
            AlphaSchedule::Constant { alpha0 }
            | AlphaSchedule::ExpDecay { alpha0, .. }
            | AlphaSchedule::Step { alpha0, .. } => alpha0,
        }
    }
}

/// One stochastically preconditioned field query: the field is evaluated at
/// `x + delta` with `delta` drawn once from `kernel` at amplitude `alpha`
/// and the displaced point reflected into the domain.
///
/// The displacement enters the tape as a constant, so gradients flow only
/// into the field parameters. `alpha = 0` short-circuits to the plain query
/// and leaves `rng` untouched.
pub fn perturb_query(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field,
    x: &[f64],
    alpha: f64,
    kernel: NoiseKernel,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let shift = draw_shift(kernel, alpha, field.dim(), rng);
    field_query(tape, store, field, x, &shift)
}

/// Draws one query displacement as a [`QueryShift`], for callers that need
/// to reuse a single displacement across several queries (e.g. a finite
/// difference stencil sharing its point's displacement). `alpha = 0` yields
/// [`QueryShift::None`] and leaves `rng` untouched, so a zero-amplitude run
/// consumes exactly the same random stream as a run without
/// preconditioning.
pub fn draw_shift(
    kernel: NoiseKernel,
    alpha: f64,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> QueryShift {
    if alpha == 0.0 {
        return QueryShift::None;
    }
    QueryShift::Offset(sample_noise(kernel, alpha, dim, rng))
}

/// Summary statistics of the rectified vertex amplitudes of an [`AlphaGrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Trainable per-region displacement amplitude on a dense vertex grid.
///
/// The amplitude is read by multilinear interpolation at the *unperturbed*
/// query point and rectified, so the displacement never changes which cells
/// supplied its own amplitude and individual cells can anneal all the way
/// to zero while their neighbors stay wide.
#[derive(Debug, Clone)]
pub struct AlphaGrid {
    block: BlockId,
    verts: u32,
    dim: usize,
    domain: DomainBounds,
}

impl AlphaGrid {
    /// Registers an `alpha_grid` block of `resolution^m` vertex amplitudes,
    /// all starting at `alpha_init`.
    pub fn new(
        store: &mut ParamStore,
        domain: &DomainBounds,
        resolution: usize,
        alpha_init: f64,
    ) -> Self {
        assert!(resolution >= 2, "alpha grid needs at least 2 vertices per axis");
        assert!(alpha_init >= 0.0, "initial amplitude must be non-negative");
        let dim = domain.dim();
        let n = resolution.pow(dim as u32);
        let block = store.register("alpha_grid", vec![alpha_init; n]);
        Self { block, verts: resolution as u32, dim, domain: *domain }
    }

    pub fn block_id(&self) -> BlockId {
        self.block
    }

    /// Vertices per axis.
    pub fn resolution(&self) -> usize {
        self.verts as usize
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> DomainBounds {
        self.domain
    }

    /// Raw (unrectified) vertex values, x-fastest.
    pub fn values<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.block(self.block)
    }

    fn stencil(&self, x: &[f64]) -> (ArrayVec<u32, 8>, ArrayVec<f64, 8>) {
        assert_eq!(x.len(), self.dim);
        let bounds = self.domain.axis_bounds();
        let mut u = ArrayVec::<f64, 3>::new();
        for j in 0..self.dim {
            let (lo, hi) = bounds[j];
            u.push((x[j] - lo) / (hi - lo));
        }
        let cells: ArrayVec<u32, 3> = (0..self.dim).map(|_| self.verts - 1).collect();
        let set = multilinear_stencil(&u, &cells);
        let verts: ArrayVec<u32, 3> = (0..self.dim).map(|_| self.verts).collect();
        let rows = set
            .corners
            .iter()
            .map(|c| dense_vertex_index(&c[..self.dim], &verts))
            .collect();
        (rows, set.weights)
    }

    /// Rectified amplitude at `x` as a scalar tape node; gradients flow into
    /// the `alpha_grid` block.
    pub fn read(&self, tape: &mut Tape, store: &ParamStore, x: &[f64]) -> NodeId {
        let (rows, weights) = self.stencil(x);
        let raw = tape.gather(store, self.block, &rows, &weights, 1);
        tape.relu(raw)
    }

    /// Rectified amplitude at `x`, off the tape. Matches [`AlphaGrid::read`]
    /// bitwise.
    pub fn value(&self, store: &ParamStore, x: &[f64]) -> f64 {
        let (rows, weights) = self.stencil(x);
        let bv = store.block(self.block);
        let mut acc = 0.0;
        for (&r, &w) in rows.iter().zip(&weights) {
            acc += w * bv[r as usize];
        }
        acc.max(0.0)
    }

    /// Rectified amplitudes sampled at the centers of a `res^m` lattice over
    /// the domain, x-fastest; the raster used for amplitude-map export.
    pub fn sample_map(&self, store: &ParamStore, res: usize) -> Vec<f64> {
        assert!(res >= 1);
        let bounds = self.domain.axis_bounds();
        let total = res.pow(self.dim as u32);
        let mut out = Vec::with_capacity(total);
        let mut x = ArrayVec::<f64, 3>::new();
        for flat in 0..total {
            let mut rem = flat;
            x.clear();
            for &(lo, hi) in bounds.iter() {
                let i = rem % res;
                rem /= res;
                x.push(lo + (i as f64 + 0.5) / res as f64 * (hi - lo));
            }
            out.push(self.value(store, &x));
        }
        out
    }

    /// Mean rectified amplitude over the axis-aligned box `[lo, hi]`,
    /// sampled on an `n^m` lattice of cell centers.
    pub fn region_mean(&self, store: &ParamStore, lo: &[f64], hi: &[f64], n: usize) -> f64 {
        assert_eq!(lo.len(), self.dim);
        assert_eq!(hi.len(), self.dim);
        assert!(n >= 1);
        let total = n.pow(self.dim as u32);
        let mut sum = 0.0;
        let mut x = ArrayVec::<f64, 3>::new();
        for flat in 0..total {
            let mut rem = flat;
            x.clear();
            for j in 0..self.dim {
                let i = rem % n;
                rem /= n;
                x.push(lo[j] + (i as f64 + 0.5) / n as f64 * (hi[j] - lo[j]));
            }
            sum += self.value(store, &x);
        }
        sum / total as f64
    }

    /// Statistics over the rectified vertex values.
    pub fn stats(&self, store: &ParamStore) -> AlphaStats {
        let vals = store.block(self.block);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in vals {
            let r = v.max(0.0);
            min = min.min(r);
            max = max.max(r);
            sum += r;
        }
        AlphaStats { min, max, mean: sum / vals.len() as f64 }
    }
}

/// Preconditioned query with the amplitude read from a trainable grid.
///
/// Uses the reparameterization `delta = alpha(x) * n` with `n` a standard
/// normal draw, so the loss gradient reaches the amplitude grid through the
/// displacement itself: cells where displacement hurts the loss anneal
/// toward zero, cells where it is harmless stay wide.
pub fn perturb_adaptive(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field,
    grid: &AlphaGrid,
    x: &[f64],
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let mut n = ArrayVec::<f64, 3>::new();
    for _ in 0..field.dim() {
        n.push(rng.sample(StandardNormal));
    }
    perturb_adaptive_with(tape, store, field, grid, x, &n)
}

/// Draws one adaptive displacement `relu(alpha(x)) * n` as a shift node, for
/// callers that reuse a single displacement across several queries of the
/// same point. Gradients flow into the amplitude grid.
pub fn adaptive_shift(
    tape: &mut Tape,
    store: &ParamStore,
    grid: &AlphaGrid,
    x: &[f64],
    rng: &mut ChaCha8Rng,
) -> QueryShift {
    let mut n = ArrayVec::<f64, 3>::new();
    for _ in 0..grid.dim() {
        n.push(rng.sample(StandardNormal));
    }
    let a = grid.read(tape, store, x);
    QueryShift::Node(tape.scalar_mul_vec(a, &n))
}

/// [`perturb_adaptive`] with the base draw `n` supplied by the caller, which
/// makes the query a deterministic function of the parameters (needed for
/// finite-difference verification of the amplitude gradient).
pub fn perturb_adaptive_with(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field,
    grid: &AlphaGrid,
    x: &[f64],
    n: &[f64],
) -> NodeId {
    assert_eq!(x.len(), field.dim());
    assert_eq!(n.len(), field.dim());
    let a = grid.read(tape, store, x);
    let delta = tape.scalar_mul_vec(a, n);
    field_query(tape, store, field, x, &QueryShift::Node(delta))
}

/// Monte-Carlo estimate of a blurred field value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurEstimate {
    /// Sample mean of `f` over reflected displaced points.
    pub mean: f64,
    /// Standard error of the mean; zero for a single sample.
    pub stderr: f64,
}

/// Estimates the blurred value `E[f(reflect(x + delta))]` from `n_samples`
/// independent displacements. The single-sample case is exactly what one
/// preconditioned training query feeds the loss; more samples shrink the
/// standard error as `1/sqrt(n)`.
pub fn blur_estimate(
    mut f: impl FnMut(&[f64]) -> f64,
    domain: &DomainBounds,
    x: &[f64],
    alpha: f64,
    kernel: NoiseKernel,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> BlurEstimate {
    assert!(n_samples >= 1);
    let dim = domain.dim();
    assert_eq!(x.len(), dim);
    let bounds = domain.axis_bounds();
    let mut xe = ArrayVec::<f64, 3>::new();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_samples {
        let d = sample_noise(kernel, alpha, dim, rng);
        xe.clear();
        for j in 0..dim {
            xe.push(reflect_axis(x[j] + d[j], bounds[j].0, bounds[j].1).0);
        }
        let v = f(&xe);
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let stderr = if n_samples > 1 {
        let n = n_samples as f64;
        (m2 / (n - 1.0) / n).max(0.0).sqrt()
    } else {
        0.0
    };
    BlurEstimate { mean, stderr }
}

/// How the displacement amplitude is chosen at each step.
#[derive(Debug, Clone)]
pub enum AlphaMode {
    /// One global amplitude per step.
    Scheduled(AlphaSchedule),
    /// Spatially varying trainable amplitude; always uses the Gaussian
    /// kernel through the reparameterized draw.
    Adaptive(AlphaGrid),
}

/// Pairs a noise kernel with an amplitude rule and applies both to training
/// queries. With amplitude zero it is the identity on queries.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub kernel: NoiseKernel,
    pub mode: AlphaMode,
}

impl Preconditioner {
    pub fn scheduled(kernel: NoiseKernel, schedule: AlphaSchedule) -> Self {
        Self { kernel, mode: AlphaMode::Scheduled(schedule) }
    }

    pub fn adaptive(kernel: NoiseKernel, grid: AlphaGrid) -> Self {
        Self { kernel, mode: AlphaMode::Adaptive(grid) }
    }

    /// Scheduled amplitude at `step`, or `None` in adaptive mode.
    pub fn alpha_at(&self, step: u64, total_steps: u64) -> Option<f64> {
        match &self.mode {
            AlphaMode::Scheduled(s) => Some(s.alpha_at(step, total_steps)),
            AlphaMode::Adaptive(_) => None,
        }
    }

    pub fn alpha_grid(&self) -> Option<&AlphaGrid> {
        match &self.mode {
            AlphaMode::Adaptive(g) => Some(g),
            AlphaMode::Scheduled(_) => None,
        }
    }

    /// One preconditioned query, averaged over `n_samples` independent
    /// displacements (training uses a single sample; more samples trade
    /// compute for a lower-variance blur estimate).
    #[allow(clippy::too_many_arguments)]
    pub fn query(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        field: &Field,
        x: &[f64],
        step: u64,
        total_steps: u64,
        rng: &mut ChaCha8Rng,
        n_samples: usize,
    ) -> NodeId {
        assert!(n_samples >= 1);
        match &self.mode {
            AlphaMode::Scheduled(s) => {
                let alpha = s.alpha_at(step, total_steps);
                if alpha == 0.0 || n_samples == 1 {
                    return perturb_query(tape, store, field, x, alpha, self.kernel, rng);
                }
                let parts: Vec<NodeId> = (0..n_samples)
                    .map(|_| perturb_query(tape, store, field, x, alpha, self.kernel, rng))
                    .collect();
                average_nodes(tape, &parts)
            }
            AlphaMode::Adaptive(g) => {
                if n_samples == 1 {
                    return perturb_adaptive(tape, store, field, g, x, rng);
                }
                let parts: Vec<NodeId> = (0..n_samples)
                    .map(|_| perturb_adaptive(tape, store, field, g, x, rng))
                    .collect();
                average_nodes(tape, &parts)
            }
        }
    }
}

fn average_nodes(tape: &mut Tape, parts: &[NodeId]) -> NodeId {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::fields::{FieldConfig, GridConfig, ReprKind};
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::RngCore;

    const KERNELS: [NoiseKernel; 3] =
        [NoiseKernel::Gaussian, NoiseKernel::Uniform, NoiseKernel::SquaredGaussian];

    #[test]
    fn noise_kernels_are_calibrated_to_alpha() {
        let alpha = 0.15;
        let n = 1_000_000usize;
        for (k, kernel) in KERNELS.iter().enumerate() {
            let mut rng = stream(90 + k as u64, Purpose::Noise, 0);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            let mut max_abs: f64 = 0.0;
            for _ in 0..n {
                let d = sample_noise(*kernel, alpha, 1, &mut rng)[0];
                sum += d;
                sumsq += d * d;
                max_abs = max_abs.max(d.abs());
            }
            let mean = sum / n as f64;
            let std = (sumsq / n as f64 - mean * mean).sqrt();
            // Mean within four standard errors of zero.
            assert!(
                mean.abs() < 4.0 * alpha / 1e3,
                "{kernel:?}: mean {mean} off zero"
            );
            assert!(
                (std / alpha - 1.0).abs() < 0.01,
                "{kernel:?}: std {std} not within 1% of {alpha}"
            );
            if *kernel == NoiseKernel::Uniform {
                assert!(max_abs <= alpha * SQRT_3 + 1e-12, "uniform support exceeded");
                assert!(max_abs > 0.99 * alpha * SQRT_3, "uniform support not filled");
            }
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_displacement() {
        for (k, kernel) in KERNELS.iter().enumerate() {
            let mut rng = stream(17, Purpose::Noise, k as u64);
            let d = sample_noise(*kernel, 0.0, 3, &mut rng);
            assert!(d.iter().all(|&v| v == 0.0), "{kernel:?}: {d:?}");
        }
    }

    #[test]
    fn reflection_folds_pinned_examples() {
        let unit = DomainBounds::unit(1);
        let cases = [(0.5, 0.5), (1.2, 0.8), (-0.3, 0.3), (2.4, 0.4), (0.0, 0.0), (1.0, 1.0)];
        for (x, want) in cases {
            let y = reflect_into_domain(&[x], &unit)[0];
            assert_relative_eq!(y, want, epsilon = 1e-12);
        }
        // Interior points are returned bitwise.
        let x = 0.329_209_384_7;
        assert_eq!(reflect_into_domain(&[x], &unit)[0].to_bits(), x.to_bits());
        // Shifted, non-unit bounds.
        let wide = DomainBounds::new(&[-1.0], &[3.0]);
        assert_relative_eq!(reflect_into_domain(&[3.5], &wide)[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(reflect_into_domain(&[-1.4], &wide)[0], -0.6, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn reflected_points_always_land_inside(
            x0 in 0.0..1.0f64,
            x1 in 0.0..1.0f64,
            d0 in -40.0..40.0f64,
            d1 in -40.0..40.0f64,
        ) {
            let domain = DomainBounds::unit(2);
            let y = reflect_into_domain(&[x0 + d0, x1 + d1], &domain);
            prop_assert!(domain.contains(&y), "escaped: {:?}", y);
            // Re-reflecting an in-domain point is the identity.
            let z = reflect_into_domain(&y, &domain);
            prop_assert_eq!(&y[..], &z[..]);
        }

        #[test]
        fn reflection_respects_awkward_bounds(
            lo in -2.0..2.0f64,
            w in 0.05..3.0f64,
            t in -30.0..30.0f64,
        ) {
            let domain = DomainBounds::new(&[lo], &[lo + w]);
            let y = reflect_into_domain(&[lo + t], &domain);
            prop_assert!(domain.contains(&y), "escaped: {:?}", y);
        }
    }

    /// Displacing uniform samples and folding them back must keep the point
    /// density uniform; clamping the same displaced points to the domain
    /// must not.
    #[test]
    fn reflection_preserves_uniform_density_where_clamping_fails() {
        const N: usize = 1_000_000;
        const BINS: usize = 50;
        let domain = DomainBounds::unit(1);
        let mut pts = stream(41, Purpose::Batch, 0);
        let mut noise = stream(41, Purpose::Noise, 0);
        let mut reflected = [0u32; BINS];
        let mut clamped = [0u32; BINS];
        let bin = |y: f64| ((y * BINS as f64) as usize).min(BINS - 1);
        for _ in 0..N {
            let x: f64 = pts.random_range(0.0..1.0);
            let d = sample_noise(NoiseKernel::Gaussian, 0.2, 1, &mut noise)[0];
            reflected[bin(reflect_into_domain(&[x + d], &domain)[0])] += 1;
            clamped[bin((x + d).clamp(0.0, 1.0))] += 1;
        }
        let chi = |counts: &[u32; BINS]| {
            let e = (N / BINS) as f64;
            counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>()
        };
        // 99.9th percentile of the chi-square distribution with 49 degrees
        // of freedom.
        const CRIT: f64 = 85.351;
        let (cr, cc) = (chi(&reflected), chi(&clamped));
        assert!(cr < CRIT, "reflected density not uniform: chi2 {cr}");
        assert!(cc > CRIT, "clamped density unexpectedly uniform: chi2 {cc}");
    }

    #[test]
    fn exponential_schedule_decays_to_cutoff() {
        let s = AlphaSchedule::ExpDecay { alpha0: 0.02, end_step: None, floor_ratio: 1e-3 };
        let total = 3000;
        assert_eq!(s.alpha_at(0, total), 0.02);
        // Halfway to the cutoff the amplitude is alpha0 * sqrt(floor_ratio).
        assert_relative_eq!(s.alpha_at(500, total), 6.324_555_3e-4, max_relative = 1e-6);
        assert!(s.alpha_at(999, total) > 0.0);
        assert_eq!(s.alpha_at(1000, total), 0.0);
        assert_eq!(s.alpha_at(2999, total), 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..1100 {
            let a = s.alpha_at(step, total);
            assert!(a <= prev, "not monotone at step {step}");
            prev = a;
        }
        // An explicit end step overrides the one-third default.
        let e = AlphaSchedule::ExpDecay { alpha0: 0.02, end_step: Some(600), floor_ratio: 1e-3 };
        assert_relative_eq!(e.alpha_at(300, total), 6.324_555_3e-4, max_relative = 1e-6);
        assert_eq!(e.alpha_at(600, total), 0.0);
    }

    #[test]
    fn step_and_constant_schedules() {
        let st = AlphaSchedule::Step { alpha0: 0.05, end_step: Some(200) };
        assert_eq!(st.alpha_at(0, 1000), 0.05);
        assert_eq!(st.alpha_at(199, 1000), 0.05);
        assert_eq!(st.alpha_at(200, 1000), 0.0);
        // Default cutoff is a third of the run.
        let d = AlphaSchedule::Step { alpha0: 0.05, end_step: None };
        assert_eq!(d.alpha_at(332, 999), 0.05);
        assert_eq!(d.alpha_at(333, 999), 0.0);
        let c = AlphaSchedule::Constant { alpha0: 0.01 };
        assert_eq!(c.alpha_at(0, 10), 0.01);
        assert_eq!(c.alpha_at(9, 10), 0.01);
        assert_eq!(c.alpha0(), 0.01);
    }

    fn relu_grid_field(seed: u64, resolution: usize) -> (ParamStore, Field) {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let cfg = FieldConfig {
            repr: ReprKind::ReluGrid,
            grid: GridConfig { resolution, relu_output: false },
            ..FieldConfig::default()
        };
        let field = Field::new(&cfg, DomainBounds::unit(2), 1, &mut store, &mut rng).unwrap();
        let gb = store.block_id("grid").unwrap();
        for v in store.block_mut(gb) {
            *v = rng.random_range(-0.5..0.5);
        }
        (store, field)
    }

    #[test]
    fn zero_alpha_query_is_the_plain_query() {
        let (store, field) = relu_grid_field(23, 5);
        let mut rng = stream(23, Purpose::Noise, 0);
        let before = rng.clone();
        let mut tape = Tape::new();
        let x = [0.312, 0.744];
        let a = perturb_query(&mut tape, &store, &field, &x, 0.0, NoiseKernel::Gaussian, &mut rng);
        let b = field_query(&mut tape, &store, &field, &x, &QueryShift::None);
        assert_eq!(tape.scalar(a).to_bits(), tape.scalar(b).to_bits());
        // The zero-amplitude path must not consume any randomness.
        assert_eq!(rng.clone().next_u64(), before.clone().next_u64());
    }

    /// The mean of many single-sample preconditioned queries converges to
    /// the Monte-Carlo blur of the same field: one training query is an
    /// unbiased estimate of the blurred value.
    #[test]
    fn single_sample_queries_are_unbiased_blur_estimates() {
        let (store, field) = relu_grid_field(29, 4);
        let x = [0.31, 0.67];
        let alpha = 0.15;

        let mut tape = Tape::new();
        let mut rng = stream(29, Purpose::Noise, 0);
        let reps = 20_000usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for k in 0..reps {
            tape.reset();
            let node =
                perturb_query(&mut tape, &store, &field, &x, alpha, NoiseKernel::Gaussian, &mut rng);
            let v = tape.scalar(node);
            let d = v - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (v - mean);
        }
        let se1 = (m2 / (reps as f64 - 1.0) / reps as f64).sqrt();

        let mut sampler = field.sampler(&store);
        let mut rng2 = stream(31, Purpose::Eval, 0);
        let est = blur_estimate(
            |p| sampler.eval_scalar(p),
            &field.domain(),
            &x,
            alpha,
            NoiseKernel::Gaussian,
            200_000,
            &mut rng2,
        );
        let tol = 4.0 * (se1 * se1 + est.stderr * est.stderr).sqrt();
        assert!(
            (mean - est.mean).abs() < tol,
            "query mean {mean} vs blur {} (tol {tol})",
            est.mean
        );
    }

    #[test]
    fn blur_estimate_is_exact_on_constant_fields() {
        let domain = DomainBounds::unit(2);
        let mut rng = stream(3, Purpose::Eval, 0);
        let est = blur_estimate(
            |_| 0.7321,
            &domain,
            &[0.5, 0.5],
            0.3,
            NoiseKernel::SquaredGaussian,
            5_000,
            &mut rng,
        );
        assert_eq!(est.mean, 0.7321);
        assert_eq!(est.stderr, 0.0);
    }

    /// Monte-Carlo error tracks 1/sqrt(n): the log-log slope of rms error
    /// against sample count sits near -1/2, and the reported standard error
    /// agrees with the observed spread.
    #[test]
    fn blur_estimate_error_shrinks_as_inverse_sqrt_samples() {
        let domain = DomainBounds::unit(1);
        let x = [0.34];
        let alpha = 0.1;
        let f = |p: &[f64]| (2.0 * std::f64::consts::PI * 3.0 * p[0]).sin() + 0.2 * p[0];

        let mut ref_rng = stream(57, Purpose::Eval, 0);
        let reference =
            blur_estimate(f, &domain, &x, alpha, NoiseKernel::Gaussian, 10_000_000, &mut ref_rng)
                .mean;

        let ns = [100usize, 10_000, 1_000_000];
        let reps = 24;
        let mut log_n = Vec::new();
        let mut log_rms = Vec::new();
        let mut stderr_mid = 0.0;
        for (j, &n) in ns.iter().enumerate() {
            let mut sq = 0.0;
            for r in 0..reps {
                let mut rng = stream(58, Purpose::Eval, (j * reps + r) as u64);
                let est = blur_estimate(f, &domain, &x, alpha, NoiseKernel::Gaussian, n, &mut rng);
                sq += (est.mean - reference).powi(2);
                if j == 1 {
                    stderr_mid += est.stderr / reps as f64;
                }
            }
            log_n.push((n as f64).ln());
            log_rms.push((sq / reps as f64).sqrt().ln());
        }
        let xm = log_n.iter().sum::<f64>() / 3.0;
        let ym = log_rms.iter().sum::<f64>() / 3.0;
        let slope = log_n
            .iter()
            .zip(&log_rms)
            .map(|(&a, &b)| (a - xm) * (b - ym))
            .sum::<f64>()
            / log_n.iter().map(|&a| (a - xm).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
        // The reported standard error matches the observed rms at n = 1e4.
        let rms_mid = log_rms[1].exp();
        let ratio = stderr_mid / rms_mid;
        assert!((0.4..2.5).contains(&ratio), "stderr {stderr_mid} vs rms {rms_mid}");
    }

    /// Blurring a sinusoid scales it by the kernel's characteristic
    /// function: exp(-w^2 a^2 / 2) for the Gaussian, sin(w b)/(w b) for the
    /// uniform kernel with support half-width b.
    #[test]
    fn blur_attenuates_sinusoids_by_kernel_spectrum() {
        let domain = DomainBounds::unit(1);
        let k = 3.0;
        let w = 2.0 * std::f64::consts::PI * k;
        let alpha = 0.05;
        let x = [0.3];
        let f = |p: &[f64]| (w * p[0]).sin();
        let base = (w * x[0]).sin();

        let mut rng = stream(61, Purpose::Eval, 0);
        let g = blur_estimate(f, &domain, &x, alpha, NoiseKernel::Gaussian, 4_000_000, &mut rng);
        let want_g = base * (-w * w * alpha * alpha / 2.0).exp();
        assert!(
            (g.mean - want_g).abs() < 3.0 * g.stderr,
            "gaussian: {} vs {want_g} (se {})",
            g.mean,
            g.stderr
        );

        let mut rng = stream(62, Purpose::Eval, 0);
        let u = blur_estimate(f, &domain, &x, alpha, NoiseKernel::Uniform, 4_000_000, &mut rng);
        let b = alpha * SQRT_3;
        let want_u = base * (w * b).sin() / (w * b);
        assert!(
            (u.mean - want_u).abs() < 3.0 * u.stderr,
            "uniform: {} vs {want_u} (se {})",
            u.mean,
            u.stderr
        );
        // The two kernels are attenuated by measurably different factors.
        assert!((want_g - want_u).abs() > 20.0 * g.stderr);
    }

    /// Against deterministic quadrature of the reflected integrand, at a
    /// point close enough to the boundary that reflection matters.
    #[test]
    fn blur_estimate_matches_quadrature_under_reflection() {
        let domain = DomainBounds::unit(1);
        let x = 0.05;
        let alpha = 0.1;
        let f = |p: &[f64]| p[0] * p[0] + 0.3 * (3.0 * p[0]).cos();

        let half = 6.0 * alpha;
        let steps = 4000usize;
        let h = 2.0 * half / steps as f64;
        let phi = |t: f64| (-t * t / (2.0 * alpha * alpha)).exp();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=steps {
            let t = -half + i as f64 * h;
            let wt = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let y = reflect_into_domain(&[x + t], &domain)[0];
            num += wt * phi(t) * f(&[y]);
            den += wt * phi(t);
        }
        let reference = num / den;

        let mut rng = stream(67, Purpose::Eval, 0);
        let est =
            blur_estimate(f, &domain, &[x], alpha, NoiseKernel::Gaussian, 1_000_000, &mut rng);
        assert!(
            (est.mean - reference).abs() < 4.0 * est.stderr + 1e-6,
            "{} vs {reference} (se {})",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn adaptive_amplitude_gradients_match_finite_differences() {
        let (mut store, field) = relu_grid_field(5, 4);
        let grid = AlphaGrid::new(&mut store, &field.domain(), 3, 0.0);
        let ab = grid.block_id();
        let mut rng = stream(5, Purpose::Init, 1);
        for v in store.block_mut(ab) {
            *v = rng.random_range(0.05..0.15);
        }
        let x = [0.37, 0.58];
        let n = [0.7, -0.4];

        let report = grad_check(&mut store, 1e-5, |tape, store| {
            perturb_adaptive_with(tape, store, &field, &grid, &x, &n)
        });
        assert!(report.max_rel_err < 1e-3, "worst: {:?}", report.worst);

        // The amplitude cells around x receive a finite, nonzero gradient.
        store.zero_grads();
        let mut tape = Tape::new();
        let out = perturb_adaptive_with(&mut tape, &store, &field, &grid, &x, &n);
        tape.backward(&mut store, out).unwrap();
        let g = store.block_grad(ab);
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0), "amplitude gradient vanished: {g:?}");
    }

    /// With the amplitude grid at zero the adaptive query reproduces the
    /// plain query bitwise, including the gradients reaching the field.
    #[test]
    fn zero_alpha_grid_matches_plain_query_and_gradients() {
        let (mut store, field) = relu_grid_field(47, 5);
        let gb = store.block_id("grid").unwrap();
        let grid = AlphaGrid::new(&mut store, &field.domain(), 4, 0.0);
        let x = [0.41, 0.13];

        let mut tape = Tape::new();
        let plain = field_query(&mut tape, &store, &field, &x, &QueryShift::None);
        let plain_val = tape.scalar(plain);
        tape.backward(&mut store, plain).unwrap();
        let g_plain = store.block_grad(gb).to_vec();
        store.zero_grads();

        let mut noise = stream(47, Purpose::Noise, 0);
        let mut tape2 = Tape::new();
        let adaptive = perturb_adaptive(&mut tape2, &store, &field, &grid, &x, &mut noise);
        assert_eq!(tape2.scalar(adaptive).to_bits(), plain_val.to_bits());
        tape2.backward(&mut store, adaptive).unwrap();
        assert_eq!(g_plain.as_slice(), store.block_grad(gb));
        // Rectification at zero stops gradients into the amplitude cells.
        assert!(store.block_grad(grid.block_id()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_grid_reads_agree_between_tape_and_value() {
        let mut store = ParamStore::new();
        let domain = DomainBounds::unit(2);
        let grid = AlphaGrid::new(&mut store, &domain, 4, 0.1);
        let mut rng = stream(71, Purpose::Init, 0);
        for v in store.block_mut(grid.block_id()) {
            *v = rng.random_range(-0.2..0.3);
        }
        let mut tape = Tape::new();
        for _ in 0..50 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            tape.reset();
            let node = grid.read(&mut tape, &store, &x);
            let direct = grid.value(&store, &x);
            assert_eq!(tape.scalar(node).to_bits(), direct.to_bits());
            assert!(direct >= 0.0);
        }
        // All-negative cells read as zero everywhere.
        for v in store.block_mut(grid.block_id()) {
            *v = -0.3;
        }
        assert_eq!(grid.value(&store, &[0.52, 0.18]), 0.0);
    }

    #[test]
    fn alpha_grid_region_summaries() {
        let mut store = ParamStore::new();
        let domain = DomainBounds::unit(2);
        let grid = AlphaGrid::new(&mut store, &domain, 3, 0.0);
        {
            // Vertex layout is x-fastest: columns at x = 0, 0.5, 1.
            let vals = store.block_mut(grid.block_id());
            for row in 0..3 {
                vals[row * 3] = 0.2;
                vals[row * 3 + 1] = 0.125;
                vals[row * 3 + 2] = 0.05;
            }
        }
        let left = grid.region_mean(&store, &[0.0, 0.0], &[0.4, 1.0], 8);
        let right = grid.region_mean(&store, &[0.6, 0.0], &[1.0, 1.0], 8);
        assert!(left > right, "left {left} right {right}");

        let map = grid.sample_map(&store, 8);
        assert_eq!(map.len(), 64);
        assert!(map.iter().all(|&v| (0.0..=0.2).contains(&v)));
        // First row runs along x, so amplitudes decrease across it.
        assert!(map[0] > map[7]);

        let st = grid.stats(&store);
        assert_eq!(st.max, 0.2);
        assert_eq!(st.min, 0.05);
        assert_relative_eq!(st.mean, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn preconditioner_dispatches_and_averages() {
        let (mut store, field) = relu_grid_field(83, 4);
        let x = [0.28, 0.66];
        let sched = Preconditioner::scheduled(
            NoiseKernel::Gaussian,
            AlphaSchedule::Constant { alpha0: 0.1 },
        );
        assert_eq!(sched.alpha_at(7, 100), Some(0.1));

        let mut r1 = stream(83, Purpose::Noise, 7);
        let mut r2 = r1.clone();
        let mut ta = Tape::new();
        let via_pre = sched.query(&mut ta, &store, &field, &x, 7, 100, &mut r1, 1);
        let mut tb = Tape::new();
        let direct = perturb_query(&mut tb, &store, &field, &x, 0.1, NoiseKernel::Gaussian, &mut r2);
        assert_eq!(ta.scalar(via_pre).to_bits(), tb.scalar(direct).to_bits());

        // Multi-sample queries average the per-sample estimates.
        let mut r3 = stream(83, Purpose::Noise, 8);
        let mut r4 = r3.clone();
        let mut tc = Tape::new();
        let avg = sched.query(&mut tc, &store, &field, &x, 8, 100, &mut r3, 3);
        let mut td = Tape::new();
        let parts: Vec<NodeId> = (0..3)
            .map(|_| perturb_query(&mut td, &store, &field, &x, 0.1, NoiseKernel::Gaussian, &mut r4))
            .collect();
        let manual = average_nodes(&mut td, &parts);
        assert_eq!(tc.scalar(avg).to_bits(), td.scalar(manual).to_bits());

        // Adaptive mode routes through the grid.
        let grid = AlphaGrid::new(&mut store, &field.domain(), 3, 0.08);
        let pre = Preconditioner::adaptive(NoiseKernel::Gaussian, grid);
        assert_eq!(pre.alpha_at(0, 100), None);
        assert!(pre.alpha_grid().is_some());
        let mut r5 = stream(83, Purpose::Noise, 9);
        let mut r6 = r5.clone();
        let mut te = Tape::new();
        let a = pre.query(&mut te, &store, &field, &x, 0, 100, &mut r5, 1);
        let mut tf = Tape::new();
        let b = perturb_adaptive(&mut tf, &store, &field, pre.alpha_grid().unwrap(), &x, &mut r6);
        assert_eq!(te.scalar(a).to_bits(), tf.scalar(b).to_bits());
    }
}
