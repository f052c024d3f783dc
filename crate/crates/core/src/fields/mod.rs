//! Neural field representations over a rectangular domain.
//!
//! A [`Field`] owns the parameter-block handles of one representation:
//!
//! - `PlainMlp`: coordinates straight into an MLP.
//! - `FourierMlp`: sinusoidal positional encoding, then an MLP.
//! - `HashgridMlp`: multiresolution feature grids (dense at coarse levels,
//!   hashed once a level outgrows its table) with the raw coordinates
//!   appended, then an MLP.
//! - `ReluGrid`: a dense trainable grid read with multilinear interpolation,
//!   optionally rectified.
//!
//! Queries come in two forms that produce identical values: a tape form used
//! for training (differentiable in the parameters and, when the coordinate is
//! itself a node, in the coordinate) and a direct form ([`FieldSampler`]) used
//! for evaluation and extraction.

pub mod encoding;

use arrayvec::ArrayVec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{BlockId, NodeId, ParamStore, Tape};
use encoding::{
    dense_vertex_index, encoded_len, fourier_encode_into, hash_vertex, level_resolutions,
    multilinear_stencil,
};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("geometric initialization unsupported: {0}")]
    GeometricInit(String),
}

/// Axis-aligned domain of a field, one to three axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainBounds {
    dim: usize,
    lo: [f64; 3],
    hi: [f64; 3],
}

impl DomainBounds {
    pub fn new(lo: &[f64], hi: &[f64]) -> Self {
        let dim = lo.len();
        assert!((1..=3).contains(&dim), "domains are 1D to 3D");
        assert_eq!(hi.len(), dim);
        let mut b = Self { dim, lo: [0.0; 3], hi: [1.0; 3] };
        for j in 0..dim {
            assert!(lo[j] < hi[j], "degenerate domain on axis {j}");
            b.lo[j] = lo[j];
            b.hi[j] = hi[j];
        }
        b
    }

    /// The unit square or cube.
    pub fn unit(dim: usize) -> Self {
        Self::new(&vec![0.0; dim], &vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    pub fn diagonal(&self) -> f64 {
        let mut s = 0.0;
        for j in 0..self.dim {
            s += (self.hi[j] - self.lo[j]).powi(2);
        }
        s.sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|j| x[j] >= self.lo[j] && x[j] <= self.hi[j])
    }

    /// Per-axis `(lo, hi)` pairs, for reflection.
    pub fn axis_bounds(&self) -> ArrayVec<(f64, f64), 3> {
        (0..self.dim).map(|j| (self.lo[j], self.hi[j])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprKind {
    PlainMlp,
    FourierMlp,
    HashgridMlp,
    ReluGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourierConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self { num_frequencies: 6, include_input: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashgridConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub table_size_log2: u32,
    pub features_per_level: usize,
}

impl Default for HashgridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            max_resolution: 256,
            table_size_log2: 15,
            features_per_level: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Vertices per axis.
    pub resolution: usize,
    /// Rectify the interpolated value (image-style grids). Disable for
    /// signed fields.
    pub relu_output: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { resolution: 64, relu_output: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub repr: ReprKind,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    /// Frequency scale for the sine activation.
    pub omega: f64,
    pub fourier: FourierConfig,
    pub hashgrid: HashgridConfig,
    pub grid: GridConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            repr: ReprKind::HashgridMlp,
            hidden_width: 64,
            hidden_layers: 2,
            activation: Activation::Relu,
            omega: 30.0,
            fourier: FourierConfig::default(),
            hashgrid: HashgridConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: BlockId,
    b: BlockId,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct HashgridState {
    tables: Vec<BlockId>,
    /// Cells per axis at each level.
    resolutions: Vec<u32>,
    /// Entries actually allocated per level (dense count or table size).
    entries: Vec<u32>,
    features: usize,
}

#[derive(Debug, Clone)]
struct GridState {
    block: BlockId,
    verts: u32,
    relu_output: bool,
}

/// A coordinate being queried: unshifted, shifted by a fixed offset, or
/// shifted by a tape node (so gradients flow into whatever produced the
/// shift).
#[derive(Debug, Clone)]
pub enum QueryShift {
    None,
    Offset(ArrayVec<f64, 3>),
    Node(NodeId),
}

impl QueryShift {
    pub fn offset(d: &[f64]) -> Self {
        QueryShift::Offset(d.iter().copied().collect())
    }
}

/// One field representation bound to blocks in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Field {
    repr: ReprKind,
    dim: usize,
    out_dim: usize,
    domain: DomainBounds,
    neg_lo: ArrayVec<f64, 3>,
    inv_extent: ArrayVec<f64, 3>,
    activation: Activation,
    omega: f64,
    fourier: FourierConfig,
    layers: Vec<Layer>,
    hashgrid: Option<HashgridState>,
    grid: Option<GridState>,
}

impl Field {
    /// Registers and initializes all parameter blocks for `config`. Block
    /// names and registration order are deterministic, so a store loaded from
    /// a checkpoint of the same configuration lines up with the handles.
    pub fn new(
        config: &FieldConfig,
        domain: DomainBounds,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FieldError> {
        if out_dim == 0 {
            return Err(FieldError::Config("out_dim must be at least 1".into()));
        }
        let dim = domain.dim();
        let mut field = Self {
            repr: config.repr,
            dim,
            out_dim,
            domain,
            neg_lo: domain.lo().iter().map(|v| -v).collect(),
            inv_extent: (0..dim)
                .map(|j| 1.0 / (domain.hi()[j] - domain.lo()[j]))
                .collect(),
            activation: config.activation,
            omega: config.omega,
            fourier: config.fourier.clone(),
            layers: Vec::new(),
            hashgrid: None,
            grid: None,
        };

        match config.repr {
            ReprKind::PlainMlp => {
                field.build_mlp(config, dim, out_dim, store, rng)?;
            }
            ReprKind::FourierMlp => {
                let f = &config.fourier;
                if f.num_frequencies == 0 {
                    return Err(FieldError::Config("num_frequencies must be positive".into()));
                }
                let input = encoded_len(dim, f.num_frequencies, f.include_input);
                field.build_mlp(config, input, out_dim, store, rng)?;
            }
            ReprKind::HashgridMlp => {
                let h = &config.hashgrid;
                if h.levels == 0 {
                    return Err(FieldError::Config("hashgrid needs at least one level".into()));
                }
                if h.base_resolution < 1 || h.max_resolution < h.base_resolution {
                    return Err(FieldError::Config(
                        "hashgrid resolutions must satisfy 1 <= base <= max".into(),
                    ));
                }
                if !(1..=8).contains(&h.features_per_level) {
                    return Err(FieldError::Config("features_per_level must be in 1..=8".into()));
                }
                if !(4..=24).contains(&h.table_size_log2) {
                    return Err(FieldError::Config("table_size_log2 must be in 4..=24".into()));
                }
                let resolutions = level_resolutions(h.levels, h.base_resolution, h.max_resolution);
                let table_cap = 1u64 << h.table_size_log2;
                let mut tables = Vec::new();
                let mut entries = Vec::new();
                for (l, &res) in resolutions.iter().enumerate() {
                    let dense = ((res as u64) + 1).pow(dim as u32);
                    let n = dense.min(table_cap) as u32;
                    let vals: Vec<f64> =
                        (0..n as usize * h.features_per_level)
                            .map(|_| rng.random_range(-1e-4..1e-4))
                            .collect();
                    tables.push(store.register(&format!("hashgrid.l{l}"), vals));
                    entries.push(n);
                }
                field.hashgrid = Some(HashgridState {
                    tables,
                    resolutions,
                    entries,
                    features: h.features_per_level,
                });
                let input = h.levels * h.features_per_level + dim;
                field.build_mlp(config, input, out_dim, store, rng)?;
            }
            ReprKind::ReluGrid => {
                let g = &config.grid;
                if g.resolution < 2 {
                    return Err(FieldError::Config("grid resolution must be at least 2".into()));
                }
                let verts = g.resolution as u32;
                let n = (verts as u64).pow(dim as u32) as usize * out_dim;
                let vals: Vec<f64> = (0..n)
                    .map(|_| {
                        if g.relu_output {
                            rng.random_range(0.0..1e-4)
                        } else {
                            rng.random_range(-1e-4..1e-4)
                        }
                    })
                    .collect();
                let block = store.register("grid", vals);
                field.grid = Some(GridState { block, verts, relu_output: g.relu_output });
            }
        }
        Ok(field)
    }

    fn build_mlp(
        &mut self,
        config: &FieldConfig,
        input: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), FieldError> {
        if config.hidden_width == 0 || config.hidden_layers == 0 {
            return Err(FieldError::Config(
                "MLP needs hidden_width >= 1 and hidden_layers >= 1".into(),
            ));
        }
        if config.activation == Activation::Sine && config.omega <= 0.0 {
            return Err(FieldError::Config("omega must be positive".into()));
        }
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        dims.push(out_dim);
        for l in 0..dims.len() - 1 {
            let (cols, rows) = (dims[l], dims[l + 1]);
            let limit = match config.activation {
                Activation::Relu => (6.0 / cols as f64).sqrt(),
                Activation::Sine if l == 0 => 1.0 / cols as f64,
                Activation::Sine => (6.0 / cols as f64).sqrt() / config.omega,
            };
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            let name = if l == dims.len() - 2 { "mlp.out".to_string() } else { format!("mlp.l{l}") };
            let wb = store.register(&format!("{name}.w"), w);
            let bb = store.register(&format!("{name}.b"), vec![0.0; rows]);
            self.layers.push(Layer { w: wb, b: bb, rows, cols });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn domain(&self) -> DomainBounds {
        self.domain
    }

    pub fn repr(&self) -> ReprKind {
        self.repr
    }

    /// Normalizes a coordinate to `[0,1]^m` with the exact arithmetic used on
    /// the tape path.
    fn normalize(&self, x: &[f64], u: &mut ArrayVec<f64, 3>) {
        u.clear();
        for j in 0..self.dim {
            u.push((x[j] + self.neg_lo[j]) * self.inv_extent[j]);
        }
    }

    fn normalize_node(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let shifted = tape.add_vec(x, &self.neg_lo);
        let inv = tape.const_vec(&self.inv_extent);
        tape.mul(shifted, inv)
    }

    /// Hashgrid stencil at one level: vertex element offsets plus weights.
    fn level_rows(
        &self,
        hs: &HashgridState,
        level: usize,
        u: &[f64],
        rows: &mut ArrayVec<u32, 8>,
        stencil: &mut encoding::CornerSet,
    ) {
        let res = hs.resolutions[level];
        let cells: ArrayVec<u32, 3> = (0..self.dim).map(|_| res).collect();
        *stencil = multilinear_stencil(u, &cells);
        let n_entries = hs.entries[level];
        let dense = ((res as u64) + 1).pow(self.dim as u32) <= n_entries as u64;
        rows.clear();
        for c in &stencil.corners {
            let coords = &c[..self.dim];
            let entry = if dense {
                let verts: ArrayVec<u32, 3> = (0..self.dim).map(|_| res + 1).collect();
                dense_vertex_index(coords, &verts)
            } else {
                hash_vertex(coords, n_entries)
            };
            rows.push(entry * hs.features as u32);
        }
    }

    /// Grid stencil: vertex element offsets plus weights.
    fn grid_rows(
        &self,
        gs: &GridState,
        u: &[f64],
        rows: &mut ArrayVec<u32, 8>,
        stencil: &mut encoding::CornerSet,
    ) {
        let cells: ArrayVec<u32, 3> = (0..self.dim).map(|_| gs.verts - 1).collect();
        *stencil = multilinear_stencil(u, &cells);
        let verts: ArrayVec<u32, 3> = (0..self.dim).map(|_| gs.verts).collect();
        rows.clear();
        for c in &stencil.corners {
            let idx = dense_vertex_index(&c[..self.dim], &verts);
            rows.push(idx * self.out_dim as u32);
        }
    }

    /// Tape query at a constant coordinate. Encodings are computed as values;
    /// only parameter-touching ops land on the tape.
    fn query_const(&self, tape: &mut Tape, store: &ParamStore, x: &[f64]) -> NodeId {
        assert_eq!(x.len(), self.dim);
        let mut u = ArrayVec::new();
        self.normalize(x, &mut u);
        match self.repr {
            ReprKind::PlainMlp => {
                let input = self.mlp_input_values(&u);
                let node = tape.const_vec(&input);
                self.mlp_tape(tape, store, node)
            }
            ReprKind::FourierMlp => {
                let mut enc = Vec::with_capacity(encoded_len(
                    self.dim,
                    self.fourier.num_frequencies,
                    self.fourier.include_input,
                ));
                fourier_encode_into(&u, self.fourier.num_frequencies, self.fourier.include_input, &mut enc);
                let node = tape.const_vec(&enc);
                self.mlp_tape(tape, store, node)
            }
            ReprKind::HashgridMlp => {
                let hs = self.hashgrid.as_ref().unwrap();
                let mut parts: Vec<NodeId> = Vec::with_capacity(hs.tables.len() + 1);
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                for level in 0..hs.tables.len() {
                    self.level_rows(hs, level, &u, &mut rows, &mut stencil);
                    let node = tape.gather(store, hs.tables[level], &rows, &stencil.weights, hs.features);
                    parts.push(node);
                }
                parts.push(tape.const_vec(&u));
                let feats = tape.concat(&parts);
                self.mlp_tape(tape, store, feats)
            }
            ReprKind::ReluGrid => {
                let gs = self.grid.as_ref().unwrap();
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                self.grid_rows(gs, &u, &mut rows, &mut stencil);
                let node = tape.gather(store, gs.block, &rows, &stencil.weights, self.out_dim);
                if gs.relu_output {
                    tape.relu(node)
                } else {
                    node
                }
            }
        }
    }

    /// Tape query at a coordinate node (used when the query position itself
    /// is differentiable, e.g. trainable noise amplitudes).
    fn query_node(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let u = self.normalize_node(tape, x);
        match self.repr {
            ReprKind::PlainMlp => {
                let input = match self.activation {
                    Activation::Relu => u,
                    Activation::Sine => {
                        let two = tape.scale(u, 2.0);
                        tape.add_vec(two, &vec![-1.0; self.dim])
                    }
                };
                self.mlp_tape(tape, store, input)
            }
            ReprKind::FourierMlp => {
                let enc = tape.fourier_x(u, self.fourier.num_frequencies, self.fourier.include_input);
                self.mlp_tape(tape, store, enc)
            }
            ReprKind::HashgridMlp => {
                let hs = self.hashgrid.as_ref().unwrap();
                let uv: ArrayVec<f64, 3> = tape.val(u).iter().copied().collect();
                let mut parts: Vec<NodeId> = Vec::with_capacity(hs.tables.len() + 1);
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                for level in 0..hs.tables.len() {
                    self.level_rows(hs, level, &uv, &mut rows, &mut stencil);
                    let node = tape.interp_x(
                        store,
                        hs.tables[level],
                        u,
                        &rows,
                        &stencil.weights,
                        &stencil.dwdu,
                        hs.features,
                    );
                    parts.push(node);
                }
                parts.push(u);
                let feats = tape.concat(&parts);
                self.mlp_tape(tape, store, feats)
            }
            ReprKind::ReluGrid => {
                let gs = self.grid.as_ref().unwrap();
                let uv: ArrayVec<f64, 3> = tape.val(u).iter().copied().collect();
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                self.grid_rows(gs, &uv, &mut rows, &mut stencil);
                let node = tape.interp_x(
                    store,
                    gs.block,
                    u,
                    &rows,
                    &stencil.weights,
                    &stencil.dwdu,
                    self.out_dim,
                );
                if gs.relu_output {
                    tape.relu(node)
                } else {
                    node
                }
            }
        }
    }

    /// Input vector for the plain MLP: normalized coordinates, remapped to
    /// `[-1,1]` for the sine activation.
    fn mlp_input_values(&self, u: &[f64]) -> ArrayVec<f64, 3> {
        match self.activation {
            Activation::Relu => u.iter().copied().collect(),
            Activation::Sine => u.iter().map(|&v| v * 2.0 + (-1.0)).collect(),
        }
    }

    fn mlp_tape(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> NodeId {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = tape.affine(store, layer.w, layer.b, h);
            if l < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Sine => {
                        let scaled = tape.scale(h, self.omega);
                        tape.sin(scaled)
                    }
                };
            }
        }
        h
    }

    /// Direct evaluator sharing the store (no tape, no gradients).
    pub fn sampler<'a>(&'a self, store: &'a ParamStore) -> FieldSampler<'a> {
        let width = self
            .layers
            .iter()
            .map(|l| l.rows.max(l.cols))
            .max()
            .unwrap_or(self.out_dim)
            .max(self.out_dim);
        FieldSampler {
            field: self,
            store,
            a: vec![0.0; width],
            b: vec![0.0; width],
        }
    }
}

/// Reusable direct evaluator for a [`Field`].
pub struct FieldSampler<'a> {
    field: &'a Field,
    store: &'a ParamStore,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl FieldSampler<'_> {
    pub fn out_dim(&self) -> usize {
        self.field.out_dim
    }

    /// Evaluates the field at `x` (domain units) into `out`.
    pub fn eval_into(&mut self, x: &[f64], out: &mut [f64]) {
        let f = self.field;
        assert_eq!(out.len(), f.out_dim);
        let mut u = ArrayVec::new();
        f.normalize(x, &mut u);
        match f.repr {
            ReprKind::PlainMlp => {
                let input = f.mlp_input_values(&u);
                self.mlp_eval(&input, out);
            }
            ReprKind::FourierMlp => {
                let mut enc = Vec::with_capacity(encoded_len(
                    f.dim,
                    f.fourier.num_frequencies,
                    f.fourier.include_input,
                ));
                fourier_encode_into(&u, f.fourier.num_frequencies, f.fourier.include_input, &mut enc);
                self.mlp_eval(&enc, out);
            }
            ReprKind::HashgridMlp => {
                let hs = f.hashgrid.as_ref().unwrap();
                let mut feats = Vec::with_capacity(hs.tables.len() * hs.features + f.dim);
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                for level in 0..hs.tables.len() {
                    f.level_rows(hs, level, &u, &mut rows, &mut stencil);
                    let table = self.store.block(hs.tables[level]);
                    let start = feats.len();
                    feats.resize(start + hs.features, 0.0);
                    for (c, &row) in rows.iter().enumerate() {
                        let w = stencil.weights[c];
                        for j in 0..hs.features {
                            feats[start + j] += w * table[row as usize + j];
                        }
                    }
                }
                feats.extend_from_slice(&u);
                self.mlp_eval(&feats, out);
            }
            ReprKind::ReluGrid => {
                let gs = f.grid.as_ref().unwrap();
                let mut rows = ArrayVec::new();
                let mut stencil = multilinear_stencil(&[0.5], &[1]);
                f.grid_rows(gs, &u, &mut rows, &mut stencil);
                let table = self.store.block(gs.block);
                out.fill(0.0);
                for (c, &row) in rows.iter().enumerate() {
                    let w = stencil.weights[c];
                    for j in 0..f.out_dim {
                        out[j] += w * table[row as usize + j];
                    }
                }
                if gs.relu_output {
                    for v in out.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        }
    }

    /// Scalar convenience for one-channel fields.
    pub fn eval_scalar(&mut self, x: &[f64]) -> f64 {
        let mut out = [0.0];
        self.eval_into(x, &mut out);
        out[0]
    }

    /// Matvec chain with summation order identical to the tape's affine op.
    fn mlp_eval(&mut self, input: &[f64], out: &mut [f64]) {
        let f = self.field;
        let store = self.store;
        let (buf_a, buf_b) = (&mut self.a, &mut self.b);
        let last = f.layers.len() - 1;
        let mut prev_rows = input.len();
        for (l, layer) in f.layers.iter().enumerate() {
            let w = store.block(layer.w);
            let bias = store.block(layer.b);
            let (src, dst): (&[f64], &mut [f64]) = if l % 2 == 0 {
                (&buf_b[..], &mut buf_a[..])
            } else {
                (&buf_a[..], &mut buf_b[..])
            };
            let cur: &[f64] = if l == 0 { input } else { &src[..prev_rows] };
            for r in 0..layer.rows {
                let mut acc = bias[r];
                let wrow = &w[r * layer.cols..(r + 1) * layer.cols];
                for c in 0..layer.cols {
                    acc += wrow[c] * cur[c];
                }
                dst[r] = acc;
            }
            if l < last {
                match f.activation {
                    Activation::Relu => {
                        for v in dst[..layer.rows].iter_mut() {
                            *v = v.max(0.0);
                        }
                    }
                    Activation::Sine => {
                        for v in dst[..layer.rows].iter_mut() {
                            *v = (*v * f.omega).sin();
                        }
                    }
                }
            }
            prev_rows = layer.rows;
        }
        let final_buf: &[f64] = if last % 2 == 0 { buf_a } else { buf_b };
        out.copy_from_slice(&final_buf[..f.out_dim]);
    }
}

/// Queries `field` at `x` under `shift`, reflecting the effective coordinate
/// into the domain. With `QueryShift::None` on an interior point this is the
/// plain field evaluation, bitwise.
pub fn field_query(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field,
    x: &[f64],
    shift: &QueryShift,
) -> NodeId {
    let bounds = field.domain.axis_bounds();
    match shift {
        QueryShift::None => {
            let mut xe = ArrayVec::<f64, 3>::new();
            for j in 0..field.dim {
                xe.push(crate::diffcore::reflect_axis(x[j], bounds[j].0, bounds[j].1).0);
            }
            field.query_const(tape, store, &xe)
        }
        QueryShift::Offset(d) => {
            let mut xe = ArrayVec::<f64, 3>::new();
            for j in 0..field.dim {
                xe.push(crate::diffcore::reflect_axis(x[j] + d[j], bounds[j].0, bounds[j].1).0);
            }
            field.query_const(tape, store, &xe)
        }
        QueryShift::Node(delta) => {
            let shifted = tape.add_vec(*delta, x);
            let reflected = tape.reflect(shifted, &bounds);
            field.query_node(tape, store, reflected)
        }
    }
}

/// Central-difference spatial gradient of a scalar field on the tape.
///
/// All `2m` stencil taps share the same `shift`: under query perturbation the
/// whole stencil moves rigidly, so the finite difference measures the slope
/// of one displaced field realization rather than the difference of two
/// independent ones. Stencil taps are reflected into the domain by
/// [`field_query`].
pub fn spatial_gradient_fd(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field,
    x: &[f64],
    h: f64,
    shift: &QueryShift,
) -> NodeId {
    assert_eq!(field.out_dim, 1, "spatial gradients are for scalar fields");
    assert!(h > 0.0);
    let m = field.dim;
    let mut comps: ArrayVec<NodeId, 3> = ArrayVec::new();
    let mut xp: ArrayVec<f64, 3> = x.iter().copied().collect();
    for j in 0..m {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = field_query(tape, store, field, &xp, shift);
        xp[j] = orig - h;
        let fm = field_query(tape, store, field, &xp, shift);
        xp[j] = orig;
        let diff = tape.sub(fp, fm);
        comps.push(tape.scale(diff, 1.0 / (2.0 * h)));
    }
    tape.concat(&comps)
}


/// Reinitializes an MLP field so its initial output approximates the signed
/// distance to a sphere of radius `bias` (in normalized coordinates) centered
/// in the domain: hidden weights `N(0, sqrt(2/fan_out))` with zero bias, a
/// first-layer bias that centers the domain, and a constant final layer
/// `sqrt(pi/fan_in)` whose bias is `-bias`. Encoded-feature input columns are
/// zeroed so the approximation holds; they regain influence through training.
///
/// Requires a ReLU MLP fed raw coordinates (plain, hashgrid, or Fourier with
/// `include_input`).
pub fn geometric_init(
    field: &Field,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    bias: f64,
) -> Result<(), FieldError> {
    if field.layers.is_empty() {
        return Err(FieldError::GeometricInit("representation has no MLP".into()));
    }
    if field.activation != Activation::Relu {
        return Err(FieldError::GeometricInit(
            "requires the relu activation".into(),
        ));
    }
    if field.out_dim != 1 {
        return Err(FieldError::GeometricInit("field must be scalar".into()));
    }
    let m = field.dim;
    // Columns of the first layer that carry raw coordinates.
    let raw_cols: std::ops::Range<usize> = match field.repr {
        ReprKind::PlainMlp => 0..m,
        ReprKind::FourierMlp => {
            if !field.fourier.include_input {
                return Err(FieldError::GeometricInit(
                    "fourier encoding must include the raw input".into(),
                ));
            }
            0..m
        }
        ReprKind::HashgridMlp => {
            let cols = field.layers[0].cols;
            cols - m..cols
        }
        ReprKind::ReluGrid => unreachable!("no MLP"),
    };

    use rand_distr::{Distribution, Normal};
    let last = field.layers.len() - 1;
    let center = 0.5;
    for (l, layer) in field.layers.iter().enumerate() {
        let sigma = (2.0 / layer.rows as f64).sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        if l == last {
            let c = (std::f64::consts::PI / layer.cols as f64).sqrt();
            store.block_mut(layer.w).fill(c);
            store.block_mut(layer.b).fill(-bias);
        } else if l == 0 {
            let cols = layer.cols;
            {
                let w = store.block_mut(layer.w);
                for r in 0..layer.rows {
                    for c in 0..cols {
                        w[r * cols + c] = if raw_cols.contains(&c) {
                            normal.sample(rng)
                        } else {
                            0.0
                        };
                    }
                }
            }
            // Shift the effective input to u - center.
            let w_snapshot: Vec<f64> = store.block(layer.w).to_vec();
            let b = store.block_mut(layer.b);
            for r in 0..layer.rows {
                let mut dot = 0.0;
                for c in raw_cols.clone() {
                    dot += w_snapshot[r * cols + c] * center;
                }
                b[r] = -dot;
            }
        } else {
            for v in store.block_mut(layer.w).iter_mut() {
                *v = normal.sample(rng);
            }
            store.block_mut(layer.b).fill(0.0);
        }
    }
    Ok(())
}
