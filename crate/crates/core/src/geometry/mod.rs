//! Geometry ingestion and oracles: triangle meshes, oriented point clouds,
//! ground-truth signed distances, surface sampling, and Chamfer distance.
//!
//! Everything here is plain (non-differentiable) geometry; it supplies the
//! supervision and the evaluation metrics for field training. Oracles are
//! immutable after construction and safe to query concurrently.

pub mod io;
pub mod sdf;
pub mod shapes;

use std::collections::HashMap;

use thiserror::Error;

pub use io::{load_mesh, load_points, save_mesh, save_points};
pub use sdf::{SdfHit, SdfOracle};
pub use shapes::{box_with_hole, icosphere, torus, Polygon2};

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Malformed input file; names the offending line.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---- small 3-vector helpers (z = 0 for 2D callers) ----

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    if n == 0.0 {
        a
    } else {
        scale3(a, 1.0 / n)
    }
}

/// Uniform scale plus translation, `y = scale * x + offset`. Normals are
/// unaffected by it (uniform scaling preserves directions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: [0.0; 3] }
    }

    pub fn apply(&self, x: &[f64]) -> arrayvec::ArrayVec<f64, 3> {
        x.iter().enumerate().map(|(j, &v)| self.scale * v + self.offset[j]).collect()
    }

    pub fn inverse(&self) -> Self {
        let s = 1.0 / self.scale;
        Self {
            scale: s,
            offset: [-self.offset[0] * s, -self.offset[1] * s, -self.offset[2] * s],
        }
    }
}

/// Fits a bounding box into the unit cube, centered, leaving `margin` of
/// empty space on every side of the longest axis.
fn fit_transform(lo: &[f64], hi: &[f64], margin: f64) -> Similarity {
    assert!((0.0..0.5).contains(&margin));
    let mut extent: f64 = 0.0;
    for j in 0..lo.len() {
        extent = extent.max(hi[j] - lo[j]);
    }
    let scale = if extent > 0.0 { (1.0 - 2.0 * margin) / extent } else { 1.0 };
    let mut offset = [0.0; 3];
    for j in 0..lo.len() {
        let center = 0.5 * (lo[j] + hi[j]);
        offset[j] = 0.5 - scale * center;
    }
    Similarity { scale, offset }
}

/// Indexed triangle mesh. Construction validates indices and finiteness but
/// never drops faces: callers that produce watertight connectivity (such as
/// level-set extraction) keep it, sliver triangles included. File import is
/// where degenerate faces get cleaned up.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        let n = vertices.len() as u32;
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::Invalid(format!("vertex {i} is not finite")));
            }
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&ix| ix >= n) {
                return Err(GeometryError::Invalid(format!(
                    "face {i} references vertex {} of {n}",
                    f.iter().max().unwrap()
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_vertices(&self, f: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unit face normal (counter-clockwise winding points outward).
    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.face_vertices(f);
        normalize3(cross3(sub3(b, a), sub3(c, a)))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_vertices(f);
        0.5 * norm3(cross3(sub3(b, a), sub3(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for j in 0..3 {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }

    /// Closed, consistently oriented 2-manifold: every directed edge appears
    /// exactly once (so every undirected edge is shared by two faces with
    /// opposite directions).
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let e = (f[k], f[(k + 1) % 3]);
                if e.0 == e.1 {
                    return false;
                }
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        directed.iter().all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// `V - E + F` with undirected edge counting; 2 for a sphere-like
    /// surface, 0 for a torus-like one.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    pub fn transformed(&self, s: &Similarity) -> TriMesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                let t = s.apply(v);
                [t[0], t[1], t[2]]
            })
            .collect();
        TriMesh { vertices, faces: self.faces.clone() }
    }

    /// Rescaled copy fitting the unit cube with `margin` clearance per side,
    /// plus the transform that produced it.
    pub fn normalized_to_unit_cube(&self, margin: f64) -> (TriMesh, Similarity) {
        let (lo, hi) = self.bounds();
        let t = fit_transform(&lo, &hi, margin);
        (self.transformed(&t), t)
    }
}

/// Points with unit normals, in two or three dimensions (flat storage).
#[derive(Debug, Clone)]
pub struct OrientedPointCloud {
    dim: usize,
    points: Vec<f64>,
    normals: Vec<f64>,
}

impl OrientedPointCloud {
    /// Validates finiteness and renormalizes the normals; a zero-length
    /// normal is an error since normals are required supervision.
    pub fn new(dim: usize, points: Vec<f64>, mut normals: Vec<f64>) -> Result<Self, GeometryError> {
        assert!(dim == 2 || dim == 3);
        if points.len() % dim != 0 || normals.len() != points.len() {
            return Err(GeometryError::Invalid(format!(
                "point/normal storage not a multiple of dim {dim}"
            )));
        }
        if points.is_empty() {
            return Err(GeometryError::Invalid("empty point cloud".into()));
        }
        if !points.iter().all(|v| v.is_finite()) || !normals.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite coordinate in point cloud".into()));
        }
        for (i, n) in normals.chunks_exact_mut(dim).enumerate() {
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len < 1e-12 {
                return Err(GeometryError::Invalid(format!("zero-length normal at point {i}")));
            }
            for v in n {
                *v /= len;
            }
        }
        Ok(Self { dim, points, normals })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        &self.normals[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn normals_flat(&self) -> &[f64] {
        &self.normals
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.points.chunks_exact(self.dim) {
            for j in 0..self.dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        for j in self.dim..3 {
            lo[j] = 0.0;
            hi[j] = 0.0;
        }
        (lo, hi)
    }

    pub fn transformed(&self, s: &Similarity) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        for p in self.points.chunks_exact(self.dim) {
            points.extend_from_slice(&s.apply(p));
        }
        Self { dim: self.dim, points, normals: self.normals.clone() }
    }

    /// Rescaled copy fitting the unit square/cube with `margin` clearance,
    /// plus the transform that produced it.
    pub fn normalized_to_unit(&self, margin: f64) -> (Self, Similarity) {
        let (lo, hi) = self.bounds();
        let t = fit_transform(&lo[..self.dim], &hi[..self.dim], margin);
        (self.transformed(&t), t)
    }
}

/// Area-weighted surface sampler with the cumulative face-area table built
/// once, so per-point draws are a binary search. Holds a borrow of the mesh.
pub struct SurfaceSampler<'a> {
    mesh: &'a TriMesh,
    cum: Vec<f64>,
    total: f64,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self, GeometryError> {
        if mesh.faces.is_empty() {
            return Err(GeometryError::Invalid("cannot sample an empty mesh".into()));
        }
        let mut cum = Vec::with_capacity(mesh.faces.len());
        let mut acc = 0.0;
        for f in 0..mesh.faces.len() {
            acc += mesh.face_area(f);
            cum.push(acc);
        }
        if acc <= 0.0 {
            return Err(GeometryError::Invalid("mesh has zero surface area".into()));
        }
        Ok(Self { mesh, cum, total: acc })
    }

    /// One area-weighted point with its face normal.
    pub fn sample_one(&self, rng: &mut rand_chacha::ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
        use rand::Rng;
        let target = rng.random_range(0.0..self.total);
        let f = self.cum.partition_point(|&c| c <= target).min(self.mesh.faces.len() - 1);
        let [a, b, c] = self.mesh.face_vertices(f);
        // Uniform barycentric placement via the square-root trick.
        let r1: f64 = rng.random_range(0.0..1.0);
        let r2: f64 = rng.random_range(0.0..1.0);
        let s = r1.sqrt();
        let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
        let p = add3(add3(scale3(a, u), scale3(b, v)), scale3(c, w));
        (p, self.mesh.face_normal(f))
    }
}

/// Area-weighted surface samples with face normals.
pub fn sample_surface(
    mesh: &TriMesh,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<OrientedPointCloud, GeometryError> {
    assert!(count >= 1);
    let sampler = SurfaceSampler::new(mesh)?;
    let mut points = Vec::with_capacity(count * 3);
    let mut normals = Vec::with_capacity(count * 3);
    for _ in 0..count {
        let (p, n) = sampler.sample_one(rng);
        points.extend_from_slice(&p);
        normals.extend_from_slice(&n);
    }
    OrientedPointCloud::new(3, points, normals)
}

// ---- Chamfer distance ----

const CHAMFER_BRUTE_LIMIT: usize = 10_000;

/// Symmetric Chamfer distance between two point sets in flat `dim`-stride
/// storage: the average of the two directed mean nearest-neighbor
/// distances. Small inputs are measured brute-force, large ones through a
/// uniform grid; the two routes return identical results.
pub fn chamfer(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na <= CHAMFER_BRUTE_LIMIT && nb <= CHAMFER_BRUTE_LIMIT {
        chamfer_brute(a, b, dim)
    } else {
        chamfer_accelerated(a, b, dim)
    }
}

pub fn chamfer_brute(a: &[f64], b: &[f64], dim: usize) -> f64 {
    0.5 * (directed_mean_brute(a, b, dim) + directed_mean_brute(b, a, dim))
}

pub fn chamfer_accelerated(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let gb = PointGrid::build(b, dim);
    let ga = PointGrid::build(a, dim);
    let mean_ab = directed_mean(a, dim, |p| gb.nearest_sq(p));
    let mean_ba = directed_mean(b, dim, |p| ga.nearest_sq(p));
    0.5 * (mean_ab + mean_ba)
}

fn directed_mean(from: &[f64], dim: usize, mut nearest_sq: impl FnMut(&[f64]) -> f64) -> f64 {
    assert!(!from.is_empty(), "chamfer over an empty point set");
    let n = from.len() / dim;
    let mut sum = 0.0;
    for p in from.chunks_exact(dim) {
        sum += nearest_sq(p).sqrt();
    }
    sum / n as f64
}

fn directed_mean_brute(from: &[f64], to: &[f64], dim: usize) -> f64 {
    assert!(!to.is_empty(), "chamfer over an empty point set");
    directed_mean(from, dim, |p| {
        let mut best = f64::INFINITY;
        for q in to.chunks_exact(dim) {
            best = best.min(dist_sq(p, q));
        }
        best
    })
}

fn dist_sq(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Uniform-cell index over a point set for exact nearest-neighbor queries.
struct PointGrid<'a> {
    points: &'a [f64],
    dim: usize,
    lo: [f64; 3],
    cell: [f64; 3],
    res: [i64; 3],
    min_cell: f64,
    cells: Vec<Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    fn build(points: &'a [f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points.chunks_exact(dim) {
            for j in 0..dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let per_axis = (n as f64).powf(1.0 / dim as f64).ceil() as i64;
        let mut res = [1i64; 3];
        let mut cell = [1.0f64; 3];
        let mut min_cell = f64::INFINITY;
        for j in 0..dim {
            res[j] = per_axis.clamp(1, 64);
            let extent = (hi[j] - lo[j]).max(1e-12);
            cell[j] = extent / res[j] as f64;
            min_cell = min_cell.min(cell[j]);
        }
        for j in dim..3 {
            lo[j] = 0.0;
        }
        let total: i64 = res[..dim].iter().product();
        let mut cells = vec![Vec::new(); total as usize];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let c = Self::cell_of(p, dim, &lo, &cell, &res);
            cells[Self::flat(&c, &res, dim)].push(i as u32);
        }
        Self { points, dim, lo, cell, res, min_cell, cells }
    }

    fn cell_of(p: &[f64], dim: usize, lo: &[f64; 3], cell: &[f64; 3], res: &[i64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for j in 0..dim {
            c[j] = (((p[j] - lo[j]) / cell[j]).floor() as i64).clamp(0, res[j] - 1);
        }
        c
    }

    fn flat(c: &[i64; 3], res: &[i64; 3], dim: usize) -> usize {
        let mut idx = 0i64;
        for j in (0..dim).rev() {
            idx = idx * res[j] + c[j];
        }
        idx as usize
    }

    /// Exact squared distance to the nearest indexed point: rings of cells
    /// are scanned outward until no unscanned cell can beat the best hit.
    fn nearest_sq(&self, p: &[f64]) -> f64 {
        let c0 = Self::cell_of(p, self.dim, &self.lo, &self.cell, &self.res);
        let max_ring = self.res[..self.dim].iter().max().unwrap() + 1;
        let mut best = f64::INFINITY;
        for k in 0..=max_ring {
            // Any point in a cell at Chebyshev ring k is at least
            // (k-1) * min_cell away.
            if k >= 1 {
                let bound = (k - 1) as f64 * self.min_cell;
                if bound * bound > best {
                    break;
                }
            }
            self.for_ring_cells(&c0, k, |cell_idx| {
                for &i in &self.cells[cell_idx] {
                    let q = &self.points[i as usize * self.dim..(i as usize + 1) * self.dim];
                    best = best.min(dist_sq(p, q));
                }
            });
        }
        best
    }

    fn for_ring_cells(&self, c0: &[i64; 3], k: i64, mut visit: impl FnMut(usize)) {
        let r = |j: usize| {
            ((c0[j] - k).max(0), (c0[j] + k).min(self.res[j] - 1))
        };
        let on_ring = |c: &[i64; 3], dim: usize| {
            (0..dim).map(|j| (c[j] - c0[j]).abs()).max().unwrap() == k
        };
        match self.dim {
            2 => {
                let (x0, x1) = r(0);
                let (y0, y1) = r(1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let c = [x, y, 0];
                        if on_ring(&c, 2) {
                            visit(Self::flat(&c, &self.res, 2));
                        }
                    }
                }
            }
            3 => {
                let (x0, x1) = r(0);
                let (y0, y1) = r(1);
                let (z0, z1) = r(2);
                for z in z0..=z1 {
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let c = [x, y, z];
                            if on_ring(&c, 3) {
                                visit(Self::flat(&c, &self.res, 3));
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}
