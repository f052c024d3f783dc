//! Level-set extraction: marching squares (2D) and marching cubes (3D),
//! with linear interpolation or bisection root-finding on sign-change
//! edges.
//!
//! The cube case table is generated from a face-local pairing rule that
//! depends only on the face's corner signs, so the segments two neighboring
//! cells derive for their shared face always agree and the output mesh is
//! watertight whenever the level set closes inside the domain. Vertices are
//! cached per grid edge, which makes shared vertices exact and extraction
//! deterministic.
//!
//! Bisection consumes only the sign of the field at probe points, so the
//! emitted vertices are invariant under any strictly monotone rescaling of
//! the field that fixes the iso level; linear interpolation is not. That is
//! the point of offering it: fields trained through nonlinear objectives
//! approach the zero set with distorted magnitudes, and interpolating those
//! magnitudes drags vertices off the true surface.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::fields::DomainBounds;
use crate::geometry::TriMesh;

/// How the crossing point along a sign-change edge is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RootFind {
    /// Linear interpolation of the endpoint values.
    LinearInterp,
    /// `steps` rounds of interval halving on the field sign.
    Bisection { steps: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Grid cells per axis.
    pub resolution: usize,
    /// Level to extract.
    pub iso: f64,
    pub root_find: RootFind,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { resolution: 64, iso: 0.0, root_find: RootFind::Bisection { steps: 8 } }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.resolution < 2 {
            return Err("extraction resolution must be at least 2".into());
        }
        if !self.iso.is_finite() {
            return Err("iso level must be finite".into());
        }
        if let RootFind::Bisection { steps } = self.root_find {
            if steps < 1 {
                return Err("bisection needs at least 1 step".into());
            }
        }
        Ok(())
    }
}

/// 2D contour: indexed vertices and the segments connecting them.
#[derive(Debug, Clone, Default)]
pub struct Contour2 {
    vertices: Vec<[f64; 2]>,
    segments: Vec<[u32; 2]>,
}

impl Contour2 {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn segments(&self) -> &[[u32; 2]] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Vertices in flat storage for metric helpers.
    pub fn vertices_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Max and mean distance of emitted vertices to the true level set,
/// measured through a signed-distance oracle. `None` for empty surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexError {
    pub max: f64,
    pub mean: f64,
}

pub fn vertex_error(
    points: &[f64],
    dim: usize,
    mut sdf: impl FnMut(&[f64]) -> f64,
) -> Option<VertexError> {
    if points.is_empty() {
        return None;
    }
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let n = points.len() / dim;
    for p in points.chunks_exact(dim) {
        let e = sdf(p).abs();
        max = max.max(e);
        sum += e;
    }
    Some(VertexError { max, mean: sum / n as f64 })
}

/// Exact-zero corner samples are nudged off the iso level so every cell has
/// an unambiguous sign pattern.
const ZERO_NUDGE: f64 = 1e-12;

fn root_along_edge(
    va: f64,
    vb: f64,
    iso: f64,
    mode: RootFind,
    mut field_at: impl FnMut(f64) -> f64,
) -> f64 {
    match mode {
        RootFind::LinearInterp => (iso - va) / (vb - va),
        RootFind::Bisection { steps } => {
            let inside_a = va < iso;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..steps {
                let mid = 0.5 * (lo + hi);
                if (field_at(mid) < iso) == inside_a {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }
}

// ---- marching squares ----

/// Extracts the `iso` contour of a 2D field sampled on a regular grid.
/// Ambiguous saddle cells are resolved by sampling the cell center.
pub fn marching_squares(
    mut f: impl FnMut(&[f64]) -> f64,
    domain: &DomainBounds,
    config: &ExtractionConfig,
) -> Contour2 {
    assert_eq!(domain.dim(), 2, "marching squares runs on 2D fields");
    config.validate().expect("invalid extraction config");
    let n = config.resolution;
    let iso = config.iso;
    let axes: Vec<Vec<f64>> = (0..2)
        .map(|j| {
            let (lo, hi) = (domain.lo()[j], domain.hi()[j]);
            let h = (hi - lo) / n as f64;
            (0..=n).map(|i| lo + i as f64 * h).collect()
        })
        .collect();
    let stride = n + 1;
    let mut values = vec![0.0f64; stride * stride];
    for j in 0..=n {
        for i in 0..=n {
            let v = f(&[axes[0][i], axes[1][j]]);
            values[j * stride + i] = if v == iso { iso + ZERO_NUDGE } else { v };
        }
    }

    let mut out = Contour2::default();
    // Key: (flat index of the lower grid vertex, axis).
    let mut cache: HashMap<(u32, u8), u32> = HashMap::new();
    let vertex_on = |cache: &mut HashMap<(u32, u8), u32>,
                         out: &mut Contour2,
                         f: &mut dyn FnMut(&[f64]) -> f64,
                         i: usize,
                         j: usize,
                         axis: usize| {
        let key = ((j * stride + i) as u32, axis as u8);
        if let Some(&id) = cache.get(&key) {
            return id;
        }
        let (i2, j2) = if axis == 0 { (i + 1, j) } else { (i, j + 1) };
        let va = values[j * stride + i];
        let vb = values[j2 * stride + i2];
        let pa = [axes[0][i], axes[1][j]];
        let pb = [axes[0][i2], axes[1][j2]];
        let t = root_along_edge(va, vb, iso, config.root_find, |t| {
            f(&[pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])])
        });
        let p = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
        let id = out.vertices.len() as u32;
        out.vertices.push(p);
        cache.insert(key, id);
        id
    };

    for cj in 0..n {
        for ci in 0..n {
            // Corner cycle: (ci,cj) -> (ci+1,cj) -> (ci+1,cj+1) -> (ci,cj+1).
            let corners = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)];
            let inside: Vec<bool> = corners
                .iter()
                .map(|&(i, j)| values[j * stride + i] < iso)
                .collect();
            let crossed: Vec<usize> =
                (0..4).filter(|&k| inside[k] != inside[(k + 1) % 4]).collect();
            if crossed.is_empty() {
                continue;
            }
            // Cycle edge k runs from corner k to corner k+1; map to the grid
            // edge (lower vertex, axis).
            let grid_edge = |k: usize| -> (usize, usize, usize) {
                let (a, b) = (corners[k], corners[(k + 1) % 4]);
                let (i, j) = (a.0.min(b.0), a.1.min(b.1));
                let axis = if a.1 == b.1 { 0 } else { 1 };
                (i, j, axis)
            };
            let emit = |out: &mut Contour2,
                            cache: &mut HashMap<(u32, u8), u32>,
                            f: &mut dyn FnMut(&[f64]) -> f64,
                            ka: usize,
                            kb: usize| {
                let (ia, ja, aa) = grid_edge(ka);
                let (ib, jb, ab) = grid_edge(kb);
                let va = vertex_on(cache, out, f, ia, ja, aa);
                let vb = vertex_on(cache, out, f, ib, jb, ab);
                out.segments.push([va, vb]);
            };
            if crossed.len() == 2 {
                emit(&mut out, &mut cache, &mut f, crossed[0], crossed[1]);
            } else {
                // Saddle: the cell-center sample decides which diagonal the
                // contour wraps. A center on the inside connects the inside
                // corners, so the contour hugs the outside ones.
                let cx = 0.5 * (axes[0][ci] + axes[0][ci + 1]);
                let cy = 0.5 * (axes[1][cj] + axes[1][cj + 1]);
                let center_inside = f(&[cx, cy]) < iso;
                for k in 0..4 {
                    let hug = if center_inside { !inside[k] } else { inside[k] };
                    if hug {
                        emit(&mut out, &mut cache, &mut f, (k + 3) % 4, k);
                    }
                }
            }
        }
    }
    out
}

// ---- marching cubes ----

/// Corner `c` of the unit cube, bit 0 = x, bit 1 = y, bit 2 = z.
fn corner_bits(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// Index of the cube edge joining two corners that differ in one bit.
/// Edges are grouped by axis: indices 0..4 run along x, 4..8 along y,
/// 8..12 along z.
fn edge_index(a: usize, b: usize) -> usize {
    let d = a ^ b;
    debug_assert!(d.count_ones() == 1);
    let axis = d.trailing_zeros() as usize;
    let base = a & !d;
    let packed = match axis {
        0 => base >> 1,
        1 => (base & 1) | ((base >> 2) << 1),
        _ => base & 3,
    };
    axis * 4 + packed
}

/// Endpoint corners of each cube edge, matching [`edge_index`].
const EDGE_ENDS: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Triangulations (as cube-edge index triples) for all 256 corner sign
/// patterns, generated from a face-local segment pairing: on each face the
/// contour segments depend only on that face's corner signs, with saddle
/// faces wrapping the outside corners, so neighboring cells always agree on
/// their shared face.
fn build_case_table() -> Vec<Vec<[u8; 3]>> {
    (0..256u16).map(|mask| build_case(mask as u8)).collect()
}

fn build_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;
    if mask == 0 || mask == 0xff {
        return Vec::new();
    }
    // Contour segments per face, as pairs of cube-edge indices.
    let mut segs: Vec<(usize, usize)> = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let c = |p: usize, q: usize| (side << axis) | (p << u) | (q << v);
            let cyc = [c(0, 0), c(1, 0), c(1, 1), c(0, 1)];
            let crossed: Vec<usize> = (0..4)
                .filter(|&k| inside(cyc[k]) != inside(cyc[(k + 1) % 4]))
                .collect();
            let e = |k: usize| edge_index(cyc[k], cyc[(k + 1) % 4]);
            match crossed.len() {
                0 => {}
                2 => segs.push((e(crossed[0]), e(crossed[1]))),
                4 => {
                    // Alternating signs: wrap the two outside corners, which
                    // keeps the inside region connected across the face. The
                    // rule reads only corner signs, so both incident cells
                    // derive the same pairing.
                    for k in 0..4 {
                        if !inside(cyc[k]) {
                            segs.push((e((k + 3) % 4), e(k)));
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    // Each crossed cube edge appears in exactly two face segments, so the
    // segments decompose into closed loops.
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segs.iter().enumerate() {
        incident.entry(a).or_default().push(s);
        incident.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segs.len()];
    let mut triangles = Vec::new();
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (first, mut current) = segs[start];
        let mut loop_edges = vec![first, current];
        while current != first {
            let s = *incident[&current]
                .iter()
                .find(|&&s| !used[s])
                .expect("crossed edges pair into closed loops");
            used[s] = true;
            let (a, b) = segs[s];
            current = if a == current { b } else { a };
            if current != first {
                loop_edges.push(current);
            }
        }
        orient_loop(&mut loop_edges, mask);
        for k in 1..loop_edges.len() - 1 {
            triangles.push([
                loop_edges[0] as u8,
                loop_edges[k] as u8,
                loop_edges[k + 1] as u8,
            ]);
        }
    }
    triangles
}

/// Reverses the loop if its normal points toward the inside corners; the
/// emitted surface keeps counter-clockwise winding toward the positive
/// (outside) side.
fn orient_loop(loop_edges: &mut [usize], mask: u8) {
    let mid = |e: usize| -> [f64; 3] {
        let (a, b) = EDGE_ENDS[e];
        let (ca, cb) = (corner_bits(a), corner_bits(b));
        [
            0.5 * (ca[0] + cb[0]) as f64,
            0.5 * (ca[1] + cb[1]) as f64,
            0.5 * (ca[2] + cb[2]) as f64,
        ]
    };
    let mut normal = [0.0f64; 3];
    for k in 0..loop_edges.len() {
        let p = mid(loop_edges[k]);
        let q = mid(loop_edges[(k + 1) % loop_edges.len()]);
        normal[0] += p[1] * q[2] - p[2] * q[1];
        normal[1] += p[2] * q[0] - p[0] * q[2];
        normal[2] += p[0] * q[1] - p[1] * q[0];
    }
    let mut inside_c = [0.0f64; 3];
    let mut outside_c = [0.0f64; 3];
    let (mut ni, mut no) = (0.0, 0.0);
    for c in 0..8 {
        let bits = corner_bits(c);
        let dst = if mask >> c & 1 == 1 {
            ni += 1.0;
            &mut inside_c
        } else {
            no += 1.0;
            &mut outside_c
        };
        for j in 0..3 {
            dst[j] += bits[j] as f64;
        }
    }
    let mut dot = 0.0;
    for j in 0..3 {
        dot += normal[j] * (outside_c[j] / no - inside_c[j] / ni);
    }
    if dot < 0.0 {
        loop_edges.reverse();
    }
}

/// Extracts the `iso` level set of a 3D field as a triangle mesh. Vertices
/// are shared through a per-grid-edge cache, so the mesh is watertight
/// whenever the level set closes inside the domain.
pub fn marching_cubes(
    mut f: impl FnMut(&[f64]) -> f64,
    domain: &DomainBounds,
    config: &ExtractionConfig,
) -> TriMesh {
    assert_eq!(domain.dim(), 3, "marching cubes runs on 3D fields");
    config.validate().expect("invalid extraction config");
    let table = build_case_table();
    let n = config.resolution;
    let iso = config.iso;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|j| {
            let (lo, hi) = (domain.lo()[j], domain.hi()[j]);
            let h = (hi - lo) / n as f64;
            (0..=n).map(|i| lo + i as f64 * h).collect()
        })
        .collect();
    let stride = n + 1;
    let mut values = vec![0.0f64; stride * stride * stride];
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                let v = f(&[axes[0][i], axes[1][j], axes[2][k]]);
                values[(k * stride + j) * stride + i] =
                    if v == iso { iso + ZERO_NUDGE } else { v };
            }
        }
    }

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut cache: HashMap<(u32, u8), u32> = HashMap::new();

    for ck in 0..n {
        for cj in 0..n {
            for ci in 0..n {
                let mut mask = 0u8;
                for c in 0..8 {
                    let b = corner_bits(c);
                    let idx = ((ck + b[2]) * stride + cj + b[1]) * stride + ci + b[0];
                    if values[idx] < iso {
                        mask |= 1 << c;
                    }
                }
                let tris = &table[mask as usize];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex_for = |e: usize, f: &mut dyn FnMut(&[f64]) -> f64| -> u32 {
                    let (a, b) = EDGE_ENDS[e];
                    let (ba, bb) = (corner_bits(a), corner_bits(b));
                    let ga = [ci + ba[0], cj + ba[1], ck + ba[2]];
                    let gb = [ci + bb[0], cj + bb[1], ck + bb[2]];
                    let axis = e / 4;
                    let key = (((ga[2] * stride + ga[1]) * stride + ga[0]) as u32, axis as u8);
                    if let Some(&id) = cache.get(&key) {
                        return id;
                    }
                    let va = values[(ga[2] * stride + ga[1]) * stride + ga[0]];
                    let vb = values[(gb[2] * stride + gb[1]) * stride + gb[0]];
                    let pa = [axes[0][ga[0]], axes[1][ga[1]], axes[2][ga[2]]];
                    let pb = [axes[0][gb[0]], axes[1][gb[1]], axes[2][gb[2]]];
                    let t = root_along_edge(va, vb, iso, config.root_find, |t| {
                        f(&[
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ])
                    });
                    let p = [
                        pa[0] + t * (pb[0] - pa[0]),
                        pa[1] + t * (pb[1] - pa[1]),
                        pa[2] + t * (pb[2] - pa[2]),
                    ];
                    let id = vertices.len() as u32;
                    vertices.push(p);
                    cache.insert(key, id);
                    id
                };
                for t in tris {
                    let tri = [
                        vertex_for(t[0] as usize, &mut f),
                        vertex_for(t[1] as usize, &mut f),
                        vertex_for(t[2] as usize, &mut f),
                    ];
                    faces.push(tri);
                }
            }
        }
    }
    TriMesh::new(vertices, faces).expect("extraction emits valid triangles")
}
