//! Procedurally generated test shapes: closed meshes in 3D and a star
//! polygon in 2D, so tests and demos carry no binary assets.

use std::collections::HashMap;

use rand::Rng;

use super::{add3, normalize3, scale3, GeometryError, OrientedPointCloud, TriMesh};

/// Geodesic sphere: an icosahedron subdivided `subdivisions` times, vertices
/// projected onto the sphere. 20 * 4^s faces, watertight, outward winding.
pub fn icosphere(subdivisions: usize, radius: f64, center: [f64; 3]) -> TriMesh {
    assert!(radius > 0.0);
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoints.entry(key).or_insert_with(|| {
                    let m = scale3(add3(vertices[a as usize], vertices[b as usize]), 0.5);
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    for v in &mut vertices {
        *v = add3(scale3(normalize3(*v), radius), center);
    }
    TriMesh::new(vertices, faces).expect("icosphere construction is valid")
}

/// Torus of revolution around the z axis: `major_radius` to the tube
/// center, `minor_radius` of the tube, on a wrapped quad grid.
pub fn torus(
    major_radius: f64,
    minor_radius: f64,
    segments_major: usize,
    segments_minor: usize,
    center: [f64; 3],
) -> TriMesh {
    assert!(major_radius > minor_radius && minor_radius > 0.0);
    assert!(segments_major >= 3 && segments_minor >= 3);
    let (nu, nv) = (segments_major, segments_minor);
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = 2.0 * std::f64::consts::PI * i as f64 / nu as f64;
        for j in 0..nv {
            let v = 2.0 * std::f64::consts::PI * j as f64 / nv as f64;
            let ring = major_radius + minor_radius * v.cos();
            vertices.push(add3(
                [ring * u.cos(), ring * u.sin(), minor_radius * v.sin()],
                center,
            ));
        }
    }
    let idx = |i: usize, j: usize| (i % nu * nv + j % nv) as u32;
    let mut faces = Vec::with_capacity(nu * nv * 2);
    for i in 0..nu {
        for j in 0..nv {
            let (p00, p10, p01, p11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            faces.push([p00, p10, p01]);
            faces.push([p10, p11, p01]);
        }
    }
    TriMesh::new(vertices, faces).expect("torus construction is valid")
}

/// Square frame extruded along z: a box with a rectangular tunnel through
/// it (genus 1). `outer_half`, `inner_half`, and `depth_half` are half-side
/// lengths of the outer square, the hole, and the extrusion.
pub fn box_with_hole(
    outer_half: f64,
    inner_half: f64,
    depth_half: f64,
    center: [f64; 3],
) -> TriMesh {
    assert!(outer_half > inner_half && inner_half > 0.0 && depth_half > 0.0);
    let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    let mut vertices = Vec::with_capacity(16);
    for &z in &[-depth_half, depth_half] {
        for &r in &[outer_half, inner_half] {
            for c in &corners {
                vertices.push(add3([r * c[0], r * c[1], z], center));
            }
        }
    }
    // Index blocks of four: outer bottom 0, inner bottom 4, outer top 8,
    // inner top 12.
    let (ob, ib, ot, it) = (0u32, 4u32, 8u32, 12u32);
    let mut faces = Vec::with_capacity(32);
    for k in 0..4u32 {
        let k1 = (k + 1) % 4;
        // Top annulus, normal +z.
        faces.push([ot + k, ot + k1, it + k1]);
        faces.push([ot + k, it + k1, it + k]);
        // Bottom annulus, normal -z.
        faces.push([ob + k1, ob + k, ib + k]);
        faces.push([ob + k1, ib + k, ib + k1]);
        // Outer wall, normal away from the axis.
        faces.push([ob + k, ob + k1, ot + k1]);
        faces.push([ob + k, ot + k1, ot + k]);
        // Tunnel wall, normal toward the axis.
        faces.push([ib + k1, ib + k, it + k]);
        faces.push([ib + k1, it + k, it + k1]);
    }
    TriMesh::new(vertices, faces).expect("frame construction is valid")
}

/// Simple closed polygon in the plane, counter-clockwise.
#[derive(Debug, Clone)]
pub struct Polygon2 {
    vertices: Vec<[f64; 2]>,
}

impl Polygon2 {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::Invalid("polygon needs at least 3 vertices".into()));
        }
        if !vertices.iter().all(|v| v[0].is_finite() && v[1].is_finite()) {
            return Err(GeometryError::Invalid("non-finite polygon vertex".into()));
        }
        Ok(Self { vertices })
    }

    /// Star with `points` tips alternating between `r_outer` and `r_inner`.
    pub fn star(points: usize, r_outer: f64, r_inner: f64, center: [f64; 2]) -> Self {
        assert!(points >= 3 && r_outer > r_inner && r_inner > 0.0);
        let n = 2 * points;
        let vertices = (0..n)
            .map(|k| {
                let theta = std::f64::consts::PI * (2.0 * k as f64 / n as f64 - 0.5);
                let r = if k % 2 == 0 { r_outer } else { r_inner };
                [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
            })
            .collect();
        Self { vertices }
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn perimeter(&self) -> f64 {
        (0..self.vertices.len()).map(|i| self.edge_length(i)).sum()
    }

    fn edge(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        let a = self.vertices[i];
        let b = self.vertices[(i + 1) % self.vertices.len()];
        (a, b)
    }

    fn edge_length(&self, i: usize) -> f64 {
        let (a, b) = self.edge(i);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    }

    /// Signed distance: negative inside (even-odd rule), magnitude equal to
    /// the distance to the nearest edge.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        let (px, py) = (x[0], x[1]);
        let mut best_sq = f64::INFINITY;
        let mut inside = false;
        for i in 0..self.vertices.len() {
            let (a, b) = self.edge(i);
            // Distance to the segment.
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len_sq = ex * ex + ey * ey;
            let t = if len_sq > 0.0 {
                (((px - a[0]) * ex + (py - a[1]) * ey) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (dx, dy) = (px - a[0] - t * ex, py - a[1] - t * ey);
            best_sq = best_sq.min(dx * dx + dy * dy);
            // Even-odd crossing test.
            if (a[1] > py) != (b[1] > py) {
                let cross_x = a[0] + (py - a[1]) / (b[1] - a[1]) * ex;
                if px < cross_x {
                    inside = !inside;
                }
            }
        }
        let d = best_sq.sqrt();
        if inside {
            -d
        } else {
            d
        }
    }

    /// Length-weighted boundary samples with outward edge normals.
    pub fn sample_boundary(
        &self,
        count: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<OrientedPointCloud, GeometryError> {
        assert!(count >= 1);
        let n = self.vertices.len();
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.edge_length(i);
            cum.push(acc);
        }
        if acc <= 0.0 {
            return Err(GeometryError::Invalid("polygon has zero perimeter".into()));
        }
        let mut points = Vec::with_capacity(count * 2);
        let mut normals = Vec::with_capacity(count * 2);
        for _ in 0..count {
            let target = rng.random_range(0.0..acc);
            let i = cum.partition_point(|&c| c <= target).min(n - 1);
            let (a, b) = self.edge(i);
            let t: f64 = rng.random_range(0.0..1.0);
            points.push(a[0] + t * (b[0] - a[0]));
            points.push(a[1] + t * (b[1] - a[1]));
            // Counter-clockwise boundary keeps the interior on the left, so
            // the outward normal is the travel direction rotated -90°.
            let len = self.edge_length(i);
            normals.push((b[1] - a[1]) / len);
            normals.push(-(b[0] - a[0]) / len);
        }
        OrientedPointCloud::new(2, points, normals)
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for j in 0..2 {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }
}
