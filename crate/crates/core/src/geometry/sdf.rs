//! Signed distance queries against a triangle mesh.
//!
//! The unsigned part is the exact point-to-triangle distance to the nearest
//! face, found through a uniform-cell triangle index. The sign comes from
//! the angle-weighted pseudonormal at the closest feature (face, edge, or
//! vertex), which is the standard robust choice for watertight meshes: the
//! pseudonormal of a shared feature is identical no matter which incident
//! triangle reported it, so ties cannot flip the sign.

use std::collections::HashMap;

use super::{add3, dot3, normalize3, scale3, sub3, TriMesh};
#[cfg(test)]
use super::norm3;

/// Which part of a triangle the closest point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TriFeature {
    Vert(usize),
    Edge(usize),
    Face,
}

/// Closest point on triangle `abc` to `p` (Ericson's region method).
pub(crate) fn closest_point_on_triangle(
    p: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
) -> ([f64; 3], TriFeature) {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, TriFeature::Vert(0));
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, TriFeature::Vert(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (add3(a, scale3(ab, t)), TriFeature::Edge(0));
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, TriFeature::Vert(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (add3(a, scale3(ac, t)), TriFeature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (add3(b, scale3(sub3(c, b), t)), TriFeature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (add3(a, add3(scale3(ab, v), scale3(ac, w))), TriFeature::Face)
}

/// One signed-distance query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfHit {
    /// Signed distance, negative inside.
    pub signed: f64,
    /// Closest point on the mesh surface.
    pub closest: [f64; 3],
}

/// Immutable signed-distance oracle over a triangle mesh.
pub struct SdfOracle {
    mesh: TriMesh,
    face_normals: Vec<[f64; 3]>,
    vertex_normals: Vec<[f64; 3]>,
    edge_normals: HashMap<(u32, u32), [f64; 3]>,
    watertight: bool,
    degenerate: Vec<bool>,
    grid: TriGrid,
}

impl SdfOracle {
    pub fn new(mesh: TriMesh) -> Self {
        let watertight = mesh.is_watertight();
        // Zero-area faces carry no usable normal and are excluded from both
        // the distance search and the pseudonormal accumulation; their
        // geometry is a segment already covered by neighboring faces.
        let degenerate: Vec<bool> =
            (0..mesh.faces().len()).map(|f| mesh.face_area(f) <= 1e-12).collect();
        let face_normals: Vec<[f64; 3]> = (0..mesh.faces().len())
            .map(|f| if degenerate[f] { [0.0; 3] } else { mesh.face_normal(f) })
            .collect();

        let mut vertex_normals = vec![[0.0; 3]; mesh.vertices().len()];
        let mut edge_normals: HashMap<(u32, u32), [f64; 3]> = HashMap::new();
        for (f, face) in mesh.faces().iter().enumerate() {
            if degenerate[f] {
                continue;
            }
            let vs = mesh.face_vertices(f);
            let n = face_normals[f];
            for k in 0..3 {
                // Angle-weighted accumulation at the corner vertex.
                let e1 = normalize3(sub3(vs[(k + 1) % 3], vs[k]));
                let e2 = normalize3(sub3(vs[(k + 2) % 3], vs[k]));
                let angle = dot3(e1, e2).clamp(-1.0, 1.0).acos();
                let vn = &mut vertex_normals[face[k] as usize];
                *vn = add3(*vn, scale3(n, angle));
                // Each face contributes its normal once per incident edge.
                let (a, b) = (face[k], face[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let en = edge_normals.entry(key).or_insert([0.0; 3]);
                *en = add3(*en, n);
            }
        }
        for vn in &mut vertex_normals {
            *vn = normalize3(*vn);
        }
        for en in edge_normals.values_mut() {
            *en = normalize3(*en);
        }

        let grid = TriGrid::build(&mesh, &degenerate);
        Self { mesh, face_normals, vertex_normals, edge_normals, watertight, degenerate, grid }
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    /// Whether the sign is trustworthy; on open meshes the distance is
    /// still exact but inside/outside is best-effort.
    pub fn watertight(&self) -> bool {
        self.watertight
    }

    /// Signed distance, negative inside.
    pub fn signed(&self, x: &[f64]) -> f64 {
        self.query(x).signed
    }

    pub fn query(&self, x: &[f64]) -> SdfHit {
        let p = [x[0], x[1], x[2]];
        let mut best = Candidate::empty();
        self.grid.visit_near(p, |face, grid_best| {
            self.consider(p, face, grid_best);
        }, &mut best);
        self.finish(p, best)
    }

    /// Signed distance by scanning every face; the reference the grid path
    /// must match.
    pub fn signed_brute(&self, x: &[f64]) -> f64 {
        let p = [x[0], x[1], x[2]];
        let mut best = Candidate::empty();
        for f in 0..self.mesh.faces().len() {
            if !self.degenerate[f] {
                self.consider(p, f as u32, &mut best);
            }
        }
        self.finish(p, best).signed
    }

    fn consider(&self, p: [f64; 3], face: u32, best: &mut Candidate) {
        let [a, b, c] = self.mesh.face_vertices(face as usize);
        let (cp, feature) = closest_point_on_triangle(p, a, b, c);
        let d = sub3(p, cp);
        let d_sq = dot3(d, d);
        if d_sq < best.dist_sq {
            *best = Candidate { dist_sq: d_sq, face, closest: cp, feature };
        }
    }

    fn finish(&self, p: [f64; 3], best: Candidate) -> SdfHit {
        let face = &self.mesh.faces()[best.face as usize];
        let pseudo = match best.feature {
            TriFeature::Face => self.face_normals[best.face as usize],
            TriFeature::Vert(k) => self.vertex_normals[face[k] as usize],
            TriFeature::Edge(k) => {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                self.edge_normals[&(a.min(b), a.max(b))]
            }
        };
        let dist = best.dist_sq.sqrt();
        let sign = if dot3(sub3(p, best.closest), pseudo) < 0.0 { -1.0 } else { 1.0 };
        SdfHit { signed: sign * dist, closest: best.closest }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist_sq: f64,
    face: u32,
    closest: [f64; 3],
    feature: TriFeature,
}

impl Candidate {
    fn empty() -> Self {
        Self { dist_sq: f64::INFINITY, face: 0, closest: [0.0; 3], feature: TriFeature::Face }
    }
}

/// Uniform-cell triangle index. Triangles are binned by bounding box;
/// queries expand cell rings outward until no farther ring can contain a
/// closer face. Faces spanning several cells may be tested more than once,
/// which is harmless.
struct TriGrid {
    lo: [f64; 3],
    cell: [f64; 3],
    res: [i64; 3],
    min_cell: f64,
    cells: Vec<Vec<u32>>,
}

impl TriGrid {
    fn build(mesh: &TriMesh, skip: &[bool]) -> Self {
        let (lo, hi) = mesh.bounds();
        let n = mesh.faces().len().max(1);
        let per_axis = ((n as f64).powf(1.0 / 3.0).ceil() as i64).clamp(1, 48);
        let mut cell = [1.0; 3];
        let mut res = [1i64; 3];
        let mut min_cell = f64::INFINITY;
        for j in 0..3 {
            res[j] = per_axis;
            let extent = (hi[j] - lo[j]).max(1e-9);
            cell[j] = extent / res[j] as f64;
            min_cell = min_cell.min(cell[j]);
        }
        let total = (res[0] * res[1] * res[2]) as usize;
        let mut cells = vec![Vec::new(); total];
        for (f, _) in mesh.faces().iter().enumerate().filter(|&(f, _)| !skip[f]) {
            let vs = mesh.face_vertices(f);
            let mut flo = [f64::INFINITY; 3];
            let mut fhi = [f64::NEG_INFINITY; 3];
            for v in &vs {
                for j in 0..3 {
                    flo[j] = flo[j].min(v[j]);
                    fhi[j] = fhi[j].max(v[j]);
                }
            }
            let c0 = Self::clamp_cell(&flo, &lo, &cell, &res);
            let c1 = Self::clamp_cell(&fhi, &lo, &cell, &res);
            for z in c0[2]..=c1[2] {
                for y in c0[1]..=c1[1] {
                    for x in c0[0]..=c1[0] {
                        cells[Self::flat(&[x, y, z], &res)].push(f as u32);
                    }
                }
            }
        }
        Self { lo, cell, res, min_cell, cells }
    }

    fn clamp_cell(p: &[f64; 3], lo: &[f64; 3], cell: &[f64; 3], res: &[i64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for j in 0..3 {
            c[j] = (((p[j] - lo[j]) / cell[j]).floor() as i64).clamp(0, res[j] - 1);
        }
        c
    }

    fn flat(c: &[i64; 3], res: &[i64; 3]) -> usize {
        ((c[2] * res[1] + c[1]) * res[0] + c[0]) as usize
    }

    fn visit_near(
        &self,
        p: [f64; 3],
        mut consider: impl FnMut(u32, &mut Candidate),
        best: &mut Candidate,
    ) {
        let c0 = Self::clamp_cell(&p, &self.lo, &self.cell, &self.res);
        let max_ring = self.res.iter().max().unwrap() + 1;
        for k in 0..=max_ring {
            if k >= 1 {
                // Everything in ring k is at least (k-1) * min_cell away.
                let bound = (k - 1) as f64 * self.min_cell;
                if bound * bound > best.dist_sq {
                    break;
                }
            }
            let lo = |j: usize| (c0[j] - k).max(0);
            let hi = |j: usize| (c0[j] + k).min(self.res[j] - 1);
            for z in lo(2)..=hi(2) {
                for y in lo(1)..=hi(1) {
                    for x in lo(0)..=hi(0) {
                        let c = [x, y, z];
                        let cheb =
                            (0..3).map(|j| (c[j] - c0[j]).abs()).max().unwrap();
                        if cheb != k {
                            continue;
                        }
                        for &f in &self.cells[Self::flat(&c, &self.res)] {
                            consider(f, best);
                        }
                    }
                }
            }
        }
    }
}
