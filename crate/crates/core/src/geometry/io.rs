//! Mesh and point-cloud file plumbing: ASCII OBJ in/out and 6-column
//! XYZ+normal text. Parse errors name the offending line.

use std::fmt::Write as _;
use std::path::Path;

use super::{cross3, norm3, sub3, GeometryError, OrientedPointCloud, TriMesh};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GeometryError {
    GeometryError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64, GeometryError> {
    tok.parse::<f64>().map_err(|_| parse_err(path, line, format!("bad number '{tok}'")))
}

/// Loads a triangle mesh from an ASCII OBJ (`v` and `f` statements; faces
/// with more than three vertices are fan-triangulated, `v/vt/vn` index
/// forms are accepted and reduced to the vertex index).
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, GeometryError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next().unwrap() {
            "v" => {
                let mut v = [0.0; 3];
                for c in &mut v {
                    let t = tok
                        .next()
                        .ok_or_else(|| parse_err(path, ln, "vertex needs 3 coordinates"))?;
                    *c = parse_f64(path, ln, t)?;
                }
                vertices.push(v);
            }
            "f" => {
                let idx: Vec<&str> = tok.collect();
                if idx.len() < 3 {
                    return Err(parse_err(path, ln, "face needs at least 3 vertices"));
                }
                let mut resolved = Vec::with_capacity(idx.len());
                for t in idx {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| parse_err(path, ln, format!("bad face index '{t}'")))?;
                    if i < 1 || i as usize > vertices.len() {
                        return Err(parse_err(
                            path,
                            ln,
                            format!("face index {i} out of range 1..={}", vertices.len()),
                        ));
                    }
                    resolved.push((i - 1) as u32);
                }
                for k in 1..resolved.len() - 1 {
                    faces.push([resolved[0], resolved[k], resolved[k + 1]]);
                }
            }
            // Normals, texture coordinates, groups, materials: ignored.
            _ => {}
        }
    }
    // File hygiene: meshes in the wild carry sliver and repeated-index
    // faces; drop anything without usable area.
    faces.retain(|f| {
        let [a, b, c] =
            [vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]];
        norm3(cross3(sub3(b, a), sub3(c, a))) > 1e-12
    });
    if vertices.is_empty() || faces.is_empty() {
        return Err(GeometryError::Invalid(format!(
            "{}: no triangles found",
            path.display()
        )));
    }
    TriMesh::new(vertices, faces)
}

/// Loads an oriented point cloud. `.obj` files must carry a `vn` line per
/// `v` line; anything else is read as whitespace-separated
/// `x y z nx ny nz` rows (or `x y nx ny` for 2D). Normals are renormalized;
/// missing normals are an error since they are required supervision.
pub fn load_points(path: impl AsRef<Path>) -> Result<OrientedPointCloud, GeometryError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("obj") {
        load_points_obj(path, &text)
    } else {
        load_points_columns(path, &text)
    }
}

fn load_points_obj(path: &Path, text: &str) -> Result<OrientedPointCloud, GeometryError> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let kind = tok.next().unwrap();
        if kind != "v" && kind != "vn" {
            continue;
        }
        let dst = if kind == "v" { &mut points } else { &mut normals };
        for _ in 0..3 {
            let t = tok.next().ok_or_else(|| parse_err(path, ln, "expected 3 components"))?;
            dst.push(parse_f64(path, ln, t)?);
        }
    }
    if normals.is_empty() {
        return Err(GeometryError::Invalid(format!(
            "{}: point cloud has no normals (vn lines required)",
            path.display()
        )));
    }
    if normals.len() != points.len() {
        return Err(GeometryError::Invalid(format!(
            "{}: {} vertices but {} normals",
            path.display(),
            points.len() / 3,
            normals.len() / 3
        )));
    }
    OrientedPointCloud::new(3, points, normals)
}

fn load_points_columns(path: &Path, text: &str) -> Result<OrientedPointCloud, GeometryError> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut dim = 0usize;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let row_dim = match cols.len() {
            6 => 3,
            4 => 2,
            n => {
                return Err(parse_err(
                    path,
                    ln,
                    format!("expected 6 columns (or 4 for 2D), found {n}"),
                ))
            }
        };
        if dim == 0 {
            dim = row_dim;
        } else if dim != row_dim {
            return Err(parse_err(path, ln, "mixed 2D and 3D rows"));
        }
        for (k, t) in cols.iter().enumerate() {
            let v = parse_f64(path, ln, t)?;
            if k < dim {
                points.push(v);
            } else {
                normals.push(v);
            }
        }
    }
    if points.is_empty() {
        return Err(GeometryError::Invalid(format!("{}: empty point cloud", path.display())));
    }
    OrientedPointCloud::new(dim, points, normals)
}

/// Writes an ASCII OBJ with `v` and `f` statements (1-based indices).
pub fn save_mesh(path: impl AsRef<Path>, mesh: &TriMesh) -> Result<(), GeometryError> {
    let mut out = String::new();
    for v in mesh.vertices() {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes whitespace-separated `x y z nx ny nz` rows (or the 4-column 2D
/// form), the format [`load_points`] reads back.
pub fn save_points(path: impl AsRef<Path>, cloud: &OrientedPointCloud) -> Result<(), GeometryError> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        for v in cloud.point(i) {
            write!(out, "{v} ").unwrap();
        }
        let n = cloud.normal(i);
        for (k, v) in n.iter().enumerate() {
            if k + 1 == n.len() {
                writeln!(out, "{v}").unwrap();
            } else {
                write!(out, "{v} ").unwrap();
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::icosphere;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    fn write_temp(name: &str, text: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fieldforge-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_obj_parses() {
        let path = write_temp(
            "tri.obj",
            "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n",
        );
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.vertices().len(), 3);
        assert_eq!(m.faces().len(), 1);
        assert_eq!(m.faces()[0], [0, 1, 2]);
    }

    #[test]
    fn sliver_faces_are_dropped_on_import() {
        let path = write_temp(
            "sliver.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 2\nf 1 1 1\n",
        );
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.faces().len(), 1, "repeated-index faces must not survive import");
    }

    #[test]
    fn quads_are_fan_triangulated_and_slash_forms_accepted() {
        let path = write_temp(
            "quad.obj",
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n",
        );
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.faces().len(), 2);
    }

    #[test]
    fn malformed_obj_lines_name_the_line() {
        let cases = [
            ("bad_float.obj", "v 0 0 zebra\n", "3"),
            ("short_vertex.obj", "v 0 0\nf 1 1 1\n", "1"),
            ("zero_index.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", "4"),
            ("oob_index.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", "4"),
        ];
        for (name, text, _) in &cases {
            let path = write_temp(name, text);
            let err = load_mesh(&path).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains(&format!("{name}:")),
                "error should carry the path: {msg}"
            );
        }
        // Line numbers point at the bad statement.
        let path = write_temp("lineno.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n");
        let msg = load_mesh(&path).unwrap_err().to_string();
        assert!(msg.contains(":4:"), "wrong line in: {msg}");
    }

    #[test]
    fn xyz_clouds_load_and_renormalize() {
        let path = write_temp("cloud.xyz", "0 0 0 0 0 2\n1 2 3 0 3 0\n");
        let c = load_points(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dim(), 3);
        assert_relative_eq!(c.normal(0)[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.normal(1)[1], 1.0, epsilon = 1e-12);

        let path2d = write_temp("cloud2d.xyz", "0.1 0.2 1 0\n0.3 0.4 0 -5\n");
        let c2 = load_points(&path2d).unwrap();
        assert_eq!(c2.dim(), 2);
        assert_relative_eq!(c2.normal(1)[1], -1.0, epsilon = 1e-12);

        let bad = write_temp("cloud_bad.xyz", "0 0 0 1 0\n");
        let msg = load_points(&bad).unwrap_err().to_string();
        assert!(msg.contains(":1:"), "{msg}");

        let zero_n = write_temp("cloud_zero.xyz", "0 0 0 0 0 0\n");
        assert!(load_points(&zero_n).is_err());
    }

    #[test]
    fn obj_clouds_require_matching_normals() {
        let ok = write_temp("pc.obj", "v 0 0 0\nvn 0 0 1\nv 1 1 1\nvn 1 0 0\n");
        let c = load_points(&ok).unwrap();
        assert_eq!(c.len(), 2);

        let missing = write_temp("pc_missing.obj", "v 0 0 0\nv 1 1 1\n");
        assert!(load_points(&missing).is_err());

        let mismatch = write_temp("pc_mismatch.obj", "v 0 0 0\nv 1 1 1\nvn 0 0 1\n");
        assert!(load_points(&mismatch).is_err());
    }

    #[test]
    fn mesh_and_cloud_round_trips() {
        let dir = std::env::temp_dir().join("fieldforge-io-tests");
        std::fs::create_dir_all(&dir).unwrap();

        let mesh = icosphere(1, 0.4, [0.5, 0.5, 0.5]);
        let mpath = dir.join("sphere.obj");
        save_mesh(&mpath, &mesh).unwrap();
        let back = load_mesh(&mpath).unwrap();
        assert_eq!(back.vertices().len(), mesh.vertices().len());
        assert_eq!(back.faces(), mesh.faces());
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            for j in 0..3 {
                assert_eq!(a[j], b[j], "vertex coordinates must round-trip exactly");
            }
        }

        let mut rng = stream(115, Purpose::Batch, 0);
        let cloud = crate::geometry::sample_surface(&mesh, 50, &mut rng).unwrap();
        let cpath = dir.join("sphere.xyz");
        save_points(&cpath, &cloud).unwrap();
        let cback = load_points(&cpath).unwrap();
        assert_eq!(cback.len(), cloud.len());
        for i in 0..cloud.len() {
            for j in 0..3 {
                assert_eq!(cback.point(i)[j], cloud.point(i)[j]);
            }
        }
    }
}
