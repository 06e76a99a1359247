//! OBJ and PLY export, OBJ import.

use std::fmt::Write as _;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::scene::Vec3;
use crate::util::atomic_write;

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = String::new();
    for v in &mesh.verts {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    atomic_write(path, s.as_bytes())
}

/// Reads positions and faces; polygons are fan-triangulated, and
/// `v/vt/vn` references and negative indices are accepted.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, what: &str| Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {}: {what}", line + 1),
    };
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.take(3).map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(bad(ln, "vertex needs 3 coordinates"));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| bad(ln, "bad face index"))?;
                    let resolved = if i > 0 { i - 1 } else { verts.len() as i64 + i };
                    if resolved < 0 || resolved as usize >= verts.len() {
                        return Err(bad(ln, "face index out of range"));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(bad(ln, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mesh = TriMesh::new(verts, faces);
    mesh.validate()?;
    Ok(mesh)
}

/// ASCII PLY; per-vertex visibility is written as a `uchar visible` property
/// when present.
pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.verts.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if mesh.vert_visibility.is_some() {
        s.push_str("property uchar visible\n");
    }
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.verts.iter().enumerate() {
        let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
        if let Some(vis) = &mesh.vert_visibility {
            let _ = write!(s, " {}", u8::from(vis[i]));
        }
        s.push('\n');
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = TriMesh::icosphere(0.5, 1);
        let p = dir.path().join("m.obj");
        write_obj(&p, &mesh).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.verts.iter().zip(&mesh.verts) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn obj_quads_and_slashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        std::fs::write(&p, "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 -1//1\n").unwrap();
        let m = read_obj(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        std::fs::write(&p, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(read_obj(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn ply_carries_visibility() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = TriMesh::icosphere(0.5, 0);
        mesh.vert_visibility = Some((0..mesh.verts.len()).map(|i| i % 2 == 0).collect());
        let p = dir.path().join("m.ply");
        write_ply(&p, &mesh).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("property uchar visible"));
        assert!(text.contains(&format!("element face {}", mesh.faces.len())));
        let first = text.lines().skip_while(|l| *l != "end_header").nth(1).unwrap();
        assert!(first.ends_with(" 1"));
    }
}
