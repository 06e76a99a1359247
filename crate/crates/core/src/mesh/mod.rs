//! Triangle meshes, the deformable tetrahedral grid they are extracted from,
//! and rasterization.

mod io;
mod raster;
mod tet;

use std::collections::HashMap;

pub use io::{read_obj, write_obj, write_ply};
pub use raster::{
    compute_vertex_visibility, interpolate, ray_mesh_intersect, rasterize, render_normals, render_visibility_map,
    Fragment, Hit, NormalRender, Raster,
};
pub use tet::{init_sdf_from_density, marching_tets, Extraction, TetGrid};

use crate::error::{Error, Result};
use crate::scene::Vec3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub verts: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub vert_visibility: Option<Vec<bool>>,
}

/// Undirected edge key with the smaller index first.
pub fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl TriMesh {
    pub fn new(verts: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self {
            verts,
            faces,
            vert_visibility: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.verts.len()) {
                return Err(Error::ShapeMismatch(format!("face {i} references a missing vertex")));
            }
            if self.face_area(i) <= 1e-12 {
                return Err(Error::ShapeMismatch(format!("face {i} is degenerate")));
            }
        }
        Ok(())
    }

    /// Unnormalized normal `(v1 - v0) x (v2 - v0)`.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        (self.verts[b] - self.verts[a]).cross(&(self.verts[c] - self.verts[a]))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let u = self.face_cross(f);
        let n = u.norm();
        if n > 0.0 {
            u / n
        } else {
            Vec3::zeros()
        }
    }

    /// Faces incident to each undirected edge.
    pub fn edge_faces(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                map.entry(edge_key(f[k], f[(k + 1) % 3])).or_default().push(fi);
            }
        }
        map
    }

    /// Every edge bounds exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_faces().values().all(|f| f.len() == 2)
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.verts.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_faces().len() as i64 + self.faces.len() as i64
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut n: Vec<Vec<usize>> = vec![Vec::new(); self.verts.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if !n[a].contains(&b) {
                    n[a].push(b);
                }
                if !n[b].contains(&a) {
                    n[b].push(a);
                }
            }
        }
        n
    }

    /// Unit sphere-projected subdivided icosahedron.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
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
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
                *mid.entry(edge_key(a, b)).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut verts {
            *v *= radius;
        }
        Self::new(verts, faces)
    }
}

/// Gradient of a unit face normal w.r.t. the face's three vertices.
pub fn face_normal_backward(mesh: &TriMesh, f: usize, g_n: &Vec3, grads: &mut [Vec3]) {
    let [a, b, c] = mesh.faces[f];
    let e1 = mesh.verts[b] - mesh.verts[a];
    let e2 = mesh.verts[c] - mesh.verts[a];
    let u = e1.cross(&e2);
    let len = u.norm();
    if len <= 1e-300 {
        return;
    }
    let n = u / len;
    let g_u = (g_n - n * n.dot(g_n)) / len;
    let g_e1 = e2.cross(&g_u);
    let g_e2 = g_u.cross(&e1);
    grads[b] += g_e1;
    grads[c] += g_e2;
    grads[a] -= g_e1 + g_e2;
}

/// Vertices on an edge with a single incident face.
pub fn boundary_vertices(mesh: &TriMesh) -> Vec<bool> {
    let mut out = vec![false; mesh.verts.len()];
    for ((a, b), f) in mesh.edge_faces() {
        if f.len() == 1 {
            out[a] = true;
            out[b] = true;
        }
    }
    out
}

/// Neighbor lists with open-boundary vertices emptied; those vertices have
/// no umbrella and are left out of Laplacian terms.
fn interior_neighbors(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let mut nbrs = mesh.neighbors();
    for (n, b) in nbrs.iter_mut().zip(boundary_vertices(mesh)) {
        if b {
            n.clear();
        }
    }
    nbrs
}

/// Mean squared uniform-Laplacian magnitude `(1/V) sum |v_i - mean(N(i))|^2`
/// over non-boundary vertices, and its vertex gradient.
pub fn laplacian_energy(mesh: &TriMesh) -> (f64, Vec<Vec3>) {
    let nbrs = interior_neighbors(mesh);
    let nv = mesh.verts.len().max(1) as f64;
    let deltas: Vec<Vec3> = nbrs
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if n.is_empty() {
                Vec3::zeros()
            } else {
                mesh.verts[i] - n.iter().map(|&j| mesh.verts[j]).sum::<Vec3>() / n.len() as f64
            }
        })
        .collect();
    let energy = deltas.iter().map(|d| d.norm_squared()).sum::<f64>() / nv;
    let mut grads = vec![Vec3::zeros(); mesh.verts.len()];
    for (i, n) in nbrs.iter().enumerate() {
        if n.is_empty() {
            continue;
        }
        let g = deltas[i] * (2.0 / nv);
        grads[i] += g;
        let share = g / n.len() as f64;
        for &j in n {
            grads[j] -= share;
        }
    }
    (energy, grads)
}

/// Mean over interior edges of `1 - cos` between the adjacent face normals.
pub fn normal_consistency(mesh: &TriMesh) -> (f64, Vec<Vec3>) {
    let pairs: Vec<(usize, usize)> = mesh
        .edge_faces()
        .into_values()
        .filter(|f| f.len() == 2)
        .map(|f| (f[0], f[1]))
        .collect();
    let mut grads = vec![Vec3::zeros(); mesh.verts.len()];
    if pairs.is_empty() {
        return (0.0, grads);
    }
    let normals: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    let mut g_normals = vec![Vec3::zeros(); mesh.faces.len()];
    for &(a, b) in &pairs {
        value += 1.0 - normals[a].dot(&normals[b]);
        g_normals[a] -= normals[b] * scale;
        g_normals[b] -= normals[a] * scale;
    }
    for (f, g) in g_normals.iter().enumerate() {
        face_normal_backward(mesh, f, g, &mut grads);
    }
    (value * scale, grads)
}

/// One explicit uniform-Laplacian smoothing step with step size `lambda`.
pub fn laplacian_smooth(mesh: &TriMesh, lambda: f64) -> TriMesh {
    let nbrs = interior_neighbors(mesh);
    let verts = mesh
        .verts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if nbrs[i].is_empty() {
                *v
            } else {
                let mean = nbrs[i].iter().map(|&j| mesh.verts[j]).sum::<Vec3>() / nbrs[i].len() as f64;
                v + (mean - v) * lambda
            }
        })
        .collect();
    TriMesh {
        verts,
        ..mesh.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(mesh: &TriMesh, energy: impl Fn(&TriMesh) -> (f64, Vec<Vec3>)) {
        let (_, g) = energy(mesh);
        for (i, k) in [(0usize, 0usize), (5, 1), (17, 2), (30, 0)] {
            let h = 1e-6;
            let mut p = mesh.clone();
            p.verts[i][k] += h;
            let mut m = mesh.clone();
            m.verts[i][k] -= h;
            let fd = (energy(&p).0 - energy(&m).0) / (2.0 * h);
            assert!((fd - g[i][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i][k]);
        }
    }

    fn bumpy() -> TriMesh {
        let mut m = TriMesh::icosphere(1.0, 2);
        for (i, v) in m.verts.iter_mut().enumerate() {
            *v *= 1.0 + 0.05 * ((i * 7) % 5) as f64;
        }
        m
    }

    #[test]
    fn icosphere_is_a_closed_sphere() {
        for s in 0..3 {
            let m = TriMesh::icosphere(1.0, s);
            assert!(m.is_watertight());
            assert_eq!(m.euler_characteristic(), 2);
            m.validate().unwrap();
            // outward orientation
            for f in 0..m.faces.len() {
                let c = m.faces[f].iter().map(|&v| m.verts[v]).sum::<Vec3>();
                assert!(m.face_cross(f).dot(&c) > 0.0);
            }
        }
    }

    #[test]
    fn smoothness_gradients_match_finite_differences() {
        let m = bumpy();
        fd_check(&m, laplacian_energy);
        fd_check(&m, normal_consistency);
    }

    #[test]
    fn flat_plane_has_zero_smoothness_energy() {
        let verts = (0..9).map(|i| Vec3::new((i % 3) as f64, (i / 3) as f64, 0.0)).collect();
        let mut faces = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let v = r * 3 + c;
                faces.push([v, v + 1, v + 4]);
                faces.push([v, v + 4, v + 3]);
            }
        }
        let m = TriMesh::new(verts, faces);
        assert_eq!(normal_consistency(&m).0, 0.0);
        assert_eq!(laplacian_energy(&m).0, 0.0);
    }

    #[test]
    fn smoothing_step_reduces_laplacian_energy() {
        let m = TriMesh::icosphere(1.0, 2);
        let e0 = laplacian_energy(&m).0;
        assert!(e0 > 0.0);
        let e1 = laplacian_energy(&laplacian_smooth(&m, 0.5)).0;
        assert!(e1 < e0);
    }
}
