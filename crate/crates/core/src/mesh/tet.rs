//! Deformable tetrahedral SDF grid and marching tetrahedra.

use std::collections::HashMap;

use rayon::prelude::*;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::field::{Aabb, DensityField};
use crate::scene::Vec3;

/// Deformations are `DEFORM_LIMIT * spacing * tanh(raw)`.
const DEFORM_LIMIT: f64 = 0.45;

/// The six axis orders; each yields one tet of the cube's Kuhn split.
const AXIS_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    /// Cells per axis.
    pub resolution: usize,
    pub bbox: Aabb,
    /// Positive inside.
    pub sdf: Vec<f64>,
    /// Unbounded deformation parameters; see [`TetGrid::deform`].
    pub deform_raw: Vec<Vec3>,
}

impl TetGrid {
    pub fn new(resolution: usize, bbox: Aabb) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("tet grid resolution must be >= 1".into()));
        }
        let n = (resolution + 1).pow(3);
        Ok(Self {
            resolution,
            bbox,
            sdf: vec![0.0; n],
            deform_raw: vec![Vec3::zeros(); n],
        })
    }

    pub fn num_vertices(&self) -> usize {
        (self.resolution + 1).pow(3)
    }

    pub fn num_tets(&self) -> usize {
        6 * self.resolution.pow(3)
    }

    pub fn spacing(&self) -> Vec3 {
        let r = self.resolution as f64;
        Vec3::new(
            (self.bbox.max[0] - self.bbox.min[0]) / r,
            (self.bbox.max[1] - self.bbox.min[1]) / r,
            (self.bbox.max[2] - self.bbox.min[2]) / r,
        )
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.resolution + 1;
        i + j * n + k * n * n
    }

    pub fn rest_position(&self, v: usize) -> Vec3 {
        let n = self.resolution + 1;
        let (i, j, k) = (v % n, (v / n) % n, v / (n * n));
        let h = self.spacing();
        Vec3::new(
            self.bbox.min[0] + i as f64 * h.x,
            self.bbox.min[1] + j as f64 * h.y,
            self.bbox.min[2] + k as f64 * h.z,
        )
    }

    pub fn deform(&self, v: usize) -> Vec3 {
        let h = self.spacing();
        let r = self.deform_raw[v];
        Vec3::new(
            DEFORM_LIMIT * h.x * r.x.tanh(),
            DEFORM_LIMIT * h.y * r.y.tanh(),
            DEFORM_LIMIT * h.z * r.z.tanh(),
        )
    }

    pub fn position(&self, v: usize) -> Vec3 {
        self.rest_position(v) + self.deform(v)
    }

    /// Corner vertex indices of every tet of cell (i, j, k).
    pub fn cell_tets(&self, i: usize, j: usize, k: usize) -> [[usize; 4]; 6] {
        let base = [i, j, k];
        AXIS_ORDERS.map(|order| {
            let mut c = base;
            let mut tet = [0; 4];
            tet[0] = self.index(c[0], c[1], c[2]);
            for (s, &axis) in order.iter().enumerate() {
                c[axis] += 1;
                tet[s + 1] = self.index(c[0], c[1], c[2]);
            }
            tet
        })
    }

    /// All tets, materialized (intended for small grids and tests).
    pub fn tets(&self) -> Vec<[usize; 4]> {
        let r = self.resolution;
        let mut out = Vec::with_capacity(self.num_tets());
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    out.extend(self.cell_tets(i, j, k));
                }
            }
        }
        out
    }

    pub fn set_sdf_fn(&mut self, f: impl Fn(&Vec3) -> f64 + Sync + Send) {
        let positions: Vec<Vec3> = (0..self.num_vertices()).map(|v| self.rest_position(v)).collect();
        self.sdf = positions.par_iter().map(f).collect();
    }

    fn has_both_signs(&self) -> bool {
        self.sdf.iter().any(|&s| s > 0.0) && self.sdf.iter().any(|&s| s <= 0.0)
    }
}

/// `sdf_i = density(v_i) - threshold`, deformations reset to zero.
pub fn init_sdf_from_density<F: DensityField>(grid: &mut TetGrid, field: &F, threshold: f64) -> Result<()> {
    grid.deform_raw.iter_mut().for_each(|d| *d = Vec3::zeros());
    grid.set_sdf_fn(|p| field.sample(p, false).density - threshold);
    if grid.has_both_signs() {
        Ok(())
    } else {
        Err(Error::EmptySurface)
    }
}

/// Extracted surface plus the grid edge behind every mesh vertex.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub mesh: TriMesh,
    /// (a, b) grid vertices whose edge holds mesh vertex i.
    pub edges: Vec<(usize, usize)>,
}

fn edge_point(pa: &Vec3, pb: &Vec3, sa: f64, sb: f64) -> Vec3 {
    let d = sb - sa;
    pa * (sb / d) - pb * (sa / d)
}

/// Level-set triangles of one tet as (inside, outside) vertex pairs, unoriented.
fn tet_triangles(tet: &[usize; 4], sdf: &[f64]) -> Vec<[(usize, usize); 3]> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = tet.iter().partition(|&&v| sdf[v] > 0.0);
    match (pos.len(), neg.len()) {
        (1, 3) => vec![[(pos[0], neg[0]), (pos[0], neg[1]), (pos[0], neg[2])]],
        (3, 1) => vec![[(pos[0], neg[0]), (pos[1], neg[0]), (pos[2], neg[0])]],
        (2, 2) => {
            let quad = [(pos[0], neg[0]), (pos[0], neg[1]), (pos[1], neg[1]), (pos[1], neg[0])];
            vec![[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
        }
        _ => Vec::new(),
    }
}

/// Triangulates the zero level set of the SDF over the deformed grid.
/// Faces are oriented with normals pointing from inside (positive) to outside.
pub fn marching_tets(grid: &TetGrid) -> Result<Extraction> {
    if !grid.has_both_signs() {
        return Err(Error::EmptySurface);
    }
    let r = grid.resolution;
    let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
    let mut verts = Vec::new();
    let mut edges = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_on = |a: usize, b: usize, verts: &mut Vec<Vec3>, edges: &mut Vec<(usize, usize)>| -> usize {
        let key = (a.min(b), a.max(b));
        // a zero-valued corner is the surface point itself; share it across edges
        let slot = if grid.sdf[b] == 0.0 { (b, b) } else { key };
        *lookup.entry(slot).or_insert_with(|| {
            let (pa, pb) = (grid.position(key.0), grid.position(key.1));
            verts.push(edge_point(&pa, &pb, grid.sdf[key.0], grid.sdf[key.1]));
            edges.push(key);
            verts.len() - 1
        })
    };
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let corners = [
                    grid.index(i, j, k),
                    grid.index(i + 1, j, k),
                    grid.index(i, j + 1, k),
                    grid.index(i + 1, j + 1, k),
                    grid.index(i, j, k + 1),
                    grid.index(i + 1, j, k + 1),
                    grid.index(i, j + 1, k + 1),
                    grid.index(i + 1, j + 1, k + 1),
                ];
                let inside = corners.iter().filter(|&&c| grid.sdf[c] > 0.0).count();
                if inside == 0 || inside == 8 {
                    continue;
                }
                for tet in grid.cell_tets(i, j, k) {
                    let (pos, neg): (Vec<usize>, Vec<usize>) = tet.iter().partition(|&&v| grid.sdf[v] > 0.0);
                    let tris: Vec<[usize; 3]> = tet_triangles(&tet, &grid.sdf)
                        .into_iter()
                        .map(|t| t.map(|(a, b)| vertex_on(a, b, &mut verts, &mut edges)))
                        .collect();
                    if tris.is_empty() {
                        continue;
                    }
                    let centroid = |ids: &[usize]| ids.iter().map(|&v| grid.position(v)).sum::<Vec3>() / ids.len() as f64;
                    let outward = centroid(&neg) - centroid(&pos);
                    for mut t in tris {
                        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                            continue;
                        }
                        let n = (verts[t[1]] - verts[t[0]]).cross(&(verts[t[2]] - verts[t[0]]));
                        if n.dot(&outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        faces.push(t);
                    }
                }
            }
        }
    }
    Ok(Extraction {
        mesh: TriMesh::new(verts, faces),
        edges,
    })
}

impl Extraction {
    /// Pulls mesh-vertex gradients back to (sdf, raw deformation) gradients.
    pub fn backward(&self, grid: &TetGrid, g_verts: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        let mut g_sdf = vec![0.0; grid.num_vertices()];
        let mut g_raw = vec![Vec3::zeros(); grid.num_vertices()];
        let h = grid.spacing();
        for (&(a, b), g) in self.edges.iter().zip(g_verts) {
            let (sa, sb) = (grid.sdf[a], grid.sdf[b]);
            let d = sb - sa;
            let (pa, pb) = (grid.position(a), grid.position(b));
            g_sdf[a] += g.dot(&((pa - pb) * (sb / (d * d))));
            g_sdf[b] += g.dot(&((pb - pa) * (sa / (d * d))));
            for (v, w) in [(a, sb / d), (b, -sa / d)] {
                let raw = grid.deform_raw[v];
                for k in 0..3 {
                    let th = raw[k].tanh();
                    g_raw[v][k] += g[k] * w * DEFORM_LIMIT * h[k] * (1.0 - th * th);
                }
            }
        }
        (g_sdf, g_raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSample;
    use crate::mesh::edge_key;

    fn sphere_grid(res: usize, radius: f64) -> TetGrid {
        let mut g = TetGrid::new(res, Aabb::cube(1.0)).unwrap();
        g.set_sdf_fn(|p| radius - p.norm());
        g
    }

    #[test]
    fn kuhn_split_fills_the_cube_and_conforms() {
        let g = TetGrid::new(2, Aabb::cube(1.0)).unwrap();
        let tets = g.tets();
        assert_eq!(tets.len(), 48);
        let vol: f64 = tets
            .iter()
            .map(|t| {
                let p: Vec<Vec3> = t.iter().map(|&v| g.rest_position(v)).collect();
                ((p[1] - p[0]).cross(&(p[2] - p[0]))).dot(&(p[3] - p[0])).abs() / 6.0
            })
            .sum();
        assert!((vol - 8.0).abs() < 1e-12);
        // every interior triangle is shared by exactly two tets
        let mut count: HashMap<[usize; 3], usize> = HashMap::new();
        for t in &tets {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| t[i]).collect();
                f.sort();
                *count.entry([f[0], f[1], f[2]]).or_default() += 1;
            }
        }
        assert!(count.values().all(|&c| c <= 2));
    }

    #[test]
    fn single_positive_vertex_gives_one_triangle() {
        let sdf = [0.7, -0.2, -1.0, -0.4];
        assert_eq!(tet_triangles(&[0, 1, 2, 3], &sdf).len(), 1);
        assert_eq!(tet_triangles(&[0, 1, 2, 3], &[0.7, 0.2, -1.0, -0.4]).len(), 2);
        assert!(tet_triangles(&[0, 1, 2, 3], &[-0.7, -0.2, -1.0, -0.4]).is_empty());
        let mut g = TetGrid::new(1, Aabb::cube(1.0)).unwrap();
        g.sdf = vec![-1.0; 8];
        g.sdf[0] = 1.0;
        let ex = marching_tets(&g).unwrap();
        // vertex 0 belongs to all six tets, each cut by one triangle
        assert_eq!(ex.mesh.faces.len(), 6);
        let mut one = TetGrid::new(1, Aabb::cube(1.0)).unwrap();
        one.sdf = vec![-1.0; 8];
        one.sdf[1] = 1.0; // corner (1,0,0): in the tets whose first step is +x
        let ex = marching_tets(&one).unwrap();
        assert_eq!(ex.mesh.faces.len(), 2);
    }

    #[test]
    fn sphere_extraction_is_accurate_and_closed() {
        let g = sphere_grid(32, 0.5);
        let ex = marching_tets(&g).unwrap();
        let h = 2.0 / 32.0;
        for v in &ex.mesh.verts {
            assert!((v.norm() - 0.5).abs() < h);
        }
        assert!(ex.mesh.is_watertight());
        assert_eq!(ex.mesh.euler_characteristic(), 2);
        ex.mesh.validate().unwrap();
        for f in 0..ex.mesh.faces.len() {
            let c = ex.mesh.faces[f].iter().map(|&v| ex.mesh.verts[v]).sum::<Vec3>();
            assert!(ex.mesh.face_cross(f).dot(&c) > 0.0, "face {f} points inward");
        }
    }

    #[test]
    fn torus_has_euler_characteristic_zero() {
        let mut g = TetGrid::new(40, Aabb::cube(1.0)).unwrap();
        g.set_sdf_fn(|p| {
            let q = ((p.x * p.x + p.z * p.z).sqrt() - 0.55, p.y);
            0.2 - (q.0 * q.0 + q.1 * q.1).sqrt()
        });
        let ex = marching_tets(&g).unwrap();
        assert!(ex.mesh.is_watertight());
        assert_eq!(ex.mesh.euler_characteristic(), 0);
    }

    #[test]
    fn negated_sdf_flips_orientation_only() {
        let g = sphere_grid(12, 0.55);
        let mut neg = g.clone();
        neg.sdf.iter_mut().for_each(|s| *s = -*s);
        let a = marching_tets(&g).unwrap();
        let b = marching_tets(&neg).unwrap();
        let key = |m: &TriMesh, f: &[usize; 3]| {
            let mut v: Vec<[u64; 3]> = f.iter().map(|&i| m.verts[i].map(|x| x.to_bits()).into()).collect();
            v.sort();
            v
        };
        let mut fa: HashMap<Vec<[u64; 3]>, Vec3> = HashMap::new();
        for (i, f) in a.mesh.faces.iter().enumerate() {
            fa.insert(key(&a.mesh, f), a.mesh.face_cross(i));
        }
        assert_eq!(a.mesh.faces.len(), b.mesh.faces.len());
        for (i, f) in b.mesh.faces.iter().enumerate() {
            let na = fa[&key(&b.mesh, f)];
            assert!(na.dot(&b.mesh.face_cross(i)) < 0.0);
        }
        let _ = edge_key(0, 1);
    }

    #[test]
    fn vertex_gradients_match_finite_differences() {
        let mut g = sphere_grid(8, 0.6);
        for (i, r) in g.deform_raw.iter_mut().enumerate() {
            *r = Vec3::new(0.3 * ((i % 5) as f64 - 2.0), 0.1 * ((i % 3) as f64), -0.2);
        }
        let ex = marching_tets(&g).unwrap();
        let weights: Vec<Vec3> = (0..ex.mesh.verts.len())
            .map(|i| Vec3::new(((i * 7) % 5) as f64 - 2.0, 1.0, ((i * 3) % 4) as f64 * 0.5))
            .collect();
        let loss = |grid: &TetGrid| -> f64 {
            let e = marching_tets(grid).unwrap();
            e.mesh.verts.iter().zip(&weights).map(|(v, w)| v.dot(w)).sum()
        };
        let (g_sdf, g_raw) = ex.backward(&g, &weights);
        let h = 1e-6;
        let mut checked = 0;
        for (&(a, b), _) in ex.edges.iter().zip(0..40) {
            for v in [a, b] {
                let mut p = g.clone();
                p.sdf[v] += h;
                let mut m = g.clone();
                m.sdf[v] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g_sdf[v]).abs() <= 1e-3 * fd.abs().max(1e-8), "sdf {v}: {fd} vs {}", g_sdf[v]);
                let mut p = g.clone();
                p.deform_raw[v].y += h;
                let mut m = g.clone();
                m.deform_raw[v].y -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g_raw[v].y).abs() <= 1e-3 * fd.abs().max(1e-8));
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn density_initialization() {
        struct Ball;
        impl DensityField for Ball {
            fn sample(&self, p: &Vec3, _: bool) -> FieldSample {
                FieldSample {
                    density: if p.norm() < 1.0 { 10.0 } else { 0.0 },
                    ..Default::default()
                }
            }
        }
        let mut g = TetGrid::new(24, Aabb::cube(1.5)).unwrap();
        g.deform_raw[3] = Vec3::new(1.0, 0.0, 0.0);
        init_sdf_from_density(&mut g, &Ball, 5.0).unwrap();
        assert!(g.deform_raw.iter().all(|d| *d == Vec3::zeros()));
        let h = 3.0 / 24.0;
        let ex = marching_tets(&g).unwrap();
        assert!(ex.mesh.verts.iter().all(|v| (v.norm() - 1.0).abs() < h));
        assert!(matches!(init_sdf_from_density(&mut g, &Ball, 11.0), Err(Error::EmptySurface)));
    }
}
