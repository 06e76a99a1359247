//! Deterministic z-buffer rasterization at pixel centers.
//!
//! Interior gradients flow through flat face normals. Silhouette gradients
//! come from a one-pixel screen-space blend across covered/uncovered pixel
//! pairs: where a face edge crosses the segment between the two pixel centers
//! at fraction `t`, the pixel on the far side of the midpoint receives
//! `(t - 0.5) * (covered - uncovered)`.

use super::{face_normal_backward, TriMesh};
use crate::scene::{Camera, Image, Projection, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub face: usize,
    /// Perspective-correct barycentrics; nonnegative and summing to 1.
    pub bary: [f64; 3],
    /// Distance along the viewing axis.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major, `None` on background.
    pub fragments: Vec<Option<Fragment>>,
}

impl Raster {
    pub fn get(&self, row: usize, col: usize) -> Option<&Fragment> {
        self.fragments[row * self.width + col].as_ref()
    }

    pub fn coverage(&self) -> Image {
        let mut img = Image::new(self.width, self.height, 1);
        for (d, f) in img.data.iter_mut().zip(&self.fragments) {
            *d = if f.is_some() { 1.0 } else { 0.0 };
        }
        img
    }

    pub fn covered_count(&self) -> usize {
        self.fragments.iter().filter(|f| f.is_some()).count()
    }
}

/// Edge function of (a, b) at p; positive on the left for y-down pixel axes
/// with counter-clockwise screen winding.
fn edge(a: &Projection, b: &Projection, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

fn project_face(mesh: &TriMesh, cam: &Camera, f: usize) -> Option<[Projection; 3]> {
    let [a, b, c] = mesh.faces[f];
    Some([cam.project(&mesh.verts[a])?, cam.project(&mesh.verts[b])?, cam.project(&mesh.verts[c])?])
}

/// Faces with any vertex behind the camera are skipped; no back-face culling.
pub fn rasterize(mesh: &TriMesh, cam: &Camera) -> Raster {
    let (w, h) = (cam.width, cam.height);
    let mut fragments: Vec<Option<Fragment>> = vec![None; w * h];
    for f in 0..mesh.faces.len() {
        let Some(p) = project_face(mesh, cam, f) else { continue };
        let area = edge(&p[0], &p[1], p[2].x, p[2].y);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let c1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let r1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            let py = row as f64 + 0.5;
            for col in c0..=c1 as usize {
                let px = col as f64 + 0.5;
                let l = [
                    edge(&p[1], &p[2], px, py) / area,
                    edge(&p[2], &p[0], px, py) / area,
                    edge(&p[0], &p[1], px, py) / area,
                ];
                if l.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let persp = [l[0] / p[0].w, l[1] / p[1].w, l[2] / p[2].w];
                let s = persp[0] + persp[1] + persp[2];
                let depth = 1.0 / s;
                let slot = &mut fragments[row * w + col];
                if slot.is_some_and(|old| old.depth <= depth) {
                    continue;
                }
                *slot = Some(Fragment {
                    face: f,
                    bary: [persp[0] / s, persp[1] / s, persp[2] / s],
                    depth,
                });
            }
        }
    }
    Raster {
        width: w,
        height: h,
        fragments,
    }
}

/// Barycentric interpolation of a per-vertex attribute; zero on background.
pub fn interpolate(mesh: &TriMesh, raster: &Raster, attr: &[Vec3]) -> Image {
    let mut img = Image::new(raster.width, raster.height, 3);
    for (i, frag) in raster.fragments.iter().enumerate() {
        if let Some(fr) = frag {
            let v: Vec3 = (0..3).map(|k| attr[mesh.faces[fr.face][k]] * fr.bary[k]).sum();
            img.data[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub face: usize,
    pub position: Vec3,
}

/// Surface point seen through each pixel center (`None` on background).
pub fn ray_mesh_intersect(mesh: &TriMesh, cam: &Camera) -> Vec<Option<Hit>> {
    rasterize(mesh, cam)
        .fragments
        .iter()
        .map(|frag| {
            frag.map(|fr| {
                let [a, b, c] = mesh.faces[fr.face];
                Hit {
                    face: fr.face,
                    position: mesh.verts[a] * fr.bary[0] + mesh.verts[b] * fr.bary[1] + mesh.verts[c] * fr.bary[2],
                }
            })
        })
        .collect()
}

/// Marks, for every covered pixel in every view, the vertex of the hit face
/// with the largest barycentric weight (all of them on ties).
pub fn compute_vertex_visibility(mesh: &TriMesh, cameras: &[Camera]) -> Vec<bool> {
    let mut vis = vec![false; mesh.verts.len()];
    for cam in cameras {
        for fr in rasterize(mesh, cam).fragments.iter().flatten() {
            let max = fr.bary.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for k in 0..3 {
                if fr.bary[k] == max {
                    vis[mesh.faces[fr.face][k]] = true;
                }
            }
        }
    }
    vis
}

/// Per-pixel visibility: interpolated vertex bits thresholded at 0.5.
pub fn render_visibility_map(mesh: &TriMesh, cam: &Camera, visibility: &[bool]) -> Image {
    let raster = rasterize(mesh, cam);
    let mut img = Image::new(raster.width, raster.height, 1);
    for (d, frag) in img.data.iter_mut().zip(&raster.fragments) {
        if let Some(fr) = frag {
            let v: f64 = (0..3)
                .map(|k| if visibility[mesh.faces[fr.face][k]] { fr.bary[k] } else { 0.0 })
                .sum();
            *d = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    img
}

/// One silhouette blend between a covered pixel and an uncovered neighbour.
#[derive(Debug, Clone, PartialEq)]
struct SilhouetteBlend {
    covered: usize,
    uncovered: usize,
    /// Pixel index that received the blend.
    receiver: usize,
    face: usize,
    /// Local corner indices (0..3) of the crossing edge.
    edge: (usize, usize),
    e_covered: f64,
    e_uncovered: f64,
    t: f64,
}

/// Camera-space face normals and antialiased coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRender {
    pub normal: Image,
    pub alpha: Image,
    pub raster: Raster,
    blends: Vec<SilhouetteBlend>,
}

fn pixel_center(idx: usize, width: usize) -> (f64, f64) {
    ((idx % width) as f64 + 0.5, (idx / width) as f64 + 0.5)
}

/// Renders unit camera-space normals (outward faces) and alpha with
/// differentiable silhouettes.
pub fn render_normals(mesh: &TriMesh, cam: &Camera) -> NormalRender {
    let raster = rasterize(mesh, cam);
    let (w, h) = (raster.width, raster.height);
    let face_normals: Vec<Vec3> = (0..mesh.faces.len())
        .map(|f| cam.dir_to_camera(&mesh.face_normal(f)))
        .collect();
    let mut normal = Image::new(w, h, 3);
    let mut alpha = raster.coverage();
    for (i, frag) in raster.fragments.iter().enumerate() {
        if let Some(fr) = frag {
            normal.data[3 * i..3 * i + 3].copy_from_slice(face_normals[fr.face].as_slice());
        }
    }
    let mut blends = Vec::new();
    let mut visit = |a: usize, b: usize| {
        let (covered, uncovered) = match (&raster.fragments[a], &raster.fragments[b]) {
            (Some(_), None) => (a, b),
            (None, Some(_)) => (b, a),
            _ => return,
        };
        let face = raster.fragments[covered].unwrap().face;
        let Some(p) = project_face(mesh, cam, face) else { return };
        let (cx, cy) = pixel_center(covered, w);
        let (ux, uy) = pixel_center(uncovered, w);
        let mut best: Option<SilhouetteBlend> = None;
        for (i, j) in [(1, 2), (2, 0), (0, 1)] {
            let ec = edge(&p[i], &p[j], cx, cy);
            let eu = edge(&p[i], &p[j], ux, uy);
            if ec == 0.0 || ec.signum() == eu.signum() || eu == 0.0 {
                continue;
            }
            let t = ec / (ec - eu);
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(SilhouetteBlend {
                    covered,
                    uncovered,
                    receiver: if t > 0.5 { uncovered } else { covered },
                    face,
                    edge: (i, j),
                    e_covered: ec,
                    e_uncovered: eu,
                    t,
                });
            }
        }
        if let Some(b) = best {
            blends.push(b);
        }
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                visit(i, i + 1);
            }
            if r + 1 < h {
                visit(i, i + w);
            }
        }
    }
    for b in &blends {
        let s = b.t - 0.5;
        alpha.data[b.receiver] += s;
        let n = face_normals[b.face];
        for k in 0..3 {
            normal.data[3 * b.receiver + k] += s * n[k];
        }
    }
    NormalRender {
        normal,
        alpha,
        raster,
        blends,
    }
}

impl NormalRender {
    /// Vertex gradients from upstream gradients on the normal and alpha images.
    pub fn backward(&self, mesh: &TriMesh, cam: &Camera, g_normal: Option<&Image>, g_alpha: Option<&Image>) -> Vec<Vec3> {
        let mut grads = vec![Vec3::zeros(); mesh.verts.len()];
        let mut g_face = vec![Vec3::zeros(); mesh.faces.len()];
        let gn = |i: usize| g_normal.map_or(Vec3::zeros(), |g| Vec3::new(g.data[3 * i], g.data[3 * i + 1], g.data[3 * i + 2]));
        let ga = |i: usize| g_alpha.map_or(0.0, |g| g.data[i]);
        for (i, frag) in self.raster.fragments.iter().enumerate() {
            if let Some(fr) = frag {
                g_face[fr.face] += gn(i);
            }
        }
        for b in &self.blends {
            let s = b.t - 0.5;
            let n_cam = cam.dir_to_camera(&mesh.face_normal(b.face));
            let g_recv = gn(b.receiver);
            g_face[b.face] += g_recv * s;
            // d(contribution)/dt = covered value - uncovered value = (1, n)
            let g_t = ga(b.receiver) + g_recv.dot(&n_cam);
            if g_t == 0.0 {
                continue;
            }
            let w = self.raster.width;
            let (cx, cy) = pixel_center(b.covered, w);
            let (ux, uy) = pixel_center(b.uncovered, w);
            let denom = (b.e_covered - b.e_uncovered).powi(2);
            let (coef_c, coef_u) = (-b.e_uncovered / denom, b.e_covered / denom);
            let (i, j) = b.edge;
            let vi = mesh.faces[b.face][i];
            let vj = mesh.faces[b.face][j];
            let (Some(pi), Some(pj)) = (cam.project(&mesh.verts[vi]), cam.project(&mesh.verts[vj])) else {
                continue;
            };
            let (Some(ji), Some(jj)) = (cam.project_jacobian(&mesh.verts[vi]), cam.project_jacobian(&mesh.verts[vj])) else {
                continue;
            };
            // screen-space derivative of the edge function at a point (px, py)
            let d_edge = |px: f64, py: f64| -> (Vec3, Vec3) {
                let da = (pj.y - py, px - pj.x);
                let db = (py - pi.y, pi.x - px);
                (ji[0] * da.0 + ji[1] * da.1, jj[0] * db.0 + jj[1] * db.1)
            };
            let (dci, dcj) = d_edge(cx, cy);
            let (dui, duj) = d_edge(ux, uy);
            grads[vi] += (dci * coef_c + dui * coef_u) * g_t;
            grads[vj] += (dcj * coef_c + duj * coef_u) * g_t;
        }
        let rt = cam.rotation.transpose();
        for (f, g) in g_face.iter().enumerate() {
            if g.norm_squared() > 0.0 {
                face_normal_backward(mesh, f, &(rt * g), &mut grads);
            }
        }
        grads
    }
}
