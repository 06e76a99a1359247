//! Stage 3b: fit a color field on the fixed mesh to the front and back
//! images, fill unseen regions with guidance and patch consistency, then
//! render the turntable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::backview::load_back_view;
use super::geometry::{load_mesh, mesh_path};
use super::preprocess::{load_reference, resize_bundle};
use super::{check_finite, require_file, write_manifest, Run, StageStatus, BACKVIEW_DIR, PREPROCESS_DIR, TEXTURE_DIR};
use crate::error::{Error, Result};
use crate::field::{load_field, save_field, Aabb, FieldParams, PointCache, SampleGrad};
use crate::guidance::{sds_grad_text, sds_grad_view};
use crate::losses::{stage_loss, vpc_loss, LossLog, PatchSample, Stage};
use crate::mesh::{compute_vertex_visibility, ray_mesh_intersect, render_visibility_map, Hit};
use crate::mesh::{write_ply, TriMesh};
use crate::optim::Adam;
use crate::scene::{Camera, Image, Vec3, BACKGROUND};
use crate::util::derive_seed;

pub const STAGE: &str = "texture";

const INIT_STREAM: u64 = 0x7e01;
const VIEW_STREAM: u64 = 0x7e02;
const NOISE_STREAM: u64 = 0x7e03;
const PATCH_STREAM: u64 = 0x7e04;

/// Gradient accumulators for texture backprop; fixed so sums never depend
/// on the thread pool.
const ACCUMULATORS: usize = 4;

pub fn field_path(run: &Run) -> PathBuf {
    run.dir(TEXTURE_DIR).join("field.ctxf")
}

pub fn state_path(run: &Run) -> PathBuf {
    run.dir(TEXTURE_DIR).join("state.ctxs")
}

pub fn load_texture_field(run: &Run) -> Result<FieldParams> {
    let p = field_path(run);
    require_file(&p, "texture")?;
    load_field(&p)
}

pub fn init_field(run: &Run) -> Result<FieldParams> {
    FieldParams::init(
        run.cfg.texture.field.clone(),
        Aabb::cube(run.cfg.coarse.bound),
        derive_seed(run.cfg.seed, &[INIT_STREAM]),
    )
}

/// Texture colors at `points`, evaluated in parallel.
pub fn shade_points(field: &FieldParams, points: &[Vec3]) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let per = points.len().div_ceil(ACCUMULATORS);
    let parts: Vec<Result<Vec<[f64; 3]>>> = points.par_chunks(per).map(|c| field.query_texture(c)).collect();
    let mut out = Vec::with_capacity(points.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Parameter gradient of `sum_i g_i . color(p_i)`.
pub fn texture_backward(field: &FieldParams, points: &[Vec3], grads: &[[f64; 3]]) -> Vec<f64> {
    let work: Vec<(Vec3, [f64; 3])> = points
        .iter()
        .zip(grads)
        .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
        .map(|(p, g)| (*p, *g))
        .collect();
    let mut total = field.zero_grad();
    if work.is_empty() {
        return total;
    }
    let per = work.len().div_ceil(ACCUMULATORS);
    let parts: Vec<Vec<f64>> = work
        .par_chunks(per)
        .map(|chunk| {
            let mut acc = field.zero_grad();
            let mut cache = PointCache::default();
            for (p, g) in chunk {
                field.eval(p, false, &mut cache);
                let sg = SampleGrad {
                    rgb: *g,
                    ..Default::default()
                };
                field.backward(&cache, &sg, &mut acc);
            }
            acc
        })
        .collect();
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// A textured mesh rendered from one camera; background stays white.
pub struct Shaded {
    pub rgb: Image,
    pub coverage: Image,
    /// Covered pixel indices and their surface points.
    pub pixels: Vec<usize>,
    pub points: Vec<Vec3>,
}

pub fn shade_hits(field: &FieldParams, hits: &[Option<Hit>], width: usize, height: usize) -> Result<Shaded> {
    let (pixels, points): (Vec<usize>, Vec<Vec3>) = hits
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.as_ref().map(|h| (i, h.position)))
        .unzip();
    let colors = shade_points(field, &points)?;
    let mut rgb = Image::new(width, height, 3);
    for px in rgb.data.chunks_exact_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    let mut coverage = Image::new(width, height, 1);
    for (&p, c) in pixels.iter().zip(&colors) {
        rgb.data[3 * p..3 * p + 3].copy_from_slice(c);
        coverage.data[p] = 1.0;
    }
    Ok(Shaded {
        rgb,
        coverage,
        pixels,
        points,
    })
}

pub fn shade(field: &FieldParams, mesh: &TriMesh, cam: &Camera) -> Result<Shaded> {
    shade_hits(field, &ray_mesh_intersect(mesh, cam), cam.width, cam.height)
}

/// Supervision from one known view: surface points and target colors of
/// pixels that are both covered by the mesh and inside the target silhouette.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    /// Pixel count of the view, the normalizer of the squared error.
    pub num_pixels: usize,
}

impl ViewTarget {
    pub fn new(mesh: &TriMesh, cam: &Camera, rgb: &Image, alpha: &Image) -> Self {
        let hits = ray_mesh_intersect(mesh, cam);
        let mut points = Vec::new();
        let mut colors = Vec::new();
        for (p, h) in hits.iter().enumerate() {
            if let Some(h) = h {
                if alpha.data[p] >= 0.5 {
                    points.push(h.position);
                    colors.push([rgb.data[3 * p], rgb.data[3 * p + 1], rgb.data[3 * p + 2]]);
                }
            }
        }
        Self {
            points,
            colors,
            num_pixels: cam.width * cam.height,
        }
    }
}

/// Everything the texture objective needs besides the field.
pub struct TextureProblem {
    pub mesh: TriMesh,
    pub visibility: Vec<bool>,
    pub front_cam: Camera,
    pub targets: Vec<ViewTarget>,
    /// Reference image for view-conditioned guidance.
    pub reference: Image,
}

impl TextureProblem {
    pub fn new(mesh: TriMesh, front_cam: Camera, front: (&Image, &Image), back: (&Image, &Image)) -> Self {
        let back_cam = front_cam.back_view();
        let visibility = compute_vertex_visibility(&mesh, &[front_cam.clone(), back_cam.clone()]);
        let targets = vec![
            ViewTarget::new(&mesh, &front_cam, front.0, front.1),
            ViewTarget::new(&mesh, &back_cam, back.0, back.1),
        ];
        Self {
            mesh,
            visibility,
            front_cam,
            targets,
            reference: front.0.clone(),
        }
    }
}

pub struct TextureStep {
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Patch origin with its centre drawn uniformly inside the coverage's bounding box.
fn sample_patch_origin<R: Rng>(coverage: &Image, size: usize, rng: &mut R) -> Option<(usize, usize)> {
    let (w, h) = (coverage.width, coverage.height);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if coverage.data[r * w + c] > 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    let cr = rng.random_range(r0..=r1);
    let cc = rng.random_range(c0..=c1);
    let clamp = |center: usize, len: usize| center.saturating_sub(size / 2).min(len - size);
    Some((clamp(cr, h), clamp(cc, w)))
}

pub fn texture_step(run: &Run, field: &FieldParams, problem: &TextureProblem, step: usize) -> Result<TextureStep> {
    let cfg = &run.cfg;
    let tex = &cfg.texture;
    let [(_, w_view), (_, w_text), (_, w_rgb), (_, w_vpc)] = cfg.weights.active(Stage::Texture, step);
    let mut components = BTreeMap::new();
    let mut grad = field.zero_grad();
    let mut add = |g: Vec<f64>| {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    };

    // Squared error against the front and back images.
    let mut rgb = 0.0;
    for t in &problem.targets {
        let colors = shade_points(field, &t.points)?;
        let n = t.num_pixels as f64;
        let mut g = Vec::with_capacity(colors.len());
        for (c, target) in colors.iter().zip(&t.colors) {
            let d = [0, 1, 2].map(|k| c[k] - target[k]);
            rgb += d.iter().map(|v| v * v).sum::<f64>() / n;
            g.push(d.map(|v| w_rgb * 2.0 * v / n));
        }
        if w_rgb != 0.0 {
            add(texture_backward(field, &t.points, &g));
        }
    }
    components.insert("rgb".to_string(), rgb);

    if w_view != 0.0 || w_text != 0.0 || w_vpc != 0.0 {
        let res = tex.resolution;
        let sampler = run.sampler(cfg.camera.fine_elevation_deg, res, VIEW_STREAM);
        let batch = tex.sds_batch.max(1);
        let (mut s_view, mut s_text, mut s_vpc) = (0.0, 0.0, 0.0);
        for b in 0..batch {
            let cam = sampler.sample_indexed(step as u64, b as u64);
            let shaded = shade(field, &problem.mesh, &cam)?;
            let mut pix_grad = vec![[0.0; 3]; res * res];
            let norm = 1.0 / batch as f64;
            if w_view != 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[NOISE_STREAM, step as u64, b as u64, 0]));
                let out = sds_grad_view(
                    run.backend.as_ref(),
                    &run.schedule,
                    &shaded.rgb,
                    &problem.reference,
                    cam.relative_to(&problem.front_cam),
                    &tex.view_sds,
                    &mut rng,
                )?;
                s_view += out.surrogate * norm;
                for (g, d) in pix_grad.iter_mut().zip(out.grad.data.chunks_exact(3)) {
                    for (gk, dk) in g.iter_mut().zip(d) {
                        *gk += w_view * norm * dk;
                    }
                }
            }
            if w_text != 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[NOISE_STREAM, step as u64, b as u64, 1]));
                let out = sds_grad_text(run.backend.as_ref(), &run.schedule, &shaded.rgb, &cfg.prompt, &tex.text_sds, &mut rng)?;
                s_text += out.surrogate * norm;
                for (g, d) in pix_grad.iter_mut().zip(out.grad.data.chunks_exact(3)) {
                    for (gk, dk) in g.iter_mut().zip(d) {
                        *gk += w_text * norm * dk;
                    }
                }
            }
            if w_vpc != 0.0 && tex.patches_per_step > 0 {
                let vis = render_visibility_map(&problem.mesh, &cam, &problem.visibility);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[PATCH_STREAM, step as u64, b as u64]));
                let per_patch = norm / tex.patches_per_step as f64;
                for _ in 0..tex.patches_per_step {
                    let Some(origin) = sample_patch_origin(&shaded.coverage, tex.patch_size, &mut rng) else {
                        break;
                    };
                    let patch = PatchSample::extract(&shaded.rgb, &vis, Some(&shaded.coverage), origin, tex.patch_size)?;
                    let r = vpc_loss(&patch)?;
                    s_vpc += r.value * per_patch;
                    for (i, g) in r.grad.iter().enumerate() {
                        let (pr, pc) = (origin.0 + i / tex.patch_size, origin.1 + i % tex.patch_size);
                        for k in 0..3 {
                            pix_grad[pr * res + pc][k] += w_vpc * per_patch * g[k];
                        }
                    }
                }
            }
            // Only covered pixels depend on the field.
            let g: Vec<[f64; 3]> = shaded.pixels.iter().map(|&p| pix_grad[p]).collect();
            add(texture_backward(field, &shaded.points, &g));
        }
        if w_view != 0.0 {
            components.insert("sds_view".to_string(), s_view);
        }
        if w_text != 0.0 {
            components.insert("sds_text".to_string(), s_text);
        }
        if w_vpc != 0.0 {
            components.insert("vpc".to_string(), s_vpc);
        }
    }
    let total = stage_loss(Stage::Texture, &components, &cfg.weights, step)?;
    Ok(TextureStep {
        components,
        total,
        grad,
    })
}

pub fn load_problem(run: &Run) -> Result<TextureProblem> {
    let res = run.cfg.texture.resolution;
    let front = resize_bundle(&load_reference(run)?, res);
    let back = resize_bundle(&load_back_view(run)?, res);
    let mesh = load_mesh(run)?;
    Ok(TextureProblem::new(
        mesh,
        run.reference_camera(res)?,
        (&front.rgb, &front.alpha),
        (&back.rgb, &back.alpha),
    ))
}

pub fn run_texture(run: &Run) -> Result<StageStatus> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let dir = run.dir(TEXTURE_DIR);
    std::fs::create_dir_all(&dir)?;
    let problem = load_problem(run)?;
    let mut mesh = problem.mesh.clone();
    mesh.vert_visibility = Some(problem.visibility.clone());
    write_ply(&dir.join("mesh_visibility.ply"), &mesh)?;

    let mut field = init_field(run)?;
    let mut opt = Adam::new(field.params.len(), cfg.texture.lr);
    let mut start = 0;
    if let Some(ck) = run.resume_state(STAGE, &state_path(run))? {
        field = FieldParams::from_params(field.config.clone(), field.bbox, None, ck.params)?;
        opt = ck.optimizer;
        start = ck.step;
    }
    let log_path = dir.join("loss.csv");
    let mut log = if start > 0 { LossLog::append(&log_path)? } else { LossLog::create(&log_path)? };
    let total_steps = cfg.texture.steps + cfg.texture.refine_steps;
    let mut status = StageStatus::Complete;
    for step in start..total_steps {
        let r = texture_step(run, &field, &problem, step)?;
        if !r.total.is_finite() || check_finite(&r.grad, step).is_err() {
            run.save_state(STAGE, &state_path(run), step, &field.params, &opt)?;
            log.flush()?;
            return Err(Error::Diverged { step });
        }
        opt.update(&mut field.params, &r.grad)?;
        let mut row = r.components;
        row.insert("total".into(), r.total);
        log.record(step, &row)?;
        let done = step + 1;
        if step % 25 == 0 || done == total_steps {
            log::info!("texture step {done}/{total_steps}: loss {:.5}", r.total);
        }
        if run.should_save(done, cfg.texture.checkpoint_every, total_steps) {
            run.save_state(STAGE, &state_path(run), done, &field.params, &opt)?;
        }
        if run.opts.stop_after == Some(done) && done < total_steps {
            status = StageStatus::Stopped { step: done };
            break;
        }
    }
    log.flush()?;
    let mut outputs = vec![state_path(run), log_path, dir.join("mesh_visibility.ply")];
    if status == StageStatus::Complete {
        save_field(&field_path(run), &field)?;
        outputs.push(field_path(run));
        outputs.extend(render_outputs(run)?);
    }
    let inputs = [
        mesh_path(run),
        run.dir(PREPROCESS_DIR).join("rgb.png"),
        run.dir(BACKVIEW_DIR).join("back_rgb.png"),
    ];
    write_manifest(run, TEXTURE_DIR, &inputs, &outputs, started, status)?;
    Ok(status)
}

pub fn turntable_dir(run: &Run) -> PathBuf {
    run.dir(TEXTURE_DIR).join("turntable")
}

pub fn eval_views_dir(run: &Run) -> PathBuf {
    run.dir(TEXTURE_DIR).join("views")
}

/// Evenly spaced azimuths starting at the reference view.
pub fn orbit_cameras(run: &Run, count: usize, res: usize) -> Result<Vec<Camera>> {
    let c = &run.cfg.camera;
    (0..count)
        .map(|i| {
            Camera::orbit(
                run.cfg.output.turntable_elevation_deg,
                c.reference_azimuth_deg + 360.0 * i as f64 / count as f64,
                c.distance,
                c.fov_deg,
                res,
                res,
            )
        })
        .collect()
}

fn render_views(field: &FieldParams, mesh: &TriMesh, cams: &[Camera], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    cams.iter()
        .enumerate()
        .map(|(i, cam)| {
            let p = dir.join(format!("view_{i:02}.png"));
            shade(field, mesh, cam)?.rgb.save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Renders the turntable and the evaluation views from the saved mesh and texture.
pub fn render_outputs(run: &Run) -> Result<Vec<PathBuf>> {
    let field = load_texture_field(run)?;
    let mesh = load_mesh(run)?;
    let res = run.cfg.texture.resolution;
    let out = &run.cfg.output;
    let mut written = render_views(&field, &mesh, &orbit_cameras(run, out.turntable_views, res)?, &turntable_dir(run))?;
    written.extend(render_views(&field, &mesh, &orbit_cameras(run, out.eval_views, res)?, &eval_views_dir(run))?);
    Ok(written)
}
