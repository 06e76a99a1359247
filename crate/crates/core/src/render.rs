//! Differentiable volume rendering of density/color fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{normal_from_gradient, DensityField, FieldParams, FieldSample, PointCache, SampleGrad};
use crate::scene::{Camera, Image, ImageBundle, Ray, Vec3, BACKGROUND};
use crate::util::derive_seed;

/// Transmittance below which the remaining samples of a ray are skipped.
const EARLY_STOP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayMarchConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Default for RayMarchConfig {
    fn default() -> Self {
        Self::for_distance(3.8, 512)
    }
}

impl RayMarchConfig {
    /// Near/far bracketing a unit-radius scene seen from `distance`.
    pub fn for_distance(distance: f64, samples_per_ray: usize) -> Self {
        Self {
            samples_per_ray,
            near: distance - 1.5,
            far: distance + 1.5,
            background: BACKGROUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::InvalidArgument("samples_per_ray must be >= 2".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "near ({}) must be < far ({})",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Per-call rendering switches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderOptions {
    /// Composite density-gradient normals (costs three extra tangent passes).
    pub normals: bool,
    /// Stratified jitter seed; `None` samples interval midpoints.
    pub jitter: Option<u64>,
}

impl RenderOptions {
    pub fn eval() -> Self {
        Self {
            normals: true,
            jitter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayOutput {
    pub rgb: [f64; 3],
    pub alpha: f64,
    /// Unit normal in camera space, zero on background.
    pub normal: Vec3,
    /// Expected ray distance, zero on background.
    pub depth: f64,
}

/// Upstream gradient of one pixel's outputs. Depth is not differentiated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PixelGrad {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub normal: Vec3,
}

impl PixelGrad {
    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.rgb.iter().all(|&v| v == 0.0) && self.normal.norm_squared() == 0.0
    }
}

struct Samples {
    t: Vec<f64>,
    delta: f64,
}

fn ray_samples(
    ray: &Ray,
    cfg: &RayMarchConfig,
    bounds: Option<crate::field::Aabb>,
    jitter: Option<u64>,
    pixel: usize,
) -> Samples {
    let (mut lo, mut hi) = (cfg.near, cfg.far);
    if let Some(b) = bounds {
        match b.intersect(&ray.origin, &ray.dir) {
            Some((a, z)) => {
                lo = lo.max(a);
                hi = hi.min(z);
            }
            None => hi = lo,
        }
    }
    if hi <= lo {
        return Samples {
            t: Vec::new(),
            delta: 0.0,
        };
    }
    let n = cfg.samples_per_ray;
    let delta = (hi - lo) / n as f64;
    let t = match jitter {
        None => (0..n).map(|i| lo + (i as f64 + 0.5) * delta).collect(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[pixel as u64]));
            (0..n).map(|i| lo + (i as f64 + rng.random::<f64>()) * delta).collect()
        }
    };
    Samples { t, delta }
}

/// Compositing state of one ray, kept for the backward pass.
#[derive(Default)]
struct Composite {
    weights: Vec<f64>,
    /// Transmittance after each sample.
    trans_after: Vec<f64>,
    /// Camera-space normal and |grad density| per sample (0 when degenerate).
    normals: Vec<(Vec3, f64)>,
    colors: Vec<[f64; 3]>,
    normal_sum: Vec3,
    out: RayOutput,
}

fn composite(
    camera: &Camera,
    cfg: &RayMarchConfig,
    samples: &Samples,
    pixel: usize,
    normals: bool,
    mut eval: impl FnMut(usize, &Vec3) -> FieldSample,
    ray: &Ray,
    c: &mut Composite,
) -> Result<()> {
    c.weights.clear();
    c.trans_after.clear();
    c.normals.clear();
    c.colors.clear();
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut normal_sum = Vec3::zeros();
    let mut depth_sum = 0.0;
    for (i, &t) in samples.t.iter().enumerate() {
        if trans < EARLY_STOP {
            break;
        }
        let s = eval(i, &ray.at(t));
        if !s.density.is_finite() || s.rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NaNPropagation { ray: pixel });
        }
        let alpha = 1.0 - (-s.density * samples.delta).exp();
        let w = trans * alpha;
        trans *= 1.0 - alpha;
        for k in 0..3 {
            rgb[k] += w * s.rgb[k];
        }
        depth_sum += w * t;
        let n = if normals {
            let (n, degenerate) = normal_from_gradient(&s.gradient);
            if degenerate {
                (Vec3::zeros(), 0.0)
            } else {
                let nc = camera.dir_to_camera(&n);
                normal_sum += w * nc;
                (nc, s.gradient.norm())
            }
        } else {
            (Vec3::zeros(), 0.0)
        };
        c.weights.push(w);
        c.trans_after.push(trans);
        c.normals.push(n);
        c.colors.push(s.rgb);
    }
    let alpha = 1.0 - trans;
    for k in 0..3 {
        rgb[k] += trans * cfg.background[k];
    }
    let len = normal_sum.norm();
    c.normal_sum = normal_sum;
    c.out = RayOutput {
        rgb,
        alpha,
        normal: if len > 1e-12 { normal_sum / len } else { Vec3::zeros() },
        depth: if alpha > 1e-8 { depth_sum / alpha } else { 0.0 },
    };
    Ok(())
}

/// Pushes one pixel's upstream gradient back to every sample of its ray.
fn sample_grads(camera: &Camera, cfg: &RayMarchConfig, samples: &Samples, c: &Composite, g: &PixelGrad) -> Vec<SampleGrad> {
    let n = c.weights.len();
    let len = c.normal_sum.norm();
    let g_sum = if len > 1e-12 {
        let nn = c.out.normal;
        (g.normal - nn * nn.dot(&g.normal)) / len
    } else {
        Vec3::zeros()
    };
    let mut g_w = vec![0.0; n];
    for i in 0..n {
        let mut v = g.alpha;
        for k in 0..3 {
            v += g.rgb[k] * (c.colors[i][k] - cfg.background[k]);
        }
        if c.normals[i].1 > 0.0 {
            v += c.normals[i].0.dot(&g_sum);
        }
        g_w[i] = v;
    }
    let mut out = vec![SampleGrad::default(); n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let sg = &mut out[i];
        sg.density = samples.delta * (c.trans_after[i] * g_w[i] - suffix);
        suffix += c.weights[i] * g_w[i];
        for k in 0..3 {
            sg.rgb[k] = c.weights[i] * g.rgb[k];
        }
        if c.normals[i].1 > 0.0 {
            // normal n = -u/|u| in world space; chain back to u = grad density
            let g_nc = g_sum * c.weights[i];
            let g_nw = camera.rotation.transpose() * g_nc;
            let nw = camera.rotation.transpose() * c.normals[i].0;
            sg.gradient = -(g_nw - nw * nw.dot(&g_nw)) / c.normals[i].1;
        }
    }
    out
}

fn rays_for(camera: &Camera, pixels: &[usize]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&p| camera.pixel_ray(p / camera.width, p % camera.width))
        .collect()
}

/// Renders a subset of pixels (row-major indices).
pub fn render_pixels<F: DensityField>(
    field: &F,
    camera: &Camera,
    cfg: &RayMarchConfig,
    pixels: &[usize],
    opts: RenderOptions,
) -> Result<Vec<RayOutput>> {
    cfg.validate()?;
    let rays = rays_for(camera, pixels);
    let bounds = field.bounds();
    pixels
        .par_iter()
        .zip(rays.par_iter())
        .map_init(Composite::default, |c, (&pixel, ray)| {
            let samples = ray_samples(ray, cfg, bounds, opts.jitter, pixel);
            composite(camera, cfg, &samples, pixel, opts.normals, |_, p| field.sample(p, opts.normals), ray, c)?;
            Ok(c.out)
        })
        .collect()
}

/// Full-frame render with midpoint sampling and composited normals.
pub fn render<F: DensityField>(field: &F, camera: &Camera, cfg: &RayMarchConfig) -> Result<ImageBundle> {
    render_with(field, camera, cfg, RenderOptions::eval())
}

pub fn render_with<F: DensityField>(
    field: &F,
    camera: &Camera,
    cfg: &RayMarchConfig,
    opts: RenderOptions,
) -> Result<ImageBundle> {
    let pixels: Vec<usize> = (0..camera.width * camera.height).collect();
    let outs = render_pixels(field, camera, cfg, &pixels, opts)?;
    Ok(assemble(camera, &outs, opts.normals))
}

fn assemble(camera: &Camera, outs: &[RayOutput], normals: bool) -> ImageBundle {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut normal = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    for (i, o) in outs.iter().enumerate() {
        rgb.data[3 * i..3 * i + 3].copy_from_slice(&o.rgb);
        alpha.data[i] = o.alpha;
        for k in 0..3 {
            normal.data[3 * i + k] = o.normal[k];
        }
        depth.data[i] = o.depth;
    }
    ImageBundle {
        rgb,
        alpha,
        normal: normals.then_some(normal),
        depth: Some(depth),
    }
}

/// Number of independent gradient accumulators; fixed per parameter count
/// so that summation order never depends on the thread pool.
fn accumulator_chunks(params: usize, rays: usize) -> usize {
    let by_memory = (32_000_000 / params.max(1)).clamp(1, 8);
    by_memory.min(rays.max(1))
}

fn reduce_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn backward_ray(
    field: &FieldParams,
    camera: &Camera,
    cfg: &RayMarchConfig,
    ray: &Ray,
    pixel: usize,
    opts: RenderOptions,
    caches: &mut Vec<PointCache>,
    comp: &mut Composite,
    grad_of: &mut dyn FnMut(&RayOutput) -> PixelGrad,
    grads: &mut [f64],
) -> Result<RayOutput> {
    let samples = ray_samples(ray, cfg, Some(field.bbox), opts.jitter, pixel);
    if caches.len() < samples.t.len() {
        caches.resize_with(samples.t.len(), PointCache::default);
    }
    composite(
        camera,
        cfg,
        &samples,
        pixel,
        opts.normals,
        |i, p| field.eval(p, opts.normals, &mut caches[i]),
        ray,
        comp,
    )?;
    let g = grad_of(&comp.out);
    if !g.is_zero() {
        for (i, sg) in sample_grads(camera, cfg, &samples, comp, &g).iter().enumerate() {
            field.backward(&caches[i], sg, grads);
        }
    }
    Ok(comp.out)
}

/// Renders every pixel and applies a per-pixel loss in the same pass.
/// `loss` maps (pixel index, output) to (loss value, upstream gradient).
/// Returns the image, the summed loss and the parameter gradient.
pub fn render_with_loss<L>(
    field: &FieldParams,
    camera: &Camera,
    cfg: &RayMarchConfig,
    opts: RenderOptions,
    loss: L,
) -> Result<(ImageBundle, f64, Vec<f64>)>
where
    L: Fn(usize, &RayOutput) -> (f64, PixelGrad) + Sync,
{
    cfg.validate()?;
    let pixels: Vec<usize> = (0..camera.width * camera.height).collect();
    let chunks = accumulator_chunks(field.params.len(), pixels.len());
    let per = pixels.len().div_ceil(chunks);
    let parts: Vec<(Vec<RayOutput>, f64, Vec<f64>)> = pixels
        .par_chunks(per)
        .map(|chunk| {
            let mut grads = field.zero_grad();
            let mut caches = Vec::new();
            let mut comp = Composite::default();
            let mut outs = Vec::with_capacity(chunk.len());
            let mut total = 0.0;
            for &pixel in chunk {
                let ray = camera.pixel_ray(pixel / camera.width, pixel % camera.width);
                let mut value = 0.0;
                let out = backward_ray(
                    field,
                    camera,
                    cfg,
                    &ray,
                    pixel,
                    opts,
                    &mut caches,
                    &mut comp,
                    &mut |o| {
                        let (l, g) = loss(pixel, o);
                        value = l;
                        g
                    },
                    &mut grads,
                )?;
                total += value;
                outs.push(out);
            }
            Ok((outs, total, grads))
        })
        .collect::<Result<_>>()?;
    let mut outs = Vec::with_capacity(pixels.len());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for (o, l, g) in parts {
        outs.extend(o);
        total += l;
        grads.push(g);
    }
    Ok((assemble(camera, &outs, opts.normals), total, reduce_in_order(grads, field.params.len())))
}

/// Backpropagates precomputed per-pixel gradients (same pixels and options
/// as the forward pass) into field parameters.
pub fn backward_pixels(
    field: &FieldParams,
    camera: &Camera,
    cfg: &RayMarchConfig,
    pixels: &[usize],
    opts: RenderOptions,
    pixel_grads: &[PixelGrad],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pixels.len() != pixel_grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels but {} gradients",
            pixels.len(),
            pixel_grads.len()
        )));
    }
    let chunks = accumulator_chunks(field.params.len(), pixels.len());
    let per = pixels.len().div_ceil(chunks).max(1);
    let work: Vec<(usize, PixelGrad)> = pixels.iter().copied().zip(pixel_grads.iter().copied()).collect();
    let parts: Vec<Vec<f64>> = work
        .par_chunks(per)
        .map(|chunk| {
            let mut grads = field.zero_grad();
            let mut caches = Vec::new();
            let mut comp = Composite::default();
            for &(pixel, g) in chunk {
                if g.is_zero() {
                    continue;
                }
                let ray = camera.pixel_ray(pixel / camera.width, pixel % camera.width);
                backward_ray(field, camera, cfg, &ray, pixel, opts, &mut caches, &mut comp, &mut |_| g, &mut grads)?;
            }
            Ok(grads)
        })
        .collect::<Result<_>>()?;
    Ok(reduce_in_order(parts, field.params.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, FieldOutput, HashGridConfig};

    struct Slab {
        density: f64,
        half_thickness: f64,
    }

    impl DensityField for Slab {
        fn sample(&self, p: &Vec3, _: bool) -> FieldSample {
            let inside = p.z.abs() < self.half_thickness;
            FieldSample {
                density: if inside { self.density } else { 0.0 },
                rgb: [0.2, 0.4, 0.6],
                gradient: Vec3::zeros(),
            }
        }

        fn bounds(&self) -> Option<Aabb> {
            Some(Aabb::cube(1.0))
        }
    }

    struct Empty;

    impl DensityField for Empty {
        fn sample(&self, _: &Vec3, _: bool) -> FieldSample {
            FieldSample::default()
        }
    }

    fn front_camera(res: usize) -> Camera {
        Camera::orbit(0.0, 0.0, 3.8, 20.0, res, res).unwrap()
    }

    fn center_alpha<F: DensityField>(f: &F, samples: usize) -> f64 {
        let cam = front_camera(8);
        let cfg = RayMarchConfig::for_distance(3.8, samples);
        render_pixels(f, &cam, &cfg, &[4 * 8 + 4], RenderOptions::default()).unwrap()[0].alpha
    }

    #[test]
    fn empty_scene_is_white_and_transparent() {
        let bundle = render(&Empty, &front_camera(6), &RayMarchConfig::default()).unwrap();
        assert!(bundle.rgb.data.iter().all(|&v| v == 1.0));
        assert!(bundle.alpha.data.iter().all(|&v| v == 0.0));
        assert!(bundle.depth.unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slab_transmittance_matches_closed_form() {
        let slab = Slab {
            density: 1.0,
            half_thickness: 0.25,
        };
        // center ray of an 8x8 image is not exactly on axis; compute path length
        let cam = front_camera(8);
        let ray = cam.pixel_ray(4, 4);
        let path = 0.5 / ray.dir.z.abs();
        let expected = 1.0 - (-path).exp();
        let a512 = center_alpha(&slab, 512);
        let a1024 = center_alpha(&slab, 1024);
        assert!((a512 - expected).abs() < 1e-3, "{a512} vs {expected}");
        assert!((a512 - a1024).abs() < 1e-3);
        assert!((1.0 - (-0.5f64).exp() - 0.3935).abs() < 1e-4);
    }

    #[test]
    fn nan_density_reports_ray() {
        struct Bad;
        impl DensityField for Bad {
            fn sample(&self, _: &Vec3, _: bool) -> FieldSample {
                FieldSample {
                    density: f64::NAN,
                    ..Default::default()
                }
            }
        }
        let err = render_pixels(&Bad, &front_camera(4), &RayMarchConfig::default(), &[5], RenderOptions::default());
        assert!(matches!(err, Err(Error::NaNPropagation { ray: 5 })));
    }

    fn test_field() -> FieldParams {
        let cfg = HashGridConfig::new(4, 12, 2, 4, 32, 16, FieldOutput::DensityRgb);
        let mut f = FieldParams::init(cfg, Aabb::cube(1.0), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = f.grid_len();
        for v in &mut f.params[..g] {
            *v = rng.random_range(-1.0..1.0);
        }
        f.set_density_bias(0.5);
        f
    }

    #[test]
    fn subset_render_matches_full_frame() {
        let field = test_field();
        let cam = front_camera(10);
        let cfg = RayMarchConfig::for_distance(3.8, 64);
        let opts = RenderOptions {
            normals: true,
            jitter: Some(3),
        };
        let full = render_with(&field, &cam, &cfg, opts).unwrap();
        let subset = [3usize, 17, 55, 99];
        let outs = render_pixels(&field, &cam, &cfg, &subset, opts).unwrap();
        for (o, &p) in outs.iter().zip(&subset) {
            assert_eq!(o.alpha, full.alpha.data[p]);
            assert_eq!(o.rgb, [full.rgb.data[3 * p], full.rgb.data[3 * p + 1], full.rgb.data[3 * p + 2]]);
        }
        assert!(full.alpha.data.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    fn weighted_loss(o: &RayOutput, pixel: usize) -> (f64, PixelGrad) {
        let wa = 0.3 + 0.01 * pixel as f64;
        let wr = [0.2, -0.1, 0.4];
        let wn = Vec3::new(0.3, -0.2, 0.5);
        let l = wa * o.alpha + (0..3).map(|k| wr[k] * o.rgb[k]).sum::<f64>() + wn.dot(&o.normal);
        (
            l,
            PixelGrad {
                rgb: wr,
                alpha: wa,
                normal: wn,
            },
        )
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let field = test_field();
        let cam = front_camera(6);
        let cfg = RayMarchConfig::for_distance(3.8, 48);
        let opts = RenderOptions::eval();
        let (_, _, grads) = render_with_loss(&field, &cam, &cfg, opts, |p, o| weighted_loss(o, p)).unwrap();
        let total = |f: &FieldParams| -> f64 {
            let pixels: Vec<usize> = (0..36).collect();
            render_pixels(f, &cam, &cfg, &pixels, opts)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(p, o)| weighted_loss(o, p).0)
                .sum()
        };
        let mut idx: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > 1e-3).collect();
        idx.sort_by(|a, b| grads[*b].abs().total_cmp(&grads[*a].abs()));
        assert!(idx.len() >= 10);
        for &i in idx.iter().step_by(idx.len() / 10).take(10) {
            let h = 1e-5;
            let mut plus = field.clone();
            plus.params[i] += h;
            let mut minus = field.clone();
            minus.params[i] -= h;
            let fd = (total(&plus) - total(&minus)) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs());
            assert!(rel < 1e-2, "param {i}: analytic {} fd {fd}", grads[i]);
        }
    }

    #[test]
    fn two_pass_backward_matches_fused() {
        let field = test_field();
        let cam = front_camera(5);
        let cfg = RayMarchConfig::for_distance(3.8, 32);
        let opts = RenderOptions {
            normals: true,
            jitter: Some(1),
        };
        let (_, _, fused) = render_with_loss(&field, &cam, &cfg, opts, |p, o| weighted_loss(o, p)).unwrap();
        let pixels: Vec<usize> = (0..25).collect();
        let outs = render_pixels(&field, &cam, &cfg, &pixels, opts).unwrap();
        let gs: Vec<PixelGrad> = outs.iter().enumerate().map(|(p, o)| weighted_loss(o, p).1).collect();
        let two = backward_pixels(&field, &cam, &cfg, &pixels, opts, &gs).unwrap();
        for (a, b) in fused.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
