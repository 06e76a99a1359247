//! Multiresolution hash-grid fields with a small ReLU decoder.
//!
//! One parameter vector holds the per-level feature tables followed by the
//! decoder weights. Evaluation optionally carries forward-mode tangents
//! (d/dx, d/dy, d/dz) through the decoder so that the spatial density
//! gradient, and therefore the rendered normal, is itself differentiable
//! with respect to the parameters.

mod checkpoint;
mod config;

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_field, save_field};
pub use config::{FieldOutput, HashGridConfig};

use crate::error::{Error, Result};
use crate::scene::Vec3;
use crate::util::{sigmoid, softplus};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

thread_local! {
    static LOOKUPS: Cell<u64> = const { Cell::new(0) };
    static SAMPLE_CACHE: std::cell::RefCell<PointCache> = std::cell::RefCell::new(PointCache::default());
}

/// Per-thread count of feature-table lookups, for cost instrumentation.
pub fn lookup_count() -> u64 {
    LOOKUPS.with(|c| c.get())
}

pub fn reset_lookup_count() {
    LOOKUPS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Parametric entry/exit of a ray, if it hits the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let a = (self.min[k] - origin[k]) * inv;
            let b = (self.max[k] - origin[k]) * inv;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Gaussian density offset centered at the origin, used to seed the coarse field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBlob {
    pub magnitude: f64,
    pub radius: f64,
}

impl DensityBlob {
    fn value_and_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        let v = self.magnitude * (-p.norm_squared() / (2.0 * self.radius * self.radius)).exp();
        (v, -p * (v / (self.radius * self.radius)))
    }
}

/// Anything the volume renderer can sample.
pub trait DensityField: Sync {
    fn sample(&self, p: &Vec3, want_gradient: bool) -> FieldSample;

    /// Region outside which density is zero; rays are clipped to it.
    fn bounds(&self) -> Option<Aabb> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub rgb: [f64; 3],
    /// Spatial gradient of density (zero unless requested).
    pub gradient: Vec3,
}

/// Upstream gradients for one evaluated point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleGrad {
    pub density: f64,
    pub rgb: [f64; 3],
    pub gradient: Vec3,
}

/// Saved intermediates of one point evaluation.
#[derive(Debug, Clone, Default)]
pub struct PointCache {
    inside: bool,
    tangents: bool,
    corner_idx: Vec<usize>,
    corner_w: Vec<f64>,
    corner_dw: Vec<[f64; 3]>,
    /// Layer inputs; `acts[0]` is the encoding.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Tangent inputs per layer, `[k][i]` flattened as `k * width + i`.
    tan_acts: Vec<Vec<f64>>,
    tan_pre: Vec<Vec<f64>>,
    z: f64,
    z_dot: [f64; 3],
    out: FieldSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: HashGridConfig,
    pub bbox: Aabb,
    pub blob: Option<DensityBlob>,
    /// Grid tables (level-major) followed by decoder layers (W row-major, then b).
    pub params: Vec<f64>,
    level_offsets: Vec<usize>,
    layer_offsets: Vec<usize>,
    // derived from `config`, cached for the per-sample hot path
    level_res: Vec<usize>,
    level_entries: Vec<usize>,
    shapes: Vec<(usize, usize)>,
}

impl FieldParams {
    /// Grid features ~ U(-1e-4, 1e-4), decoder weights He-uniform, biases 0.
    pub fn init(config: HashGridConfig, bbox: Aabb, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(config.param_count());
        for _ in 0..config.grid_param_count() {
            params.push(rng.random_range(-1e-4..1e-4));
        }
        for (fan_in, fan_out) in config.layer_shapes() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_params(config, bbox, None, params)
    }

    pub fn from_params(
        config: HashGridConfig,
        bbox: Aabb,
        blob: Option<DensityBlob>,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "field expects {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        let mut level_offsets = Vec::with_capacity(config.levels);
        let mut off = 0;
        for l in 0..config.levels {
            level_offsets.push(off);
            off += config.level_entries(l) * config.features_per_level;
        }
        let mut layer_offsets = Vec::new();
        for (i, o) in config.layer_shapes() {
            layer_offsets.push(off);
            off += i * o + o;
        }
        Ok(Self {
            level_res: (0..config.levels).map(|l| config.level_resolution(l)).collect(),
            level_entries: (0..config.levels).map(|l| config.level_entries(l)).collect(),
            shapes: config.layer_shapes(),
            config,
            bbox,
            blob,
            params,
            level_offsets,
            layer_offsets,
        })
    }

    pub fn with_blob(mut self, blob: DensityBlob) -> Self {
        self.blob = Some(blob);
        self
    }

    /// Sets the initial bias of the density output.
    pub fn set_density_bias(&mut self, bias: f64) {
        if self.config.output == FieldOutput::DensityRgb {
            let shapes = self.config.layer_shapes();
            let (i, o) = *shapes.last().unwrap();
            let b = self.layer_offsets[shapes.len() - 1] + i * o;
            self.params[b] = bias;
        }
    }

    pub fn grid_len(&self) -> usize {
        self.config.grid_param_count()
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn require(&self, mode: FieldOutput) -> Result<()> {
        if self.config.output == mode {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: mode.name(),
                actual: self.config.output.name(),
            })
        }
    }

    fn entry_index(&self, level: usize, ijk: [usize; 3], res: usize) -> usize {
        let entries = self.level_entries[level];
        let n = res + 1;
        let slot = if n * n * n <= entries {
            ijk[0] + ijk[1] * n + ijk[2] * n * n
        } else {
            let h = (ijk[0] as u32).wrapping_mul(PRIMES[0])
                ^ (ijk[1] as u32).wrapping_mul(PRIMES[1])
                ^ (ijk[2] as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & (entries - 1)
        };
        self.level_offsets[level] + slot * self.config.features_per_level
    }

    /// Evaluates one point, filling `cache` for a later [`FieldParams::backward`].
    pub fn eval(&self, p: &Vec3, tangents: bool, cache: &mut PointCache) -> FieldSample {
        let cfg = &self.config;
        cache.inside = self.bbox.contains(p);
        cache.tangents = tangents;
        if !cache.inside {
            cache.out = FieldSample {
                density: 0.0,
                rgb: crate::scene::BACKGROUND,
                gradient: Vec3::zeros(),
            };
            return cache.out;
        }
        let feat = cfg.features_per_level;
        let enc_dim = cfg.encoding_dim();
        let shapes = &self.shapes;
        let nl = shapes.len();
        cache.acts.resize(nl, Vec::new());
        cache.pre.resize(nl, Vec::new());
        cache.tan_acts.resize(nl, Vec::new());
        cache.tan_pre.resize(nl, Vec::new());
        let corners = cfg.levels * 8;
        cache.corner_idx.resize(corners, 0);
        cache.corner_w.resize(corners, 0.0);
        cache.corner_dw.resize(corners, [0.0; 3]);

        let enc = &mut cache.acts[0];
        enc.clear();
        enc.resize(enc_dim, 0.0);
        let tan_enc = &mut cache.tan_acts[0];
        tan_enc.clear();
        if tangents {
            tan_enc.resize(3 * enc_dim, 0.0);
        }
        let mut x = [0.0; 3];
        let mut extent = [0.0; 3];
        for k in 0..3 {
            extent[k] = self.bbox.max[k] - self.bbox.min[k];
            x[k] = (p[k] - self.bbox.min[k]) / extent[k];
        }
        for level in 0..cfg.levels {
            let res = self.level_res[level];
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let pos = x[k] * res as f64;
                let i0 = (pos.floor().max(0.0) as usize).min(res - 1);
                base[k] = i0;
                frac[k] = pos - i0 as f64;
            }
            for corner in 0..8 {
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut w = [0.0; 3];
                let mut dw = [0.0; 3];
                for k in 0..3 {
                    if bits[k] == 1 {
                        w[k] = frac[k];
                        dw[k] = 1.0;
                    } else {
                        w[k] = 1.0 - frac[k];
                        dw[k] = -1.0;
                    }
                }
                let weight = w[0] * w[1] * w[2];
                let scale = |k: usize| res as f64 / extent[k];
                let dweight = [
                    dw[0] * w[1] * w[2] * scale(0),
                    w[0] * dw[1] * w[2] * scale(1),
                    w[0] * w[1] * dw[2] * scale(2),
                ];
                let ijk = [base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]];
                let idx = self.entry_index(level, ijk, res);
                let slot = level * 8 + corner;
                cache.corner_idx[slot] = idx;
                cache.corner_w[slot] = weight;
                cache.corner_dw[slot] = dweight;
                for j in 0..feat {
                    let v = self.params[idx + j];
                    enc[level * feat + j] += weight * v;
                    if tangents {
                        for k in 0..3 {
                            tan_enc[k * enc_dim + level * feat + j] += dweight[k] * v;
                        }
                    }
                }
            }
        }
        LOOKUPS.with(|c| c.set(c.get() + corners as u64));

        for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let off = self.layer_offsets[layer];
            let weights = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let (prev, rest) = cache.acts.split_at_mut(layer + 1);
            let input = &prev[layer];
            let pre = &mut cache.pre[layer];
            pre.clear();
            pre.extend_from_slice(bias);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                pre[o] += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            let (tprev, trest) = cache.tan_acts.split_at_mut(layer + 1);
            let tan_pre = &mut cache.tan_pre[layer];
            tan_pre.clear();
            if tangents {
                tan_pre.resize(3 * fan_out, 0.0);
                let tin = &tprev[layer];
                for k in 0..3 {
                    let tk = &tin[k * fan_in..(k + 1) * fan_in];
                    for o in 0..fan_out {
                        let row = &weights[o * fan_in..(o + 1) * fan_in];
                        tan_pre[k * fan_out + o] = row.iter().zip(tk).map(|(a, b)| a * b).sum();
                    }
                }
            }
            if layer + 1 < nl {
                let next = &mut rest[0];
                next.clear();
                next.extend(pre.iter().map(|&v| v.max(0.0)));
                let tnext = &mut trest[0];
                tnext.clear();
                if tangents {
                    tnext.resize(3 * fan_out, 0.0);
                    for k in 0..3 {
                        for o in 0..fan_out {
                            if pre[o] > 0.0 {
                                tnext[k * fan_out + o] = tan_pre[k * fan_out + o];
                            }
                        }
                    }
                }
            }
        }

        let out = &cache.pre[nl - 1];
        let tan_out = &cache.tan_pre[nl - 1];
        let od = cfg.output.out_dim();
        let sample = match cfg.output {
            FieldOutput::DensityRgb => {
                let (blob, blob_grad) = self
                    .blob
                    .map(|b| b.value_and_gradient(p))
                    .unwrap_or((0.0, Vec3::zeros()));
                let z = out[0] + blob;
                let s = sigmoid(z);
                let mut gradient = Vec3::zeros();
                if tangents {
                    for k in 0..3 {
                        cache.z_dot[k] = tan_out[k * od] + blob_grad[k];
                        gradient[k] = s * cache.z_dot[k];
                    }
                }
                cache.z = z;
                FieldSample {
                    density: softplus(z),
                    rgb: [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])],
                    gradient,
                }
            }
            FieldOutput::RgbOnly => FieldSample {
                density: 0.0,
                rgb: [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
                gradient: Vec3::zeros(),
            },
        };
        cache.out = sample;
        sample
    }

    /// Accumulates parameter gradients for one evaluated point into `grads`.
    pub fn backward(&self, cache: &PointCache, g: &SampleGrad, grads: &mut [f64]) {
        if !cache.inside {
            return;
        }
        let cfg = &self.config;
        let shapes = &self.shapes;
        let nl = shapes.len();
        let od = cfg.output.out_dim();
        let use_tan = cache.tangents && g.gradient.norm_squared() > 0.0;

        let mut g_h = vec![0.0; od];
        let mut g_th = if use_tan { vec![0.0; 3 * od] } else { Vec::new() };
        let rgb_off = match cfg.output {
            FieldOutput::DensityRgb => {
                let s = sigmoid(cache.z);
                let ds = s * (1.0 - s);
                let mut g_z = g.density * s;
                if use_tan {
                    for k in 0..3 {
                        g_z += g.gradient[k] * ds * cache.z_dot[k];
                        g_th[k * od] = g.gradient[k] * s;
                    }
                }
                g_h[0] = g_z;
                1
            }
            FieldOutput::RgbOnly => 0,
        };
        for j in 0..3 {
            let c = cache.out.rgb[j];
            g_h[rgb_off + j] = g.rgb[j] * c * (1.0 - c);
        }

        for layer in (0..nl).rev() {
            let (fan_in, fan_out) = shapes[layer];
            let off = self.layer_offsets[layer];
            let input = &cache.acts[layer];
            {
                let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let go = g_h[o];
                    gb[o] += go;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    if go != 0.0 {
                        for (r, &a) in row.iter_mut().zip(input) {
                            *r += go * a;
                        }
                    }
                    if use_tan {
                        let tin = &cache.tan_acts[layer];
                        for k in 0..3 {
                            let gt = g_th[k * fan_out + o];
                            if gt != 0.0 {
                                for (r, &a) in row.iter_mut().zip(&tin[k * fan_in..(k + 1) * fan_in]) {
                                    *r += gt * a;
                                }
                            }
                        }
                    }
                }
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut g_in = vec![0.0; fan_in];
            let mut g_tin = if use_tan { vec![0.0; 3 * fan_in] } else { Vec::new() };
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let go = g_h[o];
                if go != 0.0 {
                    for (gi, &w) in g_in.iter_mut().zip(row) {
                        *gi += go * w;
                    }
                }
                if use_tan {
                    for k in 0..3 {
                        let gt = g_th[k * fan_out + o];
                        if gt != 0.0 {
                            for (gi, &w) in g_tin[k * fan_in..(k + 1) * fan_in].iter_mut().zip(row) {
                                *gi += gt * w;
                            }
                        }
                    }
                }
            }
            if layer > 0 {
                let pre = &cache.pre[layer - 1];
                for i in 0..fan_in {
                    if pre[i] <= 0.0 {
                        g_in[i] = 0.0;
                        if use_tan {
                            for k in 0..3 {
                                g_tin[k * fan_in + i] = 0.0;
                            }
                        }
                    }
                }
            }
            g_h = g_in;
            g_th = g_tin;
        }

        let feat = cfg.features_per_level;
        let enc_dim = cfg.encoding_dim();
        for level in 0..cfg.levels {
            for corner in 0..8 {
                let slot = level * 8 + corner;
                let idx = cache.corner_idx[slot];
                let w = cache.corner_w[slot];
                let dw = cache.corner_dw[slot];
                for j in 0..feat {
                    let e = level * feat + j;
                    let mut acc = w * g_h[e];
                    if use_tan {
                        for k in 0..3 {
                            acc += dw[k] * g_th[k * enc_dim + e];
                        }
                    }
                    grads[idx + j] += acc;
                }
            }
        }
    }

    /// Density (softplus) and color (sigmoid) at each point.
    pub fn query_density_color(&self, points: &[Vec3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        self.require(FieldOutput::DensityRgb)?;
        let mut cache = PointCache::default();
        Ok(points
            .iter()
            .map(|p| {
                let s = self.eval(p, false, &mut cache);
                (s.density, s.rgb)
            })
            .unzip())
    }

    pub fn query_texture(&self, points: &[Vec3]) -> Result<Vec<[f64; 3]>> {
        self.require(FieldOutput::RgbOnly)?;
        let mut cache = PointCache::default();
        Ok(points.iter().map(|p| self.eval(p, false, &mut cache).rgb).collect())
    }

    /// Outward normals `-grad(density)/|grad(density)|`; degenerate points
    /// get the (0,0,1) sentinel and `true` in the flag.
    pub fn density_gradient_normal(&self, points: &[Vec3]) -> Result<Vec<(Vec3, bool)>> {
        self.require(FieldOutput::DensityRgb)?;
        let mut cache = PointCache::default();
        Ok(points
            .iter()
            .map(|p| normal_from_gradient(&self.eval(p, true, &mut cache).gradient))
            .collect())
    }
}

/// Gradient magnitudes below this are treated as a flat (degenerate) field.
pub const DEGENERATE_GRADIENT: f64 = 1e-10;

pub fn normal_from_gradient(gradient: &Vec3) -> (Vec3, bool) {
    let len = gradient.norm();
    if len < DEGENERATE_GRADIENT || !len.is_finite() {
        (Vec3::new(0.0, 0.0, 1.0), true)
    } else {
        (-gradient / len, false)
    }
}

impl DensityField for FieldParams {
    fn sample(&self, p: &Vec3, want_gradient: bool) -> FieldSample {
        SAMPLE_CACHE.with(|c| self.eval(p, want_gradient, &mut c.borrow_mut()))
    }

    fn bounds(&self) -> Option<Aabb> {
        Some(self.bbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(output: FieldOutput) -> HashGridConfig {
        HashGridConfig::new(4, 12, 2, 4, 32, 16, output)
    }

    fn randomized(output: FieldOutput, seed: u64) -> FieldParams {
        let mut f = FieldParams::init(small_config(output), Aabb::cube(1.0), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let g = f.grid_len();
        for v in &mut f.params[..g] {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
            .collect()
    }

    fn scalar_loss(f: &FieldParams, pts: &[Vec3], weights: &[f64]) -> f64 {
        let mut cache = PointCache::default();
        pts.iter()
            .map(|p| {
                let s = f.eval(p, true, &mut cache);
                let mut l = weights[0] * s.density;
                for j in 0..3 {
                    l += weights[1 + j] * s.rgb[j];
                    l += weights[4 + j] * s.gradient[j];
                }
                l
            })
            .sum()
    }

    #[test]
    fn fresh_field_density_is_nearly_constant() {
        let cfg = HashGridConfig::new(8, 14, 2, 16, 512, 64, FieldOutput::DensityRgb);
        let field = FieldParams::init(cfg, Aabb::cube(1.0), 3).unwrap();
        let (dens, rgb) = field.query_density_color(&random_points(1000, 1)).unwrap();
        let mean = dens.iter().sum::<f64>() / dens.len() as f64;
        let std = (dens.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / dens.len() as f64).sqrt();
        assert!((mean - softplus(0.0)).abs() < 0.01, "mean {mean}");
        assert!(std / mean < 0.05);
        assert!(rgb.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn outside_points_are_empty() {
        let field = randomized(FieldOutput::DensityRgb, 1);
        let (d, rgb) = field.query_density_color(&[Vec3::new(1.5, 0.0, 0.0)]).unwrap();
        assert_eq!(d[0], 0.0);
        assert_eq!(rgb[0], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn queries_are_deterministic() {
        let field = randomized(FieldOutput::RgbOnly, 2);
        let pts = random_points(20, 4);
        assert_eq!(field.query_texture(&pts).unwrap(), field.query_texture(&pts).unwrap());
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let field = randomized(FieldOutput::RgbOnly, 2);
        assert!(matches!(
            field.query_density_color(&[Vec3::zeros()]),
            Err(Error::ModeMismatch { .. })
        ));
        let field = randomized(FieldOutput::DensityRgb, 2);
        assert!(field.query_texture(&[Vec3::zeros()]).is_err());
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let field = randomized(FieldOutput::DensityRgb, 5);
        let mut cache = PointCache::default();
        for p in random_points(10, 9) {
            let g = field.eval(&p, true, &mut cache).gradient;
            let h = 1e-6;
            for k in 0..3 {
                let mut dp = Vec3::zeros();
                dp[k] = h;
                let a = field.eval(&(p + dp), false, &mut cache).density;
                let b = field.eval(&(p - dp), false, &mut cache).density;
                let fd = (a - b) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for output in [FieldOutput::DensityRgb, FieldOutput::RgbOnly] {
            let field = randomized(output, 11);
            let pts = random_points(5, 12);
            let weights = [0.7, -0.3, 0.5, 0.2, 0.11, -0.05, 0.09];
            let mut grads = field.zero_grad();
            let mut cache = PointCache::default();
            for p in &pts {
                let s = field.eval(p, true, &mut cache);
                let _ = s;
                let g = SampleGrad {
                    density: weights[0],
                    rgb: [weights[1], weights[2], weights[3]],
                    gradient: if output == FieldOutput::DensityRgb {
                        Vec3::new(weights[4], weights[5], weights[6])
                    } else {
                        Vec3::zeros()
                    },
                };
                field.backward(&cache, &g, &mut grads);
            }
            let mut candidates: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > 1e-4).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut checked = 0;
            while checked < 20 && !candidates.is_empty() {
                let i = candidates.swap_remove(rng.random_range(0..candidates.len()));
                let h = 1e-5;
                let mut plus = field.clone();
                plus.params[i] += h;
                let mut minus = field.clone();
                minus.params[i] -= h;
                let fd = (scalar_loss(&plus, &pts, &weights) - scalar_loss(&minus, &pts, &weights)) / (2.0 * h);
                let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs());
                assert!(rel < 1e-3, "{output:?} param {i}: analytic {} fd {fd}", grads[i]);
                checked += 1;
            }
            assert_eq!(checked, 20);
        }
    }

    #[test]
    fn normal_points_against_density_increase() {
        // density = softplus(3 z): grows toward +z, so the normal is -z
        let cfg = HashGridConfig::new(1, 4, 1, 1, 1, 1, FieldOutput::DensityRgb);
        let mut field = FieldParams::init(cfg, Aabb::cube(1.0), 0).unwrap();
        // level 0 is a dense 2x2x2 lattice over [-1,1]^3; feature = 1.5 * (z + 1)
        for (slot, v) in field.params[..8].iter_mut().enumerate() {
            let kz = slot / 4;
            *v = 3.0 * kz as f64;
        }
        let n = field.grid_len();
        // decoder: hidden = relu(feature), density = hidden
        field.params[n] = 1.0;
        field.params[n + 1] = 0.0;
        for k in 0..4 {
            field.params[n + 2 + k] = if k == 0 { 1.0 } else { 0.0 };
        }
        let normals = field
            .density_gradient_normal(&[Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.5, 0.4, -0.2)])
            .unwrap();
        for (nrm, degenerate) in normals {
            assert!(!degenerate);
            assert!((nrm - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
            assert!((nrm.norm() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn flat_density_is_flagged_degenerate() {
        let cfg = small_config(FieldOutput::DensityRgb);
        let mut field = FieldParams::init(cfg, Aabb::cube(1.0), 0).unwrap();
        let g = field.grid_len();
        field.params[..g].iter_mut().for_each(|v| *v = 0.0);
        let out = field.density_gradient_normal(&[Vec3::new(0.2, 0.1, 0.0)]).unwrap();
        assert_eq!(out[0], (Vec3::new(0.0, 0.0, 1.0), true));
    }

    #[test]
    fn lookup_cost_is_fixed_per_point() {
        let field = randomized(FieldOutput::DensityRgb, 3);
        for n in [1usize, 10, 100] {
            reset_lookup_count();
            field.query_density_color(&random_points(n, 5)).unwrap();
            assert_eq!(lookup_count(), (n * field.config.levels * 8) as u64);
        }
    }

    #[test]
    fn aabb_clipping_of_rays() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(&Vec3::new(0.0, 0.0, 3.8), &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((t0 - 2.8).abs() < 1e-12 && (t1 - 4.8).abs() < 1e-12);
        assert!(b.intersect(&Vec3::new(0.0, 2.0, 3.8), &Vec3::new(0.0, 0.0, -1.0)).is_none());
    }
}
