//! Deterministic mock denoiser: `eps = A_c x + b_c` plus depth and attention terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend, AttentionControl, AttentionTap, MOCK_ATTENTION_LAYERS};
use super::{BackendKind, Capabilities, Condition, DenoiserBackend, NoiseSchedule};
use crate::error::{Error, Result};
use crate::resample::{resize_area, resize_bilinear};
use crate::scene::Image;
use crate::util::{derive_seed, sha256_hex};

const CHANNELS: usize = 3;
/// Token-grid downsampling of each attention layer.
const POOL: [usize; 4] = [2, 4, 4, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    #[default]
    Linear,
    /// With a view condition, predicts the exact noise that maps the
    /// reference to `x_t`; otherwise behaves like `Linear`.
    EchoReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    pub seed: u64,
    /// Pixel-space latent side length.
    pub latent_size: usize,
    pub operator_scale: f64,
    pub bias_scale: f64,
    pub depth_gain: f64,
    pub attention_gain: f64,
    /// Weight of the latent itself in the attention tokens (depth enters at 1).
    pub attention_input_scale: f64,
    pub mode: MockMode,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_size: 32,
            operator_scale: 0.001,
            bias_scale: 0.02,
            depth_gain: 0.05,
            attention_gain: 0.05,
            attention_input_scale: 0.005,
            mode: MockMode::Linear,
        }
    }
}

impl MockSpec {
    /// All operator terms zero: predicts exactly zero noise.
    pub fn zero(latent_size: usize) -> Self {
        Self {
            latent_size,
            operator_scale: 0.0,
            bias_scale: 0.0,
            depth_gain: 0.0,
            attention_gain: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub spec: MockSpec,
    schedule: NoiseSchedule,
    /// Per layer: query, key, value projections (3x3, row-major).
    attn_weights: Vec<[[f64; 9]; 3]>,
    depth_dir: [f64; 3],
}

impl MockBackend {
    pub fn new(spec: MockSpec, schedule: NoiseSchedule) -> Result<Self> {
        if spec.latent_size < 4 {
            return Err(Error::InvalidArgument("mock latent_size must be >= 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xa77e]));
        let bound = (3.0f64).sqrt();
        let attn_weights = (0..MOCK_ATTENTION_LAYERS.len())
            .map(|_| {
                let mut m = [[0.0; 9]; 3];
                for w in m.iter_mut().flatten() {
                    *w = rng.random_range(-bound..bound);
                }
                m
            })
            .collect();
        let depth_dir = [rng.random_range(0.5..1.0), rng.random_range(-1.0..-0.5), rng.random_range(0.5..1.0)];
        Ok(Self {
            spec,
            schedule,
            attn_weights,
            depth_dir,
        })
    }

    fn operator(&self, cond: &Condition) -> ([f64; 9], [f64; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[cond.content_hash()]));
        let mut m = [0.0; 9];
        for v in &mut m {
            *v = self.spec.operator_scale * rng.random_range(-1.0..1.0);
        }
        let mut b = [0.0; 3];
        for v in &mut b {
            *v = self.spec.bias_scale * rng.random_range(-1.0..1.0);
        }
        (m, b)
    }

    fn project(tokens: &[f64], w: &[f64; 9]) -> Vec<f64> {
        tokens
            .chunks_exact(CHANNELS)
            .flat_map(|t| (0..CHANNELS).map(move |o| (0..CHANNELS).map(|i| w[o * CHANNELS + i] * t[i]).sum::<f64>()))
            .collect()
    }

    fn depth_at_latent(&self, depth: &Image) -> Result<Image> {
        if depth.channels != 1 {
            return Err(Error::ShapeMismatch("depth condition must have one channel".into()));
        }
        let n = self.spec.latent_size;
        Ok(resize_area(depth, n, n))
    }
}

impl DenoiserBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            view: true,
            depth: true,
            attention: true,
        }
    }

    fn image_size(&self) -> (usize, usize) {
        (self.spec.latent_size, self.spec.latent_size)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.spec.latent_size, self.spec.latent_size)
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        let n = self.spec.latent_size;
        if (image.width, image.height, image.channels) != (n, n, CHANNELS) {
            return Err(Error::ShapeMismatch(format!(
                "mock encoder expects {n}x{n}x3, got {}x{}x{}",
                image.width, image.height, image.channels
            )));
        }
        Ok(image.map(|v| 2.0 * v - 1.0))
    }

    fn encode_adjoint(&self, grad: &Image) -> Result<Image> {
        Ok(grad.map(|g| 2.0 * g))
    }

    fn decode(&self, latent: &Image) -> Result<Image> {
        Ok(latent.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }

    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize, attn: &mut AttentionControl) -> Result<Image> {
        let n = self.spec.latent_size;
        if (x_t.width, x_t.height, x_t.channels) != (n, n, CHANNELS) {
            return Err(Error::ShapeMismatch("mock latent has the wrong shape".into()));
        }
        self.check(cond)?;
        if self.spec.mode == MockMode::EchoReference {
            if let Some(view) = &cond.view {
                let reference = self.encode(&resize_bilinear(&view.reference, n, n))?;
                let a = self.schedule.alpha_bar[t];
                let mut eps = x_t.clone();
                for (e, r) in eps.data.iter_mut().zip(&reference.data) {
                    *e = (*e - a.sqrt() * r) / (1.0 - a).sqrt();
                }
                return Ok(eps);
            }
        }
        let (m, b) = self.operator(cond);
        let mut eps = Image::new(n, n, CHANNELS);
        for (e, x) in eps.data.chunks_exact_mut(CHANNELS).zip(x_t.data.chunks_exact(CHANNELS)) {
            for o in 0..CHANNELS {
                e[o] = b[o] + (0..CHANNELS).map(|i| m[o * CHANNELS + i] * x[i]).sum::<f64>();
            }
        }
        let mut feat = x_t.map(|v| self.spec.attention_input_scale * v);
        if let Some(depth) = &cond.depth {
            let d = self.depth_at_latent(depth)?;
            for (p, &dv) in d.data.iter().enumerate() {
                for c in 0..CHANNELS {
                    feat.data[p * CHANNELS + c] += dv * self.depth_dir[c];
                    eps.data[p * CHANNELS + c] += self.spec.depth_gain * dv * self.depth_dir[c];
                }
            }
        }
        if self.spec.attention_gain == 0.0 && !attn.is_active() {
            return Ok(eps);
        }
        let start = feat.clone();
        for (l, layer) in MOCK_ATTENTION_LAYERS.iter().enumerate() {
            let side = (n / POOL[l]).max(1);
            let pooled = resize_area(&feat, side, side);
            let [wq, wk, wv] = &self.attn_weights[l];
            let tap = AttentionTap {
                layer_id: layer.to_string(),
                tokens: side * side,
                dim: CHANNELS,
                q: Self::project(&pooled.data, wq),
                k: Self::project(&pooled.data, wk),
                v: Self::project(&pooled.data, wv),
            };
            let q = tap.q.clone();
            let (k, v) = attn.route(layer, tap)?;
            let out = Image {
                width: side,
                height: side,
                channels: CHANNELS,
                data: attend(&q, &k, &v, CHANNELS),
            };
            let up = resize_bilinear(&out, n, n);
            for (f, u) in feat.data.iter_mut().zip(&up.data) {
                *f += u;
            }
        }
        for ((e, f), s) in eps.data.iter_mut().zip(&feat.data).zip(&start.data) {
            *e += self.spec.attention_gain * (f - s);
        }
        Ok(eps)
    }

    fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.spec).unwrap_or_default();
        for w in self.attn_weights.iter().flatten().flatten().chain(&self.depth_dir) {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{add_noise, sds_grad_view, SdsConfig};
    use nalgebra::Matrix3;
    use rand::SeedableRng;

    fn random_latent(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 3, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn predictions_are_bit_identical_for_the_same_seed() {
        let a = MockBackend::new(MockSpec::default(), NoiseSchedule::default()).unwrap();
        let b = MockBackend::new(MockSpec::default(), NoiseSchedule::default()).unwrap();
        let x = random_latent(32, 1);
        let c = Condition::text("a person").with_depth(Image::filled(32, 32, 1, 0.3));
        let pa = a.predict_noise(&x, &c, 500, &mut AttentionControl::off()).unwrap();
        let pb = b.predict_noise(&x, &c, 500, &mut AttentionControl::off()).unwrap();
        assert_eq!(pa, pb);
        let other = b.predict_noise(&x, &Condition::text("other"), 500, &mut AttentionControl::off()).unwrap();
        assert_ne!(pa, other);
    }

    #[test]
    fn zero_spec_predicts_zero() {
        let m = MockBackend::new(MockSpec::zero(16), NoiseSchedule::default()).unwrap();
        let x = random_latent(16, 2);
        let c = Condition::text("x").with_depth(Image::filled(16, 16, 1, 0.5));
        let p = m.predict_noise(&x, &c, 10, &mut AttentionControl::off()).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn echo_mock_with_identity_pose_gives_zero_view_gradient() {
        let spec = MockSpec {
            mode: MockMode::EchoReference,
            latent_size: 16,
            ..MockSpec::default()
        };
        let schedule = NoiseSchedule::default();
        let m = MockBackend::new(spec, schedule.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = Image::from_fn(16, 16, 3, |r, c, k| ((r + 2 * c + k) % 7) as f64 / 7.0);
        let out = sds_grad_view(
            &m,
            &schedule,
            &reference,
            &reference,
            (Matrix3::identity(), Default::default()),
            &SdsConfig {
                cfg: 1.0,
                ..SdsConfig::view_default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(out.grad.data.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn cfg_zero_uses_only_the_unconditional_head() {
        let schedule = NoiseSchedule::default();
        let m = MockBackend::new(MockSpec::default(), schedule.clone()).unwrap();
        let x = random_latent(32, 4);
        let cond = Condition::text("person");
        let guided = m.predict_guided(&x, &cond, 300, 0.0, &mut AttentionControl::off()).unwrap();
        let uncond = m
            .predict_noise(&x, &cond.unconditional(), 300, &mut AttentionControl::off())
            .unwrap();
        for (a, b) in guided.data.iter().zip(&uncond.data) {
            assert!((a - b).abs() < 1e-15);
        }
        let _ = add_noise(&schedule, &x, &x, 1);
    }
}
