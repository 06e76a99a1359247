//! A small in-process latent denoiser with a linear patch encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionControl, BackendKind, Capabilities, Condition, DenoiserBackend};
use crate::error::{Error, Result};
use crate::resample::resize_area;
use crate::scene::Image;
use crate::util::{derive_seed, sha256_hex};

const LATENT_CHANNELS: usize = 4;
const PATCH: usize = 2;
const PATCH_DIM: usize = PATCH * PATCH * 3;
const EMBED: usize = 4;
const INPUT: usize = LATENT_CHANNELS + 1 + EMBED + 2;
const HIDDEN: usize = 32;

#[derive(Debug, Clone)]
pub struct LocalModelBackend {
    image_size: usize,
    num_steps: usize,
    /// Encoder rows are orthonormal, so the decoder is its transpose.
    encoder: [[f64; PATCH_DIM]; LATENT_CHANNELS],
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    output_scale: f64,
}

impl LocalModelBackend {
    pub fn new(seed: u64, image_size: usize, num_steps: usize) -> Result<Self> {
        if image_size < 4 || !image_size.is_multiple_of(PATCH) {
            return Err(Error::InvalidArgument("local model image size must be even and >= 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x10ca1]));
        let mut encoder = [[0.0; PATCH_DIM]; LATENT_CHANNELS];
        for r in 0..LATENT_CHANNELS {
            let mut v: [f64; PATCH_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            for prev in encoder.iter().take(r) {
                let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            encoder[r] = v.map(|x| x / n);
        }
        let b1_bound = 1.0 / (INPUT as f64).sqrt();
        let w1 = (0..INPUT * HIDDEN).map(|_| rng.random_range(-b1_bound..b1_bound)).collect();
        let b1 = (0..HIDDEN).map(|_| rng.random_range(-0.1..0.1)).collect();
        let b2_bound = 1.0 / (HIDDEN as f64).sqrt();
        let w2 = (0..HIDDEN * LATENT_CHANNELS).map(|_| rng.random_range(-b2_bound..b2_bound)).collect();
        Ok(Self {
            image_size,
            num_steps,
            encoder,
            w1,
            b1,
            w2,
            output_scale: 0.1,
        })
    }

    fn latent_side(&self) -> usize {
        self.image_size / PATCH
    }

    fn patch_pixels(&self, lr: usize, lc: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
        (0..PATCH_DIM).map(move |i| {
            let (p, ch) = (i / 3, i % 3);
            (i, lr * PATCH + p / PATCH, lc * PATCH + p % PATCH, ch)
        })
    }

    fn embedding(cond: &Condition) -> [f64; EMBED] {
        if cond.is_unconditional() {
            return [0.0; EMBED];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cond.content_hash());
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }
}

impl DenoiserBackend for LocalModelBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::LocalModel
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            view: true,
            depth: true,
            attention: false,
        }
    }

    fn image_size(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (LATENT_CHANNELS, self.latent_side(), self.latent_side())
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        if (image.width, image.height, image.channels) != (self.image_size, self.image_size, 3) {
            return Err(Error::ShapeMismatch("local model encoder input has the wrong shape".into()));
        }
        let n = self.latent_side();
        let mut z = Image::new(n, n, LATENT_CHANNELS);
        for lr in 0..n {
            for lc in 0..n {
                for (i, r, c, ch) in self.patch_pixels(lr, lc) {
                    let v = 2.0 * image.get(r, c, ch) - 1.0;
                    for k in 0..LATENT_CHANNELS {
                        let idx = z.index(lr, lc) + k;
                        z.data[idx] += self.encoder[k][i] * v;
                    }
                }
            }
        }
        Ok(z)
    }

    fn encode_adjoint(&self, grad: &Image) -> Result<Image> {
        let n = self.latent_side();
        let mut g = Image::new(self.image_size, self.image_size, 3);
        for lr in 0..n {
            for lc in 0..n {
                let gz = grad.pixel(lr, lc);
                for (i, r, c, ch) in self.patch_pixels(lr, lc) {
                    let v: f64 = (0..LATENT_CHANNELS).map(|k| self.encoder[k][i] * gz[k]).sum();
                    let idx = g.index(r, c) + ch;
                    g.data[idx] += 2.0 * v;
                }
            }
        }
        Ok(g)
    }

    fn decode(&self, latent: &Image) -> Result<Image> {
        let n = self.latent_side();
        let mut img = Image::new(self.image_size, self.image_size, 3);
        for lr in 0..n {
            for lc in 0..n {
                let z = latent.pixel(lr, lc);
                for (i, r, c, ch) in self.patch_pixels(lr, lc) {
                    let v: f64 = (0..LATENT_CHANNELS).map(|k| self.encoder[k][i] * z[k]).sum();
                    img.set(r, c, ch, ((v + 1.0) * 0.5).clamp(0.0, 1.0));
                }
            }
        }
        Ok(img)
    }

    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize, attn: &mut AttentionControl) -> Result<Image> {
        if attn.is_active() {
            return Err(Error::Capability {
                backend: "LocalModel".into(),
                capability: "attention taps",
            });
        }
        self.check(cond)?;
        let n = self.latent_side();
        let depth = match &cond.depth {
            Some(d) => Some(resize_area(d, n, n)),
            None => None,
        };
        let emb = Self::embedding(cond);
        let phase = std::f64::consts::PI * t as f64 / self.num_steps as f64;
        let mut out = Image::new(n, n, LATENT_CHANNELS);
        let mut input = [0.0; INPUT];
        let mut hidden = [0.0; HIDDEN];
        for p in 0..n * n {
            input[..LATENT_CHANNELS].copy_from_slice(&x_t.data[p * LATENT_CHANNELS..(p + 1) * LATENT_CHANNELS]);
            input[LATENT_CHANNELS] = depth.as_ref().map_or(0.0, |d| d.data[p]);
            input[LATENT_CHANNELS + 1..LATENT_CHANNELS + 1 + EMBED].copy_from_slice(&emb);
            input[INPUT - 2] = phase.sin();
            input[INPUT - 1] = phase.cos();
            for (h, hv) in hidden.iter_mut().enumerate() {
                let row = &self.w1[h * INPUT..(h + 1) * INPUT];
                *hv = (self.b1[h] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()).tanh();
            }
            for k in 0..LATENT_CHANNELS {
                let row = &self.w2[k * HIDDEN..(k + 1) * HIDDEN];
                out.data[p * LATENT_CHANNELS + k] =
                    self.output_scale * row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for v in self.encoder.iter().flatten().chain(&self.w1).chain(&self.b1).chain(&self.w2) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{sds_grad_text, NoiseSchedule, SdsConfig};

    #[test]
    fn encoder_adjoint_satisfies_inner_product_identity() {
        let m = LocalModelBackend::new(1, 8, 1000).unwrap();
        let img = Image::from_fn(8, 8, 3, |r, c, k| ((r * 3 + c * 5 + k) % 11) as f64 / 11.0);
        let z = m.encode(&img).unwrap();
        let g = Image::from_fn(4, 4, 4, |r, c, k| ((r + 2 * c + 3 * k) % 5) as f64 - 2.0);
        let lhs: f64 = z.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = m.encode_adjoint(&g).unwrap();
        let base = m.encode(&Image::new(8, 8, 3)).unwrap();
        let offset: f64 = base.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data.iter().zip(&back.data).map(|(a, b)| a * b).sum::<f64>() + offset;
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn sds_runs_in_latent_space_and_leaves_weights_untouched() {
        let schedule = NoiseSchedule::default();
        let m = LocalModelBackend::new(2, 16, 1000).unwrap();
        let before = m.fingerprint();
        let x = Image::filled(24, 24, 3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sds_grad_text(&m, &schedule, &x, "a person", &SdsConfig::text_default(), &mut rng).unwrap();
        assert_eq!((out.grad.width, out.grad.height, out.grad.channels), (24, 24, 3));
        assert_eq!(before, m.fingerprint());
    }
}
