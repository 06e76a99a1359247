//! Score distillation guidance and the denoiser backends behind it.

mod attention;
mod local;
mod mock;
pub(crate) mod remote;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionControl, AttentionMode, AttentionTap, Pass, DECODER_ATTENTION_LAYERS, MOCK_ATTENTION_LAYERS};
pub use local::LocalModelBackend;
pub use mock::{MockBackend, MockMode, MockSpec};
pub use remote::{RemoteBackend, RemoteConfig};

use crate::error::{Error, Result};
use crate::resample::Resampler;
use crate::scene::{Image, Vec3};
use crate::util::{hash_str, mix64};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Cumulative signal fraction per timestep, strictly decreasing.
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 8.5e-4, 1.2e-2)
    }
}

impl NoiseSchedule {
    /// Betas spaced linearly between `beta_start` and `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut acc = 1.0;
        let alpha_bar = (0..num_steps)
            .map(|i| {
                let f = if num_steps > 1 { i as f64 / (num_steps - 1) as f64 } else { 0.0 };
                acc *= 1.0 - (beta_start + f * (beta_end - beta_start));
                acc
            })
            .collect();
        Self { alpha_bar }
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Noise variance 1 - alpha_bar at `t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// Integer timesteps whose fraction `t / num_steps` lies strictly inside `range`.
    pub fn timestep_bounds(&self, range: (f64, f64)) -> Result<(usize, usize)> {
        let (lo, hi) = range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!("t range ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        let n = self.num_steps() as f64;
        let first = (lo * n).floor() as usize + 1;
        let last = (hi * n).ceil() as usize - 1;
        if first > last {
            return Err(Error::InvalidArgument(format!("t range ({lo}, {hi}) contains no timestep")));
        }
        Ok((first, last))
    }
}

/// Text prompt, reference view, or both, plus an optional depth channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub prompt: Option<String>,
    pub view: Option<ViewCondition>,
    /// Single-channel depth at the backend's latent resolution, values in [-1, 1].
    pub depth: Option<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewCondition {
    pub reference: Image,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Condition {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: Some(prompt.into()),
            ..Default::default()
        }
    }

    pub fn view(reference: Image, rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            view: Some(ViewCondition {
                reference,
                rotation,
                translation,
            }),
            ..Default::default()
        }
    }

    pub fn with_depth(mut self, depth: Image) -> Self {
        self.depth = Some(depth);
        self
    }

    /// Drops prompt and reference; depth stays (it is structural, not guidance).
    pub fn unconditional(&self) -> Self {
        Self {
            prompt: None,
            view: None,
            depth: self.depth.clone(),
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.prompt.is_none() && self.view.is_none()
    }

    /// Identity of the guidance content (prompt, reference, pose); ignores depth.
    pub fn content_hash(&self) -> u64 {
        let mut h = mix64(0x5eed);
        if let Some(p) = &self.prompt {
            h = mix64(h ^ hash_str(p));
        }
        if let Some(v) = &self.view {
            h = mix64(h ^ 0x7669_6577);
            for x in v.rotation.iter().chain(v.translation.iter()) {
                h = mix64(h ^ x.to_bits());
            }
            for x in &v.reference.data {
                h = mix64(h ^ x.to_bits());
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    LocalModel,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub text: bool,
    pub view: bool,
    pub depth: bool,
    pub attention: bool,
}

/// A noise predictor. Images are RGB in [0,1]; latents are whatever the
/// backend declares in `latent_shape`.
pub trait DenoiserBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn capabilities(&self) -> Capabilities;

    /// (width, height) of the images the backend consumes.
    fn image_size(&self) -> (usize, usize);

    /// (channels, height, width).
    fn latent_shape(&self) -> (usize, usize, usize);

    fn encode(&self, image: &Image) -> Result<Image>;

    /// Pulls a latent-space gradient back to image space (the encoder is linear).
    fn encode_adjoint(&self, grad: &Image) -> Result<Image>;

    fn decode(&self, latent: &Image) -> Result<Image>;

    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize, attn: &mut AttentionControl) -> Result<Image>;

    /// Classifier-free guided prediction. A weight of exactly 1 skips the
    /// unconditional pass.
    fn predict_guided(
        &self,
        x_t: &Image,
        cond: &Condition,
        t: usize,
        cfg: f64,
        attn: &mut AttentionControl,
    ) -> Result<Image> {
        attn.set_pass(Pass::Conditional);
        let c = self.predict_noise(x_t, cond, t, attn)?;
        if cfg == 1.0 {
            return Ok(c);
        }
        attn.set_pass(Pass::Unconditional);
        let mut u = self.predict_noise(x_t, &cond.unconditional(), t, attn)?;
        for (uv, cv) in u.data.iter_mut().zip(&c.data) {
            *uv += cfg * (cv - *uv);
        }
        Ok(u)
    }

    /// Digest of the backend's parameters; guidance never changes it.
    fn fingerprint(&self) -> String;

    fn check(&self, cond: &Condition) -> Result<()> {
        let caps = self.capabilities();
        let name = format!("{:?}", self.kind());
        let missing = if cond.prompt.is_some() && !caps.text {
            Some("text conditioning")
        } else if cond.view.is_some() && !caps.view {
            Some("view conditioning")
        } else if cond.depth.is_some() && !caps.depth {
            Some("depth conditioning")
        } else {
            None
        };
        match missing {
            Some(c) => Err(Error::Capability {
                backend: name,
                capability: c,
            }),
            None => Ok(()),
        }
    }

    fn zero_latent(&self) -> Image {
        let (c, h, w) = self.latent_shape();
        Image::new(w, h, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// w(t) = 1.
    #[default]
    Uniform,
    /// w(t) = 1 - alpha_bar(t).
    NoiseVariance,
}

impl Weighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::NoiseVariance => schedule.sigma2(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsConfig {
    pub t_range: (f64, f64),
    pub cfg: f64,
    pub weighting: Weighting,
    /// Extra multiplier on w(t).
    pub scale: f64,
}

impl SdsConfig {
    /// View-conditioned defaults: cfg 5, t in (0.2, 0.6).
    pub fn view_default() -> Self {
        Self {
            t_range: (0.2, 0.6),
            cfg: 5.0,
            weighting: Weighting::Uniform,
            scale: 1.0,
        }
    }

    /// Text-conditioned defaults for the texture stage: cfg 50, t in (0.02, 0.5).
    pub fn text_default() -> Self {
        Self {
            t_range: (0.02, 0.5),
            cfg: 50.0,
            weighting: Weighting::Uniform,
            scale: 1.0,
        }
    }
}

/// The random draw behind one SDS evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Image,
}

/// Draws `t` then `eps` in a fixed order so the stream can be replayed.
pub fn sample_noise_draw<R: Rng>(
    rng: &mut R,
    schedule: &NoiseSchedule,
    t_range: (f64, f64),
    shape: (usize, usize, usize),
) -> Result<NoiseDraw> {
    let (first, last) = schedule.timestep_bounds(t_range)?;
    let t = rng.random_range(first..=last);
    let (c, h, w) = shape;
    let mut eps = Image::new(w, h, c);
    for v in &mut eps.data {
        *v = rng.sample(StandardNormal);
    }
    Ok(NoiseDraw { t, eps })
}

pub fn add_noise(schedule: &NoiseSchedule, x0: &Image, eps: &Image, t: usize) -> Image {
    let a = schedule.alpha_bar[t].sqrt();
    let s = (1.0 - schedule.alpha_bar[t]).sqrt();
    let mut out = x0.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = a * *o + s * e;
    }
    out
}

#[derive(Debug, Clone)]
pub struct SdsOutput {
    /// Gradient w.r.t. the rendered image (same shape as the input).
    pub grad: Image,
    /// Value of the detached surrogate 0.5 * mean |g|^2, for logging.
    pub surrogate: f64,
    pub t: usize,
}

fn sds_grad<R: Rng>(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    x: &Image,
    cond: &Condition,
    cfg: &SdsConfig,
    rng: &mut R,
) -> Result<SdsOutput> {
    backend.check(cond)?;
    if x.channels != 3 {
        return Err(Error::ShapeMismatch(format!("SDS expects an RGB image, got {} channels", x.channels)));
    }
    let (bw, bh) = backend.image_size();
    let resampler = Resampler::bilinear(x.width, x.height, bw, bh);
    let resized = if (x.width, x.height) == (bw, bh) { x.clone() } else { resampler.apply(x) };
    let latent = backend.encode(&resized)?;
    let draw = sample_noise_draw(rng, schedule, cfg.t_range, backend.latent_shape())?;
    let x_t = add_noise(schedule, &latent, &draw.eps, draw.t);
    let mut attn = AttentionControl::off();
    let eps_hat = backend.predict_guided(&x_t, cond, draw.t, cfg.cfg, &mut attn)?;
    let w = cfg.scale * cfg.weighting.weight(schedule, draw.t);
    let mut g = eps_hat;
    for (gv, e) in g.data.iter_mut().zip(&draw.eps.data) {
        *gv = w * (*gv - e);
    }
    let surrogate = 0.5 * g.data.iter().map(|v| v * v).sum::<f64>() / g.data.len().max(1) as f64;
    let g_img = backend.encode_adjoint(&g)?;
    let grad = if (x.width, x.height) == (bw, bh) {
        g_img
    } else {
        resampler.apply_adjoint(&g_img)
    };
    Ok(SdsOutput {
        grad,
        surrogate,
        t: draw.t,
    })
}

/// Text-conditioned score distillation gradient.
pub fn sds_grad_text<R: Rng>(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    x: &Image,
    prompt: &str,
    cfg: &SdsConfig,
    rng: &mut R,
) -> Result<SdsOutput> {
    if !backend.capabilities().text {
        return Err(Error::Capability {
            backend: format!("{:?}", backend.kind()),
            capability: "text conditioning",
        });
    }
    sds_grad(backend, schedule, x, &Condition::text(prompt), cfg, rng)
}

/// View-conditioned score distillation gradient relative to a reference image.
pub fn sds_grad_view<R: Rng>(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    x: &Image,
    reference: &Image,
    rel_pose: (Matrix3<f64>, Vec3),
    cfg: &SdsConfig,
    rng: &mut R,
) -> Result<SdsOutput> {
    if !backend.capabilities().view {
        return Err(Error::Capability {
            backend: format!("{:?}", backend.kind()),
            capability: "view conditioning",
        });
    }
    let (bw, bh) = backend.image_size();
    let reference = crate::resample::resize_bilinear(reference, bw, bh);
    sds_grad(backend, schedule, x, &Condition::view(reference, rel_pose.0, rel_pose.1), cfg, rng)
}

/// Backend built from a closure; used for oracle tests.
pub struct FnBackend<F> {
    pub size: (usize, usize),
    pub predict: F,
}

impl<F> DenoiserBackend for FnBackend<F>
where
    F: Fn(&Image, &Condition, usize) -> Image + Send + Sync,
{
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
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
        self.size
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (3, self.size.1, self.size.0)
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }

    fn encode_adjoint(&self, grad: &Image) -> Result<Image> {
        Ok(grad.clone())
    }

    fn decode(&self, latent: &Image) -> Result<Image> {
        Ok(latent.clone())
    }

    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize, _: &mut AttentionControl) -> Result<Image> {
        Ok((self.predict)(x_t, cond, t))
    }

    fn fingerprint(&self) -> String {
        "closure".into()
    }
}
