//! Back-view synthesis: DDIM inversion of the reference, then two DDIM
//! sampling branches in lock-step where the back branch attends over keys
//! and values captured from the front branch.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{AttentionControl, Condition, DenoiserBackend, NoiseSchedule, DECODER_ATTENTION_LAYERS};
use crate::resample::{resize_area, resize_bilinear};
use crate::scene::{write_depth, Image, ImageBundle};
use crate::util::atomic_write;

const BACK_VIEW: &str = "back view";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Front,
    Back,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Image,
    /// Index into the DDIM timestep list (0 = clean).
    pub t_index: usize,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPolicy {
    pub layers: BTreeSet<String>,
    /// Half-open fraction `[lo, hi)` of sampling steps with injection active.
    pub step_window: (f64, f64),
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            layers: DECODER_ATTENTION_LAYERS.iter().map(|s| s.to_string()).collect(),
            step_window: (0.0, 1.0),
        }
    }
}

impl InjectionPolicy {
    pub fn disabled() -> Self {
        Self {
            layers: BTreeSet::new(),
            step_window: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.step_window;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("step window [{lo}, {hi}] must lie in [0, 1]")));
        }
        Ok(())
    }

    /// Whether injection applies at sampling step `i` of `steps`.
    pub fn active(&self, i: usize, steps: usize) -> bool {
        let f = i as f64 / steps as f64;
        !self.layers.is_empty() && self.step_window.0 <= f && f < self.step_window.1
    }

    fn ever_active(&self, steps: usize) -> bool {
        (0..steps).any(|i| self.active(i, steps))
    }
}

/// Appends ", back view" unless the prompt already mentions it.
pub fn augment_back_prompt(prompt: &str) -> String {
    if prompt.contains(BACK_VIEW) {
        prompt.to_string()
    } else if prompt.trim().is_empty() {
        BACK_VIEW.to_string()
    } else {
        format!("{prompt}, {BACK_VIEW}")
    }
}

/// Timesteps `round(k (N-1) / S)` for `k = 0..=S`.
pub fn ddim_timesteps(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let last = (schedule.num_steps() - 1) as f64;
    (0..=steps)
        .map(|k| (k as f64 * last / steps as f64).round() as usize)
        .collect()
}

/// Moves `x` from noise level `a_from` to `a_to` along the predicted noise.
fn ddim_step(x: &Image, eps: &Image, a_from: f64, a_to: f64) -> Image {
    let mut out = x.clone();
    let (sf, st) = (a_from.sqrt(), a_to.sqrt());
    let (nf, nt) = ((1.0 - a_from).sqrt(), (1.0 - a_to).sqrt());
    for ((o, xv), e) in out.data.iter_mut().zip(&x.data).zip(&eps.data) {
        *o = st * (xv - nf * e) / sf + nt * e;
    }
    out
}

fn require_depth(backend: &dyn DenoiserBackend) -> Result<()> {
    if backend.capabilities().depth {
        Ok(())
    } else {
        Err(Error::Capability {
            backend: format!("{:?}", backend.kind()),
            capability: "depth conditioning",
        })
    }
}

/// Inverts a clean latent to the start noise code (guidance weight 1).
pub fn ddim_invert_latent(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    x0: &Image,
    cond: &Condition,
    steps: usize,
) -> Result<LatentState> {
    if steps == 0 {
        return Err(Error::InvalidArgument("DDIM needs at least one step".into()));
    }
    let ts = ddim_timesteps(schedule, steps);
    let mut x = x0.clone();
    let mut attn = AttentionControl::off();
    for k in 0..steps {
        let eps = backend.predict_guided(&x, cond, ts[k], 1.0, &mut attn)?;
        x = ddim_step(&x, &eps, schedule.alpha_bar[ts[k]], schedule.alpha_bar[ts[k + 1]]);
    }
    Ok(LatentState {
        x,
        t_index: steps,
        branch: Branch::Front,
    })
}

/// Encodes the reference image and inverts it under the front prompt and depth.
pub fn ddim_invert(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    image: &Image,
    depth: &Image,
    prompt: &str,
    steps: usize,
) -> Result<LatentState> {
    require_depth(backend)?;
    let (w, h) = backend.image_size();
    let x0 = backend.encode(&resize_bilinear(image, w, h))?;
    let cond = Condition::text(prompt).with_depth(depth.clone());
    ddim_invert_latent(backend, schedule, &x0, &cond, steps)
}

/// Plain DDIM sampling from `state` down to the clean latent.
pub fn ddim_sample(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    state: &LatentState,
    cond: &Condition,
    cfg: f64,
) -> Result<Image> {
    let steps = state.t_index;
    let ts = ddim_timesteps(schedule, steps);
    let mut x = state.x.clone();
    let mut attn = AttentionControl::off();
    for k in (1..=steps).rev() {
        let eps = backend.predict_guided(&x, cond, ts[k], cfg, &mut attn)?;
        x = ddim_step(&x, &eps, schedule.alpha_bar[ts[k]], schedule.alpha_bar[ts[k - 1]]);
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct DualBranchOutput {
    pub front_latent: Image,
    pub back_latent: Image,
    pub front_image: Image,
    pub back_image: Image,
    pub back_prompt: String,
}

/// Runs the front and back branches from the same start code. The back
/// branch uses the front branch's keys/values on the policy's layers and steps.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_back_view(
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    x_t: &LatentState,
    depth_front: &Image,
    depth_back: &Image,
    prompt: &str,
    policy: &InjectionPolicy,
    cfg: f64,
) -> Result<DualBranchOutput> {
    require_depth(backend)?;
    policy.validate()?;
    let steps = x_t.t_index;
    if steps == 0 {
        return Err(Error::InvalidArgument("start code has no steps to sample".into()));
    }
    let taps = policy.ever_active(steps);
    if taps && !backend.capabilities().attention {
        return Err(Error::Capability {
            backend: format!("{:?}", backend.kind()),
            capability: "attention taps",
        });
    }
    let back_prompt = augment_back_prompt(prompt);
    let cond_front = Condition::text(prompt).with_depth(depth_front.clone());
    let cond_back = Condition::text(back_prompt.clone()).with_depth(depth_back.clone());
    let ts = ddim_timesteps(schedule, steps);
    let mut xf = x_t.x.clone();
    let mut xb = x_t.x.clone();
    for (i, k) in (1..=steps).rev().enumerate() {
        let (a_from, a_to) = (schedule.alpha_bar[ts[k]], schedule.alpha_bar[ts[k - 1]]);
        let mut front_ctl = if taps { AttentionControl::capture() } else { AttentionControl::off() };
        let ef = backend.predict_guided(&xf, &cond_front, ts[k], cfg, &mut front_ctl)?;
        let mut back_ctl = if policy.active(i, steps) {
            AttentionControl::inject_from(&front_ctl, &policy.layers)
        } else {
            AttentionControl::off()
        };
        let eb = backend.predict_guided(&xb, &cond_back, ts[k], cfg, &mut back_ctl)?;
        xf = ddim_step(&xf, &ef, a_from, a_to);
        xb = ddim_step(&xb, &eb, a_from, a_to);
    }
    Ok(DualBranchOutput {
        front_image: backend.decode(&xf)?,
        back_image: backend.decode(&xb)?,
        front_latent: xf,
        back_latent: xb,
        back_prompt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthCondition {
    pub channel: Image,
    /// Foreground depth had no range; the channel is flat zero.
    pub degenerate: bool,
}

/// Maps foreground depth to [-1, 1] by per-image min/max, background to +1,
/// then area-resizes to `size` (width, height).
pub fn normalize_depth_for_conditioning(depth: &Image, mask: &Image, size: (usize, usize)) -> Result<DepthCondition> {
    depth.check_same_shape(mask, "depth mask")?;
    let fg: Vec<bool> = mask.data.iter().zip(&depth.data).map(|(&m, d)| m >= 0.5 && d.is_finite()).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (d, &f) in depth.data.iter().zip(&fg) {
        if f {
            lo = lo.min(*d);
            hi = hi.max(*d);
        }
    }
    if !(hi - lo > 1e-12) {
        log::warn!("depth has no foreground range; using a flat conditioning channel");
        return Ok(DepthCondition {
            channel: Image::new(size.0, size.1, 1),
            degenerate: true,
        });
    }
    let mut full = Image::new(depth.width, depth.height, 1);
    for ((o, d), &f) in full.data.iter_mut().zip(&depth.data).zip(&fg) {
        *o = if f { 2.0 * (d - lo) / (hi - lo) - 1.0 } else { 1.0 };
    }
    Ok(DepthCondition {
        channel: resize_area(&full, size.0, size.1),
        degenerate: false,
    })
}

/// Resizes a decoded image to the silhouette's resolution and composites it
/// on white using that silhouette.
pub fn mask_to_silhouette(image: &Image, alpha: &Image) -> ImageBundle {
    let rgb = resize_bilinear(image, alpha.width, alpha.height);
    let mut out = rgb.clone();
    for (p, &a) in alpha.data.iter().enumerate() {
        for k in 0..3 {
            out.data[3 * p + k] = a * rgb.data[3 * p + k] + (1.0 - a);
        }
    }
    ImageBundle {
        rgb: out,
        alpha: alpha.clone(),
        normal: None,
        depth: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackViewSidecar {
    pub front_prompt: String,
    pub back_prompt: String,
    pub policy: InjectionPolicy,
    pub steps: usize,
    pub cfg: f64,
    pub backend: String,
}

/// Writes the back view, its depth and the JSON sidecar into `dir`.
pub fn save_back_view(dir: &Path, back: &ImageBundle, depth_back: &Image, sidecar: &BackViewSidecar) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    back.rgb.save_png(&dir.join("back_rgb.png"))?;
    back.alpha.save_png(&dir.join("back_alpha.png"))?;
    write_depth(&dir.join("back_depth.ctxd"), depth_back)?;
    atomic_write(&dir.join("backview.json"), &serde_json::to_vec_pretty(sidecar)?)
}
