//! Stage 1: fit the coarse density/color field to the reference view with
//! view-conditioned score distillation on random views.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{load_reference, resize_bundle};
use super::{check_finite, write_manifest, Run, StageStatus, COARSE_DIR, PREPROCESS_DIR};
use crate::error::{Error, Result};
use crate::field::{load_field, save_field, Aabb, FieldParams};
use crate::guidance::sds_grad_view;
use crate::losses::{mask_loss, masked_rgb_loss, normal_loss, stage_loss, LossLog, Stage};
use crate::optim::Adam;
use crate::render::{backward_pixels, render_with, render_with_loss, PixelGrad, RayMarchConfig, RenderOptions};
use crate::scene::{Camera, ImageBundle};
use crate::util::derive_seed;

pub const STAGE: &str = "coarse";

// Independent random streams drawn from the run seed.
const INIT_STREAM: u64 = 0xc0a1;
const VIEW_STREAM: u64 = 0xc0a2;
const JITTER_STREAM: u64 = 0xc0a3;
const NOISE_STREAM: u64 = 0xc0a4;

pub fn field_path(run: &Run) -> PathBuf {
    run.dir(COARSE_DIR).join("field.ctxf")
}

pub fn state_path(run: &Run) -> PathBuf {
    run.dir(COARSE_DIR).join("state.ctxs")
}

/// Freshly initialized coarse field with the centered density blob.
pub fn init_field(run: &Run) -> Result<FieldParams> {
    let c = &run.cfg.coarse;
    Ok(FieldParams::init(
        c.field.clone(),
        Aabb::cube(c.bound),
        derive_seed(run.cfg.seed, &[INIT_STREAM]),
    )?
    .with_blob(c.blob))
}

pub fn load_coarse_field(run: &Run) -> Result<FieldParams> {
    let p = field_path(run);
    super::require_file(&p, "coarse")?;
    load_field(&p)
}

pub fn march_config(run: &Run) -> RayMarchConfig {
    RayMarchConfig::for_distance(run.cfg.camera.distance, run.cfg.coarse.samples_per_ray)
}

/// One optimization step's losses and parameter gradient.
pub struct StepResult {
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Loss and gradient of the coarse objective at `step`. The reference view
/// is supervised every step; SDS views come from the coarse view sampler.
pub fn coarse_step(run: &Run, field: &FieldParams, target: &ImageBundle, ref_cam: &Camera, step: usize) -> Result<StepResult> {
    let cfg = &run.cfg;
    let march = march_config(run);
    let [(_, w_sds), (_, w_rgb), (_, w_normal), (_, w_mask)] = run.cfg.weights.active(Stage::Coarse, step);
    let n = (ref_cam.width * ref_cam.height) as f64;
    let tnormal = target.normal.as_ref().ok_or_else(|| Error::Config("reference normal map missing".into()))?;
    let opts = RenderOptions {
        normals: w_normal != 0.0,
        jitter: Some(derive_seed(cfg.seed, &[JITTER_STREAM, step as u64])),
    };
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let (rendered, _, mut grad) = render_with_loss(field, ref_cam, &march, opts, |p, o| {
        let m = target.alpha.data[p];
        let mut g = PixelGrad::default();
        for k in 0..3 {
            g.rgb[k] = w_rgb * m * sign(m * (o.rgb[k] - target.rgb.data[3 * p + k])) / (3.0 * n);
            if opts.normals {
                g.normal[k] = w_normal * m * sign(m * (o.normal[k] - tnormal.data[3 * p + k])) / (3.0 * n);
            }
        }
        g.alpha = w_mask * sign(o.alpha - m) / n;
        (0.0, g)
    })?;
    let mut components = BTreeMap::new();
    components.insert("rgb".to_string(), masked_rgb_loss(&target.rgb, &rendered.rgb, &target.alpha)?.value);
    components.insert("mask".to_string(), mask_loss(&target.alpha, &rendered.alpha)?.value);
    if let Some(rn) = &rendered.normal {
        components.insert("normal".to_string(), normal_loss(tnormal, rn, &target.alpha)?.value);
    }

    if w_sds != 0.0 && cfg.coarse.sds_batch > 0 {
        let sampler = run.sampler(cfg.camera.coarse_elevation_deg, cfg.coarse.sds_resolution, VIEW_STREAM);
        let ref_rgb = &target.rgb;
        let mut surrogate = 0.0;
        let scale = w_sds / cfg.coarse.sds_batch as f64;
        for b in 0..cfg.coarse.sds_batch {
            let cam = sampler.sample_indexed(step as u64, b as u64);
            let vopts = RenderOptions {
                normals: false,
                jitter: Some(derive_seed(cfg.seed, &[JITTER_STREAM, step as u64, 1 + b as u64])),
            };
            let view = render_with(field, &cam, &march, vopts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[NOISE_STREAM, step as u64, b as u64]));
            let sds = sds_grad_view(
                run.backend.as_ref(),
                &run.schedule,
                &view.rgb,
                ref_rgb,
                cam.relative_to(ref_cam),
                &cfg.coarse.sds,
                &mut rng,
            )?;
            surrogate += sds.surrogate / cfg.coarse.sds_batch as f64;
            let pixels: Vec<usize> = (0..cam.width * cam.height).collect();
            let pg: Vec<PixelGrad> = pixels
                .iter()
                .map(|&p| PixelGrad {
                    rgb: [0, 1, 2].map(|k| scale * sds.grad.data[3 * p + k]),
                    ..Default::default()
                })
                .collect();
            let g = backward_pixels(field, &cam, &march, &pixels, vopts, &pg)?;
            for (a, v) in grad.iter_mut().zip(g) {
                *a += v;
            }
        }
        components.insert("sds_view".to_string(), surrogate);
    }
    let total = stage_loss(Stage::Coarse, &components, &cfg.weights, step)?;
    Ok(StepResult {
        components,
        total,
        grad,
    })
}

pub fn run_coarse(run: &Run) -> Result<StageStatus> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let dir = run.dir(COARSE_DIR);
    std::fs::create_dir_all(&dir)?;
    let res = cfg.coarse.resolution;
    let target = resize_bundle(&load_reference(run)?, res);
    let ref_cam = run.reference_camera(res)?;

    let mut field = init_field(run)?;
    let mut opt = Adam::new(field.params.len(), cfg.coarse.lr);
    let mut start = 0;
    if let Some(ck) = run.resume_state(STAGE, &state_path(run))? {
        field = FieldParams::from_params(field.config.clone(), field.bbox, field.blob, ck.params)?;
        opt = ck.optimizer;
        start = ck.step;
    }
    let log_path = dir.join("loss.csv");
    let mut log = if start > 0 { LossLog::append(&log_path)? } else { LossLog::create(&log_path)? };

    let total_steps = cfg.coarse.steps;
    let mut status = StageStatus::Complete;
    for step in start..total_steps {
        let r = coarse_step(run, &field, &target, &ref_cam, step)?;
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
            log::info!("coarse step {done}/{total_steps}: loss {:.5}", r.total);
        }
        if run.should_save(done, cfg.coarse.checkpoint_every, total_steps) {
            run.save_state(STAGE, &state_path(run), done, &field.params, &opt)?;
        }
        if run.opts.stop_after == Some(done) && done < total_steps {
            status = StageStatus::Stopped { step: done };
            break;
        }
    }
    log.flush()?;
    let mut outputs = vec![state_path(run), log_path];
    if status == StageStatus::Complete {
        save_field(&field_path(run), &field)?;
        let front = render_with(&field, &ref_cam, &march_config(run), RenderOptions::eval())?;
        front.save_dir(&dir.join("front"))?;
        outputs.push(field_path(run));
        outputs.push(dir.join("front"));
    }
    let pre = run.dir(PREPROCESS_DIR);
    let inputs = ["rgb.png", "alpha.png", "normal.png"].map(|f| pre.join(f));
    write_manifest(run, COARSE_DIR, &inputs, &outputs, started, status)?;
    Ok(status)
}
