//! Stage 2: synthesize the back view from the reference image, guided by
//! depth rendered from the coarse field, and estimate its normals.

use std::time::Instant;

use super::coarse::{field_path, load_coarse_field, march_config};
use super::normals::depth_normals;
use super::preprocess::{estimate_normals, load_reference, resize_bundle};
use super::{require_file, write_manifest, Run, StageStatus, BACKVIEW_DIR, PREPROCESS_DIR};
use crate::backview::{
    ddim_invert, mask_to_silhouette, normalize_depth_for_conditioning, save_back_view, synthesize_back_view,
    BackViewSidecar, InjectionPolicy,
};
use crate::error::Result;
use crate::render::render;
use crate::scene::{decode_normals, encode_normals, write_depth, Image, ImageBundle};

/// Reads the synthesized back view (rgb, alpha, normal).
pub fn load_back_view(run: &Run) -> Result<ImageBundle> {
    let dir = run.dir(BACKVIEW_DIR);
    require_file(&dir.join("back_rgb.png"), "backview")?;
    let rgb = Image::load_png(&dir.join("back_rgb.png"), 3)?;
    let alpha = Image::load_png(&dir.join("back_alpha.png"), 1)?;
    let normal = decode_normals(&Image::load_png(&dir.join("back_normal.png"), 3)?, &alpha);
    let bundle = ImageBundle {
        rgb,
        alpha,
        normal: Some(normal),
        depth: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn rgba_of(bundle: &ImageBundle) -> Image {
    Image::from_fn(bundle.width(), bundle.height(), 4, |r, c, ch| {
        if ch == 3 {
            bundle.alpha.get(r, c, 0)
        } else {
            bundle.rgb.get(r, c, ch)
        }
    })
}

pub fn run_backview(run: &Run) -> Result<StageStatus> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let dir = run.dir(BACKVIEW_DIR);
    std::fs::create_dir_all(&dir)?;
    let field = load_coarse_field(run)?;
    let reference = load_reference(run)?;
    let res = cfg.preprocess.resolution;
    let reference = resize_bundle(&reference, res);
    let front_cam = run.reference_camera(res)?;
    let back_cam = front_cam.back_view();
    let march = march_config(run);
    let front = render(&field, &front_cam, &march)?;
    let back = render(&field, &back_cam, &march)?;
    let (front_depth, back_depth) = (front.depth.clone().unwrap(), back.depth.clone().unwrap());

    let backend = run.backend.as_ref();
    let (_, lh, lw) = backend.latent_shape();
    let dr = normalize_depth_for_conditioning(&front_depth, &front.alpha, (lw, lh))?;
    let db = normalize_depth_for_conditioning(&back_depth, &back.alpha, (lw, lh))?;
    let steps = cfg.backview.ddim_steps;
    let start = ddim_invert(backend, &run.schedule, &reference.rgb, &dr.channel, &cfg.prompt, steps)?;
    let mut policy = cfg.backview.injection.clone();
    if !backend.capabilities().attention && !policy.layers.is_empty() {
        log::warn!("backend exposes no attention taps; sampling the back view without injection");
        policy = InjectionPolicy::disabled();
    }
    let out = synthesize_back_view(
        backend,
        &run.schedule,
        &start,
        &dr.channel,
        &db.channel,
        &cfg.prompt,
        &policy,
        cfg.backview.cfg,
    )?;
    let mut bundle = mask_to_silhouette(&out.back_image, &back.alpha);
    let normal = match estimate_normals(run, &rgba_of(&bundle), &bundle.alpha, "back")? {
        Some(n) => n,
        None => {
            log::info!("backview: back normals from the coarse field's depth");
            depth_normals(&back_depth, &bundle.alpha, &back_cam)
        }
    };
    bundle.normal = Some(normal.clone());
    let sidecar = BackViewSidecar {
        front_prompt: cfg.prompt.clone(),
        back_prompt: out.back_prompt.clone(),
        policy,
        steps,
        cfg: cfg.backview.cfg,
        backend: backend.fingerprint(),
    };
    save_back_view(&dir, &bundle, &back_depth, &sidecar)?;
    encode_normals(&normal).save_png(&dir.join("back_normal.png"))?;
    write_depth(&dir.join("front_depth.ctxd"), &front_depth)?;
    let outputs = ["back_rgb.png", "back_alpha.png", "back_normal.png", "back_depth.ctxd", "front_depth.ctxd", "backview.json"]
        .map(|f| dir.join(f));
    let inputs = [field_path(run), run.dir(PREPROCESS_DIR).join("rgb.png")];
    write_manifest(run, BACKVIEW_DIR, &inputs, &outputs, started, StageStatus::Complete)?;
    Ok(StageStatus::Complete)
}
