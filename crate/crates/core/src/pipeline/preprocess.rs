//! Stage 0: normalize the input photo and estimate its normal map.

use std::path::PathBuf;
use std::time::Instant;

use super::normals::{run_estimator, silhouette_normals};
use super::{require_file, write_manifest, Run, StageStatus, PREPROCESS_DIR};
use crate::error::Result;
use crate::resample::resize_area;
use crate::scene::{preprocess_reference, Image, ImageBundle};

/// Reads the preprocessed reference bundle (rgb, alpha, normal).
pub fn load_reference(run: &Run) -> Result<ImageBundle> {
    let dir = run.dir(PREPROCESS_DIR);
    require_file(&dir.join("rgb.png"), "preprocess")?;
    ImageBundle::load_dir(&dir)
}

/// Area-resamples a bundle to `res`², renormalizing normals.
pub fn resize_bundle(bundle: &ImageBundle, res: usize) -> ImageBundle {
    if (bundle.width(), bundle.height()) == (res, res) {
        return bundle.clone();
    }
    let alpha = resize_area(&bundle.alpha, res, res);
    let normal = bundle.normal.as_ref().map(|n| {
        let mut n = resize_area(n, res, res);
        for p in 0..res * res {
            let v = &mut n.data[3 * p..3 * p + 3];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if alpha.data[p] > 0.0 && len > 1e-6 {
                v.iter_mut().for_each(|x| *x /= len);
            } else {
                v.fill(0.0);
            }
        }
        n
    });
    ImageBundle {
        rgb: resize_area(&bundle.rgb, res, res),
        alpha,
        normal,
        depth: bundle.depth.as_ref().map(|d| resize_area(d, res, res)),
    }
}

/// Estimator output when a hook is configured and works, else the silhouette fallback.
pub(crate) fn estimate_normals(run: &Run, rgba: &Image, alpha: &Image, name: &str) -> Result<Option<Image>> {
    let Some(cmd) = &run.cfg.normal_estimator else {
        return Ok(None);
    };
    match run_estimator(cmd, rgba, alpha, &run.dir(PREPROCESS_DIR).join("scratch"), name) {
        Ok(n) => Ok(Some(n)),
        Err(e) => {
            log::warn!("{name} normal estimator failed ({e}); using the geometric fallback");
            Ok(None)
        }
    }
}

pub fn run_preprocess(run: &Run) -> Result<StageStatus> {
    let started = Instant::now();
    let cfg = &run.cfg;
    let dir = run.dir(PREPROCESS_DIR);
    std::fs::create_dir_all(&dir)?;
    let raw = Image::load_rgba(&cfg.input_image)?;
    let pre = preprocess_reference(&raw, cfg.preprocess.resolution, cfg.preprocess.height_frac)?;
    for w in &pre.warnings {
        log::warn!("preprocess: {w:?}");
    }
    let mut bundle = pre.bundle;
    let normal = match estimate_normals(run, &pre.rgba, &bundle.alpha, "front")? {
        Some(n) => n,
        None => {
            log::info!("preprocess: front normals from the inflated silhouette");
            silhouette_normals(&bundle.alpha)
        }
    };
    bundle.normal = Some(normal);
    bundle.save_dir(&dir)?;
    pre.rgba.save_png(&dir.join("rgba.png"))?;
    let outputs: Vec<PathBuf> = ["rgb.png", "alpha.png", "normal.png", "rgba.png"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_manifest(run, PREPROCESS_DIR, std::slice::from_ref(&cfg.input_image), &outputs, started, StageStatus::Complete)?;
    Ok(StageStatus::Complete)
}
