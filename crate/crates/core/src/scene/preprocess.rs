//! Reference-image normalization: square canvas, subject scaled to a fixed
//! fraction of the height and centered, background composited to white.

use log::warn;

use super::image::{Image, ImageBundle};
use crate::error::{Error, Result};
use crate::resample::{AxisWeights, Resampler};

/// Alpha at or above this counts as foreground when measuring the subject.
const FOREGROUND_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessWarning {
    /// The subject touches all four borders of the input; it is probably cropped.
    CroppedSubject,
}

/// The axis-aligned map applied to the input: `out = (in - src_center) * scale + dst_center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectTransform {
    pub scale: f64,
    pub src_center: (f64, f64),
    pub dst_center: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub bundle: ImageBundle,
    /// The normalized RGBA image (straight alpha) before compositing.
    pub rgba: Image,
    pub transform: SubjectTransform,
    pub warnings: Vec<PreprocessWarning>,
}

struct BBox {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl BBox {
    fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    /// Continuous (x, y) center.
    fn center(&self) -> (f64, f64) {
        (
            (self.c0 + self.c1 + 1) as f64 * 0.5,
            (self.r0 + self.r1 + 1) as f64 * 0.5,
        )
    }
}

fn foreground_bbox(rgba: &Image) -> Option<BBox> {
    let mut bbox: Option<BBox> = None;
    for r in 0..rgba.height {
        for c in 0..rgba.width {
            if rgba.get(r, c, 3) >= FOREGROUND_ALPHA {
                let b = bbox.get_or_insert(BBox {
                    r0: r,
                    r1: r,
                    c0: c,
                    c1: c,
                });
                b.r0 = b.r0.min(r);
                b.r1 = b.r1.max(r);
                b.c0 = b.c0.min(c);
                b.c1 = b.c1.max(c);
            }
        }
    }
    bbox
}

/// Scales and centers the subject of an RGBA image (straight alpha) onto a
/// `target_res` square canvas.
///
/// Inputs that are already normalized (square at `target_res`, subject height
/// within one pixel of the target and center within one pixel) are returned
/// unchanged, which makes the operation idempotent.
pub fn normalize_subject(
    raw: &Image,
    target_res: usize,
    height_frac: f64,
) -> Result<(Image, SubjectTransform, Vec<PreprocessWarning>)> {
    if raw.channels != 4 {
        return Err(Error::InvalidArgument("preprocessing expects an RGBA image".into()));
    }
    if target_res < 64 {
        return Err(Error::InvalidArgument(format!("target_res {target_res} < 64")));
    }
    if !(height_frac > 0.0 && height_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("height_frac {height_frac} not in (0,1]")));
    }
    let bbox = foreground_bbox(raw).ok_or(Error::EmptyMask)?;
    let mut warnings = Vec::new();
    if bbox.r0 == 0 && bbox.c0 == 0 && bbox.r1 + 1 == raw.height && bbox.c1 + 1 == raw.width {
        warn!("subject touches all four image borders; it may be cropped");
        warnings.push(PreprocessWarning::CroppedSubject);
    }

    let target_h = (height_frac * target_res as f64).round().max(1.0);
    let (cx, cy) = bbox.center();
    let mid = target_res as f64 * 0.5;
    let square = raw.width == target_res && raw.height == target_res;

    if square && (bbox.height() as f64 - target_h).abs() <= 1.0 {
        let snap = |d: f64| {
            let d = d.round();
            if d.abs() <= 1.0 {
                0
            } else {
                d as i64
            }
        };
        let (dx, dy) = (snap(mid - cx), snap(mid - cy));
        let transform = SubjectTransform {
            scale: 1.0,
            src_center: (cx, cy),
            dst_center: (cx + dx as f64, cy + dy as f64),
        };
        if dx == 0 && dy == 0 {
            return Ok((raw.clone(), transform, warnings));
        }
        let rs = Resampler {
            rows: AxisWeights::shift(raw.height, target_res, dy),
            cols: AxisWeights::shift(raw.width, target_res, dx),
        };
        return Ok((resample_straight(raw, &rs), transform, warnings));
    }

    let scale = target_h / bbox.height() as f64;
    let rs = Resampler {
        rows: AxisWeights::scaled_triangle(raw.height, target_res, scale, cy, mid),
        cols: AxisWeights::scaled_triangle(raw.width, target_res, scale, cx, mid),
    };
    let transform = SubjectTransform {
        scale,
        src_center: (cx, cy),
        dst_center: (mid, mid),
    };
    Ok((resample_straight(raw, &rs), transform, warnings))
}

/// Resamples in premultiplied space and converts back to straight alpha.
fn resample_straight(raw: &Image, rs: &Resampler) -> Image {
    let premult = Image::from_fn(raw.width, raw.height, 4, |r, c, ch| {
        let a = raw.get(r, c, 3);
        if ch == 3 {
            a
        } else {
            raw.get(r, c, ch) * a
        }
    });
    let mut out = rs.apply(&premult);
    for px in out.data.chunks_exact_mut(4) {
        let a = px[3].clamp(0.0, 1.0);
        px[3] = a;
        for v in &mut px[..3] {
            *v = if a > 1e-12 { (*v / a).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

/// Composites straight-alpha RGBA over white into an rgb + alpha bundle.
pub fn composite_on_white(rgba: &Image) -> ImageBundle {
    let rgb = Image::from_fn(rgba.width, rgba.height, 3, |r, c, ch| {
        let a = rgba.get(r, c, 3);
        rgba.get(r, c, ch) * a + (1.0 - a)
    });
    ImageBundle {
        rgb,
        alpha: rgba.channel(3),
        normal: None,
        depth: None,
    }
}

/// Normalizes the subject and composites it on white.
pub fn preprocess_reference(raw: &Image, target_res: usize, height_frac: f64) -> Result<Preprocessed> {
    let (rgba, transform, warnings) = normalize_subject(raw, target_res, height_frac)?;
    Ok(Preprocessed {
        bundle: composite_on_white(&rgba),
        rgba,
        transform,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_subject(w: usize, h: usize, rows: (usize, usize), cols: (usize, usize)) -> Image {
        Image::from_fn(w, h, 4, |r, c, ch| {
            let inside = r >= rows.0 && r < rows.1 && c >= cols.0 && c < cols.1;
            match (inside, ch) {
                (true, 3) => 1.0,
                (true, 0) => 0.8,
                (true, _) => 0.2,
                (false, _) => 0.0,
            }
        })
    }

    fn bbox_of(img: &Image) -> BBox {
        foreground_bbox(img).unwrap()
    }

    #[test]
    fn sshq_sized_input_lands_at_seventy_percent_height() {
        // 512 wide, 1024 tall, subject 900 px tall
        let raw = rect_subject(512, 1024, (60, 960), (180, 330));
        let out = preprocess_reference(&raw, 648, 0.7).unwrap();
        assert_eq!((out.bundle.width(), out.bundle.height()), (648, 648));
        let b = bbox_of(&out.rgba);
        assert!((b.height() as i64 - 454).abs() <= 1, "height {}", b.height());
        let (cx, cy) = b.center();
        assert!((cx - 324.0).abs() <= 1.0 && (cy - 324.0).abs() <= 1.0);
    }

    #[test]
    fn small_square_scales_to_expected_box() {
        // 10x10 square at rows/cols 45..55 in a 100x100 image, target 200 at 0.5
        let raw = rect_subject(100, 100, (45, 55), (45, 55));
        let out = preprocess_reference(&raw, 200, 0.5).unwrap();
        let b = bbox_of(&out.rgba);
        // scale 10 about the subject center (50, 50) -> rows/cols 50..150
        assert_eq!((b.r0, b.r1, b.c0, b.c1), (50, 149, 50, 149));
        assert_eq!(out.transform.scale, 10.0);
    }

    #[test]
    fn already_normalized_input_only_recenters() {
        let raw = rect_subject(648, 648, (40, 494), (100, 200));
        let (out, t, _) = normalize_subject(&raw, 648, 0.7).unwrap();
        assert_eq!(t.scale, 1.0);
        let b = bbox_of(&out);
        assert_eq!(b.height(), 454);
        // pixels are moved, not resampled
        assert_eq!(out.get(b.r0 + 3, b.c0 + 3, 0), 0.8);
        let again = normalize_subject(&out, 648, 0.7).unwrap().0;
        assert_eq!(again, out);
    }

    #[test]
    fn second_pass_is_identity() {
        let raw = rect_subject(300, 420, (33, 401), (90, 171));
        let once = normalize_subject(&raw, 128, 0.7).unwrap().0;
        let twice = normalize_subject(&once, 128, 0.7).unwrap().0;
        assert_eq!(once, twice);
    }

    #[test]
    fn background_is_white_and_foreground_keeps_color() {
        let raw = rect_subject(100, 100, (20, 80), (40, 60));
        let out = preprocess_reference(&raw, 64, 0.7).unwrap();
        assert_eq!(out.bundle.rgb.pixel(0, 0), &[1.0, 1.0, 1.0]);
        let p = out.bundle.rgb.pixel(32, 32);
        assert!((p[0] - 0.8).abs() < 1e-9 && (p[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let raw = Image::new(80, 80, 4);
        assert!(matches!(preprocess_reference(&raw, 64, 0.7), Err(Error::EmptyMask)));
    }

    #[test]
    fn full_frame_subject_warns_but_succeeds() {
        let raw = rect_subject(80, 80, (0, 80), (0, 80));
        let out = preprocess_reference(&raw, 64, 0.7).unwrap();
        assert_eq!(out.warnings, vec![PreprocessWarning::CroppedSubject]);
    }
}
