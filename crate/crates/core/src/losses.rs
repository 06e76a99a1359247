//! Supervision losses and their stage-level weighted combinations.
//!
//! Image losses are per-element means so weights stay resolution independent.
//! Every loss returns its value together with the gradient w.r.t. the
//! rendered (second) argument.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{laplacian_energy, normal_consistency, TriMesh};
use crate::scene::{Image, Vec3};

/// A loss value and its gradient w.r.t. the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub value: f64,
    pub grad: Image,
}

fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference of two masks.
pub fn mask_loss(target: &Image, rendered: &Image) -> Result<ImageLoss> {
    target.check_same_shape(rendered, "mask")?;
    let n = rendered.data.len().max(1) as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for ((g, t), r) in grad.data.iter_mut().zip(&target.data).zip(&rendered.data) {
        sum += (r - t).abs();
        *g = l1_sign(r - t) / n;
    }
    Ok(ImageLoss { value: sum / n, grad })
}

/// Mean absolute difference of `target * mask` and `rendered * mask`.
pub fn masked_rgb_loss(target: &Image, rendered: &Image, mask: &Image) -> Result<ImageLoss> {
    target.check_same_shape(rendered, "masked image")?;
    if mask.width != target.width || mask.height != target.height || mask.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}x{}, images are {}x{}",
            mask.width, mask.height, mask.channels, target.width, target.height
        )));
    }
    let c = target.channels;
    let n = target.data.len().max(1) as f64;
    let mut grad = Image::new(rendered.width, rendered.height, c);
    let mut sum = 0.0;
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for k in 0..c {
            let j = i * c + k;
            let d = m * rendered.data[j] - m * target.data[j];
            sum += d.abs();
            grad.data[j] = m * l1_sign(d) / n;
        }
    }
    Ok(ImageLoss { value: sum / n, grad })
}

/// Masked L1 on normal maps; same structure as [`masked_rgb_loss`].
pub fn normal_loss(target: &Image, rendered: &Image, mask: &Image) -> Result<ImageLoss> {
    masked_rgb_loss(target, rendered, mask)
}

/// Mean over pixels of the squared per-pixel difference.
pub fn normal_mse(target: &Image, rendered: &Image) -> Result<ImageLoss> {
    target.check_same_shape(rendered, "normal map")?;
    let pixels = rendered.num_pixels().max(1) as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for ((g, t), r) in grad.data.iter_mut().zip(&target.data).zip(&rendered.data) {
        sum += (r - t) * (r - t);
        *g = 2.0 * (r - t) / pixels;
    }
    Ok(ImageLoss { value: sum / pixels, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothWeights {
    pub laplacian: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryLoss {
    pub total: f64,
    pub front: ImageLoss,
    pub back: ImageLoss,
    pub laplacian: f64,
    pub consistency: f64,
    /// Gradient of the weighted smoothness terms w.r.t. mesh vertices.
    pub smooth_grad: Vec<Vec3>,
}

/// Front and back normal reconstruction plus weighted mesh smoothness.
pub fn geometry_loss(
    target_front: &Image,
    rendered_front: &Image,
    target_back: Option<&Image>,
    rendered_back: &Image,
    mesh: &TriMesh,
    weights: SmoothWeights,
) -> Result<GeometryLoss> {
    let target_back = target_back.ok_or(Error::MissingBackNormal)?;
    let front = normal_mse(target_front, rendered_front)?;
    let back = normal_mse(target_back, rendered_back)?;
    let (laplacian, g_lap) = laplacian_energy(mesh);
    let (consistency, g_con) = normal_consistency(mesh);
    let smooth_grad = g_lap
        .iter()
        .zip(&g_con)
        .map(|(a, b)| a * weights.laplacian + b * weights.consistency)
        .collect();
    let mut total = front.value + back.value;
    if weights.laplacian != 0.0 {
        total += weights.laplacian * laplacian;
    }
    if weights.consistency != 0.0 {
        total += weights.consistency * consistency;
    }
    Ok(GeometryLoss {
        total,
        front,
        back,
        laplacian,
        consistency,
        smooth_grad,
    })
}

/// A square patch of a rendered image with its visibility bits.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub origin: (usize, usize),
    pub size: usize,
    pub rgb: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
    /// Pixels outside the silhouette take no part in the loss.
    pub foreground: Vec<bool>,
}

impl PatchSample {
    /// Cuts a `size`-square patch at `origin` (row, col).
    pub fn extract(rgb: &Image, visibility: &Image, alpha: Option<&Image>, origin: (usize, usize), size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyPatch);
        }
        if origin.0 + size > rgb.height || origin.1 + size > rgb.width {
            return Err(Error::InvalidArgument(format!(
                "patch {size} at {origin:?} exceeds {}x{} image",
                rgb.width, rgb.height
            )));
        }
        let mut out = Self {
            origin,
            size,
            rgb: Vec::with_capacity(size * size),
            visible: Vec::with_capacity(size * size),
            foreground: Vec::with_capacity(size * size),
        };
        for r in origin.0..origin.0 + size {
            for c in origin.1..origin.1 + size {
                let p = rgb.pixel(r, c);
                out.rgb.push([p[0], p[1], p[2]]);
                out.visible.push(visibility.get(r, c, 0) >= 0.5);
                out.foreground.push(alpha.is_none_or(|a| a.get(r, c, 0) >= 0.5));
            }
        }
        Ok(out)
    }

    pub fn from_parts(size: usize, rgb: Vec<[f64; 3]>, visible: Vec<bool>) -> Result<Self> {
        if size == 0 || rgb.is_empty() {
            return Err(Error::EmptyPatch);
        }
        if rgb.len() != size * size || visible.len() != rgb.len() {
            return Err(Error::ShapeMismatch(format!(
                "patch of size {size} needs {} pixels, got {} colors and {} bits",
                size * size,
                rgb.len(),
                visible.len()
            )));
        }
        let n = rgb.len();
        Ok(Self {
            origin: (0, 0),
            size,
            rgb,
            visible,
            foreground: vec![true; n],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpcResult {
    pub value: f64,
    /// Gradient w.r.t. each patch pixel color (zero for visible pixels).
    pub grad: Vec<[f64; 3]>,
    /// Nearest visible pixel chosen for each invisible pixel.
    pub nearest: Vec<Option<usize>>,
    /// Set when the patch had invisible pixels but nothing visible to match.
    pub no_visible: bool,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Sum over invisible pixels of the squared color distance to the nearest
/// visible pixel. Visible colors are treated as constants.
pub fn vpc_loss(patch: &PatchSample) -> Result<VpcResult> {
    if patch.rgb.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let n = patch.rgb.len();
    // visible colors sorted by red, searched outward from the query's red value
    let mut visible: Vec<usize> = (0..n).filter(|&i| patch.foreground[i] && patch.visible[i]).collect();
    visible.sort_by(|&a, &b| patch.rgb[a][0].total_cmp(&patch.rgb[b][0]).then(a.cmp(&b)));
    let keys: Vec<f64> = visible.iter().map(|&i| patch.rgb[i][0]).collect();
    let mut out = VpcResult {
        value: 0.0,
        grad: vec![[0.0; 3]; n],
        nearest: vec![None; n],
        no_visible: false,
    };
    let invisible = (0..n).filter(|&i| patch.foreground[i] && !patch.visible[i]);
    if visible.is_empty() {
        out.no_visible = invisible.count() > 0;
        return Ok(out);
    }
    for i in invisible {
        let p = &patch.rgb[i];
        let start = keys.partition_point(|&k| k < p[0]);
        let mut best = (f64::INFINITY, usize::MAX);
        let consider = |j: usize, best: &mut (f64, usize)| {
            let q = visible[j];
            let d = dist2(p, &patch.rgb[q]);
            if d < best.0 || (d == best.0 && q < best.1) {
                *best = (d, q);
            }
        };
        let (mut lo, mut hi) = (start, start);
        loop {
            let down = lo > 0 && (p[0] - keys[lo - 1]).powi(2) <= best.0;
            let up = hi < keys.len() && (keys[hi] - p[0]).powi(2) <= best.0;
            if !down && !up {
                break;
            }
            if down {
                lo -= 1;
                consider(lo, &mut best);
            }
            if up {
                consider(hi, &mut best);
                hi += 1;
            }
        }
        let q = &patch.rgb[best.1];
        out.value += best.0;
        out.grad[i] = [2.0 * (p[0] - q[0]), 2.0 * (p[1] - q[1]), 2.0 * (p[2] - q[2])];
        out.nearest[i] = Some(best.1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Geometry,
    Texture,
}

impl Stage {
    /// Component names in weight order.
    pub fn components(self) -> [&'static str; 4] {
        match self {
            Stage::Coarse => ["sds_view", "rgb", "normal", "mask"],
            Stage::Geometry => ["normal", "mask", "laplacian", "smooth"],
            Stage::Texture => ["sds_view", "sds_text", "rgb", "vpc"],
        }
    }
}

/// Weights switched to from `from_step` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatePhase {
    pub from_step: usize,
    pub lambda: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub lambda: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub late: Option<LatePhase>,
}

impl StageWeights {
    pub fn at(&self, step: usize) -> [f64; 4] {
        match &self.late {
            Some(late) if step >= late.from_step => late.lambda,
            _ => self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub coarse: StageWeights,
    pub geometry: StageWeights,
    pub texture: StageWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coarse: StageWeights {
                lambda: [1.0, 1000.0, 1000.0, 1000.0],
                late: None,
            },
            geometry: StageWeights {
                lambda: [10000.0, 50000.0, 1000.0, 1000.0],
                late: Some(LatePhase {
                    from_step: 2000,
                    lambda: [10000.0, 50000.0, 100.0, 100.0],
                }),
            },
            texture: StageWeights {
                lambda: [0.002, 0.5, 10000.0, 10.0],
                late: Some(LatePhase {
                    from_step: 4000,
                    lambda: [0.0, 0.0, 10000.0, 100.0],
                }),
            },
        }
    }
}

impl LossWeights {
    pub fn stage(&self, stage: Stage) -> &StageWeights {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Geometry => &self.geometry,
            Stage::Texture => &self.texture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for stage in [Stage::Coarse, Stage::Geometry, Stage::Texture] {
            let w = self.stage(stage);
            let all = w.lambda.iter().chain(w.late.iter().flat_map(|l| l.lambda.iter()));
            if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("{stage:?} loss weights must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// (component, weight) pairs in effect at `step`.
    pub fn active(&self, stage: Stage, step: usize) -> [(&'static str, f64); 4] {
        let w = self.stage(stage).at(step);
        let names = stage.components();
        [0, 1, 2, 3].map(|i| (names[i], w[i]))
    }
}

/// Weighted sum of the stage's components. Components with zero weight are
/// skipped entirely and need not be present.
pub fn stage_loss(stage: Stage, components: &BTreeMap<String, f64>, weights: &LossWeights, step: usize) -> Result<f64> {
    let mut total = 0.0;
    for (name, w) in weights.active(stage, step) {
        if w == 0.0 {
            continue;
        }
        let v = components
            .get(name)
            .ok_or_else(|| Error::MissingLossComponent(name.to_string()))?;
        total += w * v;
    }
    Ok(total)
}

/// Loss curve log with one `step,name,value` row per component.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,name,value")?;
        Ok(Self { out })
    }

    /// Appends to an existing log (resumed runs), creating it if absent.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, step: usize, values: &BTreeMap<String, f64>) -> Result<()> {
        for (name, v) in values {
            writeln!(self.out, "{step},{name},{v}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(w: usize, h: usize, c: usize, v: f64) -> Image {
        Image::filled(w, h, c, v)
    }

    #[test]
    fn mask_fixtures() {
        let a = filled(10, 10, 1, 1.0);
        assert_eq!(mask_loss(&a, &a).unwrap().value, 0.0);
        assert_eq!(mask_loss(&a, &filled(10, 10, 1, 0.0)).unwrap().value, 1.0);
        let mut b = Image::new(10, 10, 1);
        let mut c = b.clone();
        for i in [3, 41, 99] {
            c.data[i] = 1.0;
        }
        assert!((mask_loss(&b, &c).unwrap().value - 0.03).abs() < 1e-15);
        b.data.push(0.0);
        b.height = 11;
        assert!(mask_loss(&b, &c).is_err());
    }

    #[test]
    fn masked_rgb_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image::from_fn(2, 2, 3, |_, _, _| rng.random());
        let ones = filled(2, 2, 1, 1.0);
        assert_eq!(masked_rgb_loss(&img, &img, &ones).unwrap().value, 0.0);
        let other = img.map(|v| 1.0 - v);
        assert_eq!(masked_rgb_loss(&img, &other, &filled(2, 2, 1, 0.0)).unwrap().value, 0.0);
        let mut off = img.clone();
        off.data[0] += 0.5;
        let mut mask = Image::new(2, 2, 1);
        mask.data[0] = 1.0;
        let l = masked_rgb_loss(&img, &off, &mask).unwrap().value;
        assert!((l - 0.5 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn normal_fixtures() {
        let n = Image::from_fn(2, 2, 3, |_, _, k| if k == 2 { 1.0 } else { 0.0 });
        let ones = filled(2, 2, 1, 1.0);
        assert_eq!(normal_loss(&n, &n, &ones).unwrap().value, 0.0);
        let flipped = n.map(|v| -v);
        assert_eq!(normal_loss(&n, &flipped, &filled(2, 2, 1, 0.0)).unwrap().value, 0.0);
        let mut off = n.clone();
        off.data[0] += 0.5;
        let mut mask = Image::new(2, 2, 1);
        mask.data[0] = 1.0;
        assert!((normal_loss(&n, &off, &mask).unwrap().value - 0.5 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn l1_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Image::from_fn(4, 3, 3, |_, _, _| rng.random());
        let r = Image::from_fn(4, 3, 3, |_, _, _| rng.random());
        let m = Image::from_fn(4, 3, 1, |_, _, _| rng.random());
        let g = masked_rgb_loss(&t, &r, &m).unwrap().grad;
        for j in 0..r.data.len() {
            let mut p = r.clone();
            p.data[j] += 1e-7;
            let mut q = r.clone();
            q.data[j] -= 1e-7;
            let fd = (masked_rgb_loss(&t, &p, &m).unwrap().value - masked_rgb_loss(&t, &q, &m).unwrap().value) / 2e-7;
            assert!((fd - g.data[j]).abs() < 1e-6);
        }
    }

    fn flat_plane() -> TriMesh {
        let n = 4;
        let verts = (0..n * n).map(|i| Vec3::new((i % n) as f64, (i / n) as f64, 0.0)).collect();
        let mut faces = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                faces.push([a, a + 1, a + n + 1]);
                faces.push([a, a + n + 1, a + n]);
            }
        }
        TriMesh::new(verts, faces)
    }

    #[test]
    fn geometry_loss_cases() {
        let nm = Image::from_fn(8, 8, 3, |_, _, k| if k == 2 { 1.0 } else { 0.0 });
        let w = SmoothWeights {
            laplacian: 1.0,
            consistency: 1.0,
        };
        let plane = flat_plane();
        let g = geometry_loss(&nm, &nm, Some(&nm), &nm, &plane, w).unwrap();
        assert_eq!(g.consistency, 0.0);
        assert_eq!(g.total, 0.0);
        assert_eq!(g.front.value + g.back.value, 0.0);
        assert!(matches!(
            geometry_loss(&nm, &nm, None, &nm, &plane, w),
            Err(Error::MissingBackNormal)
        ));
        let sphere = TriMesh::icosphere(1.0, 2);
        let other = nm.map(|v| v * 0.5);
        let zero = SmoothWeights {
            laplacian: 0.0,
            consistency: 0.0,
        };
        let g = geometry_loss(&nm, &other, Some(&nm), &nm, &sphere, zero).unwrap();
        assert_eq!(g.total, g.front.value + g.back.value);
        assert!(g.laplacian > 0.0);
    }

    fn vpc_oracle(p: &PatchSample) -> f64 {
        let n = p.rgb.len();
        let mut total = 0.0;
        for i in 0..n {
            if !p.foreground[i] || p.visible[i] {
                continue;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if p.foreground[j] && p.visible[j] {
                    best = best.min(dist2(&p.rgb[i], &p.rgb[j]));
                }
            }
            if best.is_finite() {
                total += best;
            }
        }
        total
    }

    #[test]
    fn vpc_fixtures() {
        let all = PatchSample::from_parts(2, vec![[0.1, 0.2, 0.3]; 4], vec![true; 4]).unwrap();
        assert_eq!(vpc_loss(&all).unwrap().value, 0.0);
        let p = PatchSample::from_parts(
            2,
            vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
            vec![false, true, true, true],
        )
        .unwrap();
        assert_eq!(vpc_loss(&p).unwrap().value, 1.0);
        let same = PatchSample::from_parts(
            2,
            vec![[0.3, 0.6, 0.1], [0.3, 0.6, 0.1], [0.9, 0.0, 0.0], [0.2, 0.2, 0.2]],
            vec![false, true, true, true],
        )
        .unwrap();
        assert_eq!(vpc_loss(&same).unwrap().value, 0.0);
        let none = PatchSample::from_parts(2, vec![[0.5; 3]; 4], vec![false; 4]).unwrap();
        let r = vpc_loss(&none).unwrap();
        assert!(r.no_visible && r.value == 0.0);
        assert!(matches!(PatchSample::from_parts(0, vec![], vec![]), Err(Error::EmptyPatch)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn vpc_matches_exhaustive_search(seed in any::<u64>(), frac in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rgb = (0..256).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let vis = (0..256).map(|_| rng.random::<f64>() < frac).collect();
            let p = PatchSample::from_parts(16, rgb, vis).unwrap();
            prop_assert!((vpc_loss(&p).unwrap().value - vpc_oracle(&p)).abs() < 1e-9);
        }

        #[test]
        fn stage_loss_is_linear(a in 0.0f64..10.0, b in 0.0f64..10.0, k in -3.0f64..3.0) {
            let w = LossWeights::default();
            let comps = |x: f64| -> BTreeMap<String, f64> {
                Stage::Coarse.components().iter().map(|n| (n.to_string(), x)).collect()
            };
            let la = stage_loss(Stage::Coarse, &comps(a), &w, 0).unwrap();
            let lb = stage_loss(Stage::Coarse, &comps(b + k * a), &w, 0).unwrap();
            let base = stage_loss(Stage::Coarse, &comps(b), &w, 0).unwrap();
            prop_assert!((lb - base - k * la).abs() < 1e-9 * (1.0 + lb.abs()));
        }

        #[test]
        fn l1_losses_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Image::from_fn(5, 4, 3, |_, _, _| rng.random());
            let b = Image::from_fn(5, 4, 3, |_, _, _| rng.random());
            let m = Image::from_fn(5, 4, 1, |_, _, _| rng.random());
            prop_assert!(masked_rgb_loss(&a, &b, &m).unwrap().value >= 0.0);
            prop_assert_eq!(masked_rgb_loss(&a, &a, &m).unwrap().value, 0.0);
        }
    }

    #[test]
    fn vpc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rgb: Vec<[f64; 3]> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let vis: Vec<bool> = (0..64).map(|_| rng.random::<f64>() < 0.5).collect();
        let p = PatchSample::from_parts(8, rgb, vis).unwrap();
        let r = vpc_loss(&p).unwrap();
        for i in (0..64).filter(|&i| !p.visible[i]) {
            for k in 0..3 {
                let h = 1e-7;
                let mut a = p.clone();
                a.rgb[i][k] += h;
                let mut b = p.clone();
                b.rgb[i][k] -= h;
                let fd = (vpc_loss(&a).unwrap().value - vpc_loss(&b).unwrap().value) / (2.0 * h);
                assert!((fd - r.grad[i][k]).abs() <= 1e-3 * fd.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn stage_loss_fixtures() {
        let w = LossWeights::default();
        let comps: BTreeMap<String, f64> =
            [("sds_view", 2.0), ("rgb", 0.001), ("normal", 0.002), ("mask", 0.003)].map(|(k, v)| (k.to_string(), v)).into();
        assert!((stage_loss(Stage::Coarse, &comps, &w, 0).unwrap() - 8.0).abs() < 1e-12);
        let zeros: BTreeMap<String, f64> = Stage::Coarse.components().iter().map(|n| (n.to_string(), 0.0)).collect();
        assert_eq!(stage_loss(Stage::Coarse, &zeros, &w, 0).unwrap(), 0.0);
        let mut tex: BTreeMap<String, f64> = [("rgb", 0.01), ("vpc", 0.5)].map(|(k, v)| (k.to_string(), v)).into();
        let refine = stage_loss(Stage::Texture, &tex, &w, 4000).unwrap();
        assert_eq!(refine, 10000.0 * 0.01 + 100.0 * 0.5);
        tex.insert("sds_view".into(), f64::NAN);
        tex.insert("sds_text".into(), 1e9);
        assert_eq!(stage_loss(Stage::Texture, &tex, &w, 5999).unwrap(), refine);
        assert!(matches!(
            stage_loss(Stage::Texture, &tex, &w, 10),
            Err(Error::MissingLossComponent(_))
        ) || stage_loss(Stage::Texture, &tex, &w, 10).unwrap().is_nan());
        tex.remove("sds_view");
        assert!(matches!(stage_loss(Stage::Texture, &tex, &w, 10), Err(Error::MissingLossComponent(n)) if n == "sds_view"));
        assert_eq!(w.geometry.at(1999)[2], 1000.0);
        assert_eq!(w.geometry.at(2000)[2], 100.0);
    }

    #[test]
    fn loss_log_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let mut log = LossLog::create(&p).unwrap();
        log.record(3, &[("rgb".to_string(), 0.5)].into()).unwrap();
        log.flush().unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,name,value\n3,rgb,0.5\n");
    }
}
