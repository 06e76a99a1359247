//! Image metrics and the per-subject evaluation protocols.
//!
//! PSNR and SSIM are computed here. Perceptual distance and embedding
//! similarity come from a [`MetricBackend`]: a deterministic stub for
//! plumbing tests, or an HTTP service.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::guidance::remote::{decode_f32, image_payload, post_json};
use crate::resample::resize_area;
use crate::scene::{composite_on_white, Image};
use crate::util::atomic_write;

pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio for values in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_same_shape(gt, "psnr")?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Windowed structural similarity (11x11 Gaussian, sigma 1.5), averaged
/// over the valid window positions and then over channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_same_shape(gt, "ssim")?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Window {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let ch = pred.channels;
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|p| pred.data[p * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| gt.data[p * ch + c]).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let mxx = filter_valid(&prod(&x, &x), w, h, &k);
        let myy = filter_valid(&prod(&y, &y), w, h, &k);
        let mxy = filter_valid(&prod(&x, &y), w, h, &k);
        let n = mx.len();
        let mut s = 0.0;
        for i in 0..n {
            let (vx, vy, cxy) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
            s += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / n as f64;
    }
    Ok(total / ch as f64)
}

/// Learned-metric provider: perceptual distance and image embeddings.
pub trait MetricBackend: Send + Sync {
    fn id(&self) -> String;
    fn lpips(&self, a: &Image, b: &Image) -> Result<f64>;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Deterministic random projection of a downsampled image. Its numbers
/// mean nothing perceptually; it exists to exercise the plumbing.
pub struct StubMetricBackend {
    seed: u64,
    side: usize,
    projection: DMatrix<f64>,
}

impl StubMetricBackend {
    pub fn new(seed: u64) -> Self {
        let side = 16;
        let dim = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = side * side * 3;
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = DMatrix::from_fn(dim, inputs, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { seed, side, projection }
    }

    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels != 3 {
            return Err(Error::ShapeMismatch(format!("metric input must be rgb, got {} channels", img.channels)));
        }
        let small = resize_area(img, self.side, self.side);
        let v = nalgebra::DVector::from_column_slice(&small.data);
        Ok((&self.projection * v).iter().copied().collect())
    }
}

impl MetricBackend for StubMetricBackend {
    fn id(&self) -> String {
        format!("stub-projection-{}", self.seed)
    }

    fn lpips(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_shape(b, "lpips")?;
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        Ok((fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len() as f64).sqrt())
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        self.features(img)
    }
}

/// Metric service speaking the guidance wire format:
/// `POST /embed {"image"}` -> `{"embedding_b64"}` and
/// `POST /lpips {"a", "b"}` -> `{"distance"}`.
pub struct RemoteMetricBackend {
    pub endpoint: String,
    pub timeout_secs: f64,
    pub attempts: u32,
}

impl RemoteMetricBackend {
    pub fn new(endpoint: impl Into<String>, timeout_secs: f64) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout_secs,
            attempts: 3,
        }
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<serde_json::Value> {
        post_json(&format!("{}/{route}", self.endpoint), &body, self.timeout_secs, self.attempts, 200)
    }
}

impl MetricBackend for RemoteMetricBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn lpips(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_shape(b, "lpips")?;
        let resp = self.post("lpips", json!({"a": image_payload(a), "b": image_payload(b)}))?;
        resp["distance"]
            .as_f64()
            .ok_or_else(|| Error::Remote("lpips response lacks a numeric `distance`".into()))
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let resp = self.post("embed", json!({"image": image_payload(img)}))?;
        let text = resp["embedding_b64"]
            .as_str()
            .ok_or_else(|| Error::Remote("embed response lacks `embedding_b64`".into()))?;
        decode_f32(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuralMetric {
    Lpips,
    Clip,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("embedding lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// LPIPS distance or CLIP-style cosine similarity through `backend`.
pub fn neural_metric(backend: Option<&dyn MetricBackend>, pred: &Image, reference: &Image, kind: NeuralMetric) -> Result<f64> {
    let backend = backend.ok_or(Error::Capability {
        backend: "none".into(),
        capability: "learned metrics (configure a metric backend)",
    })?;
    match kind {
        NeuralMetric::Lpips => backend.lpips(pred, reference),
        NeuralMetric::Clip => cosine_similarity(&backend.embed(pred)?, &backend.embed(reference)?),
    }
}

/// Convex hull of a set of RGB colors, for checking that rendered colors
/// are mixtures of known ones.
#[derive(Debug, Clone)]
pub struct ColorHull {
    points: Vec<[f64; 3]>,
}

impl ColorHull {
    /// Builds the hull from `colors`, merging near-duplicates (1/1024 grid).
    pub fn new(colors: impl IntoIterator<Item = [f64; 3]>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let points = colors
            .into_iter()
            .filter(|c| seen.insert(c.map(|v| (v * 1024.0).round() as i64)))
            .collect();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether some hull point is within `tol` of `color` in every channel.
    /// Frank-Wolfe on the squared distance: accepts once an iterate is close
    /// enough, rejects once the duality gap proves it cannot be. Undecided
    /// cases after the iteration budget count as outside.
    pub fn contains(&self, color: [f64; 3], tol: f64) -> bool {
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let Some(mut y) = self
            .points
            .iter()
            .copied()
            .min_by(|a, b| dot(sub(*a, color), sub(*a, color)).total_cmp(&dot(sub(*b, color), sub(*b, color))))
        else {
            return false;
        };
        for _ in 0..5000 {
            let d = sub(y, color);
            if d.iter().all(|v| v.abs() <= tol) {
                return true;
            }
            let s = self.points.iter().copied().min_by(|a, b| dot(d, *a).total_cmp(&dot(d, *b))).unwrap();
            let f = dot(d, d);
            let gap = 2.0 * dot(d, sub(y, s));
            // L-inf within tol implies L2 within sqrt(3) tol
            if f - gap > 3.0 * tol * tol {
                return false;
            }
            let step = sub(s, y);
            let len = dot(step, step);
            if len <= 0.0 {
                return false;
            }
            let g = (-dot(d, step) / len).clamp(0.0, 1.0);
            y = [y[0] + g * step[0], y[1] + g * step[1], y[2] + g * step[2]];
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Reference,
    Novel,
}

/// A predicted view with its ground truth, both composited on white.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub pred: Image,
    pub gt: Option<Image>,
    pub tag: ViewTag,
}

impl EvalPair {
    pub fn new(name: impl Into<String>, pred: Image, gt: Option<Image>, tag: ViewTag) -> Result<Self> {
        if let Some(g) = &gt {
            pred.check_same_shape(g, "evaluation pair")?;
        }
        Ok(Self {
            name: name.into(),
            pred,
            gt,
            tag,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Multi-view ground truth: PSNR, SSIM, LPIPS and CLIP on every view.
    Thuman,
    /// Single input image: LPIPS on the reference view, CLIP on novel views.
    Sshq,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thuman" => Ok(Self::Thuman),
            "sshq" => Ok(Self::Sshq),
            _ => Err(Error::InvalidArgument(format!("unknown protocol `{s}` (thuman | sshq)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub clip: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricValues {
    /// Field-wise mean over the entries that have each metric.
    pub fn mean<'a>(items: impl Iterator<Item = &'a MetricValues> + Clone) -> Self {
        Self {
            psnr: mean_of(items.clone().map(|m| m.psnr)),
            ssim: mean_of(items.clone().map(|m| m.ssim)),
            lpips: mean_of(items.clone().map(|m| m.lpips)),
            clip: mean_of(items.map(|m| m.clip)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub tag: ViewTag,
    #[serde(flatten)]
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject: String,
    pub views: Vec<ViewMetrics>,
    pub mean: MetricValues,
    pub view_count: usize,
    pub missing_views: Vec<String>,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub metric_backend: Option<String>,
    pub subjects: Vec<SubjectReport>,
    /// Mean of the per-subject means.
    pub aggregate: MetricValues,
    pub view_count: usize,
    pub partial: bool,
}

impl MetricsReport {
    pub fn new(protocol: Protocol, metric_backend: Option<String>, subjects: Vec<SubjectReport>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            protocol,
            metric_backend,
            aggregate: MetricValues::mean(subjects.iter().map(|s| &s.mean)),
            view_count: subjects.iter().map(|s| s.view_count).sum(),
            partial: subjects.iter().any(|s| s.partial),
            subjects,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("subject,view,tag,psnr,ssim,lpips,clip\n");
        for s in &self.subjects {
            for v in &s.views {
                let m = &v.metrics;
                let tag = match v.tag {
                    ViewTag::Reference => "reference",
                    ViewTag::Novel => "novel",
                };
                out += &format!("{},{},{tag},{},{},{},{}\n", s.subject, v.view, f(m.psnr), f(m.ssim), f(m.lpips), f(m.clip));
            }
            let m = &s.mean;
            out += &format!("{},mean,,{},{},{},{}\n", s.subject, f(m.psnr), f(m.ssim), f(m.lpips), f(m.clip));
        }
        let m = &self.aggregate;
        out += &format!("all,mean,,{},{},{},{}\n", f(m.psnr), f(m.ssim), f(m.lpips), f(m.clip));
        out
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let (j, c) = (dir.join("metrics.json"), dir.join("metrics.csv"));
        atomic_write(&j, serde_json::to_string_pretty(self)?.as_bytes())?;
        atomic_write(&c, self.to_csv().as_bytes())?;
        Ok((j, c))
    }
}

/// Loads a PNG of any channel count and composites it on white.
pub fn load_composited(path: &Path) -> Result<Image> {
    Ok(composite_on_white(&Image::load_rgba(path)?).rgb)
}

pub fn view_file_name(i: usize) -> String {
    format!("view_{i:02}.png")
}

/// Where to find predictions: a run directory's evaluation renders, or a
/// plain directory of `view_XX.png` files.
pub fn resolve_views_dir(pred: &Path) -> PathBuf {
    let nested = pred.join("texture").join("views");
    if nested.is_dir() {
        nested
    } else {
        pred.to_path_buf()
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Expected view count; view 0 is the reference viewpoint.
    pub views: usize,
    /// Input image for the single-image protocol. Defaults to the run's
    /// preprocessed reference when `pred` is a run directory.
    pub reference: Option<PathBuf>,
}

fn view_metrics(pair: &EvalPair, reference: Option<&Image>, protocol: Protocol, backend: Option<&dyn MetricBackend>) -> Result<MetricValues> {
    let mut m = MetricValues::default();
    match protocol {
        Protocol::Thuman => {
            let gt = pair.gt.as_ref().expect("thuman pairs carry ground truth");
            m.psnr = Some(psnr(&pair.pred, gt)?);
            m.ssim = Some(ssim(&pair.pred, gt)?);
            if backend.is_some() {
                m.lpips = Some(neural_metric(backend, &pair.pred, gt, NeuralMetric::Lpips)?);
                m.clip = Some(neural_metric(backend, &pair.pred, gt, NeuralMetric::Clip)?);
            }
        }
        Protocol::Sshq => {
            let r = reference.expect("sshq needs a reference");
            match pair.tag {
                ViewTag::Reference => m.lpips = Some(neural_metric(backend, &pair.pred, r, NeuralMetric::Lpips)?),
                ViewTag::Novel => m.clip = Some(neural_metric(backend, &pair.pred, r, NeuralMetric::Clip)?),
            }
        }
    }
    Ok(m)
}

/// Evaluates one subject's rendered views. Missing views are listed and
/// the report flagged partial rather than failing.
pub fn evaluate_subject(
    subject: &str,
    pred: &Path,
    gt: Option<&Path>,
    opts: &EvalOptions,
    backend: Option<&dyn MetricBackend>,
) -> Result<SubjectReport> {
    let views_dir = resolve_views_dir(pred);
    let reference = match opts.protocol {
        Protocol::Thuman => {
            if gt.is_none() {
                return Err(Error::InvalidArgument("the thuman protocol needs a ground-truth directory".into()));
            }
            None
        }
        Protocol::Sshq => {
            if backend.is_none() {
                return Err(Error::Capability {
                    backend: "none".into(),
                    capability: "learned metrics required by the sshq protocol",
                });
            }
            let path = opts
                .reference
                .clone()
                .unwrap_or_else(|| pred.join("preprocess").join("rgb.png"));
            if !path.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "sshq needs the input image; {} does not exist",
                    path.display()
                )));
            }
            Some(load_composited(&path)?)
        }
    };
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for i in 0..opts.views {
        let name = view_file_name(i);
        let p = views_dir.join(&name);
        let g = gt.map(|d| d.join(&name));
        let mut absent = false;
        if !p.is_file() {
            missing.push(p.display().to_string());
            absent = true;
        }
        if let Some(g) = &g {
            if !g.is_file() {
                missing.push(g.display().to_string());
                absent = true;
            }
        }
        if absent {
            continue;
        }
        let pred_img = load_composited(&p)?;
        let (w, h) = (pred_img.width, pred_img.height);
        let gt_img = match (&g, opts.protocol) {
            (Some(g), Protocol::Thuman) => {
                let img = load_composited(g)?;
                Some(if (img.width, img.height) == (w, h) { img } else { resize_area(&img, w, h) })
            }
            _ => None,
        };
        let tag = if i == 0 { ViewTag::Reference } else { ViewTag::Novel };
        pairs.push(EvalPair::new(name, pred_img, gt_img, tag)?);
    }
    let reference = reference.map(|r| match pairs.first() {
        Some(p) if (r.width, r.height) != (p.pred.width, p.pred.height) => resize_area(&r, p.pred.width, p.pred.height),
        _ => r,
    });
    for m in &missing {
        log::warn!("{subject}: missing view {m}");
    }
    let views = pairs
        .par_iter()
        .map(|pair| {
            Ok(ViewMetrics {
                view: pair.name.clone(),
                tag: pair.tag,
                metrics: view_metrics(pair, reference.as_ref(), opts.protocol, backend)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectReport {
        subject: subject.to_string(),
        mean: MetricValues::mean(views.iter().map(|v| &v.metrics)),
        view_count: views.len(),
        partial: !missing.is_empty(),
        missing_views: missing,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn noise(seed: u64, w: usize, h: usize, ch: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h, ch);
        img.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
        img
    }

    #[test]
    fn psnr_closed_forms() {
        let a = noise(1, 16, 16, 3).map(|v| v * 0.8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_abs_diff_eq!(psnr(&a, &a.map(|v| v + 0.1)).unwrap(), 20.0, epsilon = 1e-9);
        let bin = Image::from_fn(8, 8, 1, |r, c, _| ((r + c) % 2) as f64);
        assert_abs_diff_eq!(psnr(&bin.map(|v| 1.0 - v), &bin).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_closed_forms() {
        let a = noise(2, 32, 32, 3);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let (x, y) = (0.3, 0.5);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let got = ssim(&Image::filled(20, 20, 3, x), &Image::filled(20, 20, 3, y)).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
        let indep = ssim(&noise(3, 256, 256, 1), &noise(4, 256, 256, 1)).unwrap();
        assert!(indep.abs() < 0.1, "{indep}");
        assert!(matches!(
            ssim(&Image::new(10, 30, 1), &Image::new(10, 30, 1)),
            Err(Error::Window { window: 11, .. })
        ));
    }

    #[test]
    fn stub_backend_is_deterministic_and_axiomatic() {
        let a = noise(5, 32, 32, 3);
        let b = noise(6, 32, 32, 3);
        let s1 = StubMetricBackend::new(0);
        let s2 = StubMetricBackend::new(0);
        assert_eq!(neural_metric(Some(&s1), &a, &a, NeuralMetric::Clip).unwrap(), 1.0);
        assert_eq!(neural_metric(Some(&s1), &a, &a, NeuralMetric::Lpips).unwrap(), 0.0);
        assert_eq!(
            neural_metric(Some(&s1), &a, &b, NeuralMetric::Lpips).unwrap(),
            neural_metric(Some(&s2), &a, &b, NeuralMetric::Lpips).unwrap()
        );
        assert!(neural_metric(Some(&s1), &a, &b, NeuralMetric::Lpips).unwrap() > 0.0);
        assert!(matches!(
            neural_metric(None, &a, &a, NeuralMetric::Clip),
            Err(Error::Capability { .. })
        ));
    }

    #[test]
    fn remote_backend_speaks_the_envelope() {
        use crate::guidance::remote::{encode_f32, test_server};
        let (addr, _) = test_server::spawn(|_, path, body| match path {
            "/embed" => {
                assert_eq!(body["image"]["shape"], json!([4, 4, 3]));
                (200, json!({"embedding_b64": encode_f32(&[1.0, 2.0, 2.0])}))
            }
            "/lpips" => (200, json!({"distance": 0.25})),
            _ => (404, json!({})),
        });
        let be = RemoteMetricBackend::new(addr, 5.0);
        let img = Image::filled(4, 4, 3, 0.5);
        assert_eq!(be.embed(&img).unwrap(), vec![1.0, 2.0, 2.0]);
        assert_eq!(be.lpips(&img, &img).unwrap(), 0.25);
    }

    #[test]
    fn color_hull_membership() {
        let hull = ColorHull::new([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(hull.len(), 3);
        assert!(hull.contains([1.0 / 3.0; 3], 1e-3));
        assert!(hull.contains([0.5, 0.0, 0.5], 1e-3));
        // 0.04 off the face along its normal in every channel
        assert!(hull.contains([1.0 / 3.0 + 0.04; 3], 0.05));
        assert!(!hull.contains([1.0 / 3.0 + 0.06; 3], 0.05));
        assert!(!hull.contains([0.0, 0.0, 0.0], 0.05));
        assert!(!ColorHull::new([]).contains([0.0; 3], 1.0));
    }

    fn write_views(dir: &Path, n: usize, seed: u64) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            noise(seed + i as u64, 24, 24, 3).save_png(&dir.join(view_file_name(i))).unwrap();
        }
    }

    #[test]
    fn identical_predictions_score_perfectly() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("views");
        write_views(&d, 10, 0);
        let stub = StubMetricBackend::new(1);
        let opts = EvalOptions {
            protocol: Protocol::Thuman,
            views: 10,
            reference: None,
        };
        let r = evaluate_subject("s", &d, Some(&d), &opts, Some(&stub)).unwrap();
        assert_eq!(r.view_count, 10);
        assert!(!r.partial);
        assert_eq!(r.mean.psnr, Some(PSNR_CAP));
        assert_abs_diff_eq!(r.mean.ssim.unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(r.mean.lpips, Some(0.0));
        assert_eq!(r.mean.clip, Some(1.0));
    }

    #[test]
    fn aggregates_are_plain_means_and_missing_views_are_listed() {
        let tmp = tempfile::tempdir().unwrap();
        let (p, g) = (tmp.path().join("pred"), tmp.path().join("gt"));
        write_views(&p, 3, 0);
        write_views(&g, 3, 100);
        let opts = EvalOptions {
            protocol: Protocol::Thuman,
            views: 4,
            reference: None,
        };
        let r = evaluate_subject("s", &p, Some(&g), &opts, None).unwrap();
        assert!(r.partial);
        assert_eq!(r.missing_views.len(), 2);
        let by_hand: f64 = (0..3)
            .map(|i| {
                let name = view_file_name(i);
                psnr(&load_composited(&p.join(&name)).unwrap(), &load_composited(&g.join(&name)).unwrap()).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(r.mean.psnr.unwrap(), by_hand, epsilon = 1e-12);
        assert_eq!(r.mean.lpips, None);

        let mut r2 = r.clone();
        r2.subject = "t".into();
        r2.mean.psnr = Some(10.0);
        let report = MetricsReport::new(Protocol::Thuman, None, vec![r.clone(), r2]);
        assert_abs_diff_eq!(report.aggregate.psnr.unwrap(), (by_hand + 10.0) / 2.0, epsilon = 1e-12);
        assert!(report.partial);
        let (json_path, csv_path) = report.save(tmp.path()).unwrap();
        let back: MetricsReport = serde_json::from_slice(&std::fs::read(json_path).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(std::fs::read_to_string(csv_path).unwrap().starts_with("subject,view,tag"));
    }

    #[test]
    fn single_image_protocol_fills_only_its_fields() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("views");
        write_views(&p, 4, 0);
        let reference = tmp.path().join("input.png");
        noise(50, 24, 24, 3).save_png(&reference).unwrap();
        let stub = StubMetricBackend::new(1);
        let opts = EvalOptions {
            protocol: Protocol::Sshq,
            views: 4,
            reference: Some(reference),
        };
        let r = evaluate_subject("s", &p, None, &opts, Some(&stub)).unwrap();
        assert_eq!((r.mean.psnr, r.mean.ssim), (None, None));
        assert!(r.mean.lpips.is_some() && r.mean.clip.is_some());
        assert!(r.views[0].metrics.clip.is_none() && r.views[1].metrics.lpips.is_none());
        assert!(matches!(evaluate_subject("s", &p, None, &opts, None), Err(Error::Capability { .. })));
    }
}
