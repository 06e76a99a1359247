//! Separable linear resampling (bilinear, area, scaled triangle) with adjoints.

use crate::scene::Image;

/// Sparse 1D resampling matrix: for each output index, (input index, weight) taps.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Half-pixel-centered bilinear interpolation with edge clamping.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = x.floor() as usize;
                let f = x - i0 as f64;
                let i1 = (i0 + 1).min(in_len - 1);
                if i1 == i0 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            })
            .collect();
        Self { in_len, taps }
    }

    /// Exact box-overlap averaging; preserves block means for integer factors.
    pub fn area(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(in_len);
                (first..last)
                    .filter_map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect();
        Self { in_len, taps }
    }

    /// Triangle filter for an axis-aligned scale-and-shift map.
    ///
    /// Output pixel center `o + 0.5` samples input position
    /// `(o + 0.5 - dst_center) / scale + src_center`. The filter widens to
    /// `1/scale` when minifying. Samples outside the input count toward the
    /// normalization but contribute zero, so the border fades to transparent.
    pub fn scaled_triangle(
        in_len: usize,
        out_len: usize,
        scale: f64,
        src_center: f64,
        dst_center: f64,
    ) -> Self {
        let support = (1.0 / scale).max(1.0);
        let taps = (0..out_len)
            .map(|o| {
                let x = (o as f64 + 0.5 - dst_center) / scale + src_center;
                let lo = (x - support - 0.5).floor() as i64;
                let hi = (x + support - 0.5).ceil() as i64;
                let mut total = 0.0;
                let mut taps = Vec::new();
                for j in lo..=hi {
                    let w = (1.0 - ((j as f64 + 0.5 - x) / support).abs()).max(0.0);
                    if w <= 0.0 {
                        continue;
                    }
                    total += w;
                    if j >= 0 && (j as usize) < in_len {
                        taps.push((j as usize, w));
                    }
                }
                if total > 0.0 {
                    taps.iter_mut().for_each(|t| t.1 /= total);
                }
                taps
            })
            .collect();
        Self { in_len, taps }
    }

    /// Integer translation: output `o` copies input `o - shift`.
    pub fn shift(in_len: usize, out_len: usize, shift: i64) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                let i = o as i64 - shift;
                if i >= 0 && (i as usize) < in_len {
                    vec![(i as usize, 1.0)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { in_len, taps }
    }
}

/// A separable 2D resampler built from per-axis weights.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub rows: AxisWeights,
    pub cols: AxisWeights,
}

impl Resampler {
    pub fn bilinear(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Self {
        Self {
            rows: AxisWeights::bilinear(in_h, out_h),
            cols: AxisWeights::bilinear(in_w, out_w),
        }
    }

    pub fn area(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Self {
        Self {
            rows: AxisWeights::area(in_h, out_h),
            cols: AxisWeights::area(in_w, out_w),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        assert_eq!(img.width, self.cols.in_len);
        assert_eq!(img.height, self.rows.in_len);
        let ch = img.channels;
        let out_w = self.cols.out_len();
        let mut tmp = Image::new(out_w, img.height, ch);
        for r in 0..img.height {
            for (oc, taps) in self.cols.taps.iter().enumerate() {
                let dst = tmp.index(r, oc);
                for &(ic, w) in taps {
                    let src = img.index(r, ic);
                    for k in 0..ch {
                        tmp.data[dst + k] += w * img.data[src + k];
                    }
                }
            }
        }
        let mut out = Image::new(out_w, self.rows.out_len(), ch);
        for (or, taps) in self.rows.taps.iter().enumerate() {
            for &(ir, w) in taps {
                for c in 0..out_w {
                    let dst = out.index(or, c);
                    let src = tmp.index(ir, c);
                    for k in 0..ch {
                        out.data[dst + k] += w * tmp.data[src + k];
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`Resampler::apply`]: maps output-space gradients to input space.
    pub fn apply_adjoint(&self, grad: &Image) -> Image {
        assert_eq!(grad.width, self.cols.out_len());
        assert_eq!(grad.height, self.rows.out_len());
        let ch = grad.channels;
        let mut tmp = Image::new(grad.width, self.rows.in_len, ch);
        for (or, taps) in self.rows.taps.iter().enumerate() {
            for &(ir, w) in taps {
                for c in 0..grad.width {
                    let src = grad.index(or, c);
                    let dst = tmp.index(ir, c);
                    for k in 0..ch {
                        tmp.data[dst + k] += w * grad.data[src + k];
                    }
                }
            }
        }
        let mut out = Image::new(self.cols.in_len, self.rows.in_len, ch);
        for r in 0..self.rows.in_len {
            for (oc, taps) in self.cols.taps.iter().enumerate() {
                let src = tmp.index(r, oc);
                for &(ic, w) in taps {
                    let dst = out.index(r, ic);
                    for k in 0..ch {
                        out.data[dst + k] += w * tmp.data[src + k];
                    }
                }
            }
        }
        out
    }
}

/// Bilinear resize; identity when the size already matches.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    Resampler::bilinear(img.width, img.height, width, height).apply(img)
}

/// Area-averaging resize (mean pooling for integer factors).
pub fn resize_area(img: &Image, width: usize, height: usize) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    Resampler::area(img.width, img.height, width, height).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let rs = Resampler::bilinear(13, 9, 7, 11);
        let x = random_image(13, 9, 2, 1);
        let y = random_image(7, 11, 2, 2);
        let ax = rs.apply(&x);
        let aty = rs.apply_adjoint(&y);
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn area_pooling_matches_block_means() {
        let img = random_image(16, 8, 1, 3);
        let out = resize_area(&img, 4, 2);
        for r in 0..2 {
            for c in 0..4 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        s += img.get(r * 4 + i, c * 4 + j, 0);
                    }
                }
                assert!((out.get(r, c, 0) - s / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let img = Image::filled(10, 6, 3, 0.37);
        let out = resize_bilinear(&img, 23, 17);
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }
}
