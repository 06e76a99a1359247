//! Float image buffers and the per-view bundle (rgb, alpha, normal, depth).
//!
//! Layout is row-major with the origin at the top-left pixel and channels
//! interleaved.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, Rgba};

use crate::error::{Error, Result};
use crate::util::atomic_write;

const DEPTH_MAGIC: &[u8; 4] = b"CTXD";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col) + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col) + ch;
        self.data[i] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col);
        &mut self.data[i..i + self.channels]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, ch: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |r, c, _| self.get(r, c, ch))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_u8(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// Saves a 1-, 3- or 4-channel image in [0,1] as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let w = self.width as u32;
        let h = self.height as u32;
        let enc = |v: f64| Self::to_u8(v);
        match self.channels {
            1 => {
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(w, h, |x, y| Luma([enc(self.get(y as usize, x as usize, 0))]));
                image::DynamicImage::ImageLuma8(buf)
                    .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
            }
            3 => {
                let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
                    let p = self.pixel(y as usize, x as usize);
                    Rgb([enc(p[0]), enc(p[1]), enc(p[2])])
                });
                image::DynamicImage::ImageRgb8(buf)
                    .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
            }
            4 => {
                let buf: ImageBuffer<Rgba<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
                    let p = self.pixel(y as usize, x as usize);
                    Rgba([enc(p[0]), enc(p[1]), enc(p[2]), enc(p[3])])
                });
                image::DynamicImage::ImageRgba8(buf)
                    .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
            }
            n => {
                return Err(Error::InvalidArgument(format!(
                    "cannot encode {n}-channel image as PNG"
                )))
            }
        }
        atomic_write(path, &bytes)
    }

    /// Loads any PNG (8 or 16 bit) as an RGBA float image in [0,1].
    pub fn load_rgba(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgba32f();
        Ok(Self::from_rgba32f(&img))
    }

    pub fn from_rgba32f(img: &image::Rgba32FImage) -> Image {
        let (w, h) = img.dimensions();
        Image::from_fn(w as usize, h as usize, 4, |r, c, ch| {
            img.get_pixel(c as u32, r as u32)[ch] as f64
        })
    }

    /// Loads a PNG keeping `channels` leading channels (gray expands to rgb).
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let rgba = Self::load_rgba(path)?;
        Ok(Image::from_fn(rgba.width, rgba.height, channels, |r, c, ch| {
            rgba.get(r, c, ch.min(3))
        }))
    }
}

/// Writes a depth map with the self-describing `CTXD` header.
pub fn write_depth(path: &Path, depth: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + depth.num_pixels() * 4);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for r in 0..depth.height {
        for c in 0..depth.width {
            bytes.extend_from_slice(&(depth.get(r, c, 0) as f32).to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

pub fn read_depth(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(bad("missing CTXD header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + h * w * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Image {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

/// One view's worth of images: color, coverage, and optional normal/depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBundle {
    /// H×W×3 in [0,1], composited on white.
    pub rgb: Image,
    /// H×W in [0,1].
    pub alpha: Image,
    /// H×W×3 unit vectors on foreground, zero on background.
    pub normal: Option<Image>,
    /// H×W camera-space ray distance, 0 on background.
    pub depth: Option<Image>,
}

impl ImageBundle {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.rgb.width, self.rgb.height);
        let ok = |img: &Image, ch: usize| img.width == w && img.height == h && img.channels == ch;
        if self.rgb.channels != 3 || !ok(&self.alpha, 1) {
            return Err(Error::ShapeMismatch("rgb/alpha channel layout".into()));
        }
        if self.normal.as_ref().is_some_and(|n| !ok(n, 3))
            || self.depth.as_ref().is_some_and(|d| !ok(d, 1))
        {
            return Err(Error::ShapeMismatch("normal/depth must match rgb".into()));
        }
        Ok(())
    }

    /// Writes rgb.png, alpha.png, normal.png (mapped [-1,1] to [0,255]) and depth.ctxd.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.rgb.save_png(&dir.join("rgb.png"))?;
        self.alpha.save_png(&dir.join("alpha.png"))?;
        if let Some(n) = &self.normal {
            encode_normals(n).save_png(&dir.join("normal.png"))?;
        }
        if let Some(d) = &self.depth {
            write_depth(&dir.join("depth.ctxd"), d)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let rgb = Image::load_png(&dir.join("rgb.png"), 3)?;
        let alpha = Image::load_png(&dir.join("alpha.png"), 1)?;
        let normal_path = dir.join("normal.png");
        let normal = if normal_path.exists() {
            Some(decode_normals(&Image::load_png(&normal_path, 3)?, &alpha))
        } else {
            None
        };
        let depth_path = dir.join("depth.ctxd");
        let depth = if depth_path.exists() {
            Some(read_depth(&depth_path)?)
        } else {
            None
        };
        let bundle = Self {
            rgb,
            alpha,
            normal,
            depth,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Maps unit normals from [-1,1] to [0,1] for PNG storage.
pub fn encode_normals(normal: &Image) -> Image {
    normal.map(|v| (v + 1.0) * 0.5)
}

/// Inverse of [`encode_normals`], renormalizing foreground and zeroing background.
pub fn decode_normals(encoded: &Image, alpha: &Image) -> Image {
    let mut out = encoded.map(|v| v * 2.0 - 1.0);
    for r in 0..out.height {
        for c in 0..out.width {
            let p = out.pixel_mut(r, c);
            let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if alpha.get(r, c, 0) <= 0.0 || len < 1e-6 {
                p.fill(0.0);
            } else {
                p.iter_mut().for_each(|v| *v /= len);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_file_round_trips_through_header() {
        let dir = tempfile::tempdir().unwrap();
        let depth = Image::from_fn(5, 3, 1, |r, c, _| (r * 5 + c) as f64 * 0.25);
        let path = dir.path().join("d.ctxd");
        write_depth(&path, &depth).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CTXD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(read_depth(&path).unwrap(), depth);
    }

    #[test]
    fn truncated_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ctxd");
        fs::write(&path, b"CTXD\x02\0\0\0\x02\0\0\0abc").unwrap();
        assert!(matches!(read_depth(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bundle_directory_round_trip_keeps_unit_normals() {
        let dir = tempfile::tempdir().unwrap();
        let alpha = Image::from_fn(4, 4, 1, |r, _, _| if r < 2 { 1.0 } else { 0.0 });
        let normal = Image::from_fn(4, 4, 3, |r, _, ch| {
            if r < 2 {
                [0.6, 0.0, 0.8][ch]
            } else {
                0.0
            }
        });
        let bundle = ImageBundle {
            rgb: Image::filled(4, 4, 3, 1.0),
            alpha,
            normal: Some(normal),
            depth: Some(Image::filled(4, 4, 1, 3.5)),
        };
        bundle.save_dir(dir.path()).unwrap();
        let back = ImageBundle::load_dir(dir.path()).unwrap();
        let n = back.normal.unwrap();
        for c in 0..4 {
            let p = n.pixel(0, c);
            let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-4);
            assert!((p[0] - 0.6).abs() < 1e-2);
            assert_eq!(n.pixel(3, c), &[0.0, 0.0, 0.0]);
        }
        assert_eq!(back.depth.unwrap().get(2, 2, 0), 3.5);
    }
}
