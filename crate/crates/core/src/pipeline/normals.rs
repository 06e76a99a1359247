//! Normal maps for supervision: an external estimator command, or a
//! geometric fallback when none is configured or it fails.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::resample::resize_bilinear;
use crate::scene::{decode_normals, Camera, Image, Vec3};

/// Runs `command` through `sh -c` after substituting `{input}` (an RGBA PNG
/// written here) and `{output}` (the normal PNG the command must write).
/// Returned normals are unit length on foreground and zero elsewhere.
pub fn run_estimator(command: &str, rgba: &Image, alpha: &Image, scratch: &Path, name: &str) -> Result<Image> {
    std::fs::create_dir_all(scratch)?;
    let input = scratch.join(format!("{name}_estimator_in.png"));
    let output = scratch.join(format!("{name}_estimator_out.png"));
    rgba.save_png(&input)?;
    let _ = std::fs::remove_file(&output);
    let cmd = command
        .replace("{input}", &shell_quote(&input.to_string_lossy()))
        .replace("{output}", &shell_quote(&output.to_string_lossy()));
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| Error::External(format!("cannot launch normal estimator: {e}")))?;
    if !status.success() {
        return Err(Error::External(format!("normal estimator exited with {status}")));
    }
    if !output.exists() {
        return Err(Error::External("normal estimator wrote no output".into()));
    }
    let mut encoded = Image::load_png(&output, 3)?;
    if (encoded.width, encoded.height) != (alpha.width, alpha.height) {
        encoded = resize_bilinear(&encoded, alpha.width, alpha.height);
    }
    Ok(decode_normals(&encoded, alpha))
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Euclidean distance (in pixels) from each foreground pixel to the nearest
/// background pixel; pixels outside the image count as background.
fn distance_to_background(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    // one pixel of background padding on every side
    let (pw, ph) = (w + 2, h + 2);
    let mut g = vec![0.0; pw * ph];
    for r in 0..h {
        for c in 0..w {
            if fg[r * w + c] {
                g[(r + 1) * pw + c + 1] = f64::INFINITY;
            }
        }
    }
    for c in 0..pw {
        let col: Vec<f64> = (0..ph).map(|r| g[r * pw + c]).collect();
        for (r, v) in edt_1d(&col).into_iter().enumerate() {
            g[r * pw + c] = v;
        }
    }
    let mut d = vec![0.0; w * h];
    for r in 0..h {
        let row = edt_1d(&g[(r + 1) * pw..(r + 2) * pw]);
        for c in 0..w {
            d[r * w + c] = row[c + 1].sqrt();
        }
    }
    d
}

/// Camera-space normals of the silhouette inflated into a height field.
/// Uses `h = sqrt(d (2 D - d))`, with `d` the distance to the background and
/// `D` its maximum, which is exactly a hemisphere for a disk.
pub fn silhouette_normals(alpha: &Image) -> Image {
    let (w, h) = (alpha.width, alpha.height);
    let fg: Vec<bool> = alpha.data.iter().map(|&a| a >= 0.5).collect();
    let mut dist = distance_to_background(&fg, w, h);
    // Boundary pixels sit half a pixel from the edge.
    for (d, &f) in dist.iter_mut().zip(&fg) {
        if f {
            *d -= 0.5;
        }
    }
    let peak = dist.iter().cloned().fold(0.0, f64::max);
    let height: Vec<f64> = dist.iter().map(|&d| (d * (2.0 * peak - d)).max(0.0).sqrt()).collect();
    let hget = |r: usize, c: usize| height[r * w + c];
    let mut out = Image::new(w, h, 3);
    for r in 0..h {
        for c in 0..w {
            if !fg[r * w + c] {
                continue;
            }
            let dc = (hget(r, (c + 1).min(w - 1)) - hget(r, c.saturating_sub(1))) / 2.0;
            let dr = (hget((r + 1).min(h - 1), c) - hget(r.saturating_sub(1), c)) / 2.0;
            // image rows grow downward while camera y points up
            let n = nalgebra::Vector3::new(-dc, dr, 1.0).normalize();
            out.pixel_mut(r, c).copy_from_slice(n.as_slice());
        }
    }
    out
}

/// Camera-space normals of a rendered depth map (distance along each ray),
/// from central differences of the unprojected surface after a light
/// masked box blur. Zero outside `alpha >= 0.5`.
pub fn depth_normals(depth: &Image, alpha: &Image, cam: &Camera) -> Image {
    let (w, h) = (depth.width, depth.height);
    let fg: Vec<bool> = alpha.data.iter().map(|&a| a >= 0.5).collect();
    let mut d = depth.data.clone();
    for _ in 0..2 {
        let prev = d.clone();
        for r in 0..h {
            for c in 0..w {
                if !fg[r * w + c] {
                    continue;
                }
                let (mut s, mut n) = (0.0, 0.0);
                for rr in r.saturating_sub(1)..(r + 2).min(h) {
                    for cc in c.saturating_sub(1)..(c + 2).min(w) {
                        if fg[rr * w + cc] {
                            s += prev[rr * w + cc];
                            n += 1.0;
                        }
                    }
                }
                d[r * w + c] = s / n;
            }
        }
    }
    let point = |r: usize, c: usize| -> Vec3 { cam.to_camera(&cam.pixel_ray(r, c).at(d[r * w + c])) };
    // Difference across the pixel, falling back to one side at the silhouette.
    let span = |a: Option<(usize, usize)>, o: (usize, usize), b: Option<(usize, usize)>| -> Option<Vec3> {
        let ok = |p: Option<(usize, usize)>| p.filter(|&(r, c)| fg[r * w + c]);
        match (ok(a), ok(b)) {
            (Some(a), Some(b)) => Some(point(b.0, b.1) - point(a.0, a.1)),
            (None, Some(b)) => Some(point(b.0, b.1) - point(o.0, o.1)),
            (Some(a), None) => Some(point(o.0, o.1) - point(a.0, a.1)),
            (None, None) => None,
        }
    };
    let mut out = Image::new(w, h, 3);
    for r in 0..h {
        for c in 0..w {
            if !fg[r * w + c] {
                continue;
            }
            let dx = span(c.checked_sub(1).map(|c| (r, c)), (r, c), (c + 1 < w).then_some((r, c + 1)));
            let dy = span(r.checked_sub(1).map(|r| (r, c)), (r, c), (r + 1 < h).then_some((r + 1, c)));
            let n = match (dx, dy) {
                // rows grow downward, so -dy points up the image
                (Some(dx), Some(dy)) => dx.cross(&(-dy)),
                _ => Vec3::z(),
            };
            let n = if n.z < 0.0 { -n } else { n };
            let n = if n.norm() > 1e-12 { n.normalize() } else { Vec3::z() };
            out.pixel_mut(r, c).copy_from_slice(n.as_slice());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, radius: f64) -> Image {
        let c = n as f64 / 2.0;
        Image::from_fn(n, n, 1, |r, col, _| {
            let (y, x) = (r as f64 + 0.5 - c, col as f64 + 0.5 - c);
            if x * x + y * y <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn disk_inflates_to_a_sphere() {
        let n = 96;
        let radius = 40.0;
        let normals = silhouette_normals(&disk(n, radius));
        let c = n as f64 / 2.0;
        let mut worst: f64 = 0.0;
        for r in 0..n {
            for col in 0..n {
                let (x, y) = (col as f64 + 0.5 - c, -(r as f64 + 0.5 - c));
                let rho = (x * x + y * y).sqrt();
                if rho > 0.7 * radius {
                    continue;
                }
                let expect = nalgebra::Vector3::new(x, y, (radius * radius - rho * rho).sqrt()) / radius;
                let got = normals.pixel(r, col);
                let dot = expect.x * got[0] + expect.y * got[1] + expect.z * got[2];
                worst = worst.max(dot.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(worst < 10.0, "worst angular error {worst} deg");
        // centre faces the camera, background is zero
        let p = normals.pixel(n / 2, n / 2);
        assert!(p[2] > 0.99);
        assert_eq!(normals.pixel(0, 0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn depth_of_a_sphere_gives_its_normals() {
        let cam = Camera::orbit(0.0, 0.0, 3.8, 20.0, 64, 64).unwrap();
        let radius = 0.5;
        let mut depth = Image::new(64, 64, 1);
        let mut alpha = Image::new(64, 64, 1);
        for r in 0..64 {
            for c in 0..64 {
                let ray = cam.pixel_ray(r, c);
                let b = ray.dir.dot(&ray.origin);
                let disc = b * b - (ray.origin.norm_squared() - radius * radius);
                if disc > 0.0 {
                    depth.data[r * 64 + c] = -b - disc.sqrt();
                    alpha.data[r * 64 + c] = 1.0;
                }
            }
        }
        let normals = depth_normals(&depth, &alpha, &cam);
        let mut worst: f64 = 0.0;
        for r in 0..64 {
            for c in 0..64 {
                if alpha.data[r * 64 + c] == 0.0 {
                    continue;
                }
                let ray = cam.pixel_ray(r, c);
                let p = ray.at(depth.data[r * 64 + c]);
                if cam.dir_to_camera(&p.normalize()).z < 0.6 {
                    continue;
                }
                let expect = cam.dir_to_camera(&p.normalize());
                let got = Vec3::from_column_slice(normals.pixel(r, c));
                worst = worst.max(expect.dot(&got).clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(worst < 5.0, "worst angular error {worst} deg");
    }

    #[test]
    fn estimator_hook_round_trips_and_reports_failure() {
        let dir = tempfile::tempdir().unwrap();
        let alpha = disk(16, 6.0);
        let rgba = Image::from_fn(16, 16, 4, |r, c, ch| if ch == 3 { alpha.get(r, c, 0) } else { 0.5 });
        // "estimator" that copies a flat +z normal image
        let flat = Image::from_fn(16, 16, 3, |_, _, ch| if ch == 2 { 1.0 } else { 0.5 });
        let flat_path = dir.path().join("flat.png");
        flat.save_png(&flat_path).unwrap();
        let cmd = format!("cp '{}' {{output}} && test -f {{input}}", flat_path.display());
        let n = run_estimator(&cmd, &rgba, &alpha, dir.path(), "front").unwrap();
        let p = n.pixel(8, 8);
        assert!(p[2] > 0.99 && p[0].abs() < 0.01);
        assert_eq!(n.pixel(0, 0), &[0.0, 0.0, 0.0]);
        assert!(matches!(
            run_estimator("exit 3", &rgba, &alpha, dir.path(), "front"),
            Err(Error::External(_))
        ));
    }
}
