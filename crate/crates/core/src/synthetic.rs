//! Procedural test subjects for smoke runs and examples.

use crate::scene::Image;

fn capsule_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let t = ((px * bx + py * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    ((px - t * bx).powi(2) + (py - t * by).powi(2)).sqrt()
}

/// Signed coverage of a stylized standing figure in unit coordinates
/// (x right, y down, both in [0, 1]); positive inside.
fn figure_inside(x: f64, y: f64) -> f64 {
    let parts = [
        // head
        (0.09, (0.5, 0.17), (0.5, 0.17)),
        // torso
        (0.13, (0.5, 0.33), (0.5, 0.52)),
        // arms
        (0.045, (0.36, 0.32), (0.33, 0.55)),
        (0.045, (0.64, 0.32), (0.67, 0.55)),
        // legs
        (0.06, (0.44, 0.6), (0.44, 0.86)),
        (0.06, (0.56, 0.6), (0.56, 0.86)),
    ];
    parts
        .iter()
        .map(|&(r, a, b)| r - capsule_dist((x, y), a, b))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// RGBA image of a figure wearing two flat colors: `upper` above the
/// waist, `lower` below it. Edges are antialiased with 4x4 supersampling.
pub fn two_tone_figure(size: usize, upper: [f64; 3], lower: [f64; 3]) -> Image {
    const SS: usize = 4;
    let waist = 0.56;
    let mut img = Image::new(size, size, 4);
    for r in 0..size {
        for c in 0..size {
            let mut cover = 0.0;
            let mut below = 0.0;
            for i in 0..SS {
                for j in 0..SS {
                    let y = (r as f64 + (i as f64 + 0.5) / SS as f64) / size as f64;
                    let x = (c as f64 + (j as f64 + 0.5) / SS as f64) / size as f64;
                    if figure_inside(x, y) > 0.0 {
                        cover += 1.0;
                        if y >= waist {
                            below += 1.0;
                        }
                    }
                }
            }
            if cover == 0.0 {
                continue;
            }
            let f = below / cover;
            let px = img.pixel_mut(r, c);
            for k in 0..3 {
                px[k] = upper[k] * (1.0 - f) + lower[k] * f;
            }
            px[3] = cover / (SS * SS) as f64;
        }
    }
    img
}

/// Figure with a single flat color.
pub fn flat_figure(size: usize, color: [f64; 3]) -> Image {
    two_tone_figure(size, color, color)
}
