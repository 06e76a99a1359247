//! Patch consistency on a toy patch: hidden pixels are pulled toward the
//! nearest visible color.
//!
//! cargo run --example patch_consistency

use texhuman::losses::{vpc_loss, PatchSample};

fn main() -> texhuman::Result<()> {
    // left half visible red/blue, right half hidden and muddy
    let size = 4;
    let mut rgb = Vec::new();
    let mut visible = Vec::new();
    for r in 0..size {
        for c in 0..size {
            let seen = c < 2;
            visible.push(seen);
            rgb.push(match (seen, r < 2) {
                (true, true) => [0.9, 0.1, 0.1],
                (true, false) => [0.1, 0.1, 0.9],
                (false, _) => [0.5, 0.4, 0.3 + 0.1 * r as f64],
            });
        }
    }
    let mut patch = PatchSample::from_parts(size, rgb, visible)?;
    for step in 0..5 {
        let out = vpc_loss(&patch)?;
        println!("step {step}: loss {:.4}", out.value);
        for (c, g) in patch.rgb.iter_mut().zip(&out.grad) {
            for k in 0..3 {
                c[k] -= 0.25 * g[k];
            }
        }
    }
    println!("hidden pixel (0,3) now {:.3?}", patch.rgb[3]);
    Ok(())
}
