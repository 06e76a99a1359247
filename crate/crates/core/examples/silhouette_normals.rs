//! Preprocesses a synthetic subject and inflates its silhouette into a
//! normal map (the fallback when no normal estimator is configured).
//!
//! cargo run --example silhouette_normals -- [out_dir]

use std::path::PathBuf;

use texhuman::pipeline::normals::silhouette_normals;
use texhuman::scene::{encode_normals, preprocess_reference};
use texhuman::synthetic::two_tone_figure;

fn main() -> texhuman::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/silhouette_normals".into());
    std::fs::create_dir_all(&out)?;
    let raw = two_tone_figure(200, [0.85, 0.25, 0.2], [0.2, 0.3, 0.75]);
    let pre = preprocess_reference(&raw, 128, 0.7)?;
    for w in &pre.warnings {
        println!("warning: {w:?}");
    }
    let normals = silhouette_normals(&pre.bundle.alpha);
    pre.bundle.rgb.save_png(&out.join("rgb.png"))?;
    encode_normals(&normals).save_png(&out.join("normal.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
