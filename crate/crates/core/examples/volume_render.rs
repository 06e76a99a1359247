//! Renders a freshly initialized hash-grid field (with its density blob)
//! and writes color, alpha and normals.
//!
//! cargo run --example volume_render -- [out_dir]

use std::path::PathBuf;

use texhuman::field::{Aabb, FieldParams};
use texhuman::pipeline::RunConfig;
use texhuman::render::{render_with, RayMarchConfig, RenderOptions};
use texhuman::scene::{encode_normals, Camera};

fn main() -> texhuman::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/volume_render".into());
    std::fs::create_dir_all(&out)?;
    let desk = RunConfig::desk();
    let field = FieldParams::init(desk.coarse.field.clone(), Aabb::cube(desk.coarse.bound), 0)?.with_blob(desk.coarse.blob);
    println!("{} parameters", field.params.len());
    let cam = Camera::orbit(15.0, 30.0, 3.8, 20.0, 96, 96)?;
    let img = render_with(&field, &cam, &RayMarchConfig::for_distance(3.8, 128), RenderOptions::eval())?;
    img.rgb.save_png(&out.join("rgb.png"))?;
    img.alpha.save_png(&out.join("alpha.png"))?;
    if let Some(n) = &img.normal {
        encode_normals(n).save_png(&out.join("normal.png"))?;
    }
    println!("mean alpha {:.3} -> {}", img.alpha.mean(), out.display());
    Ok(())
}
