//! Which vertices of a sphere do the front and back cameras see? Writes the
//! side view's visibility map.
//!
//! cargo run --example mesh_visibility -- [out.png]

use texhuman::mesh::{compute_vertex_visibility, render_visibility_map, TriMesh};
use texhuman::scene::Camera;

fn main() -> texhuman::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/visibility.png".into());
    let mesh = TriMesh::icosphere(0.8, 4);
    let front = Camera::orbit(0.0, 0.0, 3.8, 20.0, 256, 256)?;
    let back = front.back_view();
    let vis = compute_vertex_visibility(&mesh, &[front, back]);
    let seen = vis.iter().filter(|&&v| v).count();
    println!("{seen}/{} vertices visible from front + back", vis.len());
    let side = Camera::orbit(0.0, 90.0, 3.8, 20.0, 128, 128)?;
    render_visibility_map(&mesh, &side, &vis).save_png(std::path::Path::new(&path))?;
    println!("side-view visibility map -> {path}");
    Ok(())
}
