//! Extracts a torus from a tetrahedral grid and writes it as OBJ.
//!
//! cargo run --example marching_tets -- [out.obj]

use texhuman::field::Aabb;
use texhuman::mesh::{marching_tets, write_obj, TetGrid};

fn main() -> texhuman::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/torus.obj".into());
    let mut grid = TetGrid::new(40, Aabb::cube(1.0))?;
    grid.set_sdf_fn(|p| {
        let ring = (p.x * p.x + p.z * p.z).sqrt() - 0.55;
        0.2 - (ring * ring + p.y * p.y).sqrt()
    });
    let mesh = marching_tets(&grid)?.mesh;
    println!(
        "{} tets -> {} vertices, {} faces, watertight {}, Euler characteristic {}",
        grid.num_tets(),
        mesh.verts.len(),
        mesh.faces.len(),
        mesh.is_watertight(),
        mesh.euler_characteristic()
    );
    write_obj(std::path::Path::new(&path), &mesh)?;
    println!("wrote {path}");
    Ok(())
}
