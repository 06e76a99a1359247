//! Full desk-scale reconstruction of a synthetic two-tone figure with the
//! mock guidance backend.
//!
//! cargo run --example end_to_end -- [workdir] [flat]

use std::path::PathBuf;
use std::time::Instant;

use texhuman::pipeline::{self, Run, RunConfig, RunOptions};
use texhuman::synthetic::{flat_figure, two_tone_figure};

fn main() -> texhuman::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let workdir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target/end_to_end"));
    std::fs::create_dir_all(&workdir)?;
    let input = workdir.join("input.png");
    if std::env::args().nth(2).as_deref() == Some("flat") {
        flat_figure(256, [0.85, 0.25, 0.2]).save_png(&input)?;
    } else {
        two_tone_figure(256, [0.85, 0.25, 0.2], [0.2, 0.3, 0.75]).save_png(&input)?;
    }

    let mut cfg = RunConfig::desk();
    cfg.input_image = input;
    cfg.workdir = workdir.clone();
    cfg.coarse.steps = 100;
    let run = Run::new(cfg, RunOptions::default())?;

    let t = Instant::now();
    for (name, stage) in [
        ("preprocess", pipeline::preprocess::run_preprocess as fn(&Run) -> texhuman::Result<_>),
        ("coarse", pipeline::coarse::run_coarse),
        ("backview", pipeline::backview::run_backview),
        ("fine-geo", pipeline::geometry::run_fine_geometry),
        ("texture", pipeline::texture::run_texture),
    ] {
        let s = Instant::now();
        stage(&run)?;
        println!("{name:<10} {:>7.1}s", s.elapsed().as_secs_f64());
    }
    println!("total      {:>7.1}s  -> {}", t.elapsed().as_secs_f64(), workdir.display());
    Ok(())
}
