//! Prints a shipped config preset and its hash.
//!
//! cargo run --example config_presets -- desk

use texhuman::pipeline::RunConfig;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "paper".into());
    let cfg = match name.as_str() {
        "desk" => RunConfig::desk(),
        _ => RunConfig::paper_defaults(),
    };
    eprintln!("# {name} preset, hash {}", cfg.hash());
    print!("{}", cfg.to_toml());
}
