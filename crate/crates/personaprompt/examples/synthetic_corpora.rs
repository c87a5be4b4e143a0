//! Writes the generated persona and general corpora to a directory.
//!
//! `cargo run --example synthetic_corpora -- corpora [seed]`

use personaprompt::synthetic::{World, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "corpora".into());
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let world = World::generate(&WorldConfig { seed, ..WorldConfig::default() });
    let (p, g) = world.write_corpora(dir.as_ref())?;
    println!("{}\n{}", p.display(), g.display());
    Ok(())
}
