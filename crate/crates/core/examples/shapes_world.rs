//! Generates a small shapes-world tree and prints what the manifest holds.
//!
//! Usage: `cargo run --example shapes_world -- [out_dir]`

use inpaint_compose::datasets::{enumerate_pairs, generate_shapes_world, ShapesWorldConfig};

fn main() -> inpaint_compose::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes-world".into());
    let cfg = ShapesWorldConfig {
        corpus_per_category: 20,
        ..ShapesWorldConfig::default()
    };
    let m = generate_shapes_world(&cfg, out.as_ref())?;
    for c in &m.categories {
        println!("{}: {} backgrounds", c.name, c.backgrounds.len());
        for s in &c.subjects {
            println!("  {} with {} references", s.subject_id, s.references.len());
        }
    }
    println!("{} (subject, background) pairs under {out}", enumerate_pairs(&m).len());
    Ok(())
}
