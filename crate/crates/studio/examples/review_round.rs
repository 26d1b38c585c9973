//! One review round driven through the service API with the instant fake
//! backend: create a project, generate candidates, judge them, close the
//! round and read the promoted references back.
//!
//! Usage: `cargo run -p inpaint-compose-studio --example review_round -- [dir]`

use std::sync::Arc;

use inpaint_compose_studio::conformance::{fixture_project, quick_round};
use inpaint_compose_studio::{FakeBackend, Store, Studio, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "review-round".into()));
    let studio = Studio::new(Store::open(dir.join("data"))?, Arc::new(FakeBackend::default()), dir.join("src"));
    let project = studio.create_project(&fixture_project(&dir, "demo", 2, 2))?;
    println!("project {} with {} references", project.id, project.references.items.len());

    let round = studio.start_round("demo", &quick_round(3))?;
    let round = studio.run_round("demo", round.index)?;
    println!("round {} is {:?} with {} candidates", round.index, round.state, round.candidates.len());
    for (i, c) in round.candidates.iter().enumerate() {
        let verdict = if i % 2 == 0 { Verdict::Accepted } else { Verdict::Rejected };
        studio.review(&c.id, verdict)?;
        println!("  {} -> {verdict:?}", c.id);
    }
    let project = studio.close_round("demo", round.index)?;
    println!("after closing: {} references", project.references.items.len());
    Ok(())
}
