//! Serves the review HTTP API backed by the fake backend, which is handy
//! for working on a client without training anything.
//!
//! Usage: `cargo run -p inpaint-compose-studio --example serve_fake -- [addr] [dir]`

use std::sync::Arc;

use inpaint_compose_studio::{api, FakeBackend, Store, Studio};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let dir = std::path::PathBuf::from(args.next().unwrap_or_else(|| "studio-fake".into()));
    let studio = Studio::new(Store::open(dir.join("data"))?, Arc::new(FakeBackend::default()), dir.join("src"));
    println!("listening on http://{addr}/projects");
    api::serve(Arc::new(studio), addr.parse()?).await?;
    Ok(())
}
