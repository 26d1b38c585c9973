#![allow(dead_code, unused_imports)]

use std::path::Path;
use std::sync::Arc;

pub use inpaint_compose_studio::conformance::{fixture_project as fixture_request, quick_round};
use inpaint_compose_studio::{FakeBackend, Store, Studio};

pub fn fake_studio(dir: &Path) -> (Studio, Arc<FakeBackend>) {
    let backend = Arc::new(FakeBackend::default());
    let studio = Studio::new(Store::open(dir.join("data")).unwrap(), backend.clone(), dir.join("src"));
    (studio, backend)
}
