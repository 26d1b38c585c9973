//! Review studio: projects grow their reference sets through repeated
//! finetune, sample and review rounds.
//!
//! Round states advance `PENDING -> TRAINING -> SAMPLING -> REVIEW ->
//! CLOSED`; a failed training or sampling job ends in `FAILED-CLOSED`.

pub mod api;
pub mod backend;
pub mod conformance;
pub mod error;
pub mod model;
pub mod service;
pub mod store;

pub use backend::{CoreBackend, FakeBackend, RoundBackend};
pub use error::{Result, StudioError};
pub use model::{Candidate, Project, Round, RoundState, Snapshot, Verdict};
pub use service::{CreateProject, StartRound, Studio};
pub use store::Store;
