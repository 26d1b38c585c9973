//! Projects, rounds, candidates and the legal-state checker.

use serde::{Deserialize, Serialize};

use inpaint_compose::imaging::BBox;
use inpaint_compose::trainer::{ReferenceSet, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoundState {
    Pending,
    Training,
    Sampling,
    Review,
    Closed,
    #[serde(rename = "FAILED-CLOSED")]
    FailedClosed,
}

impl RoundState {
    /// Successor on the normal path.
    pub fn next(self) -> Option<RoundState> {
        use RoundState::*;
        match self {
            Pending => Some(Training),
            Training => Some(Sampling),
            Sampling => Some(Review),
            Review => Some(Closed),
            Closed | FailedClosed => None,
        }
    }

    pub fn is_closed(self) -> bool {
        matches!(self, RoundState::Closed | RoundState::FailedClosed)
    }

    /// Whether `self -> to` is a legal single transition. Failure can close
    /// a round from any working state.
    pub fn can_move_to(self, to: RoundState) -> bool {
        self.next() == Some(to)
            || (to == RoundState::FailedClosed
                && matches!(self, RoundState::Pending | RoundState::Training | RoundState::Sampling))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    #[default]
    Unreviewed,
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundItem {
    pub id: String,
    /// Relative to the project directory.
    pub path: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// Relative to the project directory.
    pub image: String,
    pub background_id: String,
    pub sample_index: usize,
    pub bbox: BBox,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: usize,
    pub state: RoundState,
    pub train: TrainConfig,
    pub n_samples: usize,
    pub seed: u64,
    /// Reference count the round trained on.
    pub reference_count: usize,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub bundle_hash: Option<String>,
    #[serde(default)]
    pub diagnostics: Option<String>,
    pub created: u64,
    pub updated: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    /// Item paths are relative to the project directory.
    pub references: ReferenceSet,
    pub backgrounds: Vec<BackgroundItem>,
    /// Number of rounds; their indices are `1..=rounds`.
    pub rounds: usize,
    #[serde(default)]
    pub current_bundle_hash: Option<String>,
    pub base_bundle: String,
    pub created: u64,
    pub updated: u64,
}

/// A project with all of its rounds, as read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub project: Project,
    pub rounds: Vec<Round>,
}

/// Checks every structural invariant of a persisted project.
pub fn check_snapshot(s: &Snapshot) -> Result<(), String> {
    let p = &s.project;
    if s.rounds.len() != p.rounds {
        return Err(format!("project lists {} rounds, {} on disk", p.rounds, s.rounds.len()));
    }
    let mut last_refs = 0;
    for (i, r) in s.rounds.iter().enumerate() {
        if r.index != i + 1 {
            return Err(format!("round at position {i} has index {}", r.index));
        }
        if !r.state.is_closed() && i + 1 != s.rounds.len() {
            return Err(format!("round {} is open but not the latest", r.index));
        }
        if r.reference_count < last_refs || r.reference_count > p.references.items.len() {
            return Err(format!("round {} trained on {} references", r.index, r.reference_count));
        }
        last_refs = r.reference_count;
        let expected = p.backgrounds.len() * r.n_samples;
        match r.state {
            RoundState::Pending | RoundState::Training if !r.candidates.is_empty() => {
                return Err(format!("round {} has candidates before sampling", r.index));
            }
            RoundState::Review | RoundState::Closed if r.candidates.len() != expected => {
                return Err(format!("round {} has {} of {expected} candidates", r.index, r.candidates.len()));
            }
            _ => {}
        }
        if r.candidates.len() > expected {
            return Err(format!("round {} has too many candidates", r.index));
        }
        let mut ids: Vec<&str> = r.candidates.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(format!("round {} has duplicate candidates", r.index));
        }
        let judged = r.candidates.iter().any(|c| c.verdict != Verdict::Unreviewed);
        if judged && !matches!(r.state, RoundState::Review | RoundState::Closed) {
            return Err(format!("round {} has verdicts in state {:?}", r.index, r.state));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_only_move_forward() {
        use RoundState::*;
        let all = [Pending, Training, Sampling, Review, Closed, FailedClosed];
        for a in all {
            for b in all {
                let legal = a.can_move_to(b);
                let expected = matches!(
                    (a, b),
                    (Pending, Training)
                        | (Training, Sampling)
                        | (Sampling, Review)
                        | (Review, Closed)
                        | (Pending | Training | Sampling, FailedClosed)
                );
                assert_eq!(legal, expected, "{a:?} -> {b:?}");
            }
        }
        assert_eq!(serde_json::to_string(&FailedClosed).unwrap(), "\"FAILED-CLOSED\"");
        assert_eq!(serde_json::to_string(&Review).unwrap(), "\"REVIEW\"");
    }
}
