//! State-machine conformance checks run against a [`FakeBackend`]: long
//! random operation sequences with restarts, and a crash injected at every
//! persistence point of a two-round scenario.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use inpaint_compose::imaging::{save_png, BBox, Raster};
use inpaint_compose::trainer::{RefItem, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::FakeBackend;
use crate::error::StudioError;
use crate::model::{check_snapshot, BackgroundItem, RoundState, Snapshot, Verdict};
use crate::service::{CreateProject, StartRound, Studio};
use crate::store::Store;

/// Writes `n_refs` reference images and `n_bgs` backgrounds under
/// `dir/src` and returns a request naming them.
pub fn fixture_project(dir: &Path, id: &str, n_refs: usize, n_bgs: usize) -> CreateProject {
    let src = dir.join("src");
    let references = (0..n_refs)
        .map(|i| {
            let path = format!("{id}-ref{i}.png");
            let v = (i as f32 * 0.11 + 0.1) % 1.0;
            save_png(&Raster::filled(8, 8, [v, 0.2, 1.0 - v]), src.join(&path)).expect("write fixture");
            RefItem {
                path,
                bbox: BBox::new(1, 1, 6, 6),
            }
        })
        .collect();
    let backgrounds = (0..n_bgs)
        .map(|i| {
            let path = format!("{id}-bg{i}.png");
            save_png(&Raster::filled(12, 10, [0.3, 0.1 * i as f32, 0.5]), src.join(&path)).expect("write fixture");
            BackgroundItem {
                id: format!("bg{i}"),
                path,
                bbox: BBox::new(2, 3, 5, 4),
            }
        })
        .collect();
    CreateProject {
        id: id.to_string(),
        subject_id: None,
        category: "star".into(),
        rare_token: None,
        references,
        backgrounds,
        base_bundle: "base.bundle".into(),
    }
}

/// A one-step round with `n_samples` per background.
pub fn quick_round(n_samples: usize) -> StartRound {
    StartRound {
        train: TrainConfig {
            steps: 1,
            ..TrainConfig::finetune()
        },
        n_samples,
        seed: 1,
    }
}

fn open(dir: &Path, backend: Arc<FakeBackend>) -> Studio {
    Studio::new(Store::open(dir.join("data")).expect("open store"), backend, dir.join("src"))
}

fn rank(s: RoundState) -> u8 {
    match s {
        RoundState::Pending => 0,
        RoundState::Training => 1,
        RoundState::Sampling => 2,
        RoundState::Review => 3,
        RoundState::Closed | RoundState::FailedClosed => 4,
    }
}

/// Whether `to` is reachable from `from` by zero or more legal transitions.
pub fn reachable(from: RoundState, to: RoundState) -> bool {
    if from == to {
        return true;
    }
    match to {
        RoundState::FailedClosed => rank(from) <= 2,
        _ => !from.is_closed() && rank(from) < rank(to),
    }
}

/// Checks `new` on its own and as a successor of `old`: rounds and
/// candidates never disappear, states only move forward, the reference set
/// never shrinks, and verdicts change only while a round is in REVIEW.
pub fn check_progress(old: &Snapshot, new: &Snapshot) -> Result<(), String> {
    check_snapshot(new)?;
    if new.rounds.len() < old.rounds.len() {
        return Err("rounds disappeared".into());
    }
    if new.project.references.items.len() < old.project.references.items.len() {
        return Err("reference set shrank".into());
    }
    for (a, b) in old.rounds.iter().zip(&new.rounds) {
        if !reachable(a.state, b.state) {
            return Err(format!("round {}: {:?} -> {:?}", a.index, a.state, b.state));
        }
        for c in &a.candidates {
            let Some(d) = b.candidates.iter().find(|d| d.id == c.id) else {
                return Err(format!("candidate {} vanished", c.id));
            };
            if c.verdict != d.verdict && a.state != RoundState::Review {
                return Err(format!("verdict of {} changed outside REVIEW", c.id));
            }
        }
    }
    Ok(())
}

/// Drives project `p` through two rounds from whatever state is on disk:
/// round 1 accepts two candidates and is closed, round 2 ends in REVIEW.
pub fn drive_scenario(s: &Studio, dir: &Path) -> Result<(), StudioError> {
    loop {
        if !s.store().project_exists("p") {
            s.create_project(&fixture_project(dir, "p", 3, 2))?;
        }
        let snap = s.snapshot("p")?;
        let last = snap.rounds.last();
        match (snap.rounds.len(), last.map(|r| r.state)) {
            (0, _) => {
                s.start_round("p", &quick_round(2))?;
            }
            (n, Some(RoundState::Pending | RoundState::Training | RoundState::Sampling)) => {
                s.run_round("p", n)?;
            }
            (1, Some(RoundState::Review)) => {
                let r = last.expect("one round");
                s.review(&r.candidates[0].id, Verdict::Accepted)?;
                s.review(&r.candidates[2].id, Verdict::Accepted)?;
                s.review(&r.candidates[3].id, Verdict::Rejected)?;
                s.close_round("p", 1)?;
            }
            (1, Some(RoundState::Closed)) => {
                s.start_round(
                    "p",
                    &StartRound {
                        seed: 2,
                        ..quick_round(2)
                    },
                )?;
            }
            (2, Some(RoundState::Review)) => return Ok(()),
            other => return Err(StudioError::Io(format!("scenario reached {other:?}"))),
        }
    }
}

fn normalized(mut s: Snapshot) -> Snapshot {
    s.project.created = 0;
    s.project.updated = 0;
    s.project.base_bundle.clear();
    for r in &mut s.rounds {
        r.created = 0;
        r.updated = 0;
    }
    s
}

/// Runs the scenario once to count its persistence points, then for each
/// point crashes there, checks the state on disk, restarts, resumes and
/// finishes. Every run must end identical to the uninterrupted one.
/// Returns the number of persistence points.
pub fn crash_sweep(dir: &Path) -> Result<usize, String> {
    let clean = dir.join("clean");
    let s = open(&clean, Arc::new(FakeBackend::default()));
    drive_scenario(&s, &clean).map_err(|e| e.to_string())?;
    let points = s.store().write_count();
    let expected = normalized(s.snapshot("p").map_err(|e| e.to_string())?);
    if expected.project.references.items.len() != 5 {
        return Err("scenario should end with 5 references".into());
    }

    for crash_at in 0..points {
        let run = dir.join(format!("crash-{crash_at}"));
        let backend = Arc::new(FakeBackend::default());
        let s = open(&run, backend.clone());
        s.store().crash_after(crash_at);
        if !matches!(drive_scenario(&s, &run), Err(StudioError::Crash)) {
            return Err(format!("crash point {crash_at} was not reached"));
        }
        drop(s);

        let s = open(&run, backend);
        let fail = |stage: &str, e: String| format!("crash point {crash_at}, {stage}: {e}");
        if s.store().project_exists("p") {
            check_snapshot(&s.snapshot("p").map_err(|e| fail("reload", e.to_string()))?).map_err(|e| fail("after crash", e))?;
        }
        s.resume_all().map_err(|e| fail("resume", e.to_string()))?;
        if s.store().project_exists("p") {
            check_snapshot(&s.snapshot("p").map_err(|e| fail("reload", e.to_string()))?).map_err(|e| fail("after resume", e))?;
        }
        drive_scenario(&s, &run).map_err(|e| fail("finish", e.to_string()))?;
        let got = normalized(s.snapshot("p").map_err(|e| fail("final", e.to_string()))?);
        check_snapshot(&got).map_err(|e| fail("final", e))?;
        if got != expected {
            return Err(fail("final", "state differs from the uninterrupted run".into()));
        }
        let _ = std::fs::remove_dir_all(&run);
    }
    Ok(points)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WalkReport {
    pub ops: usize,
    pub projects: usize,
    pub restarts: usize,
    pub crashes: usize,
    /// Final round count per state over every project.
    pub states: BTreeMap<String, usize>,
}

const ACTIVE: usize = 3;
const MAX_ROUNDS: usize = 12;

struct Walk {
    dir: std::path::PathBuf,
    backend: Arc<FakeBackend>,
    studio: Studio,
    seen: BTreeMap<String, Snapshot>,
    report: WalkReport,
}

impl Walk {
    fn restart(&mut self) {
        self.studio = open(&self.dir, self.backend.clone());
        self.report.restarts += 1;
    }

    fn check_all(&mut self) -> Result<(), String> {
        for (id, old) in self.seen.iter_mut() {
            let new = self.studio.snapshot(id).map_err(|e| format!("project {id}: {e}"))?;
            check_progress(old, &new).map_err(|e| format!("project {id}: {e}"))?;
            *old = new;
        }
        Ok(())
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Option<String> {
        if self.seen.is_empty() {
            return None;
        }
        self.seen.keys().nth(rng.random_range(0..self.seen.len())).cloned()
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<(), String> {
        // Operation errors are expected (wrong state, unknown ids, crashes);
        // only the persisted state is judged.
        match rng.random_range(0..100) {
            0..=9 => {
                if self.seen.len() < ACTIVE {
                    let id = format!("p{}", self.report.projects);
                    self.report.projects += 1;
                    let req = fixture_project(&self.dir, &id, rng.random_range(1..4), rng.random_range(1..3));
                    if self.studio.create_project(&req).is_ok() {
                        let snap = self.studio.snapshot(&id).map_err(|e| e.to_string())?;
                        self.seen.insert(id, snap);
                    }
                }
            }
            10..=29 => {
                if let Some(id) = self.pick(rng) {
                    self.backend.set_fail_training(rng.random_bool(0.1));
                    let req = StartRound {
                        seed: rng.random(),
                        n_samples: rng.random_range(0..3),
                        ..quick_round(1)
                    };
                    let _ = self.studio.start_round(&id, &req);
                }
            }
            30..=69 => {
                if let Some(id) = self.pick(rng) {
                    let snap = &self.seen[&id];
                    let round = snap.rounds.get(rng.random_range(0..snap.rounds.len().max(1)));
                    let cid = match round {
                        Some(r) if !r.candidates.is_empty() => r.candidates[rng.random_range(0..r.candidates.len())].id.clone(),
                        _ => format!("{id}:9:bg0:0"),
                    };
                    let v = [Verdict::Accepted, Verdict::Rejected, Verdict::Unreviewed][rng.random_range(0..3)];
                    let _ = self.studio.review(&cid, v);
                }
            }
            70..=84 => {
                if let Some(id) = self.pick(rng) {
                    let n = self.seen[&id].rounds.len();
                    let _ = self.studio.close_round(&id, rng.random_range(0..n + 2));
                }
            }
            85..=94 => {
                self.studio.store().crash_after(rng.random_range(0..6));
                self.report.crashes += 1;
                if let Some(id) = self.pick(rng) {
                    let _ = self.studio.start_round(&id, &quick_round(rng.random_range(1..3)));
                    if let Some(r) = self.seen[&id].rounds.last() {
                        let _ = self.studio.close_round(&id, r.index);
                    }
                }
                self.restart();
                self.check_all()?;
                let _ = self.studio.resume_all();
            }
            _ => {
                self.restart();
                let _ = self.studio.resume_all();
            }
        }
        self.check_all()?;
        // Retire long projects to keep each check cheap.
        self.seen.retain(|_, s| s.rounds.len() < MAX_ROUNDS);
        self.report.ops += 1;
        Ok(())
    }
}

/// Applies `ops` random operations (create, start, review, close, crash,
/// restart) and checks every touched project after each one.
pub fn random_walk(dir: &Path, ops: usize, seed: u64) -> Result<WalkReport, String> {
    let backend = Arc::new(FakeBackend::default());
    let mut w = Walk {
        dir: dir.to_path_buf(),
        studio: open(dir, backend.clone()),
        backend,
        seen: BTreeMap::new(),
        report: WalkReport::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..ops {
        w.step(&mut rng).map_err(|e| format!("after op {i}: {e}"))?;
    }
    for id in w.studio.store().list_projects().map_err(|e| e.to_string())? {
        let s = w.studio.snapshot(&id).map_err(|e| e.to_string())?;
        check_snapshot(&s)?;
        for r in s.rounds {
            *w.report.states.entry(format!("{:?}", r.state)).or_insert(0) += 1;
        }
    }
    Ok(w.report)
}
