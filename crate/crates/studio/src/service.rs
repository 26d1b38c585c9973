//! Project and round operations. Every mutation takes the project lock,
//! reads the persisted state, and persists after each state change, so a
//! crash at any write leaves a state the transition system can reach.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use inpaint_compose::composer::{PairMarker, COMPLETE_MARKER};
use inpaint_compose::datasets::{BackgroundEntry, CategoryEntry, Manifest, SubjectEntry, MANIFEST_VERSION};
use inpaint_compose::imaging::{load_png, png_dimensions};
use inpaint_compose::metrics::{evaluate_run, EvalConfig, EvalReport, RealSet};
use inpaint_compose::textcond::rare_token_name;
use inpaint_compose::trainer::{promote_references, RefItem, ReferenceSet, TrainConfig, MAX_REFERENCES};

use crate::backend::{RoundBackend, SampleJob, TrainJob};
use crate::error::{Result, StudioError};
use crate::model::{BackgroundItem, Candidate, Project, Round, RoundState, Snapshot, Verdict};
use crate::store::{now_secs, Store};

pub const DEFAULT_SAMPLES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateProject {
    pub id: String,
    #[serde(default)]
    pub subject_id: Option<String>,
    pub category: String,
    #[serde(default)]
    pub rare_token: Option<String>,
    /// Paths are absolute or relative to the studio's source directory.
    pub references: Vec<RefItem>,
    pub backgrounds: Vec<BackgroundItem>,
    pub base_bundle: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRound {
    #[serde(default = "TrainConfig::finetune")]
    pub train: TrainConfig,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

impl Default for StartRound {
    fn default() -> Self {
        Self {
            train: TrainConfig::finetune(),
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

pub struct Studio {
    store: Store,
    backend: Arc<dyn RoundBackend>,
    /// Relative input paths in create requests resolve against this.
    source_root: PathBuf,
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !s.starts_with('.')
}

/// `<project>:<round>:<background>:<k>`.
pub fn candidate_id(project: &str, round: usize, background: &str, k: usize) -> String {
    format!("{project}:{round}:{background}:{k}")
}

fn parse_candidate_id(cid: &str) -> Result<(String, usize)> {
    let parts: Vec<&str> = cid.split(':').collect();
    match parts.as_slice() {
        [p, n, _, _] => Ok((p.to_string(), n.parse().map_err(|_| StudioError::NotFound(format!("candidate {cid}")))?)),
        _ => Err(StudioError::NotFound(format!("candidate {cid}"))),
    }
}

fn seed_for(round_seed: u64, background_index: usize) -> u64 {
    round_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(background_index as u64)
}

impl Studio {
    pub fn new(store: Store, backend: Arc<dyn RoundBackend>, source_root: impl Into<PathBuf>) -> Self {
        Self {
            store,
            backend,
            source_root: source_root.into(),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let pb = Path::new(p);
        if pb.is_absolute() {
            pb.to_path_buf()
        } else {
            self.source_root.join(pb)
        }
    }

    pub fn create_project(&self, req: &CreateProject) -> Result<Project> {
        if !valid_id(&req.id) {
            return Err(StudioError::invalid("id", "ids use letters, digits, '-', '_' and '.'"));
        }
        if req.references.is_empty() || req.references.len() > MAX_REFERENCES {
            return Err(StudioError::invalid("references", format!("need 1..={MAX_REFERENCES} references")));
        }
        if req.backgrounds.is_empty() {
            return Err(StudioError::invalid("backgrounds", "need at least one background"));
        }
        for (i, r) in req.references.iter().enumerate() {
            let (w, h) = png_dimensions(self.resolve(&r.path))
                .map_err(|e| StudioError::invalid(format!("references[{i}].path"), e.to_string()))?;
            r.bbox
                .validate(w, h)
                .map_err(|e| StudioError::invalid(format!("references[{i}].bbox"), e.to_string()))?;
        }
        let mut seen = std::collections::HashSet::new();
        for (i, b) in req.backgrounds.iter().enumerate() {
            if !valid_id(&b.id) || !seen.insert(b.id.as_str()) {
                return Err(StudioError::invalid(format!("backgrounds[{i}].id"), "invalid or duplicate id"));
            }
            let (w, h) = png_dimensions(self.resolve(&b.path))
                .map_err(|e| StudioError::invalid(format!("backgrounds[{i}].path"), e.to_string()))?;
            b.bbox
                .validate(w, h)
                .map_err(|e| StudioError::invalid(format!("backgrounds[{i}].bbox"), e.to_string()))?;
        }
        let base_bundle = self.resolve(&req.base_bundle);
        let refs_src = ReferenceSet {
            subject_id: req.subject_id.clone().unwrap_or_else(|| req.id.clone()),
            category: req.category.clone(),
            rare_token: req.rare_token.clone().unwrap_or_else(|| rare_token_name(0)),
            items: req.references.clone(),
        };
        self.backend.check_references(&base_bundle, &refs_src)?;

        if self.store.project_exists(&req.id) {
            return Err(StudioError::Conflict(format!("project {} exists", req.id)));
        }
        let _lock = self.store.lock(&req.id)?;
        if self.store.project_exists(&req.id) {
            return Err(StudioError::Conflict(format!("project {} exists", req.id)));
        }
        let dir = self.store.project_dir(&req.id);
        let mut refs = refs_src.clone();
        for (i, it) in refs.items.iter_mut().enumerate() {
            let rel = format!("references/{i}.png");
            self.store.copy_file(&self.resolve(&it.path), &dir.join(&rel))?;
            it.path = rel;
        }
        let mut backgrounds = req.backgrounds.clone();
        for b in &mut backgrounds {
            let rel = format!("backgrounds/{}.png", b.id);
            self.store.copy_file(&self.resolve(&b.path), &dir.join(&rel))?;
            b.path = rel;
        }
        let now = now_secs();
        let p = Project {
            id: req.id.clone(),
            references: refs,
            backgrounds,
            rounds: 0,
            current_bundle_hash: None,
            base_bundle: base_bundle.to_string_lossy().into_owned(),
            created: now,
            updated: now,
        };
        // project.json last: its presence marks the project as created.
        self.store.save_project(&p)?;
        Ok(p)
    }

    pub fn list_projects(&self) -> Result<Vec<Project>> {
        self.store
            .list_projects()?
            .iter()
            .map(|id| self.store.load_project(id))
            .collect()
    }

    pub fn snapshot(&self, id: &str) -> Result<Snapshot> {
        self.store.snapshot(id)
    }

    pub fn round(&self, id: &str, n: usize) -> Result<Round> {
        let p = self.store.load_project(id)?;
        if n == 0 || n > p.rounds {
            return Err(StudioError::NotFound(format!("round {n} of project {id}")));
        }
        self.store.load_round(id, n)
    }

    /// Persists a new PENDING round without running it.
    pub fn begin_round(&self, id: &str, req: &StartRound) -> Result<Round> {
        if req.n_samples == 0 {
            return Err(StudioError::invalid("n_samples", "must be >= 1"));
        }
        req.train
            .validate()
            .map_err(|e| StudioError::invalid("train", e.to_string()))?;
        let _lock = self.store.lock(id)?;
        let mut p = self.store.load_project(id)?;
        if p.rounds > 0 {
            let last = self.store.load_round(id, p.rounds)?;
            if !last.state.is_closed() {
                return Err(StudioError::WrongState(format!(
                    "round {} is {:?}; close it first",
                    last.index, last.state
                )));
            }
        }
        let now = now_secs();
        let r = Round {
            index: p.rounds + 1,
            state: RoundState::Pending,
            train: req.train.clone(),
            n_samples: req.n_samples,
            seed: req.seed,
            reference_count: p.references.items.len(),
            candidates: Vec::new(),
            bundle_hash: None,
            diagnostics: None,
            created: now,
            updated: now,
        };
        // Round first: a crash before the project update leaves an orphan
        // directory that the next begin overwrites.
        self.store.save_round(id, &r)?;
        p.rounds = r.index;
        p.updated = now;
        self.store.save_project(&p)?;
        Ok(r)
    }

    /// Creates a round and drives it to REVIEW (or FAILED-CLOSED).
    pub fn start_round(&self, id: &str, req: &StartRound) -> Result<Round> {
        let r = self.begin_round(id, req)?;
        self.run_round(id, r.index)
    }

    fn transition(&self, id: &str, r: &mut Round, to: RoundState) -> Result<()> {
        debug_assert!(r.state.can_move_to(to), "{:?} -> {to:?}", r.state);
        r.state = to;
        r.updated = now_secs();
        self.store.save_round(id, r)
    }

    /// Continues a round from its persisted state until it needs a human.
    pub fn run_round(&self, id: &str, n: usize) -> Result<Round> {
        let _lock = self.store.lock(id)?;
        let mut p = self.store.load_project(id)?;
        if n == 0 || n > p.rounds {
            return Err(StudioError::NotFound(format!("round {n} of project {id}")));
        }
        let mut r = self.store.load_round(id, n)?;
        let dir = self.store.project_dir(id);
        let round_dir = self.store.round_dir(id, n);
        let bundle_path = round_dir.join("model.bundle");
        loop {
            match r.state {
                RoundState::Pending => self.transition(id, &mut r, RoundState::Training)?,
                RoundState::Training => {
                    let previous = (1..n)
                        .rev()
                        .map(|k| self.store.load_round(id, k))
                        .find_map(|x| x.ok().filter(|x| x.state == RoundState::Closed))
                        .and_then(|x| x.bundle_hash);
                    let mut refs = p.references.clone();
                    refs.items.truncate(r.reference_count);
                    let job = TrainJob {
                        project_dir: &dir,
                        references: &refs,
                        base_bundle: Path::new(&p.base_bundle),
                        train: &r.train,
                        bundle_path: bundle_path.clone(),
                        previous_round_hash: previous,
                    };
                    match self.backend.train(&job) {
                        Ok(hash) => {
                            r.bundle_hash = Some(hash);
                            self.transition(id, &mut r, RoundState::Sampling)?;
                        }
                        Err(StudioError::Crash) => return Err(StudioError::Crash),
                        Err(e) => {
                            r.diagnostics = Some(format!("training failed: {e}"));
                            self.transition(id, &mut r, RoundState::FailedClosed)?;
                        }
                    }
                }
                RoundState::Sampling => {
                    if let Err(e) = self.sample_round(&p, &mut r, &bundle_path) {
                        if matches!(e, StudioError::Crash) {
                            return Err(e);
                        }
                        r.diagnostics = Some(format!("sampling failed: {e}"));
                        self.transition(id, &mut r, RoundState::FailedClosed)?;
                        continue;
                    }
                    self.transition(id, &mut r, RoundState::Review)?;
                    p.current_bundle_hash = r.bundle_hash.clone();
                    p.updated = now_secs();
                    self.store.save_project(&p)?;
                }
                RoundState::Review | RoundState::Closed | RoundState::FailedClosed => {
                    // The project may have missed its bundle update on a crash.
                    if r.state == RoundState::Review && p.current_bundle_hash != r.bundle_hash {
                        p.current_bundle_hash = r.bundle_hash.clone();
                        self.store.save_project(&p)?;
                    }
                    return Ok(r);
                }
            }
        }
    }

    /// Generates the candidates missing from `r`, one background at a time.
    /// Candidate ids are deterministic, so a resumed round never duplicates.
    fn sample_round(&self, p: &Project, r: &mut Round, bundle_path: &Path) -> Result<()> {
        let dir = self.store.project_dir(&p.id);
        let hash = r.bundle_hash.clone().unwrap_or_default();
        let subject = &p.references.subject_id;
        for (bi, bg) in p.backgrounds.iter().enumerate() {
            let missing: Vec<usize> = (0..r.n_samples)
                .filter(|&k| {
                    let cid = candidate_id(&p.id, r.index, &bg.id, k);
                    !r.candidates.iter().any(|c| c.id == cid)
                })
                .collect();
            if missing.is_empty() {
                continue;
            }
            let image = load_png(dir.join(&bg.path))?;
            let composites = self.backend.sample(&SampleJob {
                bundle_path,
                bundle_hash: &hash,
                background: &image,
                bbox: bg.bbox,
                n_samples: r.n_samples,
                seed: seed_for(r.seed, bi),
            })?;
            let rel_dir = format!("rounds/{}/gen/{subject}/{}", r.index, bg.id);
            for c in composites.iter().filter(|c| missing.contains(&c.meta.sample_index)) {
                let k = c.meta.sample_index;
                let rel = format!("{rel_dir}/{k}.png");
                self.store.write_png(&dir.join(&rel), &c.image)?;
                self.store.write_json(&dir.join(format!("{rel_dir}/{k}.json")), &c.meta)?;
                r.candidates.push(Candidate {
                    id: candidate_id(&p.id, r.index, &bg.id, k),
                    image: rel,
                    background_id: bg.id.clone(),
                    sample_index: k,
                    bbox: bg.bbox,
                    verdict: Verdict::Unreviewed,
                });
            }
            self.store.write_json(
                &dir.join(format!("{rel_dir}/{COMPLETE_MARKER}")),
                &PairMarker {
                    n_samples: r.n_samples,
                    bundle_hash: hash.clone(),
                    seed: r.seed,
                },
            )?;
            r.updated = now_secs();
            self.store.save_round(&p.id, r)?;
        }
        Ok(())
    }

    /// Resumes every round left mid-flight by a crash.
    pub fn resume_all(&self) -> Result<Vec<Round>> {
        let mut out = Vec::new();
        for id in self.store.list_projects()? {
            let p = self.store.load_project(&id)?;
            if p.rounds == 0 {
                continue;
            }
            let r = self.store.load_round(&id, p.rounds)?;
            if matches!(r.state, RoundState::Pending | RoundState::Training | RoundState::Sampling)
                || (r.state == RoundState::Review && p.current_bundle_hash != r.bundle_hash)
            {
                out.push(self.run_round(&id, p.rounds)?);
            }
        }
        Ok(out)
    }

    pub fn candidate(&self, cid: &str) -> Result<(Project, Candidate)> {
        let (pid, n) = parse_candidate_id(cid)?;
        if !self.store.project_exists(&pid) {
            return Err(StudioError::NotFound(format!("candidate {cid}")));
        }
        let r = self.round(&pid, n)?;
        let c = r
            .candidates
            .iter()
            .find(|c| c.id == cid)
            .cloned()
            .ok_or_else(|| StudioError::NotFound(format!("candidate {cid}")))?;
        Ok((self.store.load_project(&pid)?, c))
    }

    pub fn candidate_image_path(&self, cid: &str) -> Result<PathBuf> {
        let (p, c) = self.candidate(cid)?;
        Ok(self.store.project_dir(&p.id).join(c.image))
    }

    /// Records a verdict; repeating the same verdict changes nothing.
    pub fn review(&self, cid: &str, verdict: Verdict) -> Result<Round> {
        let (pid, n) = parse_candidate_id(cid)?;
        let _lock = self.store.lock(&pid)?;
        let mut r = self.round(&pid, n)?;
        let c = r
            .candidates
            .iter_mut()
            .find(|c| c.id == cid)
            .ok_or_else(|| StudioError::NotFound(format!("candidate {cid}")))?;
        if r.state != RoundState::Review {
            return Err(StudioError::WrongState(format!("round {n} is {:?}, not REVIEW", r.state)));
        }
        if c.verdict == verdict {
            return Ok(r);
        }
        c.verdict = verdict;
        r.updated = now_secs();
        self.store.save_round(&pid, &r)?;
        Ok(r)
    }

    /// Promotes accepted candidates into the reference set and closes.
    pub fn close_round(&self, id: &str, n: usize) -> Result<Project> {
        let _lock = self.store.lock(id)?;
        let mut p = self.store.load_project(id)?;
        let mut r = self.round(id, n)?;
        if r.state != RoundState::Review {
            return Err(StudioError::WrongState(format!("round {n} is {:?}, not REVIEW", r.state)));
        }
        let dir = self.store.project_dir(id);
        let mut accepted = Vec::new();
        for c in r.candidates.iter().filter(|c| c.verdict == Verdict::Accepted) {
            let rel = format!("references/r{}-{}-{}.png", n, c.background_id, c.sample_index);
            self.store.copy_file(&dir.join(&c.image), &dir.join(&rel))?;
            accepted.push(RefItem { path: rel, bbox: c.bbox });
        }
        let promoted = promote_references(&p.references, &accepted, &dir)?;
        if promoted != p.references {
            p.references = promoted;
            p.updated = now_secs();
            // Project before round: a crash in between re-promotes on the
            // next close, which deduplicates by content.
            self.store.save_project(&p)?;
        }
        self.transition(id, &mut r, RoundState::Closed)?;
        Ok(p)
    }

    /// Evaluation report for the latest round with candidates, scored
    /// against the project's current references.
    pub fn metrics(&self, id: &str) -> Result<EvalReport> {
        let s = self.store.snapshot(id)?;
        let r = s
            .rounds
            .iter()
            .rev()
            .find(|r| matches!(r.state, RoundState::Review | RoundState::Closed))
            .ok_or_else(|| StudioError::NotFound(format!("no sampled round in project {id}")))?;
        let p = &s.project;
        let dir = self.store.project_dir(id);
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            name: p.id.clone(),
            categories: vec![CategoryEntry {
                name: p.references.category.clone(),
                backgrounds: p
                    .backgrounds
                    .iter()
                    .map(|b| BackgroundEntry {
                        id: b.id.clone(),
                        path: b.path.clone(),
                        bbox: b.bbox,
                    })
                    .collect(),
                subjects: vec![SubjectEntry {
                    subject_id: p.references.subject_id.clone(),
                    references: p.references.items.clone(),
                    backgrounds: None,
                }],
            }],
        };
        Ok(evaluate_run(
            &self.store.round_dir(id, r.index).join("gen"),
            &manifest,
            &dir,
            &RealSet::Images(dir.join("references")),
            &EvalConfig::default(),
        )?)
    }
}
