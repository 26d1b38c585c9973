//! Desk-scale experiments on shapes-world: pretrain a base model, finetune
//! one subject, compose it into its category's backgrounds, and score the
//! results with the toy fidelity embedder.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{bundle_hash, load_bundle, save_bundle};
use crate::composer::{compose, ComposeOptions};
use crate::datasets::{generate_shapes_world, Corpus, Manifest, ShapesWorldConfig};
use crate::denoiser::{DenoiserConfig, ModelBundle};
use crate::diffusion::{make_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::imaging::{load_png, BBox, Raster};
use crate::metrics::{per_sample_fidelity, Embedder};
use crate::textcond::rare_token_name;
use crate::trainer::{finetune_subject, pretrain, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub world: ShapesWorldConfig,
    pub model: DenoiserConfig,
    pub schedule_steps: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            world: ShapesWorldConfig {
                backgrounds_per_category: 8,
                corpus_per_category: 500,
                ..ShapesWorldConfig::default()
            },
            model: DenoiserConfig {
                base_width: 16,
                ..DenoiserConfig::default()
            },
            schedule_steps: 200,
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            sampler: SamplerConfig::default(),
            n_samples: 5,
        }
    }
}

impl DeskConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule_steps, 1e-4, 0.02)
    }

    /// Key of everything the base model depends on.
    pub fn base_key(&self) -> Result<String> {
        let key = serde_json::to_vec(&(&self.world, &self.model, self.schedule_steps, &self.pretrain))?;
        Ok(hex::encode(&Sha256::digest(&key)[..8]))
    }
}

/// Generates the world under `dir` unless its manifest already exists.
pub fn prepare_world(cfg: &DeskConfig, dir: &Path) -> Result<Manifest> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        if let Ok(m) = crate::datasets::load_manifest(&manifest) {
            return Ok(m);
        }
    }
    generate_shapes_world(&cfg.world, dir)
}

/// Pretrains the base model, reusing `cache/base-<key>.bundle` when present.
pub fn base_model(
    cfg: &DeskConfig,
    world_dir: &Path,
    cache: Option<&Path>,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<ModelBundle> {
    let cached: Option<PathBuf> = match cache {
        Some(c) => Some(c.join(format!("base-{}.bundle", cfg.base_key()?))),
        None => None,
    };
    if let Some(p) = &cached {
        if let Ok(b) = load_bundle(p) {
            return Ok(b);
        }
    }
    let corpus = Corpus::load_samples(world_dir.join("corpus.json"))?;
    let (bundle, _) = pretrain(&corpus, &cfg.pretrain, &cfg.model, &cfg.schedule()?, log)?;
    if let Some(p) = &cached {
        save_bundle(&bundle, p)?;
    }
    Ok(bundle)
}

/// Reference images of a subject, foregrounds included.
pub fn subject_references(m: &Manifest, root: &Path, subject_id: &str) -> Result<Vec<(Raster, BBox)>> {
    let (_, s) = m
        .subject(subject_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {subject_id}")))?;
    s.references
        .iter()
        .map(|r| Ok((load_png(root.join(&r.path))?, r.bbox)))
        .collect()
}

/// Finetunes `base` on the first `n_refs` references of a subject.
pub fn finetune_on(
    base: &ModelBundle,
    m: &Manifest,
    root: &Path,
    subject_id: &str,
    n_refs: usize,
    cfg: &TrainConfig,
) -> Result<ModelBundle> {
    let mut refs = m.reference_set(subject_id, &rare_token_name(0))?;
    refs.items.truncate(n_refs);
    let images = refs.load(root)?;
    Ok(finetune_subject(base, &refs, &images, cfg, &mut crate::trainer::no_log)?.0)
}

/// Composites of `bundle` over every background of the subject's category.
/// Without a subject binding the bundle is prompted with its category.
pub fn compose_category(
    bundle: &ModelBundle,
    m: &Manifest,
    root: &Path,
    subject_id: &str,
    cfg: &DeskConfig,
    seed: u64,
) -> Result<Vec<(Raster, BBox)>> {
    let (cat, _) = m
        .subject(subject_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {subject_id}")))?;
    let hash = bundle_hash(bundle)?;
    let opts = ComposeOptions {
        prompt: bundle.binding().is_none().then(|| format!("a {}", cat.name)),
        n_samples: cfg.n_samples,
        sampler: cfg.sampler,
        seed,
    };
    let mut out = Vec::new();
    for (i, bg) in cat.backgrounds.iter().enumerate() {
        let image = load_png(root.join(&bg.path))?;
        let o = ComposeOptions {
            seed: seed.wrapping_add(1000 * i as u64),
            ..opts.clone()
        };
        for c in compose(bundle, &hash, &image, &bg.bbox, &o)? {
            out.push((c.image, bg.bbox));
        }
    }
    Ok(out)
}

/// Per-sample fidelity of generated foregrounds to a subject's references.
pub fn fidelity_to(gens: &[(Raster, BBox)], refs: &[(Raster, BBox)], e: &Embedder) -> Result<Vec<f64>> {
    let emb = |xs: &[(Raster, BBox)]| -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|(r, b)| e.embed_foreground(r, b, "")).collect()
    };
    per_sample_fidelity(&emb(gens)?, &emb(refs)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub subject: String,
    pub other: String,
    pub to_subject: Vec<f64>,
    pub to_other: Vec<f64>,
    pub base_to_subject: Vec<f64>,
    /// Fraction of samples closer to the subject than to the other subject.
    pub win_rate: f64,
    pub mean_to_subject: f64,
    pub mean_to_other: f64,
    pub base_mean_to_subject: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Finetunes `subject`, composes it over its category's backgrounds, and
/// compares against a same-category `other` subject and the base model.
pub fn subject_experiment(
    base: &ModelBundle,
    m: &Manifest,
    root: &Path,
    subject: &str,
    other: &str,
    cfg: &DeskConfig,
    seed: u64,
) -> Result<SubjectOutcome> {
    let n_refs = m.subject(subject).map_or(0, |(_, s)| s.references.len());
    let tuned = finetune_on(base, m, root, subject, n_refs, &cfg.finetune)?;
    let refs_a = subject_references(m, root, subject)?;
    let refs_b = subject_references(m, root, other)?;
    let e = Embedder::ToyColor;
    let gens = compose_category(&tuned, m, root, subject, cfg, seed)?;
    let base_gens = compose_category(base, m, root, subject, cfg, seed)?;
    let to_subject = fidelity_to(&gens, &refs_a, &e)?;
    let to_other = fidelity_to(&gens, &refs_b, &e)?;
    let base_to_subject = fidelity_to(&base_gens, &refs_a, &e)?;
    let wins = to_subject.iter().zip(&to_other).filter(|(a, b)| a > b).count();
    Ok(SubjectOutcome {
        subject: subject.to_string(),
        other: other.to_string(),
        win_rate: wins as f64 / to_subject.len() as f64,
        mean_to_subject: mean(&to_subject),
        mean_to_other: mean(&to_other),
        base_mean_to_subject: mean(&base_to_subject),
        to_subject,
        to_other,
        base_to_subject,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRun {
    pub subject: String,
    pub seed: u64,
    pub n_refs: usize,
    pub fidelity: f64,
}

/// Fidelity to the full reference set after finetuning on the first
/// `n_refs` references, for one (subject, seed).
pub fn reference_count_run(
    base: &ModelBundle,
    m: &Manifest,
    root: &Path,
    subject: &str,
    n_refs: usize,
    cfg: &DeskConfig,
    seed: u64,
) -> Result<TrendRun> {
    let ft = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let tuned = finetune_on(base, m, root, subject, n_refs, &ft)?;
    let gens = compose_category(&tuned, m, root, subject, cfg, seed)?;
    let refs = subject_references(m, root, subject)?;
    Ok(TrendRun {
        subject: subject.to_string(),
        seed,
        n_refs,
        fidelity: mean(&fidelity_to(&gens, &refs, &Embedder::ToyColor)?),
    })
}
