//! What a round actually runs: finetuning and sampling. The studio only
//! sequences and persists; a backend does the work.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use inpaint_compose::checkpoint::{decode_header, load_bundle, save_bundle};
use inpaint_compose::composer::{compose, ComposeOptions, Composite, SampleMeta, META_VERSION};
use inpaint_compose::diffusion::SamplerConfig;
use inpaint_compose::imaging::{plan_crop_remedy, BBox, Raster, CROP_RATIO_THRESHOLD};
use inpaint_compose::trainer::{finetune_subject, no_log, ReferenceSet, TrainConfig};

use crate::error::{Result, StudioError};

pub struct TrainJob<'a> {
    pub project_dir: &'a Path,
    pub references: &'a ReferenceSet,
    pub base_bundle: &'a Path,
    pub train: &'a TrainConfig,
    /// Where the finetuned bundle must be written.
    pub bundle_path: PathBuf,
    /// Bundle of the latest closed round, recorded as provenance.
    pub previous_round_hash: Option<String>,
}

pub struct SampleJob<'a> {
    pub bundle_path: &'a Path,
    pub bundle_hash: &'a str,
    pub background: &'a Raster,
    pub bbox: BBox,
    pub n_samples: usize,
    pub seed: u64,
}

pub trait RoundBackend: Send + Sync {
    /// Rejects references the base model cannot bind.
    fn check_references(&self, base_bundle: &Path, refs: &ReferenceSet) -> Result<()>;
    /// Finetunes and writes the bundle; returns its hash.
    fn train(&self, job: &TrainJob<'_>) -> Result<String>;
    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<Composite>>;
}

/// Finetunes from the base bundle with the core trainer and composes with
/// the core composer.
#[derive(Clone, Debug, Default)]
pub struct CoreBackend {
    pub sampler: SamplerConfig,
}

impl RoundBackend for CoreBackend {
    fn check_references(&self, base_bundle: &Path, refs: &ReferenceSet) -> Result<()> {
        let bytes = std::fs::read(base_bundle)
            .map_err(|_| StudioError::invalid("base_bundle", format!("cannot read {}", base_bundle.display())))?;
        let (header, _) = decode_header(&bytes).map_err(|e| StudioError::invalid("base_bundle", e.to_string()))?;
        refs.validate(&header.vocab)?;
        Ok(())
    }

    fn train(&self, job: &TrainJob<'_>) -> Result<String> {
        let base = load_bundle(job.base_bundle)?;
        let images = job.references.load(job.project_dir)?;
        let (mut bundle, _) = finetune_subject(&base, job.references, &images, job.train, &mut no_log)?;
        if let Some(last) = bundle.lineage.last_mut() {
            last.previous_round_hash = job.previous_round_hash.clone();
        }
        Ok(save_bundle(&bundle, &job.bundle_path)?)
    }

    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<Composite>> {
        let bundle = load_bundle(job.bundle_path)?;
        let opts = ComposeOptions {
            prompt: None,
            n_samples: job.n_samples,
            sampler: self.sampler,
            seed: job.seed,
        };
        Ok(compose(&bundle, job.bundle_hash, job.background, &job.bbox, &opts)?)
    }
}

/// Instant stand-in for tests: training writes a small token file, sampling
/// paints the box a seed-dependent color.
#[derive(Debug, Default)]
pub struct FakeBackend {
    pub fail_training: AtomicBool,
}

impl FakeBackend {
    pub fn set_fail_training(&self, fail: bool) {
        self.fail_training.store(fail, Ordering::SeqCst);
    }
}

impl RoundBackend for FakeBackend {
    fn check_references(&self, _: &Path, _: &ReferenceSet) -> Result<()> {
        Ok(())
    }

    fn train(&self, job: &TrainJob<'_>) -> Result<String> {
        if self.fail_training.load(Ordering::SeqCst) {
            return Err(StudioError::Core(inpaint_compose::Error::InvalidArgument(
                "training failed (injected)".into(),
            )));
        }
        let token = format!(
            "{}:{}:{}:{:?}",
            job.references.subject_id,
            job.references.items.len(),
            job.train.seed,
            job.previous_round_hash
        );
        inpaint_compose::imaging::write_atomic(&job.bundle_path, token.as_bytes())?;
        Ok(format!("{:016x}", fnv(token.as_bytes())))
    }

    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<Composite>> {
        let plan = plan_crop_remedy(&job.bbox, job.background, CROP_RATIO_THRESHOLD, 32)?;
        Ok((0..job.n_samples)
            .map(|k| {
                let h = fnv(format!("{}:{k}", job.seed).as_bytes());
                let rgb = [0, 8, 16].map(|s| ((h >> s) & 0xff) as f32 / 255.0);
                let mut image = job.background.clone();
                for y in job.bbox.y..job.bbox.bottom() {
                    for x in job.bbox.x..job.bbox.right() {
                        image.set(y, x, rgb);
                    }
                }
                Composite {
                    image,
                    meta: SampleMeta {
                        version: META_VERSION,
                        seed: job.seed,
                        sample_index: k,
                        sampler: SamplerConfig::default().kind,
                        n_steps: 0,
                        crop_plan: plan,
                        bbox: job.bbox,
                        bundle_hash: job.bundle_hash.to_string(),
                        prompt: String::new(),
                    },
                }
            })
            .collect())
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
