//! Base pretraining on a multi-category corpus and per-subject finetuning
//! that binds a rare token to a handful of reference images.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply, sample_transform, AugmentConfig};
use crate::autograd::Graph;
use crate::checkpoint::bundle_hash;
use crate::denoiser::{init_bundle, DenoiserConfig, Example, LineageEntry, ModelBundle};
use crate::diffusion::{LossDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{load_png, make_mask, resize, BBox, Raster};
use crate::nn::{Adam, AdamConfig, Trainable};
use crate::textcond::{build_vocab, make_class_prompt, make_subject_prompt, Prompt, Vocab};

pub const DEFAULT_RARE_TOKENS: usize = 8;
pub const MAX_REFERENCES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: AugmentConfig,
    pub freeze_text_encoder: bool,
    pub seed: u64,
    /// Reconstruction steps for the conv autoencoder before diffusion
    /// pretraining; unused with the identity autoencoder.
    pub autoencoder_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: AugmentConfig::default(),
            freeze_text_encoder: true,
            seed: 0,
            autoencoder_steps: 1500,
        }
    }

    pub fn finetune() -> Self {
        Self {
            steps: 800,
            learning_rate: 1e-4,
            ..Self::pretrain()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        self.augment.validate()
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_time: f64,
}

/// Mean loss over the first and last `window` steps.
pub fn window_means(log: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if log.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

/// Appends [`StepRecord`]s as JSON lines.
pub struct JsonlLog {
    file: fs::File,
    path: PathBuf,
}

impl JsonlLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A boxed image with its category, as used for pretraining.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Raster,
    pub bbox: BBox,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefItem {
    pub path: String,
    pub bbox: BBox,
}

/// A subject's reference images. Relative paths resolve against a root
/// directory supplied by the caller.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub subject_id: String,
    pub category: String,
    pub rare_token: String,
    pub items: Vec<RefItem>,
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let pb = Path::new(p);
    if pb.is_absolute() {
        pb.to_path_buf()
    } else {
        root.join(pb)
    }
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ReferenceSet {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.items.is_empty() || self.items.len() > MAX_REFERENCES {
            return Err(Error::InvalidArgument(format!(
                "reference set needs 1..={MAX_REFERENCES} items, has {}",
                self.items.len()
            )));
        }
        if !vocab.is_category(&self.category) {
            return Err(Error::UnknownToken(self.category.clone()));
        }
        if !vocab.is_rare(vocab.id(&self.rare_token)?) {
            return Err(Error::InvalidArgument(format!("{:?} is not a rare token", self.rare_token)));
        }
        Ok(())
    }

    /// Loads every image and checks its box.
    pub fn load(&self, root: &Path) -> Result<Vec<(Raster, BBox)>> {
        self.items
            .iter()
            .map(|it| {
                let r = load_png(resolve(root, &it.path))?;
                it.bbox.validate(r.width(), r.height())?;
                Ok((r, it.bbox))
            })
            .collect()
    }
}

/// Union of `refs` and `accepted`, deduplicated by file content, order kept.
pub fn promote_references(refs: &ReferenceSet, accepted: &[RefItem], root: &Path) -> Result<ReferenceSet> {
    let mut seen = HashSet::new();
    for it in &refs.items {
        seen.insert(file_sha(&resolve(root, &it.path))?);
    }
    let mut out = refs.clone();
    for it in accepted {
        let path = resolve(root, &it.path);
        let r = load_png(&path)?;
        it.bbox.validate(r.width(), r.height())?;
        if seen.insert(file_sha(&path)?) {
            out.items.push(it.clone());
        }
    }
    if out.items.len() > MAX_REFERENCES {
        return Err(Error::InvalidArgument(format!(
            "reference set would grow to {} items (max {MAX_REFERENCES})",
            out.items.len()
        )));
    }
    Ok(out)
}

/// Resizes an image to the model's square input, mapping its box.
pub fn to_model_space(image: &Raster, bbox: &BBox, size: usize) -> Result<(Raster, BBox)> {
    bbox.validate(image.width(), image.height())?;
    if image.width() == size && image.height() == size {
        return Ok((image.clone(), *bbox));
    }
    let r = resize(image, size, size)?;
    Ok((r, bbox.into_resampled(&image.full_box(), size, size)))
}

fn augmented<R: Rng>(image: &Raster, bbox: &BBox, prompt: &Prompt, cfg: &AugmentConfig, rng: &mut R) -> Result<Example> {
    let mask = make_mask(bbox, image)?;
    for _ in 0..10 {
        let t = match sample_transform(cfg, image.width(), image.height(), bbox, rng) {
            Ok(t) => t,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        match apply(&t, image, &mask) {
            Ok((image, mask)) => {
                return Ok(Example {
                    image,
                    mask,
                    prompt: prompt.clone(),
                })
            }
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(Example {
        image: image.clone(),
        mask,
        prompt: prompt.clone(),
    })
}

/// Shared optimization loop: `draw_batch` supplies examples per step.
fn optimize(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    trainable: &Trainable,
    rng: &mut ChaCha8Rng,
    mut draw_batch: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<Example>>,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut adam = Adam::new(cfg.adam());
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let examples = draw_batch(rng)?;
        let batch = bundle.prepare(&examples)?;
        let draw = LossDraw::sample(&bundle.schedule, batch.z0.shape(), rng);
        let mut g = Graph::new();
        let loss = bundle
            .loss_graph(&mut g, &batch, &draw)
            .map_err(|e| match e {
                Error::Numerical { detail, .. } => Error::numerical(format!("training step {step}"), detail),
                other => other,
            })?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        adam.step(&mut bundle.params, &grads, trainable);
        if !bundle.params.all_finite() {
            return Err(Error::numerical(format!("training step {step}"), "parameters diverged"));
        }
        let rec = StepRecord {
            step,
            loss: value,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Trains the conv autoencoder on pixel reconstruction. No-op for the
/// identity autoencoder.
pub fn pretrain_autoencoder(
    bundle: &mut ModelBundle,
    images: &[Raster],
    steps: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let Some(ae) = bundle.autoencoder().cloned() else {
        return Ok(Vec::new());
    };
    if images.is_empty() {
        return Err(Error::InvalidArgument("autoencoder needs images".into()));
    }
    let trainable = Trainable::with_prefix(&bundle.params, "ae.");
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 2e-3,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let picks: Vec<_> = (0..batch_size)
            .map(|_| images[rng.random_range(0..images.len())].to_tensor::<f32>())
            .collect();
        let x = crate::tensor::Tensor::stack(&picks)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let z = ae.encode(&mut g, &bundle.params, xv)?;
        let y = ae.decode(&mut g, &bundle.params, z)?;
        let target = g.input(x);
        let loss = g.mse(y, target)?;
        let v = g.value(loss).data()[0] as f64;
        if !v.is_finite() {
            return Err(Error::numerical(format!("autoencoder step {step}"), "non-finite loss"));
        }
        let grads = g.backward(loss)?;
        adam.step(&mut bundle.params, &grads, &trainable);
        losses.push(v);
    }
    Ok(losses)
}

/// Base pretraining with category prompts `"a <category>"`.
pub fn pretrain(
    corpus: &[TrainSample],
    cfg: &TrainConfig,
    model_cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<(ModelBundle, Vec<StepRecord>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining corpus".into()));
    }
    let mut categories: Vec<&str> = corpus.iter().map(|s| s.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();
    let vocab = build_vocab(&categories, DEFAULT_RARE_TOKENS)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bundle = init_bundle(model_cfg, &vocab, schedule, &mut init_rng)?;

    let size = model_cfg.image_size;
    let items = corpus
        .iter()
        .map(|s| {
            let (image, bbox) = to_model_space(&s.image, &s.bbox, size)?;
            Ok((image, bbox, make_class_prompt(&vocab, &s.category)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let images: Vec<Raster> = items.iter().map(|i| i.0.clone()).collect();
    pretrain_autoencoder(&mut bundle, &images, cfg.autoencoder_steps, cfg.batch_size, &mut rng)?;

    let trainable = bundle.pretrain_set();
    let aug = cfg.augment.clone();
    let bs = cfg.batch_size;
    let records = optimize(
        &mut bundle,
        cfg,
        &trainable,
        &mut rng,
        |rng| {
            (0..bs)
                .map(|_| {
                    let (im, b, p) = &items[rng.random_range(0..items.len())];
                    augmented(im, b, p, &aug, rng)
                })
                .collect()
        },
        log,
    )?;
    Ok((bundle, records))
}

/// Finetunes a copy of `base` on one subject, binding `refs.rare_token`.
pub fn finetune_subject(
    base: &ModelBundle,
    refs: &ReferenceSet,
    images: &[(Raster, BBox)],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<(ModelBundle, Vec<StepRecord>)> {
    cfg.validate()?;
    refs.validate(&base.vocab)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("no reference images".into()));
    }
    if base.bound_tokens().contains(&refs.rare_token.as_str()) {
        return Err(Error::TokenCollision(refs.rare_token.clone()));
    }
    let prompt = make_subject_prompt(&base.vocab, &refs.rare_token, &refs.category)?;
    let rare_id = base.vocab.id(&refs.rare_token)?;
    let size = base.config.image_size;
    let items = images
        .iter()
        .map(|(im, b)| to_model_space(im, b, size))
        .collect::<Result<Vec<_>>>()?;

    let mut bundle = base.clone();
    bundle.lineage.push(LineageEntry {
        kind: "finetune".into(),
        parent_hash: Some(bundle_hash(base)?),
        subject_id: Some(refs.subject_id.clone()),
        category: Some(refs.category.clone()),
        rare_token: Some(refs.rare_token.clone()),
        previous_round_hash: None,
    });
    let trainable = bundle.finetune_set(rare_id, cfg.freeze_text_encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let aug = cfg.augment.clone();
    let bs = cfg.batch_size;
    let records = optimize(
        &mut bundle,
        cfg,
        &trainable,
        &mut rng,
        |rng| {
            (0..bs)
                .map(|_| {
                    let (im, b) = &items[rng.random_range(0..items.len())];
                    augmented(im, b, &prompt, &aug, rng)
                })
                .collect()
        },
        log,
    )?;
    Ok((bundle, records))
}

/// Mean loss over fixed draws, for paired before/after comparisons.
pub fn paired_loss(bundle: &ModelBundle, examples: &[Example], draws: usize, seed: u64) -> Result<f64> {
    let batch = bundle.prepare(examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let d = LossDraw::sample(&bundle.schedule, batch.z0.shape(), &mut rng);
        total += bundle.loss_value(&batch, &d)?;
    }
    Ok(total / draws.max(1) as f64)
}

/// Examples built from references without augmentation.
pub fn reference_examples(bundle: &ModelBundle, refs: &ReferenceSet, images: &[(Raster, BBox)]) -> Result<Vec<Example>> {
    let prompt = make_subject_prompt(&bundle.vocab, &refs.rare_token, &refs.category)?;
    images
        .iter()
        .map(|(im, b)| {
            let (image, bbox) = to_model_space(im, b, bundle.config.image_size)?;
            Ok(Example {
                mask: make_mask(&bbox, &image)?,
                image,
                prompt: prompt.clone(),
            })
        })
        .collect()
}

pub fn no_log(_: &StepRecord) -> Result<()> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::imaging::save_png;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 4,
            n_down: 1,
            attn_dim: 4,
            image_size: 8,
            text_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    fn corpus() -> Vec<TrainSample> {
        let mut out = Vec::new();
        for (i, cat) in ["ring", "star"].iter().enumerate() {
            for k in 0..3 {
                let mut im = Raster::filled(8, 8, [0.2, 0.3, 0.4]);
                for y in 2..6 {
                    for x in 2..6 {
                        im.set(y, x, [i as f32, 0.5, k as f32 / 3.0]);
                    }
                }
                out.push(TrainSample {
                    image: im,
                    bbox: BBox::new(2, 2, 4, 4),
                    category: cat.to_string(),
                });
            }
        }
        out
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainConfig::pretrain()
        }
    }

    fn sched() -> NoiseSchedule {
        make_schedule(20, 1e-3, 0.2).unwrap()
    }

    fn refs() -> ReferenceSet {
        ReferenceSet {
            subject_id: "ring-0".into(),
            category: "ring".into(),
            rare_token: "rare0".into(),
            items: vec![RefItem {
                path: "x.png".into(),
                bbox: BBox::new(2, 2, 4, 4),
            }],
        }
    }

    #[test]
    fn zero_steps_keeps_initialization_and_is_deterministic() {
        let (b0, log) = pretrain(&corpus(), &quick(0), &cfg(), &sched(), &mut no_log).unwrap();
        assert!(log.is_empty());
        let fresh = init_bundle(&cfg(), &b0.vocab, &sched(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b0.params, fresh.params);
        assert_eq!(b0.lineage, vec![LineageEntry::base()]);

        let (a, la) = pretrain(&corpus(), &quick(3), &cfg(), &sched(), &mut no_log).unwrap();
        let (b, lb) = pretrain(&corpus(), &quick(3), &cfg(), &sched(), &mut no_log).unwrap();
        assert_eq!(bundle_hash(&a).unwrap(), bundle_hash(&b).unwrap());
        assert_eq!(la.iter().map(|r| r.loss).collect::<Vec<_>>(), lb.iter().map(|r| r.loss).collect::<Vec<_>>());
        assert!(pretrain(&[], &quick(1), &cfg(), &sched(), &mut no_log).is_err());
    }

    #[test]
    fn finetune_freezes_text_rows_and_records_lineage() {
        let (base, _) = pretrain(&corpus(), &quick(2), &cfg(), &sched(), &mut no_log).unwrap();
        let imgs: Vec<_> = corpus()[..3].iter().map(|s| (s.image.clone(), s.bbox)).collect();
        let (same, _) = finetune_subject(&base, &refs(), &imgs, &TrainConfig { steps: 0, ..quick(0) }, &mut no_log).unwrap();
        assert_eq!(same.params, base.params);

        let (ft, log) = finetune_subject(&base, &refs(), &imgs, &quick(4), &mut no_log).unwrap();
        assert_eq!(log.len(), 4);
        let embed = base.text_encoder().embed;
        let d = base.config.text_dim;
        let rare = base.vocab.id("rare0").unwrap();
        let (before, after) = (base.params.get(embed).data(), ft.params.get(embed).data());
        for row in 0..base.vocab.len() {
            let (a, b) = (&before[row * d..(row + 1) * d], &after[row * d..(row + 1) * d]);
            if row == rare {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b, "row {row} changed");
            }
        }
        for (name, t) in base.params.iter().filter(|(n, _)| n.starts_with("text.w")) {
            assert_eq!(t, ft.params.get(ft.params.id(name).unwrap()));
        }
        let entry = ft.binding().unwrap();
        assert_eq!(entry.subject_id.as_deref(), Some("ring-0"));
        assert_eq!(entry.parent_hash, Some(bundle_hash(&base).unwrap()));
        assert!(matches!(
            finetune_subject(&ft, &refs(), &imgs, &quick(1), &mut no_log),
            Err(Error::TokenCollision(_))
        ));
    }

    #[test]
    fn promotion_counts_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let mut items = Vec::new();
        for k in 0..8 {
            let p = format!("r{k}.png");
            save_png(&Raster::filled(8, 8, [k as f32 / 8.0, 0.0, 0.0]), dir.path().join(&p)).unwrap();
            items.push(RefItem {
                path: p,
                bbox: BBox::new(1, 1, 3, 3),
            });
        }
        let base = ReferenceSet {
            items: items[..5].to_vec(),
            ..refs()
        };
        assert_eq!(promote_references(&base, &[], dir.path()).unwrap(), base);
        let grown = promote_references(&base, &items[5..], dir.path()).unwrap();
        assert_eq!(grown.items.len(), 8);
        assert_eq!(promote_references(&grown, &items[..2], dir.path()).unwrap(), grown);
        // Same content under another name is still a duplicate.
        fs::copy(dir.path().join("r0.png"), dir.path().join("copy.png")).unwrap();
        let dup = RefItem {
            path: "copy.png".into(),
            bbox: BBox::new(0, 0, 2, 2),
        };
        assert_eq!(promote_references(&base, &[dup], dir.path()).unwrap(), base);
        let bad = RefItem {
            path: "r7.png".into(),
            bbox: BBox::new(6, 6, 4, 4),
        };
        assert!(matches!(promote_references(&base, &[bad], dir.path()), Err(Error::InvalidBox { .. })));
    }

    #[test]
    fn log_round_trip_and_windows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = JsonlLog::create(&p).unwrap();
        let recs: Vec<_> = (0..4)
            .map(|i| StepRecord {
                step: i,
                loss: 4.0 - i as f64,
                wall_time: i as f64,
            })
            .collect();
        for r in &recs {
            log.write(r).unwrap();
        }
        drop(log);
        assert_eq!(read_log(&p).unwrap(), recs);
        assert_eq!(window_means(&recs, 2), Some((3.5, 1.5)));
        assert_eq!(window_means(&recs, 5), None);
    }
}
