//! Inference: place a finetuned subject into a background box.
//!
//! The pipeline per request is crop remedy, crop and resize to the model
//! size, mask and erase, encode, sample, decode, then paste the box interior
//! back into an untouched copy of the background.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::bundle_hash;
use crate::datasets::{enumerate_pairs, Manifest, Pair};
use crate::denoiser::{mask_to_latent, ModelBundle};
use crate::diffusion::{ddim_timesteps, sample, SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::imaging::{
    erase_background, load_png, mask_for_dims, paste_back, plan_crop_remedy, resize, save_png, write_atomic,
    BBox, CropPlan, Raster, CROP_RATIO_THRESHOLD,
};
use crate::textcond::{make_subject_prompt, Prompt};

pub const META_VERSION: u32 = 1;
pub const DEFAULT_SAMPLES: usize = 5;
/// Written into a pair directory once all of its samples exist.
pub const COMPLETE_MARKER: &str = "complete.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeOptions {
    /// Replaces the bundle's subject prompt.
    #[serde(default)]
    pub prompt: Option<String>,
    pub n_samples: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            prompt: None,
            n_samples: DEFAULT_SAMPLES,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

/// A compose call against files on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub bundle: PathBuf,
    pub background: PathBuf,
    pub bbox: BBox,
    #[serde(flatten)]
    pub options: ComposeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub version: u32,
    pub seed: u64,
    pub sample_index: usize,
    pub sampler: SamplerKind,
    /// Denoiser evaluations actually run.
    pub n_steps: usize,
    pub crop_plan: CropPlan,
    pub bbox: BBox,
    pub bundle_hash: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: Raster,
    pub meta: SampleMeta,
}

fn resolve_prompt(bundle: &ModelBundle, opts: &ComposeOptions) -> Result<Prompt> {
    if let Some(text) = &opts.prompt {
        return Prompt::tokenize(&bundle.vocab, text, bundle.config.prompt_len);
    }
    let b = bundle.binding().ok_or_else(|| {
        Error::InvalidArgument("bundle has no subject binding; finetune it or pass a prompt".into())
    })?;
    let (Some(token), Some(category)) = (&b.rare_token, &b.category) else {
        return Err(Error::InvalidArgument("binding lacks rare token or category".into()));
    };
    make_subject_prompt(&bundle.vocab, token, category)
}

fn n_evaluations(bundle: &ModelBundle, cfg: SamplerConfig) -> usize {
    match cfg.kind {
        SamplerKind::Ddpm => bundle.schedule.steps,
        SamplerKind::Ddim => ddim_timesteps(bundle.schedule.steps, cfg.steps).len(),
    }
}

/// Generates `opts.n_samples` composites. Sample `k` draws its initial
/// noise from stream `k` of `opts.seed`, so samples are independent and
/// individually reproducible.
pub fn compose(
    bundle: &ModelBundle,
    hash: &str,
    background: &Raster,
    bbox: &BBox,
    opts: &ComposeOptions,
) -> Result<Vec<Composite>> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    (0..opts.n_samples)
        .map(|k| compose_one(bundle, hash, background, bbox, opts, k))
        .collect()
}

/// Sample `k` of [`compose`] on its own.
pub fn compose_one(
    bundle: &ModelBundle,
    hash: &str,
    background: &Raster,
    bbox: &BBox,
    opts: &ComposeOptions,
    k: usize,
) -> Result<Composite> {
    let size = bundle.config.image_size;
    let plan = plan_crop_remedy(bbox, background, CROP_RATIO_THRESHOLD, size)?;
    let prompt = resolve_prompt(bundle, opts)?;
    let crop = resize(&background.crop(&plan.src)?, size, size)?;
    let model_box = bbox.into_resampled(&plan.src, size, size);
    let mask = mask_for_dims(&model_box, size, size)?;
    let erased = erase_background(&crop, &mask)?;

    let lat = bundle.config.latent_shape();
    let bg = bundle.encode_image(&erased)?.reshape(&[1, lat[0], lat[1], lat[2]])?;
    let m = mask_to_latent::<f32>(&mask, &bundle.config)?.reshape(&[1, 1, lat[1], lat[2]])?;
    let text = bundle.encode_prompts(&[prompt.token_ids.clone()])?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(k as u64);
    let z0 = sample(
        |z, t| bundle.predict_noise(z, t, &m, &bg, &text),
        &[1, lat[0], lat[1], lat[2]],
        &bundle.schedule,
        &mut rng,
        opts.sampler,
    )
    .map_err(|e| match e {
        Error::Numerical { stage, detail } => Error::numerical(format!("sample {k}: {stage}"), detail),
        other => other,
    })?;
    let generated = bundle.decode_latent(&z0.reshape(&lat)?)?;
    Ok(Composite {
        image: paste_back(background, &generated, &plan, bbox)?,
        meta: SampleMeta {
            version: META_VERSION,
            seed: opts.seed,
            sample_index: k,
            sampler: opts.sampler.kind,
            n_steps: n_evaluations(bundle, opts.sampler),
            crop_plan: plan,
            bbox: *bbox,
            bundle_hash: hash.to_string(),
            prompt: prompt.decode(&bundle.vocab),
        },
    })
}

/// Loads the bundle and background named by `req` and composes.
pub fn compose_request(req: &ComposeRequest) -> Result<Vec<Composite>> {
    let bundle = crate::checkpoint::load_bundle(&req.bundle)?;
    let hash = bundle_hash(&bundle)?;
    let bg = load_png(&req.background)?;
    compose(&bundle, &hash, &bg, &req.bbox, &req.options)
}

/// Writes `<k>.png` and `<k>.json` for each composite into `dir`.
pub fn write_composites(dir: &Path, composites: &[Composite]) -> Result<Vec<PathBuf>> {
    composites
        .iter()
        .map(|c| {
            let png = dir.join(format!("{}.png", c.meta.sample_index));
            save_png(&c.image, &png)?;
            write_atomic(
                &dir.join(format!("{}.json", c.meta.sample_index)),
                &serde_json::to_vec_pretty(&c.meta)?,
            )?;
            Ok(png)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMarker {
    pub n_samples: usize,
    pub bundle_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedSample {
    pub pair: Pair,
    pub index: usize,
    pub path: PathBuf,
}

pub fn pair_dir(gen_root: &Path, subject_id: &str, background_id: &str) -> PathBuf {
    gen_root.join(subject_id).join(background_id)
}

/// Every image a batch run over `m` would write.
pub fn plan_batch(m: &Manifest, gen_root: &Path, n_samples: usize) -> Vec<PlannedSample> {
    enumerate_pairs(m)
        .into_iter()
        .flat_map(|p| {
            let dir = pair_dir(gen_root, &p.subject_id, &p.background_id);
            (0..n_samples).map(move |k| PlannedSample {
                pair: p.clone(),
                index: k,
                path: dir.join(format!("{k}.png")),
            })
        })
        .collect()
}

/// Per-pair seed so a pair's samples do not depend on enumeration order.
pub fn pair_seed(seed: u64, subject_id: &str, background_id: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{subject_id}/{background_id}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub pairs: usize,
    pub scheduled: usize,
    pub generated: usize,
    pub skipped_pairs: usize,
}

fn read_marker(dir: &Path) -> Option<PairMarker> {
    serde_json::from_slice(&fs::read(dir.join(COMPLETE_MARKER)).ok()?).ok()
}

/// Generates the whole tree `gen_root/<subject>/<background>/<k>.png` with
/// metadata. Pairs whose completion marker matches the current bundle and
/// sample count are skipped; incomplete pairs only fill missing samples.
/// `bundles` maps a subject id to its finetuned bundle.
pub fn compose_batch(
    m: &Manifest,
    manifest_root: &Path,
    gen_root: &Path,
    bundles: &mut dyn FnMut(&str) -> Result<Arc<ModelBundle>>,
    opts: &ComposeOptions,
) -> Result<BatchSummary> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let pairs = enumerate_pairs(m);
    let mut summary = BatchSummary {
        pairs: pairs.len(),
        scheduled: pairs.len() * opts.n_samples,
        ..BatchSummary::default()
    };
    let mut current: Option<(String, Arc<ModelBundle>, String)> = None;
    for p in &pairs {
        if current.as_ref().is_none_or(|c| c.0 != p.subject_id) {
            let b = bundles(&p.subject_id)
                .map_err(|e| Error::InvalidArgument(format!("no bundle for subject {}: {e}", p.subject_id)))?;
            let h = bundle_hash(&b)?;
            current = Some((p.subject_id.clone(), b, h));
        }
        let (_, bundle, hash) = current.as_ref().expect("set above");
        let dir = pair_dir(gen_root, &p.subject_id, &p.background_id);
        let marker = PairMarker {
            n_samples: opts.n_samples,
            bundle_hash: hash.clone(),
            seed: opts.seed,
        };
        if read_marker(&dir).as_ref() == Some(&marker) {
            summary.skipped_pairs += 1;
            continue;
        }
        let bg_path = if Path::new(&p.background_path).is_absolute() {
            PathBuf::from(&p.background_path)
        } else {
            manifest_root.join(&p.background_path)
        };
        let bg = load_png(&bg_path)?;
        let pair_opts = ComposeOptions {
            seed: pair_seed(opts.seed, &p.subject_id, &p.background_id),
            ..opts.clone()
        };
        for k in 0..opts.n_samples {
            let have = fs::read(dir.join(format!("{k}.json")))
                .ok()
                .and_then(|b| serde_json::from_slice::<SampleMeta>(&b).ok())
                .is_some_and(|meta| meta.bundle_hash == *hash && meta.seed == pair_opts.seed)
                && dir.join(format!("{k}.png")).exists();
            if have {
                continue;
            }
            let c = compose_one(bundle, hash, &bg, &p.bbox, &pair_opts, k)?;
            write_composites(&dir, std::slice::from_ref(&c))?;
            summary.generated += 1;
        }
        write_atomic(&dir.join(COMPLETE_MARKER), &serde_json::to_vec_pretty(&marker)?)?;
    }
    Ok(summary)
}

/// Reads the samples of one completed pair directory.
pub fn read_pair(dir: &Path) -> Result<Vec<(Raster, SampleMeta)>> {
    let marker = read_marker(dir).ok_or_else(|| Error::MissingFile(dir.join(COMPLETE_MARKER)))?;
    (0..marker.n_samples)
        .map(|k| {
            let image = load_png(dir.join(format!("{k}.png")))?;
            let meta_path = dir.join(format!("{k}.json"));
            let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Ok((image, serde_json::from_slice(&bytes)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{BackgroundEntry, CategoryEntry, SubjectEntry, MANIFEST_VERSION};
    use crate::denoiser::{init_bundle, DenoiserConfig, LineageEntry};
    use crate::diffusion::make_schedule;
    use crate::textcond::build_vocab;
    use crate::trainer::RefItem;

    fn bound_bundle() -> ModelBundle {
        let cfg = DenoiserConfig {
            base_width: 4,
            n_down: 1,
            attn_dim: 4,
            image_size: 8,
            text_dim: 4,
            ..DenoiserConfig::default()
        };
        let v = build_vocab(&["star"], 2).unwrap();
        let mut b = init_bundle(&cfg, &v, &make_schedule(20, 1e-3, 0.1).unwrap(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        b.lineage.push(LineageEntry {
            kind: "finetune".into(),
            subject_id: Some("star-0".into()),
            category: Some("star".into()),
            rare_token: Some(v.rare_tokens()[0].clone()),
            ..LineageEntry::default()
        });
        b
    }

    fn checker(h: usize, w: usize) -> Raster {
        let mut r = Raster::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 255) as f32 / 255.0;
                r.set(y, x, [v, 1.0 - v, 0.5]);
            }
        }
        r
    }

    fn opts(n: usize) -> ComposeOptions {
        ComposeOptions {
            n_samples: n,
            sampler: SamplerConfig {
                kind: SamplerKind::Ddim,
                steps: 5,
            },
            seed: 11,
            ..ComposeOptions::default()
        }
    }

    #[test]
    fn background_outside_box_is_bitwise_preserved() {
        let b = bound_bundle();
        let bg = checker(20, 24);
        let bbox = BBox::new(5, 4, 9, 7);
        let out = compose(&b, "h", &bg, &bbox, &opts(3)).unwrap();
        assert_eq!(out.len(), 3);
        for c in &out {
            for y in 0..20 {
                for x in 0..24 {
                    if !bbox.contains_point(x, y) {
                        assert_eq!(c.image.get(y, x), bg.get(y, x));
                    }
                }
            }
            assert_eq!(c.meta.n_steps, 5);
            assert_eq!(c.meta.prompt, format!("a {} star", b.vocab.rare_tokens()[0]));
        }
        assert_ne!(out[0].image, out[1].image, "samples draw fresh noise");
        assert_eq!(out, compose(&b, "h", &bg, &bbox, &opts(3)).unwrap());
    }

    #[test]
    fn small_boxes_trigger_the_crop_remedy() {
        let b = bound_bundle();
        let bg = checker(128, 128);
        let small = BBox::new(56, 56, 16, 16);
        let c = compose(&b, "h", &bg, &small, &opts(1)).unwrap();
        assert_eq!(c[0].meta.crop_plan.src, BBox::new(48, 48, 32, 32));
        assert!(!c[0].meta.crop_plan.identity);
        let big = BBox::new(0, 0, 64, 64);
        assert!(compose(&b, "h", &bg, &big, &opts(1)).unwrap()[0].meta.crop_plan.identity);
    }

    #[test]
    fn prompt_requirements() {
        let mut b = bound_bundle();
        b.lineage.truncate(1);
        let bg = checker(8, 8);
        let bbox = BBox::new(2, 2, 4, 4);
        assert!(matches!(compose(&b, "h", &bg, &bbox, &opts(1)), Err(Error::InvalidArgument(_))));
        let with = ComposeOptions {
            prompt: Some("a star".into()),
            ..opts(1)
        };
        assert_eq!(compose(&b, "h", &bg, &bbox, &with).unwrap().len(), 1);
        assert!(compose(&b, "h", &bg, &bbox, &opts(0)).is_err());
    }

    fn manifest(root: &Path, bgs: usize) -> Manifest {
        let backgrounds = (0..bgs)
            .map(|i| {
                let path = format!("bg{i}.png");
                save_png(&checker(12, 12), root.join(&path)).unwrap();
                BackgroundEntry {
                    id: format!("bg{i}"),
                    path,
                    bbox: BBox::new(2, 3, 6, 5),
                }
            })
            .collect();
        Manifest {
            version: MANIFEST_VERSION,
            name: "m".into(),
            categories: vec![CategoryEntry {
                name: "star".into(),
                backgrounds,
                subjects: vec![SubjectEntry {
                    subject_id: "star-0".into(),
                    references: vec![RefItem {
                        path: "bg0.png".into(),
                        bbox: BBox::new(0, 0, 12, 12),
                    }],
                    backgrounds: None,
                }],
            }],
        }
    }

    #[test]
    fn batch_is_resumable_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), 2);
        let gen = dir.path().join("gen");
        let bundle = Arc::new(bound_bundle());
        let mut src = |_: &str| Ok(bundle.clone());
        let s = compose_batch(&m, dir.path(), &gen, &mut src, &opts(2)).unwrap();
        assert_eq!((s.scheduled, s.generated, s.skipped_pairs), (4, 4, 0));
        let first = read_pair(&pair_dir(&gen, "star-0", "bg1")).unwrap();
        assert_eq!(first.len(), 2);

        let again = compose_batch(&m, dir.path(), &gen, &mut src, &opts(2)).unwrap();
        assert_eq!((again.generated, again.skipped_pairs), (0, 2));

        // Simulate an interrupted pair: drop one sample and the marker.
        let d = pair_dir(&gen, "star-0", "bg1");
        fs::remove_file(d.join("1.png")).unwrap();
        fs::remove_file(d.join(COMPLETE_MARKER)).unwrap();
        let resumed = compose_batch(&m, dir.path(), &gen, &mut src, &opts(2)).unwrap();
        assert_eq!(resumed.generated, 1);
        assert_eq!(read_pair(&d).unwrap(), first);

        let mut missing = |s: &str| Err(Error::InvalidArgument(format!("unknown {s}")));
        assert!(compose_batch(&m, dir.path(), &dir.path().join("g2"), &mut missing, &opts(1)).is_err());
    }

    #[test]
    fn multi_reference_layout_schedules_9600_images() {
        let categories = (0..32)
            .map(|c| CategoryEntry {
                name: format!("c{c:02}"),
                backgrounds: (0..20)
                    .map(|b| BackgroundEntry {
                        id: format!("b{b:02}"),
                        path: format!("{c}/{b}.png"),
                        bbox: BBox::new(0, 0, 1, 1),
                    })
                    .collect(),
                subjects: (0..3)
                    .map(|s| SubjectEntry {
                        subject_id: format!("c{c:02}-{s}"),
                        references: vec![],
                        backgrounds: None,
                    })
                    .collect(),
            })
            .collect();
        let m = Manifest {
            version: MANIFEST_VERSION,
            name: "m".into(),
            categories,
        };
        let plan = plan_batch(&m, Path::new("gen"), DEFAULT_SAMPLES);
        assert_eq!(plan.len(), 9600);
        let distinct: std::collections::HashSet<_> = plan.iter().map(|p| &p.path).collect();
        assert_eq!(distinct.len(), 9600);
    }

    #[test]
    fn single_pair_single_sample() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), 1);
        let gen = dir.path().join("gen");
        let bundle = Arc::new(bound_bundle());
        let s = compose_batch(&m, dir.path(), &gen, &mut |_| Ok(bundle.clone()), &opts(1)).unwrap();
        assert_eq!(s.generated, 1);
        let pngs = fs::read_dir(pair_dir(&gen, "star-0", "bg0"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 1);
        assert_eq!(plan_batch(&m, &gen, 1).len(), 1);
    }
}
