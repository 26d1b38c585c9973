//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any fails. The end-to-end and reference-count checks share one
//! pretrained base model.

use std::path::Path;
use std::time::{Duration, Instant};

use inpaint_compose::augment::{apply, sample_transform, AugmentConfig, Transform};
use inpaint_compose::composer::{compose_batch, ComposeOptions};
use inpaint_compose::datasets::{generate_shapes_world, Manifest, ShapesWorldConfig};
use inpaint_compose::denoiser::{init_bundle, DenoiserConfig, Example, ModelBundle};
use inpaint_compose::diffusion::{
    forward_noise, make_schedule, sample_from, LossDraw, NoiseSchedule, SamplerConfig, SamplerKind,
};
use inpaint_compose::experiment::{base_model, prepare_world, reference_count_run, subject_experiment, DeskConfig};
use inpaint_compose::imaging::{mask_for_dims, paste_back, plan_crop_for_dims, BBox, Mask, Raster};
use inpaint_compose::metrics::{evaluate_run, fidelity_from_embeddings, frechet_distance, matrix_sqrt_psd, EvalConfig, RealSet};
use inpaint_compose::tensor::Tensor;
use inpaint_compose::textcond::{build_vocab, make_class_prompt, make_subject_prompt};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, format!("took {:.0}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// The evaluator records the fidelity/FID protocol and reports the three
/// table columns per category and overall.
fn protocol_schema() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().join("world");
    let world = ShapesWorldConfig {
        backgrounds_per_category: 2,
        corpus_per_category: 12,
        ..ShapesWorldConfig::default()
    };
    let m = generate_shapes_world(&world, &root).map_err(err)?;
    let cfg = DenoiserConfig {
        base_width: 2,
        n_down: 1,
        attn_dim: 2,
        ..DenoiserConfig::default()
    };
    let vocab = build_vocab(&["star", "triangle"], 2).map_err(err)?;
    let bundle = std::sync::Arc::new(
        init_bundle(&cfg, &vocab, &make_schedule(20, 1e-4, 0.02).map_err(err)?, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(err)?,
    );
    let opts = ComposeOptions {
        prompt: Some("a star".into()),
        sampler: SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 2,
        },
        ..ComposeOptions::default()
    };
    let gen = dir.path().join("gen");
    compose_batch(&m, &root, &gen, &mut |_| Ok(bundle.clone()), &opts).map_err(err)?;
    let report = evaluate_run(&gen, &m, &root, &RealSet::Images(root.join("corpus")), &EvalConfig::default()).map_err(err)?;
    let json = serde_json::to_value(&report).map_err(err)?;
    for key in ["clip_fg", "dino_fg", "fid"] {
        ensure(json["overall"].get(key).is_some(), format!("overall lacks {key}"))?;
        for (cat, s) in json["per_category"].as_object().ok_or("per_category is not a map")? {
            ensure(s.get(key).is_some(), format!("{cat} lacks {key}"))?;
        }
    }
    ensure(report.protocol.covariance_regularization == 1e-6, "covariance regularization not recorded")?;
    ensure(report.protocol.eigenvalue_clip == 0.0, "eigenvalue clip not recorded")?;
    ensure(report.overall.n_samples == 5 * report.overall.n_pairs, "not 5 samples per pair")?;
    ensure(report.per_category.len() == 2 && !report.partial, "categories missing")?;
    Ok(format!(
        "{} pairs x 5 samples; columns clip_fg/dino_fg/fid per category and overall",
        report.overall.n_pairs
    ))
}

/// A denoiser with at most a thousand parameters for the gradient check.
fn tiny_bundle() -> Result<(ModelBundle<f64>, Vec<Example>), String> {
    let cfg = DenoiserConfig {
        base_width: 2,
        n_down: 0,
        attn_dim: 2,
        image_size: 4,
        text_dim: 2,
        ..DenoiserConfig::default()
    };
    let vocab = build_vocab(&["star"], 1).map_err(err)?;
    let schedule = make_schedule(20, 1e-3, 0.2).map_err(err)?;
    let b = init_bundle(&cfg, &vocab, &schedule, &mut ChaCha8Rng::seed_from_u64(4)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let examples = [true, false]
        .iter()
        .map(|&rare| {
            let px: Vec<f32> = (0..4 * 4 * 3).map(|_| rng.random::<f32>()).collect();
            Ok(Example {
                image: Raster::new(4, 4, px).map_err(err)?,
                mask: mask_for_dims(&BBox::new(1, 1, 2, 3), 4, 4).map_err(err)?,
                prompt: if rare {
                    make_subject_prompt(&b.vocab, "rare0", "star")
                } else {
                    make_class_prompt(&b.vocab, "star")
                }
                .map_err(err)?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok((b.cast::<f64>(), examples))
}

fn diffusion() -> Check {
    let start = Instant::now();
    // Schedule monotonicity.
    let s = NoiseSchedule::default();
    for t in 2..=s.steps {
        ensure(s.beta(t) > s.beta(t - 1), format!("beta not increasing at {t}"))?;
        ensure(s.alpha_bar(t) < s.alpha_bar(t - 1), format!("alpha_bar not decreasing at {t}"))?;
    }
    ensure(s.alpha_bar(1) < 1.0 && s.alpha_bar(s.steps) > 0.0, "alpha_bar outside (0,1)")?;

    // Forward noising is affine in (z0, eps).
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_affine = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(1..=s.steps);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let v: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[8], 1.0, &mut rng)).collect();
        let comb = |p: &Tensor<f64>, q: &Tensor<f64>| p.zip_map(q, |u, w| a * u + b * w);
        let lhs = forward_noise(&comb(&v[0], &v[1]).map_err(err)?, t, &comb(&v[2], &v[3]).map_err(err)?, &s).map_err(err)?;
        let rhs = comb(
            &forward_noise(&v[0], t, &v[2], &s).map_err(err)?,
            &forward_noise(&v[1], t, &v[3], &s).map_err(err)?,
        )
        .map_err(err)?;
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            worst_affine = worst_affine.max((l - r).abs());
        }
    }
    ensure(worst_affine < 1e-12, format!("affine superposition error {worst_affine:e}"))?;

    // True-noise oracle through both samplers.
    let z0 = Tensor::<f32>::randn(&[3, 8, 8], 0.5, &mut rng);
    let zt = Tensor::<f32>::randn(&[3, 8, 8], 1.0, &mut rng);
    let mut worst_mse = 0.0f64;
    for kind in [SamplerKind::Ddpm, SamplerKind::Ddim] {
        let oracle = |z: &Tensor<f32>, t: usize| {
            let a = s.alpha_bar(t);
            z.zip_map(&z0, |zz, x| (zz - a.sqrt() as f32 * x) / (1.0 - a).sqrt() as f32)
        };
        let out = sample_from(oracle, zt.clone(), &s, &mut rng, SamplerConfig { kind, steps: 50 }).map_err(err)?;
        worst_mse = worst_mse.max(out.mse(&z0).map_err(err)?);
    }
    ensure(worst_mse < 0.05, format!("oracle round trip MSE {worst_mse}"))?;

    // Loss gradient against central differences on every parameter.
    let (b, examples) = tiny_bundle()?;
    let n_params = b.params.numel();
    let sizes: Vec<String> = b.params.ids().map(|id| format!("{}={}", b.params.name(id), b.params.get(id).numel())).collect();
    ensure(n_params <= 1000, format!("gradient-check model has {n_params} parameters: {}", sizes.join(" ")))?;
    let batch = b.prepare(&examples).map_err(err)?;
    let draw = LossDraw::<f64>::sample(&b.schedule, batch.z0.shape(), &mut ChaCha8Rng::seed_from_u64(9));
    let mut g = inpaint_compose::autograd::Graph::new();
    let loss = b.loss_graph(&mut g, &batch, &draw).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in b.params.ids().collect::<Vec<_>>() {
        for j in 0..b.params.get(id).numel() {
            let mut plus = b.clone();
            plus.params.get_mut(id).data_mut()[j] += h;
            let mut minus = b.clone();
            minus.params.get_mut(id).data_mut()[j] -= h;
            let fd = (plus.loss_value(&batch, &draw).map_err(err)? - minus.loss_value(&batch, &draw).map_err(err)?) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |t| t.data()[j]);
            // Entries whose gradient is zero to rounding are compared absolutely.
            if fd.abs().max(an.abs()) < 1e-9 {
                ensure((fd - an).abs() < 1e-9, format!("{}[{j}]: fd {fd:e} vs {an:e}", b.params.name(id)))?;
                continue;
            }
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
            checked += 1;
        }
    }
    ensure(worst < 1e-4, format!("gradient relative error {worst:e}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "affine err {worst_affine:.1e}, oracle MSE {worst_mse:.2e}, grad rel err {worst:.1e} over {checked}/{n_params} params (rest zero)"
    ))
}

fn geometry() -> Check {
    let start = Instant::now();
    let (w, h) = (32usize, 32usize);
    let theta = 0.25;
    let mut boxes = 0;
    let mut shifted = 0;
    for bw in 1..=w {
        for bh in 1..=h {
            for x in 0..=w - bw {
                for y in 0..=h - bh {
                    let b = BBox::new(x, y, bw, bh);
                    let p = plan_crop_for_dims(&b, w, h, theta, 32).map_err(err)?;
                    // Oracle: count box pixels inside the whole image and inside the crop.
                    let mut in_image = 0usize;
                    let mut in_crop = 0usize;
                    for py in 0..h {
                        for px in 0..w {
                            if b.contains_point(px, py) {
                                in_image += 1;
                                if p.src.contains_point(px, py) {
                                    in_crop += 1;
                                }
                            }
                        }
                    }
                    let ratio = in_image as f64 / (w * h) as f64;
                    ensure(p.identity == (ratio >= theta), format!("{b:?}: identity {} at ratio {ratio}", p.identity))?;
                    ensure(in_crop == in_image, format!("{b:?}: box not contained in {:?}", p.src))?;
                    ensure(p.src.right() <= w && p.src.bottom() <= h, format!("{b:?}: crop {:?} leaves the image", p.src))?;
                    let crop_ratio = in_crop as f64 / p.src.area() as f64;
                    ensure(crop_ratio >= theta, format!("{b:?}: crop ratio {crop_ratio}"))?;
                    if !p.identity {
                        let cx = p.src.x as f64 + p.src.w as f64 / 2.0;
                        let bx = b.x as f64 + b.w as f64 / 2.0;
                        let cy = p.src.y as f64 + p.src.h as f64 / 2.0;
                        let by = b.y as f64 + b.h as f64 / 2.0;
                        if (cx - bx).abs() > 1.0 || (cy - by).abs() > 1.0 {
                            shifted += 1;
                        }
                    }
                    boxes += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (bgw, bgh) = (rng.random_range(8..96), rng.random_range(8..96));
        let bw = rng.random_range(1..=bgw);
        let bh = rng.random_range(1..=bgh);
        let b = BBox::new(rng.random_range(0..=bgw - bw), rng.random_range(0..=bgh - bh), bw, bh);
        let model = [8, 16, 32][rng.random_range(0..3)];
        let plan = plan_crop_for_dims(&b, bgw, bgh, theta, model).map_err(err)?;
        let random_raster = |hh: usize, ww: usize, rng: &mut ChaCha8Rng| {
            Raster::new(hh, ww, (0..hh * ww * 3).map(|_| rng.random::<f32>()).collect())
        };
        let bg = random_raster(bgh, bgw, &mut rng).map_err(err)?;
        let gen = random_raster(model, model, &mut rng).map_err(err)?;
        let out = paste_back(&bg, &gen, &plan, &b).map_err(err)?;
        for y in 0..bgh {
            for x in 0..bgw {
                if !b.contains_point(x, y) {
                    let (o, i) = (out.get(y, x), bg.get(y, x));
                    ensure(
                        o.iter().zip(&i).all(|(a, c)| a.to_bits() == c.to_bits()),
                        format!("case {case}: pixel ({x},{y}) outside {b:?} changed"),
                    )?;
                }
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{boxes} boxes exhaustive ({shifted} shifted by image bounds), 100 paste-backs bitwise"))
}

/// Bounding box of pixels whose red channel is at least one half.
fn bright_box(r: &Raster) -> Option<BBox> {
    let mut m = Mask::empty(r.height(), r.width());
    let mut values = m.values().to_vec();
    for y in 0..r.height() {
        for x in 0..r.width() {
            if r.get(y, x)[0] >= 0.5 {
                values[y * r.width() + x] = 1;
            }
        }
    }
    m = Mask::from_values(r.height(), r.width(), values).ok()?;
    m.bounding_box()
}

fn augmentation() -> Check {
    let start = Instant::now();
    let (w, h) = (48usize, 40usize);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let textured = Raster::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).map_err(err)?;
    ensure(textured.flip_horizontal().flip_horizontal() == textured, "raster flip is not an involution")?;

    let cfg = AugmentConfig {
        p_flip: 0.5,
        crop_scale_range: [0.6, 1.0],
        scale_range: [0.6, 1.4],
        seed: 0,
    };
    let mut passed = 0;
    let mut degenerate = 0;
    let mut worst = 0i64;
    while passed < 500 {
        let bw = rng.random_range(4..w / 2);
        let bh = rng.random_range(4..h / 2);
        let b = BBox::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh);
        let m = mask_for_dims(&b, w, h).map_err(err)?;
        // Marker image: bright exactly on the box.
        let mut marker = Raster::filled(h, w, [0.0; 3]);
        for y in b.y..b.bottom() {
            for x in b.x..b.right() {
                marker.set(y, x, [1.0, 1.0, 1.0]);
            }
        }
        let t = sample_transform(&cfg, w, h, &b, &mut rng).map_err(err)?;
        let (img, mask) = match apply(&t, &marker, &m) {
            Ok(v) => v,
            Err(inpaint_compose::Error::Degenerate(_)) => {
                degenerate += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        ensure(mask.is_rectangle(), format!("{t:?}: mask is not a rectangle"))?;
        let mb = mask.bounding_box().ok_or("empty mask")?;
        let ib = bright_box(&img).ok_or_else(|| format!("{t:?}: marker vanished"))?;
        let d = [
            mb.x as i64 - ib.x as i64,
            mb.y as i64 - ib.y as i64,
            mb.right() as i64 - ib.right() as i64,
            mb.bottom() as i64 - ib.bottom() as i64,
        ];
        let dev = d.iter().map(|v| v.abs()).max().unwrap_or(0);
        worst = worst.max(dev);
        ensure(dev <= 1, format!("{t:?} on {b:?}: mask {mb:?} vs marker {ib:?}"))?;

        if t.flip {
            let flip = Transform {
                flip: true,
                ..Transform::identity(w, h)
            };
            let (once_i, once_m) = apply(&flip, &textured, &m).map_err(err)?;
            let (twice_i, twice_m) = apply(&flip, &once_i, &once_m).map_err(err)?;
            ensure(twice_i == textured && twice_m == m, "flip transform is not an involution")?;
        }
        passed += 1;
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("500 transforms, max edge deviation {worst} px ({degenerate} degenerate draws resampled)"))
}

fn metrics() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let d = 16;
    let n = 10_000;
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let same = frechet_distance(&a, &a).map_err(err)?.value;
    ensure(same.abs() <= 1e-6, format!("FID(A,A) = {same:e}"))?;

    let mu: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
    let mu2: f64 = mu.iter().map(|m| m * m).sum();
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|i| normal() + mu[i]).collect()).collect();
    let fid = frechet_distance(&a, &b).map_err(err)?.value;
    let rel = (fid - mu2).abs() / mu2;
    ensure(rel <= 0.05, format!("FID {fid} vs |mu|^2 {mu2}"))?;

    let mut worst_sqrt = 0.0f64;
    for size in [2, 8, 16, 32] {
        let x = DMatrix::<f64>::from_fn(size, size, |_, _| normal());
        let s = &x * x.transpose();
        let r = matrix_sqrt_psd(&s).map_err(err)?;
        let e = (&r * &r - &s).norm() / s.norm();
        worst_sqrt = worst_sqrt.max(e);
    }
    ensure(worst_sqrt < 1e-6, format!("sqrt reconstruction error {worst_sqrt:e}"))?;

    let gen = vec![vec![1.0, 0.0]];
    let refs = vec![vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]];
    let hand = fidelity_from_embeddings(&gen, &refs).map_err(err)?;
    ensure(hand == 0.75, format!("hand case gives {hand}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "FID(A,A) {same:.1e}, Gaussian FID {fid:.4} vs {mu2:.4} ({:.2}%), sqrt err {worst_sqrt:.1e}, hand case {hand}",
        100.0 * rel
    ))
}

struct Desk {
    cfg: DeskConfig,
    root: std::path::PathBuf,
    manifest: Manifest,
    base: ModelBundle,
    pretrain_secs: f64,
}

fn desk(dir: &Path) -> Result<Desk, String> {
    let cfg = DeskConfig::default();
    let root = dir.join("world");
    let manifest = prepare_world(&cfg, &root).map_err(err)?;
    let start = Instant::now();
    let cache = std::env::var_os("INPAINT_COMPOSE_CACHE").map(std::path::PathBuf::from);
    let base = base_model(&cfg, &root, cache.as_deref(), &mut |_| Ok(())).map_err(err)?;
    Ok(Desk {
        cfg,
        root,
        manifest,
        base,
        pretrain_secs: start.elapsed().as_secs_f64(),
    })
}

fn end_to_end(d: &Desk) -> Check {
    let start = Instant::now();
    let cat = &d.manifest.categories[0];
    let (a, b) = (&cat.subjects[0].subject_id, &cat.subjects[1].subject_id);
    ensure(
        d.manifest.categories.len() == 2 && cat.subjects.len() == 2 && cat.backgrounds.len() == 8,
        "world is not 2 categories x 2 subjects x 8 backgrounds",
    )?;
    let o = subject_experiment(&d.base, &d.manifest, &d.root, a, b, &d.cfg, 0).map_err(err)?;
    let n = o.to_subject.len();
    ensure(n == 40, format!("{n} samples instead of 5 x 8"))?;
    let secs = d.pretrain_secs + start.elapsed().as_secs_f64();
    let summary = format!(
        "{a} beats {b} in {:.1}% of {n} samples; fidelity {:.4} vs base {:.4} (other {:.4}); {:.0}s",
        100.0 * o.win_rate,
        o.mean_to_subject,
        o.base_mean_to_subject,
        o.mean_to_other,
        secs
    );
    ensure(o.win_rate >= 0.7, format!("win rate below 70%: {summary}"))?;
    ensure(o.mean_to_subject > o.base_mean_to_subject, format!("no gain over base: {summary}"))?;
    ensure(secs <= 20.0 * 60.0, format!("over 20 min: {summary}"))?;
    Ok(summary)
}

/// The end-to-end finetuning budget with fewer samples per background; a
/// shorter finetune underfits the five-reference runs and hides the trend.
fn trend_config(base: &DeskConfig) -> DeskConfig {
    DeskConfig {
        n_samples: 2,
        ..base.clone()
    }
}

fn reference_trend(d: &Desk) -> Check {
    let cfg = trend_config(&d.cfg);
    let subjects: Vec<&str> = d
        .manifest
        .categories
        .iter()
        .flat_map(|c| c.subjects.iter().map(|s| s.subject_id.as_str()))
        .collect();
    let (mut one, mut five, mut reps, mut agree) = (0.0, 0.0, 0usize, 0usize);
    for seed in 0..3u64 {
        for s in &subjects {
            let a = reference_count_run(&d.base, &d.manifest, &d.root, s, 1, &cfg, seed).map_err(err)?;
            let b = reference_count_run(&d.base, &d.manifest, &d.root, s, 5, &cfg, seed).map_err(err)?;
            one += a.fidelity;
            five += b.fidelity;
            agree += usize::from(b.fidelity >= a.fidelity);
            reps += 1;
        }
    }
    let (one, five) = (one / reps as f64, five / reps as f64);
    let summary = format!("{reps} (subject, seed) reps: 1 ref {one:.4}, 5 refs {five:.4}; 5 >= 1 in {agree}/{reps}");
    ensure(reps >= 10, "fewer than 10 repetitions")?;
    ensure(five >= one, summary.clone())?;
    Ok(summary)
}

fn studio_state_machine() -> Check {
    use inpaint_compose_studio::conformance::{crash_sweep, random_walk};
    let dir = tempfile::tempdir().map_err(err)?;
    let walk = random_walk(&dir.path().join("walk"), 10_000, 7)?;
    let points = crash_sweep(&dir.path().join("crash"))?;
    ensure(walk.states.contains_key("Closed") && walk.states.contains_key("FailedClosed"), "walk never closed a round")?;
    Ok(format!(
        "{} random ops over {} projects ({} crashes, {} restarts); {points} crash points resumed",
        walk.ops, walk.projects, walk.crashes, walk.restarts
    ))
}

fn main() {
    // Optional name filters, e.g. `cargo test --test acceptance -- geometry metrics`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Check| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{secs:.1}s]");
            }
        }
    };
    report("protocol-and-schema", &protocol_schema);
    report("diffusion", &diffusion);
    report("geometry", &geometry);
    report("augmentation", &augmentation);
    report("metrics", &metrics);
    report("studio-state-machine", &studio_state_machine);

    if !selected("end-to-end") && !selected("reference-count-trend") {
        std::process::exit(i32::from(failed > 0));
    }
    let dir = tempfile::tempdir().expect("temp dir");
    match desk(dir.path()) {
        Ok(d) => {
            report("end-to-end", &|| end_to_end(&d));
            report("reference-count-trend", &|| reference_trend(&d));
        }
        Err(e) => {
            report("end-to-end", &|| Err(format!("base model: {e}")));
            report("reference-count-trend", &|| Err(format!("base model: {e}")));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
