//! The whole pipeline at toy scale: world, base pretraining, one finetuned
//! bundle per subject, batch composition and evaluation. Takes about a
//! minute; the numbers only show the plumbing works.
//!
//! Usage: `cargo run --release --example tiny_pipeline -- [out_dir]`

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use inpaint_compose::checkpoint::save_bundle;
use inpaint_compose::composer::{compose_batch, ComposeOptions};
use inpaint_compose::datasets::{generate_shapes_world, Corpus, ShapesWorldConfig};
use inpaint_compose::denoiser::DenoiserConfig;
use inpaint_compose::diffusion::{make_schedule, SamplerConfig, SamplerKind};
use inpaint_compose::metrics::{evaluate_run, EvalConfig, RealSet};
use inpaint_compose::textcond::rare_token_name;
use inpaint_compose::trainer::{finetune_subject, no_log, pretrain, TrainConfig};

fn main() -> inpaint_compose::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "tiny-pipeline".into()));
    let world = out.join("world");
    let m = generate_shapes_world(
        &ShapesWorldConfig {
            corpus_per_category: 40,
            backgrounds_per_category: 2,
            ..ShapesWorldConfig::default()
        },
        &world,
    )?;

    let model = DenoiserConfig {
        base_width: 8,
        ..DenoiserConfig::default()
    };
    let pre = TrainConfig {
        steps: 150,
        ..TrainConfig::pretrain()
    };
    let corpus = Corpus::load_samples(world.join("corpus.json"))?;
    let (base, log) = pretrain(&corpus, &pre, &model, &make_schedule(200, 1e-4, 0.02)?, &mut no_log)?;
    println!("pretrain loss {:.4} -> {:.4}", log[0].loss, log[log.len() - 1].loss);
    println!("base bundle {}", save_bundle(&base, out.join("base.bundle"))?);

    let ft = TrainConfig {
        steps: 40,
        ..TrainConfig::finetune()
    };
    let mut bundles = HashMap::new();
    for s in m.categories.iter().flat_map(|c| &c.subjects) {
        let refs = m.reference_set(&s.subject_id, &rare_token_name(0))?;
        let images = refs.load(&world)?;
        let (b, _) = finetune_subject(&base, &refs, &images, &ft, &mut no_log)?;
        let hash = save_bundle(&b, out.join(format!("{}.bundle", s.subject_id)))?;
        println!("{} -> {hash}", s.subject_id);
        bundles.insert(s.subject_id.clone(), Arc::new(b));
    }

    let opts = ComposeOptions {
        sampler: SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 20,
        },
        ..ComposeOptions::default()
    };
    let gen = out.join("gen");
    let summary = compose_batch(&m, &world, &gen, &mut |id| Ok(bundles[id].clone()), &opts)?;
    println!("generated {} samples over {} pairs", summary.generated, summary.pairs);

    let report = evaluate_run(&gen, &m, &world, &RealSet::Images(world.join("corpus")), &EvalConfig::default())?;
    for (cat, s) in &report.per_category {
        println!("{cat}: clip_fg {:?} dino_fg {:?} fid {:?}", s.clip_fg, s.dino_fg, s.fid);
    }
    Ok(())
}
