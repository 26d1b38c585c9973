//! Fidelity after finetuning on 1 versus 5 references, repeated over every
//! subject and several seeds.
//!
//! Usage: `cargo run --release --example reference_count_study -- [out_dir] [seeds] [finetune_steps] [samples_per_background]`

use std::path::PathBuf;

use inpaint_compose::experiment::{base_model, prepare_world, reference_count_run, DeskConfig};

fn main() -> inpaint_compose::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("desk-run", String::as_str));
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("seeds"));
    let mut cfg = DeskConfig::default();
    if let Some(s) = args.get(2) {
        cfg.finetune.steps = s.parse().expect("finetune steps");
    }
    if let Some(s) = args.get(3) {
        cfg.n_samples = s.parse().expect("samples per background");
    }
    let world = out.join("world");
    let m = prepare_world(&cfg, &world)?;
    let base = base_model(&cfg, &world, Some(&out), &mut |r| {
        if r.step % 500 == 0 {
            println!("pretrain step {:5} loss {:.4}", r.step, r.loss);
        }
        Ok(())
    })?;
    let subjects: Vec<String> = m
        .categories
        .iter()
        .flat_map(|c| c.subjects.iter().map(|s| s.subject_id.clone()))
        .collect();
    let start = std::time::Instant::now();
    let (mut one, mut five, mut wins, mut reps) = (0.0, 0.0, 0, 0);
    for seed in 0..seeds {
        for s in &subjects {
            let a = reference_count_run(&base, &m, &world, s, 1, &cfg, seed)?;
            let b = reference_count_run(&base, &m, &world, s, 5, &cfg, seed)?;
            println!(
                "{s:<12} seed {seed}  1 ref {:.4}  5 refs {:.4}  ({:.0}s)",
                a.fidelity,
                b.fidelity,
                start.elapsed().as_secs_f64()
            );
            one += a.fidelity;
            five += b.fidelity;
            wins += usize::from(b.fidelity >= a.fidelity);
            reps += 1;
        }
    }
    println!("mean fidelity  1 ref {:.4}  5 refs {:.4}", one / reps as f64, five / reps as f64);
    println!("5 refs >= 1 ref in {wins}/{reps} repetitions");
    Ok(())
}
