//! Pretrains on shapes-world, finetunes one subject and reports how close
//! its composites are to that subject versus a same-category neighbour.
//!
//! Usage: `cargo run --release --example desk_experiment -- [out_dir] [pretrain_steps] [finetune_steps]`

use std::path::PathBuf;

use inpaint_compose::experiment::{base_model, prepare_world, subject_experiment, DeskConfig};

fn main() -> inpaint_compose::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("desk-run", String::as_str));
    let mut cfg = DeskConfig::default();
    if let Some(s) = args.get(1) {
        cfg.pretrain.steps = s.parse().expect("pretrain steps");
    }
    if let Some(s) = args.get(2) {
        cfg.finetune.steps = s.parse().expect("finetune steps");
    }
    let world = out.join("world");
    let m = prepare_world(&cfg, &world)?;
    let base = base_model(&cfg, &world, Some(&out), &mut |r| {
        if r.step % 250 == 0 {
            println!("pretrain step {:5} loss {:.4} ({:.0}s)", r.step, r.loss, r.wall_time);
        }
        Ok(())
    })?;
    let cat = &m.categories[0];
    let (a, b) = (&cat.subjects[0].subject_id, &cat.subjects[1].subject_id);
    let o = subject_experiment(&base, &m, &world, a, b, &cfg, 0)?;
    println!("subject {a} vs {b}");
    println!("  win rate            {:.3}", o.win_rate);
    println!("  fidelity to {a:<8} {:.4}", o.mean_to_subject);
    println!("  fidelity to {b:<8} {:.4}", o.mean_to_other);
    println!("  base fidelity to {a} {:.4}", o.base_mean_to_subject);
    Ok(())
}
