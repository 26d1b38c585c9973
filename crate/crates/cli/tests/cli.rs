use std::path::Path;
use std::process::{Command, Output};

use inpaint_compose::composer::SampleMeta;
use inpaint_compose::imaging::load_png;
use inpaint_compose::metrics::{write_embeddings, Embedder, Embedding, EvalReport};

fn cli(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inpaint-compose"))
        .args(args)
        .env("INPAINT_COMPOSE_DATA", data)
        .output()
        .unwrap()
}

fn ok(data: &Path, args: &[&str]) -> Output {
    let out = cli(data, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["compose", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));

    let help = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen-data", "pretrain", "finetune", "compose", "evaluate", "serve"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    for sub in ["gen-data", "pretrain", "finetune", "compose", "evaluate", "serve"] {
        let h = ok(dir.path(), &[sub, "--help"]);
        let t = String::from_utf8_lossy(&h.stdout);
        assert!(t.contains("--seed") && t.contains("--config") && t.contains("--json"), "{sub}");
    }
}

#[test]
fn finetune_with_zero_references_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["finetune", "--subject", "star-0", "--refs", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--refs"));
}

#[test]
fn missing_inputs_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["pretrain"]).status.code(), Some(1));
    let out = cli(
        dir.path(),
        &["compose", "--bundle", "nope.bundle", "--background", "nope.png", "--bbox", "1,1,4,4"],
    );
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(cli(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]).status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end_on_a_tiny_world() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    let world = data.join("world");

    let out = ok(
        data,
        &["gen-data", "--json", "--seed", "3", "--corpus-per-category", "6", "--backgrounds-per-category", "2"],
    );
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["version"], 1);
    assert!(world.join("manifest.json").exists());

    let cfg = data.join("tiny.json");
    std::fs::write(&cfg, r#"{"steps": 3, "batch_size": 2, "base_width": 8}"#).unwrap();
    let out = ok(data, &["pretrain", "--json", "--config", cfg.to_str().unwrap()]);
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["steps"], 3);
    assert!(data.join("base.bundle").exists());

    for subject in ["star-0", "star-1", "triangle-0", "triangle-1"] {
        ok(
            data,
            &["finetune", "--subject", subject, "--refs", "2", "--steps", "2", "--batch-size", "2"],
        );
    }
    assert!(data.join("bundles/star-0.bundle").exists());

    // Single-background compose: 5 PNGs plus metadata, deterministic in --seed.
    let bundle = data.join("bundles/star-0.bundle");
    let bg = world.join("backgrounds/star/bg0.png");
    let single = |out_dir: &Path, seed: &str| {
        ok(
            data,
            &[
                "compose",
                "--json",
                "--seed",
                seed,
                "--bundle",
                bundle.to_str().unwrap(),
                "--background",
                bg.to_str().unwrap(),
                "--bbox",
                "20,20,24,24",
                "--n",
                "5",
                "--steps",
                "4",
                "--out",
                out_dir.to_str().unwrap(),
            ],
        )
    };
    let a = data.join("single-a");
    let out = single(&a, "7");
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["samples"].as_array().unwrap().len(), 5);
    for k in 0..5 {
        let meta: SampleMeta = serde_json::from_slice(&std::fs::read(a.join(format!("{k}.json"))).unwrap()).unwrap();
        assert_eq!((meta.sample_index, meta.seed), (k, 7));
        assert_eq!(load_png(a.join(format!("{k}.png"))).unwrap().width(), 64);
    }
    let b = data.join("single-b");
    single(&b, "7");
    for k in 0..5 {
        let name = format!("{k}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }

    // Batch compose over the manifest, then a resumed rerun generates nothing.
    let manifest = world.join("manifest.json");
    let batch = ["compose", "--json", "--manifest", manifest.to_str().unwrap(), "--n", "2", "--steps", "2"];
    let out = ok(data, &batch);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["summary"]["generated"], 16);
    let out = ok(data, &batch);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((doc["summary"]["generated"].as_u64(), doc["summary"]["skipped_pairs"].as_u64()), (Some(0), Some(8)));

    // Evaluate against precomputed real embeddings.
    let real: Vec<Embedding> = ["star/0.png", "star/1.png", "star/2.png", "triangle/0.png", "triangle/1.png", "triangle/2.png"]
        .iter()
        .map(|id| Embedding {
            source: id.to_string(),
            vector: Embedder::ToyColor.embed(&load_png(world.join("corpus").join(id)).unwrap(), id).unwrap(),
        })
        .collect();
    let emb = data.join("real.emb");
    write_embeddings(&emb, "toy-color", &real).unwrap();
    let out = ok(
        data,
        &["evaluate", "--json", "--manifest", world.join("manifest.json").to_str().unwrap(), "--real-emb", emb.to_str().unwrap()],
    );
    let report: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((report.overall.n_pairs, report.overall.n_samples), (8, 16));
    assert!(!report.partial);
    assert!(report.overall.clip_fg.is_some() && report.overall.dino_fg.is_some() && report.overall.fid.is_some());
    assert_eq!(report.per_category.len(), 2);

    // An output path that cannot be created is an internal failure.
    let blocker = data.join("blocker");
    std::fs::write(&blocker, b"x").unwrap();
    let out = cli(
        data,
        &[
            "compose",
            "--bundle",
            bundle.to_str().unwrap(),
            "--background",
            bg.to_str().unwrap(),
            "--bbox",
            "20,20,24,24",
            "--n",
            "1",
            "--steps",
            "2",
            "--out",
            blocker.join("sub").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
