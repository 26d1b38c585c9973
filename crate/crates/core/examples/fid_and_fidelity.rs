//! Fréchet distance between Gaussian clouds and foreground fidelity of
//! rendered glyphs under the toy embedders.
//!
//! Usage: `cargo run --example fid_and_fidelity`

use inpaint_compose::datasets::{render_scene, GlyphStyle};
use inpaint_compose::metrics::{fidelity_from_embeddings, frechet_distance, Embedder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> inpaint_compose::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let cloud = |shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..4000).map(|_| (0..8).map(|_| n.sample(rng) + shift).collect()).collect()
    };
    let a = cloud(0.0, &mut rng);
    for shift in [0.0, 0.25, 0.5, 1.0] {
        let b = cloud(shift, &mut rng);
        let f = frechet_distance(&a, &b)?;
        println!("mean shift {shift:.2}: FID {:.4} (closed form {:.4})", f.value, 8.0 * shift * shift);
    }

    // Foregrounds of one subject are closer to each other than to a sibling.
    let embed = |e: &Embedder, subject: usize, rng: &mut ChaCha8Rng| -> inpaint_compose::Result<Vec<Vec<f64>>> {
        (0..5)
            .map(|_| {
                let (r, b) = render_scene(64, &GlyphStyle::for_subject(0, subject, 2), rng);
                e.embed_foreground(&r, &b, "")
            })
            .collect()
    };
    for e in [Embedder::ToyColor, Embedder::ToyStructure] {
        let refs = embed(&e, 0, &mut rng)?;
        let same = embed(&e, 0, &mut rng)?;
        let other = embed(&e, 1, &mut rng)?;
        println!(
            "{}: same subject {:.4}, sibling {:.4}",
            e.name(),
            fidelity_from_embeddings(&same, &refs)?,
            fidelity_from_embeddings(&other, &refs)?
        );
    }
    Ok(())
}
