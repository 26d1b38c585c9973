//! Applies random flip, crop and scale transforms to an image and its box
//! mask together, then checks the mask still tracks the object.
//!
//! Usage: `cargo run --example augment_pairs -- [out_dir]`

use inpaint_compose::augment::{apply, sample_transform, AugmentConfig};
use inpaint_compose::datasets::{render_scene, GlyphStyle};
use inpaint_compose::imaging::{mask_for_dims, save_png};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> inpaint_compose::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "augment-pairs".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (image, bbox) = render_scene(64, &GlyphStyle::for_subject(0, 0, 2), &mut rng);
    let mask = mask_for_dims(&bbox, 64, 64)?;
    save_png(&image, out.join("original.png"))?;
    let cfg = AugmentConfig::default();
    for i in 0..6 {
        let t = sample_transform(&cfg, 64, 64, &bbox, &mut rng)?;
        let (im, m) = apply(&t, &image, &mask)?;
        // Overlay the mask in white so the pairing is visible.
        let mut shown = im.clone();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) {
                    let p = im.get(y, x);
                    shown.set(y, x, p.map(|v| 0.5 * v + 0.5));
                }
            }
        }
        save_png(&shown, out.join(format!("aug{i}.png")))?;
        println!("flip {} crop {:?} scale {:.2} -> mask {:?}", t.flip, t.crop_box, t.scale, m.bounding_box());
    }
    Ok(())
}
