//! Small boxes get a square crop around them before they reach the model,
//! and the result is pasted back so nothing outside the box changes.
//!
//! Usage: `cargo run --example crop_and_paste`

use inpaint_compose::imaging::{paste_back, plan_crop_remedy, BBox, Raster, CROP_RATIO_THRESHOLD};

fn main() -> inpaint_compose::Result<()> {
    let bg = Raster::filled(96, 128, [0.2, 0.4, 0.6]);
    for b in [BBox::new(10, 10, 100, 70), BBox::new(100, 70, 20, 20), BBox::new(0, 0, 12, 30)] {
        let plan = plan_crop_remedy(&b, &bg, CROP_RATIO_THRESHOLD, 32)?;
        // Stand-in for a generated crop: solid orange at model resolution.
        let gen = Raster::filled(plan.model_size, plan.model_size, [1.0, 0.5, 0.0]);
        let out = paste_back(&bg, &gen, &plan, &b)?;
        let changed = (0..bg.height())
            .flat_map(|y| (0..bg.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(y, x) != bg.get(y, x))
            .count();
        println!(
            "box {b:?}: identity {}, crop {:?}, {changed} pixels changed (box area {})",
            plan.identity,
            plan.src,
            b.area()
        );
    }
    Ok(())
}
