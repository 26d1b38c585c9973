//! Paired image/mask augmentation: horizontal flip, random crop, scaling.
//!
//! Masks are rectangles, so they are transformed through their row and
//! column occupancy profiles with the same 1-D bilinear taps the image uses.
//! This keeps every output mask a single rectangle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize, resize_1d, BBox, Mask, Raster, CHANNELS};

const MAX_CROP_RESAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub crop_scale_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            crop_scale_range: [0.8, 1.0],
            scale_range: [0.75, 1.25],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No flip, full crop, unit scale.
    pub fn identity() -> Self {
        Self {
            p_flip: 0.0,
            crop_scale_range: [1.0, 1.0],
            scale_range: [1.0, 1.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_flip) {
            return Err(Error::InvalidArgument(format!("p_flip {} outside [0,1]", self.p_flip)));
        }
        let [clo, chi] = self.crop_scale_range;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop_scale_range {:?} must satisfy 0 < lo <= hi <= 1",
                self.crop_scale_range
            )));
        }
        let [slo, shi] = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale_range {:?} must satisfy 0 < lo <= hi",
                self.scale_range
            )));
        }
        Ok(())
    }
}

/// Flip, then crop `crop_box` (in flipped coordinates), then rescale the
/// crop to `scale` times the input size and center it on an input-sized
/// canvas (zero padding, or center-cropping when larger).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub crop_box: BBox,
    pub scale: f64,
}

impl Transform {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            flip: false,
            crop_box: BBox::new(0, 0, width, height),
            scale: 1.0,
        }
    }

    fn scaled_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let sw = ((self.scale * width as f64).round() as usize).max(1);
        let sh = ((self.scale * height as f64).round() as usize).max(1);
        (sw, sh)
    }

    /// Where a continuous point of the input lands in the output.
    pub fn map_point(&self, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { width as f64 - x } else { x };
        let (sw, sh) = self.scaled_dims(width, height);
        let c = &self.crop_box;
        let ox = (width as i64 - sw as i64).div_euclid(2) as f64;
        let oy = (height as i64 - sh as i64).div_euclid(2) as f64;
        (
            (x - c.x as f64) * sw as f64 / c.w as f64 + ox,
            (y - c.y as f64) * sh as f64 / c.h as f64 + oy,
        )
    }
}

/// Copies `src` onto a zeroed `len`-long axis, centered.
fn place<T: Copy + Default>(src: &[T], len: usize) -> Vec<T> {
    let off = (len as i64 - src.len() as i64).div_euclid(2);
    (0..len as i64)
        .map(|i| {
            let j = i - off;
            if j >= 0 && (j as usize) < src.len() {
                src[j as usize]
            } else {
                T::default()
            }
        })
        .collect()
}

pub fn sample_transform<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    subject_box: &BBox,
    rng: &mut R,
) -> Result<Transform> {
    cfg.validate()?;
    subject_box.validate(width, height)?;
    let flip = rng.random::<f64>() < cfg.p_flip;
    let target = if flip {
        subject_box.flipped(width)
    } else {
        *subject_box
    };
    let [clo, chi] = cfg.crop_scale_range;
    let mut crop_box = None;
    for _ in 0..MAX_CROP_RESAMPLES {
        let f = rng.random_range(clo..=chi);
        let cw = ((f * width as f64).round() as usize).clamp(1, width);
        let ch = ((f * height as f64).round() as usize).clamp(1, height);
        let mut valid = Vec::new();
        for y0 in 0..=height - ch {
            for x0 in 0..=width - cw {
                let b = BBox::new(x0, y0, cw, ch);
                if 2 * b.intersection_area(&target) >= target.area() {
                    valid.push(b);
                }
            }
        }
        if !valid.is_empty() {
            crop_box = Some(valid[rng.random_range(0..valid.len())]);
            break;
        }
    }
    let crop_box = crop_box.ok_or_else(|| {
        Error::Degenerate(format!(
            "no crop keeps half of box {subject_box:?} after {MAX_CROP_RESAMPLES} draws"
        ))
    })?;
    let [slo, shi] = cfg.scale_range;
    let scale = rng.random_range(slo..=shi);
    Ok(Transform {
        flip,
        crop_box,
        scale,
    })
}

pub fn apply(t: &Transform, r: &Raster, m: &Mask) -> Result<(Raster, Mask)> {
    let (w, h) = (r.width(), r.height());
    if m.width() != w || m.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "raster {h}x{w} vs mask {}x{}",
            m.height(),
            m.width()
        )));
    }
    if !m.is_rectangle() {
        return Err(Error::InvalidArgument("augmentation expects a rectangular mask".into()));
    }
    t.crop_box.validate(w, h)?;
    if !(t.scale > 0.0 && t.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {} must be positive", t.scale)));
    }
    let (img, rows, mut cols) = {
        let (rows, cols) = m.profiles();
        (if t.flip { r.flip_horizontal() } else { r.clone() }, rows, cols)
    };
    if t.flip {
        cols.reverse();
    }
    let c = &t.crop_box;
    let (sw, sh) = t.scaled_dims(w, h);
    let scaled = resize(&img.crop(c)?, sh, sw)?;
    let rows = resize_1d(&rows[c.y..c.bottom()], sh);
    let cols = resize_1d(&cols[c.x..c.right()], sw);

    let oy = (h as i64 - sh as i64).div_euclid(2);
    let ox = (w as i64 - sw as i64).div_euclid(2);
    let mut out = Raster::filled(h, w, [0.0; CHANNELS]);
    for y in 0..h as i64 {
        let sy = y - oy;
        if sy < 0 || sy >= sh as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - ox;
            if sx >= 0 && sx < sw as i64 {
                out.set(y as usize, x as usize, scaled.get(sy as usize, sx as usize));
            }
        }
    }
    let bin = |v: Vec<f32>| v.into_iter().map(|p| p >= 0.5).collect::<Vec<bool>>();
    let mask = Mask::from_profiles(&place(&bin(rows), h), &place(&bin(cols), w));
    if mask.count() == 0 {
        return Err(Error::Degenerate(format!("transform {t:?} erased the whole mask")));
    }
    Ok((out, mask))
}
