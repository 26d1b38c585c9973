//! Raster images, bounding boxes, inpainting masks, and the crop-remedy
//! geometry used when a box is small relative to its background.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Boxes covering less than this fraction of the image are generated on a
/// centered crop instead of the full background.
pub const CROP_RATIO_THRESHOLD: f64 = 0.25;

/// An `H x W x 3` image with unit-interval values, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster must be at least 1x1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} raster needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height: height.max(1),
            width: width.max(1),
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    /// `[3, H, W]` planar tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                data[c * hw + p] = T::of(self.pixels[p * CHANNELS + c] as f64);
            }
        }
        Tensor::from_vec(&[CHANNELS, self.height, self.width], data).expect("consistent shape")
    }

    /// Inverse of [`Raster::to_tensor`]; values are clamped to `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::ShapeMismatch(format!("expected [3,H,W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let d = t.data();
        let mut pixels = vec![0.0f32; CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                let v = d[c * hw + p].as_f64();
                pixels[p * CHANNELS + c] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 };
            }
        }
        Raster::new(h, w, pixels)
    }

    pub fn crop(&self, b: &BBox) -> Result<Raster> {
        b.validate(self.width, self.height)?;
        let mut pixels = Vec::with_capacity(b.w * b.h * CHANNELS);
        for y in b.y..b.y + b.h {
            let row = (y * self.width + b.x) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[row..row + b.w * CHANNELS]);
        }
        Raster::new(b.h, b.w, pixels)
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// 8-bit quantization used by the PNG writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Raster::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

/// Axis-aligned box in pixels, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [i64; 4]) -> Result<Self, String> {
        if v.iter().any(|&c| c < 0) || v[2] < 1 || v[3] < 1 {
            return Err(format!("invalid bbox {v:?}: need x,y >= 0 and w,h >= 1"));
        }
        Ok(BBox::new(v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize))
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x as i64, b.y as i64, b.w as i64, b.h as i64]
    }
}

impl std::str::FromStr for BBox {
    type Err = Error;

    /// Parses `"x,y,w,h"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i64> = s
            .split(',')
            .map(|p| p.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bbox {s:?} is not x,y,w,h")))?;
        let arr: [i64; 4] = parts
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("bbox {s:?} needs 4 integers")))?;
        BBox::try_from(arr).map_err(Error::InvalidArgument)
    }
}

impl BBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.right() > width || self.bottom() > height {
            return Err(Error::InvalidBox {
                bbox: (*self).into(),
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    /// Mirror across the vertical axis of a `width`-wide image.
    pub fn flipped(&self, width: usize) -> BBox {
        BBox::new(width - self.right(), self.y, self.w, self.h)
    }

    /// Maps this box from `src` (a region of some image) into a
    /// `size x size` resampling of that region, rounding outward.
    pub fn into_resampled(&self, src: &BBox, out_w: usize, out_h: usize) -> BBox {
        let sx = out_w as f64 / src.w as f64;
        let sy = out_h as f64 / src.h as f64;
        let x0 = ((self.x - src.x) as f64 * sx).floor() as usize;
        let y0 = ((self.y - src.y) as f64 * sy).floor() as usize;
        let x1 = (((self.right() - src.x) as f64 * sx).ceil() as usize).clamp(x0 + 1, out_w);
        let y1 = (((self.bottom() - src.y) as f64 * sy).ceil() as usize).clamp(y0 + 1, out_h);
        let x0 = x0.min(out_w - 1);
        let y0 = y0.min(out_h - 1);
        BBox::new(x0, y0, x1.max(x0 + 1) - x0, y1.max(y0 + 1) - y0)
    }
}

/// Binary inpainting mask: 1 exactly inside one box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0/1 with H*W entries".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Tight bounds of the set pixels, if any.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// True when the set pixels form one filled axis-aligned rectangle.
    pub fn is_rectangle(&self) -> bool {
        match self.bounding_box() {
            None => false,
            Some(b) => b.area() == self.count(),
        }
    }

    /// Row and column occupancy profiles; for a rectangle their outer
    /// product reproduces the mask.
    pub fn profiles(&self) -> (Vec<f32>, Vec<f32>) {
        let mut rows = vec![0.0; self.height];
        let mut cols = vec![0.0; self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    rows[y] = 1.0;
                    cols[x] = 1.0;
                }
            }
        }
        (rows, cols)
    }

    pub fn from_profiles(rows: &[bool], cols: &[bool]) -> Self {
        let values = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r && c) as u8))
            .collect();
        Self {
            height: rows.len(),
            width: cols.len(),
            values,
        }
    }

    /// `[1, H, W]` tensor of 0/1.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("consistent shape")
    }

    /// Area-average down to `h x w` (integer factors), then threshold at 0.5.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot area-downsample {}x{} mask to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut values = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0usize;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += self.values[(y * fy + dy) * self.width + x * fx + dx] as usize;
                    }
                }
                values[y * w + x] = (2 * s >= fy * fx) as u8;
            }
        }
        Ok(Mask {
            height: h,
            width: w,
            values,
        })
    }
}

/// Where and how a background is cropped before generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub src: BBox,
    pub model_size: usize,
    pub identity: bool,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Decodes an 8-bit RGB PNG into unit-interval values (`v / 255`).
pub fn load_png(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode_png(&bytes).map_err(|e| match e {
        Error::MalformedPng { reason, .. } => Error::MalformedPng {
            path: path.to_path_buf(),
            reason,
        },
        Error::UnsupportedPng { found, .. } => Error::UnsupportedPng {
            path: path.to_path_buf(),
            found,
        },
        other => other,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let malformed = |reason: String| Error::MalformedPng {
        path: Default::default(),
        reason,
    };
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| malformed(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedPng {
            path: Default::default(),
            found: format!("{:?} at {:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| malformed("image too large".into()))?];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| malformed(e.to_string()))?;
    Raster::from_bytes(h, w, &buf[..frame.buffer_size()])
}

/// Reads only the header; returns `(width, height)`.
pub fn png_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::MalformedPng {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        writer
            .write_image_data(&r.to_bytes())
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_png(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(r)?)
}

/// Half-pixel-center bilinear taps for one axis: `(i0, i1, w1)` per output.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Linear resampling of a 1-D signal with the same convention as [`resize`].
pub(crate) fn resize_1d(v: &[f32], n: usize) -> Vec<f32> {
    bilinear_taps(v.len(), n)
        .into_iter()
        .map(|(a, b, w)| v[a] + (v[b] - v[a]) * w)
        .collect()
}

/// Bilinear resampling with half-pixel-center alignment.
pub fn resize(r: &Raster, h2: usize, w2: usize) -> Result<Raster> {
    if h2 == 0 || w2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {h2}x{w2}"
        )));
    }
    let ty = bilinear_taps(r.height, h2);
    let tx = bilinear_taps(r.width, w2);
    let mut pixels = vec![0.0f32; h2 * w2 * CHANNELS];
    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
            let p00 = r.get(y0, x0);
            let p01 = r.get(y0, x1);
            let p10 = r.get(y1, x0);
            let p11 = r.get(y1, x1);
            for c in 0..CHANNELS {
                // Difference form keeps constant regions exact.
                let top = p00[c] + (p01[c] - p00[c]) * wx;
                let bot = p10[c] + (p11[c] - p10[c]) * wx;
                let v = top + (bot - top) * wy;
                pixels[(y * w2 + x) * CHANNELS + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Raster::new(h2, w2, pixels)
}

pub fn box_ratio(b: &BBox, r: &Raster) -> Result<f64> {
    b.validate(r.width, r.height)?;
    Ok(b.area() as f64 / (r.width * r.height) as f64)
}

pub fn make_mask(b: &BBox, r: &Raster) -> Result<Mask> {
    mask_for_dims(b, r.width, r.height)
}

pub fn mask_for_dims(b: &BBox, width: usize, height: usize) -> Result<Mask> {
    b.validate(width, height)?;
    let mut m = Mask::empty(height, width);
    for y in b.y..b.bottom() {
        m.values[y * width + b.x..y * width + b.right()].fill(1);
    }
    Ok(m)
}

/// Zeroes every pixel under the mask.
pub fn erase_background(r: &Raster, m: &Mask) -> Result<Raster> {
    if r.height != m.height || r.width != m.width {
        return Err(Error::ShapeMismatch(format!(
            "raster {}x{} vs mask {}x{}",
            r.height, r.width, m.height, m.width
        )));
    }
    let mut out = r.clone();
    for (p, &mv) in m.values.iter().enumerate() {
        if mv == 1 {
            out.pixels[p * CHANNELS..(p + 1) * CHANNELS].fill(0.0);
        }
    }
    Ok(out)
}

pub fn plan_crop_remedy(b: &BBox, r: &Raster, theta: f64, model_size: usize) -> Result<CropPlan> {
    plan_crop_for_dims(b, r.width, r.height, theta, model_size)
}

/// Crop plan for a `width x height` image: identity when the box already
/// covers at least `theta` of the image, otherwise the image-shaped window
/// scaled so the box covers `theta`, centered on the box and shifted inside
/// the image bounds.
pub fn plan_crop_for_dims(
    b: &BBox,
    width: usize,
    height: usize,
    theta: f64,
    model_size: usize,
) -> Result<CropPlan> {
    b.validate(width, height)?;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("crop threshold {theta} outside (0,1]")));
    }
    let full = BBox::new(0, 0, width, height);
    let ratio = b.area() as f64 / (width * height) as f64;
    if ratio >= theta {
        return Ok(CropPlan {
            src: full,
            model_size,
            identity: true,
        });
    }
    let s = (b.area() as f64 / (theta * (width * height) as f64)).sqrt();
    let mut cw = ((s * width as f64).floor() as usize).max(b.w);
    let mut ch = ((s * height as f64).floor() as usize).max(b.h);
    // Guard the floor against round-up in the product above.
    while (b.area() as f64) < theta * (cw * ch) as f64 && (cw > b.w || ch > b.h) {
        if cw > b.w && (cw * height >= ch * width || ch == b.h) {
            cw -= 1;
        } else {
            ch -= 1;
        }
    }
    let place = |start: usize, len: usize, crop: usize, limit: usize| -> usize {
        let centered = start as i64 + (len as i64 - crop as i64).div_euclid(2);
        centered.clamp(0, (limit - crop) as i64) as usize
    };
    let src = BBox::new(
        place(b.x, b.w, cw, width),
        place(b.y, b.h, ch, height),
        cw,
        ch,
    );
    Ok(CropPlan {
        src,
        model_size,
        identity: false,
    })
}

/// Resizes `generated` back onto `plan.src` and copies only the pixels
/// inside `b` into a copy of `background`.
pub fn paste_back(background: &Raster, generated: &Raster, plan: &CropPlan, b: &BBox) -> Result<Raster> {
    b.validate(background.width, background.height)?;
    plan.src.validate(background.width, background.height)?;
    if !plan.src.contains(b) {
        return Err(Error::InvalidArgument(format!(
            "box {b:?} not contained in crop {:?}",
            plan.src
        )));
    }
    if generated.height != plan.model_size || generated.width != plan.model_size {
        return Err(Error::ShapeMismatch(format!(
            "generated image is {}x{}, plan expects {}",
            generated.height, generated.width, plan.model_size
        )));
    }
    let back = resize(generated, plan.src.h, plan.src.w)?;
    let mut out = background.clone();
    for y in b.y..b.bottom() {
        for x in b.x..b.right() {
            out.set(y, x, back.get(y - plan.src.y, x - plan.src.x));
        }
    }
    Ok(out)
}

/// `h, s, v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Inverse of [`hsv_to_rgb`]; hue is 0 for greys.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64);
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d <= 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx <= 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Raster {
        let mut r = Raster::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                r.set(y, x, [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        r
    }

    #[test]
    fn load_png_converts_by_255_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        let white = Raster::from_bytes(1, 1, &[255, 255, 255]).unwrap();
        save_png(&white, &p).unwrap();
        assert_eq!(load_png(&p).unwrap().pixels(), &[1.0, 1.0, 1.0]);

        let bytes: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let r = Raster::from_bytes(4, 5, &bytes).unwrap();
        let q = dir.path().join("r.png");
        save_png(&r, &q).unwrap();
        assert_eq!(load_png(&q).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn load_png_error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(Error::MissingFile(_))));

        let good = encode_png(&gradient(8, 8)).unwrap();
        let trunc = dir.path().join("t.png");
        fs::write(&trunc, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_png(&trunc), Err(Error::MalformedPng { .. })));

        let gray = dir.path().join("g.png");
        {
            let f = fs::File::create(&gray).unwrap();
            let mut enc = png::Encoder::new(f, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0, 1, 2, 3]).unwrap();
        }
        assert!(matches!(load_png(&gray), Err(Error::UnsupportedPng { .. })));
    }

    #[test]
    fn resize_identity_constant_and_checkerboard() {
        let g = gradient(7, 9);
        let same = resize(&g, 7, 9).unwrap();
        for (a, b) in same.pixels().iter().zip(g.pixels()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let c = Raster::filled(5, 3, [0.25, 0.5, 0.75]);
        for (h, w) in [(1, 1), (11, 2), (4, 17)] {
            let r = resize(&c, h, w).unwrap();
            assert!(r.pixels().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
        }
        // Single half-pixel center (1.0, 1.0) in a 2x2 source: every tap weighs 1/4.
        let board = Raster::from_bytes(2, 2, &[0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0]).unwrap();
        let one = resize(&board, 1, 1).unwrap();
        assert!(one.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(resize(&board, 0, 3).is_err());
    }

    #[test]
    fn resize_commutes_with_flip() {
        let g = gradient(6, 10);
        let a = resize(&g.flip_horizontal(), 9, 7).unwrap();
        let b = resize(&g, 9, 7).unwrap().flip_horizontal();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn box_ratio_values() {
        let r = Raster::filled(128, 128, [0.0; 3]);
        assert_eq!(box_ratio(&r.full_box(), &r).unwrap(), 1.0);
        assert_eq!(box_ratio(&BBox::new(3, 4, 16, 16), &r).unwrap(), 0.015625);
        assert!(box_ratio(&BBox::new(120, 0, 16, 16), &r).is_err());
    }

    #[test]
    fn masks_count_and_disjointness() {
        let r = Raster::filled(20, 30, [0.0; 3]);
        assert_eq!(make_mask(&r.full_box(), &r).unwrap().count(), 600);
        let a = make_mask(&BBox::new(2, 3, 5, 4), &r).unwrap();
        assert_eq!(a.count(), 20);
        assert!(a.is_rectangle());
        let b = make_mask(&BBox::new(10, 3, 5, 4), &r).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x & y == 0));
    }

    #[test]
    fn erase_properties() {
        let g = gradient(8, 8);
        assert_eq!(erase_background(&g, &Mask::empty(8, 8)).unwrap(), g);
        let all = make_mask(&g.full_box(), &g).unwrap();
        assert!(erase_background(&g, &all).unwrap().pixels().iter().all(|&v| v == 0.0));
        let m = make_mask(&BBox::new(1, 2, 3, 4), &g).unwrap();
        let once = erase_background(&g, &m).unwrap();
        assert_eq!(erase_background(&once, &m).unwrap(), once);
        for y in 0..8 {
            for x in 0..8 {
                if m.get(y, x) {
                    assert_eq!(once.get(y, x), [0.0; 3]);
                }
            }
        }
        assert!(erase_background(&g, &Mask::empty(8, 7)).is_err());
    }

    #[test]
    fn crop_remedy_documented_cases() {
        let p = plan_crop_for_dims(&BBox::new(0, 0, 64, 64), 128, 128, 0.25, 32).unwrap();
        assert!(p.identity);
        assert_eq!(p.src, BBox::new(0, 0, 128, 128));

        let p = plan_crop_for_dims(&BBox::new(56, 56, 16, 16), 128, 128, 0.25, 32).unwrap();
        assert!(!p.identity);
        assert_eq!(p.src, BBox::new(48, 48, 32, 32));

        let p = plan_crop_for_dims(&BBox::new(0, 0, 16, 16), 128, 128, 0.25, 32).unwrap();
        assert_eq!(p.src, BBox::new(0, 0, 32, 32));

        assert!(plan_crop_for_dims(&BBox::new(0, 0, 16, 16), 128, 128, 0.0, 32).is_err());
        assert!(plan_crop_for_dims(&BBox::new(0, 0, 16, 16), 128, 128, 1.5, 32).is_err());
    }

    #[test]
    fn paste_back_touches_only_the_box() {
        let bg = gradient(128, 128);
        let b = BBox::new(48, 48, 32, 32);
        let plan = plan_crop_for_dims(&b, 128, 128, 0.25, 32).unwrap();
        let gen = Raster::filled(32, 32, [1.0, 0.0, 0.0]);
        let out = paste_back(&bg, &gen, &plan, &b).unwrap();
        assert_eq!(out.get(0, 0), bg.get(0, 0));
        assert_eq!(out.get(60, 60), [1.0, 0.0, 0.0]);

        let crop = resize(&bg.crop(&plan.src).unwrap(), 32, 32).unwrap();
        let back = paste_back(&bg, &crop, &plan, &b).unwrap();
        for (a, c) in back.pixels().iter().zip(bg.pixels()) {
            assert!((a - c).abs() < 0.02);
        }

        let full = BBox::new(0, 0, 16, 16);
        let bg16 = gradient(16, 16);
        let ident = plan_crop_for_dims(&full, 16, 16, 0.25, 8).unwrap();
        let g8 = gradient(8, 8);
        assert_eq!(paste_back(&bg16, &g8, &ident, &full).unwrap(), resize(&g8, 16, 16).unwrap());

        let outside = CropPlan {
            src: BBox::new(0, 0, 32, 32),
            model_size: 32,
            identity: false,
        };
        assert!(paste_back(&bg, &gen, &outside, &b).is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for (h, sat, v) in [(0.0, 1.0, 1.0), (0.33, 0.5, 0.8), (0.7, 0.9, 0.4), (0.95, 0.2, 0.6)] {
            let (h2, s2, v2) = rgb_to_hsv(hsv_to_rgb(h, sat, v));
            assert!((h - h2).abs() < 1e-6 && (sat - s2).abs() < 1e-6 && (v - v2).abs() < 1e-6);
        }
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn bbox_json_and_parse() {
        let b: BBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(b, BBox::new(1, 2, 3, 4));
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert!(serde_json::from_str::<BBox>("[1,2,0,4]").is_err());
        assert_eq!("48,48,32,32".parse::<BBox>().unwrap(), BBox::new(48, 48, 32, 32));
        assert!("1,2,3".parse::<BBox>().is_err());
    }

    #[test]
    fn mask_downsample_extremes() {
        let full = mask_for_dims(&BBox::new(0, 0, 8, 8), 8, 8).unwrap();
        assert_eq!(full.downsample(4, 4).unwrap().count(), 16);
        assert_eq!(Mask::empty(8, 8).downsample(4, 4).unwrap().count(), 0);
        let half = mask_for_dims(&BBox::new(1, 0, 3, 8), 8, 8).unwrap();
        let d = half.downsample(4, 4).unwrap();
        assert!(d.is_rectangle());
        assert!(full.downsample(3, 3).is_err());
    }
}
