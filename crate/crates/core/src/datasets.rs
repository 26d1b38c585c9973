//! Dataset manifests (categories with boxed backgrounds and subjects with
//! reference images), pair enumeration, and the synthetic shapes-world
//! generator used for desk-scale experiments.
//!
//! Two layouts are supported. In the multi-reference layout every subject
//! pairs with every background of its category. In the shared-background
//! layout a subject lists the background ids it pairs with, so several
//! subjects may share one background set.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{hsv_to_rgb, load_png, png_dimensions, save_png, write_atomic, BBox, Raster};
use crate::trainer::{RefItem, ReferenceSet, TrainSample};

pub const MANIFEST_VERSION: u32 = 1;
pub const GLYPH_FAMILIES: [&str; 4] = ["star", "triangle", "ring", "cross"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub id: String,
    pub path: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub references: Vec<RefItem>,
    /// Restricts pairing to these background ids of the category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backgrounds: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    pub backgrounds: Vec<BackgroundEntry>,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub categories: Vec<CategoryEntry>,
}

/// One subject-background pair to generate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub category: String,
    pub subject_id: String,
    pub background_id: String,
    pub background_path: String,
    pub bbox: BBox,
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let pb = Path::new(p);
    if pb.is_absolute() {
        pb.to_path_buf()
    } else {
        root.join(pb)
    }
}

fn check_box(root: &Path, field: &str, path: &str, b: &BBox) -> Result<()> {
    let full = resolve(root, path);
    let (w, h) = png_dimensions(&full).map_err(|e| match e {
        Error::MissingFile(p) => Error::schema(format!("{field}.path"), format!("missing file {}", p.display())),
        other => Error::schema(format!("{field}.path"), other.to_string()),
    })?;
    b.validate(w, h)
        .map_err(|e| Error::schema(format!("{field}.bbox"), format!("{e} ({path})")))
}

impl Manifest {
    /// Structural checks; with `root`, also checks files and boxes on disk.
    pub fn validate(&self, root: Option<&Path>) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::schema("version", format!("expected {MANIFEST_VERSION}, got {}", self.version)));
        }
        if self.categories.is_empty() {
            return Err(Error::schema("categories", "must not be empty"));
        }
        let mut cat_names = HashSet::new();
        let mut subject_ids = HashSet::new();
        for (ci, c) in self.categories.iter().enumerate() {
            let cf = format!("categories[{ci}]");
            if c.name.is_empty() || c.name.contains(char::is_whitespace) {
                return Err(Error::schema(format!("{cf}.name"), "must be one non-empty word"));
            }
            if !cat_names.insert(&c.name) {
                return Err(Error::schema(format!("{cf}.name"), format!("duplicate category {}", c.name)));
            }
            let mut bg_ids = HashSet::new();
            for (bi, b) in c.backgrounds.iter().enumerate() {
                let bf = format!("{cf}.backgrounds[{bi}]");
                if !bg_ids.insert(b.id.as_str()) {
                    return Err(Error::schema(format!("{bf}.id"), format!("duplicate background id {}", b.id)));
                }
                if let Some(root) = root {
                    check_box(root, &bf, &b.path, &b.bbox)?;
                }
            }
            for (si, s) in c.subjects.iter().enumerate() {
                let sf = format!("{cf}.subjects[{si}]");
                if !subject_ids.insert(&s.subject_id) {
                    return Err(Error::schema(format!("{sf}.subject_id"), format!("duplicate subject {}", s.subject_id)));
                }
                if s.references.is_empty() {
                    return Err(Error::schema(format!("{sf}.references"), "must not be empty"));
                }
                if let Some(ids) = &s.backgrounds {
                    for id in ids {
                        if !bg_ids.contains(id.as_str()) {
                            return Err(Error::schema(
                                format!("{sf}.backgrounds"),
                                format!("unknown background id {id}"),
                            ));
                        }
                    }
                }
                if let Some(root) = root {
                    for (ri, r) in s.references.iter().enumerate() {
                        check_box(root, &format!("{sf}.references[{ri}]"), &r.path, &r.bbox)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Σ over subjects of the backgrounds each pairs with.
    pub fn pair_count(&self) -> usize {
        self.categories
            .iter()
            .map(|c| {
                c.subjects
                    .iter()
                    .map(|s| s.backgrounds.as_ref().map_or(c.backgrounds.len(), Vec::len))
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn subject(&self, subject_id: &str) -> Option<(&CategoryEntry, &SubjectEntry)> {
        self.categories.iter().find_map(|c| {
            c.subjects
                .iter()
                .find(|s| s.subject_id == subject_id)
                .map(|s| (c, s))
        })
    }

    pub fn reference_set(&self, subject_id: &str, rare_token: &str) -> Result<ReferenceSet> {
        let (c, s) = self
            .subject(subject_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {subject_id}")))?;
        Ok(ReferenceSet {
            subject_id: s.subject_id.clone(),
            category: c.name.clone(),
            rare_token: rare_token.to_string(),
            items: s.references.clone(),
        })
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    m.validate(Some(path.parent().unwrap_or(Path::new("."))))?;
    Ok(m)
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &serde_json::to_vec_pretty(m)?)
}

/// Category, then subject, then background, each ascending; subjects only
/// pair with backgrounds of their own category.
pub fn enumerate_pairs(m: &Manifest) -> Vec<Pair> {
    let mut cats: Vec<&CategoryEntry> = m.categories.iter().collect();
    cats.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = Vec::with_capacity(m.pair_count());
    for c in cats {
        let mut subjects: Vec<&SubjectEntry> = c.subjects.iter().collect();
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut bgs: Vec<&BackgroundEntry> = c.backgrounds.iter().collect();
        bgs.sort_by(|a, b| a.id.cmp(&b.id));
        for s in subjects {
            let allowed: Option<BTreeSet<&str>> =
                s.backgrounds.as_ref().map(|v| v.iter().map(String::as_str).collect());
            for b in &bgs {
                if allowed.as_ref().is_some_and(|a| !a.contains(b.id.as_str())) {
                    continue;
                }
                out.push(Pair {
                    category: c.name.clone(),
                    subject_id: s.subject_id.clone(),
                    background_id: b.id.clone(),
                    background_path: b.path.clone(),
                    bbox: b.bbox,
                });
            }
        }
    }
    out
}

/// Pretraining corpus index: boxed glyph images with their category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub path: String,
    pub bbox: BBox,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub version: u32,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let c: Corpus = serde_json::from_str(&text)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new("."));
        c.items
            .iter()
            .map(|it| {
                let image = load_png(resolve(root, &it.path))?;
                it.bbox.validate(image.width(), image.height())?;
                Ok(TrainSample {
                    image,
                    bbox: it.bbox,
                    category: it.category.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesWorldConfig {
    pub n_categories: usize,
    pub subjects_per_category: usize,
    pub refs_per_subject: usize,
    pub backgrounds_per_category: usize,
    /// Side of reference and corpus images.
    pub image_size: usize,
    pub background_size: usize,
    pub corpus_per_category: usize,
    pub seed: u64,
}

impl Default for ShapesWorldConfig {
    fn default() -> Self {
        Self {
            n_categories: 2,
            subjects_per_category: 2,
            refs_per_subject: 5,
            backgrounds_per_category: 4,
            image_size: 32,
            background_size: 64,
            corpus_per_category: 1000,
            seed: 0,
        }
    }
}

impl ShapesWorldConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            self.n_categories,
            self.subjects_per_category,
            self.refs_per_subject,
            self.backgrounds_per_category,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("shapes-world counts must be >= 1".into()));
        }
        if self.image_size < 8 || self.background_size < 16 {
            return Err(Error::InvalidArgument("image_size >= 8 and background_size >= 16 required".into()));
        }
        Ok(())
    }
}

pub fn category_name(i: usize) -> String {
    let fam = GLYPH_FAMILIES[i % GLYPH_FAMILIES.len()];
    if i < GLYPH_FAMILIES.len() {
        fam.to_string()
    } else {
        format!("{fam}{}", i / GLYPH_FAMILIES.len())
    }
}

/// Appearance of a rendered glyph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub family: usize,
    pub hue: f64,
    pub saturation: f64,
    /// Stripe count across the glyph; stripes alternate full and 60% value.
    pub stripes: usize,
    pub vertical: bool,
}

impl GlyphStyle {
    /// Subjects of one category get evenly spaced hues and distinct stripe
    /// patterns, which keeps them far apart in color space.
    pub fn for_subject(category: usize, subject: usize, per_category: usize) -> Self {
        Self {
            family: category % GLYPH_FAMILIES.len(),
            hue: (0.13 * category as f64 + subject as f64 / per_category as f64).rem_euclid(1.0),
            saturation: 0.85,
            stripes: 2 + subject % 3,
            vertical: subject % 2 == 1,
        }
    }
}

/// Membership of normalized glyph coordinates `u, v` in `[-1, 1]`.
fn inside(family: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match family % GLYPH_FAMILIES.len() {
        0 => {
            let th = u.atan2(-v);
            let spike = (0.5 + 0.5 * (5.0 * th).cos()).powi(2);
            r <= 0.45 + 0.6 * spike
        }
        1 => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        2 => (0.5..=1.0).contains(&r),
        _ => u.abs() <= 0.35 || v.abs() <= 0.35,
    }
}

/// Draws a glyph into `nominal` and returns the tight box of the pixels it
/// covered (pixel centers are sampled, no anti-aliasing).
pub fn draw_glyph(r: &mut Raster, nominal: &BBox, style: &GlyphStyle) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let base = hsv_to_rgb(style.hue, style.saturation, 0.95);
    let dark = hsv_to_rgb(style.hue, style.saturation, 0.57);
    for y in nominal.y..nominal.bottom() {
        for x in nominal.x..nominal.right() {
            let u = 2.0 * (x as f64 + 0.5 - nominal.x as f64) / nominal.w as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5 - nominal.y as f64) / nominal.h as f64 - 1.0;
            if !inside(style.family, u, v) {
                continue;
            }
            let along = if style.vertical { u } else { v };
            let band = (((along + 1.0) / 2.0 * style.stripes as f64 * 2.0).floor() as usize) % 2;
            r.set(y, x, if band == 0 { base } else { dark });
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
}

fn random_color<R: Rng>(rng: &mut R, sat: (f64, f64), val: (f64, f64)) -> [f32; 3] {
    hsv_to_rgb(
        rng.random::<f64>(),
        rng.random_range(sat.0..=sat.1),
        rng.random_range(val.0..=val.1),
    )
}

/// Smooth two-color gradient plus small distractor discs kept clear of `keep`.
pub fn render_backdrop<R: Rng>(size: usize, keep: &BBox, rng: &mut R) -> Raster {
    // Muted backdrops so glyph colors dominate foreground statistics.
    let c0 = random_color(rng, (0.05, 0.3), (0.35, 0.8));
    let c1 = random_color(rng, (0.05, 0.3), (0.35, 0.8));
    let angle = rng.random::<f64>() * 2.0 * PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut r = Raster::filled(size, size, [0.0; 3]);
    let half = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 - half) * ca + (y as f64 - half) * sa) / (size as f64 * 0.75) + 0.5;
            let t = p.clamp(0.0, 1.0) as f32;
            r.set(y, x, [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t));
        }
    }
    let n = rng.random_range(2..=4);
    for _ in 0..n {
        let rad = rng.random_range(1..=(size / 16).max(2)) as i64;
        let cx = rng.random_range(0..size) as i64;
        let cy = rng.random_range(0..size) as i64;
        let col = random_color(rng, (0.0, 0.25), (0.2, 0.9));
        for y in (cy - rad).max(0)..(cy + rad + 1).min(size as i64) {
            for x in (cx - rad).max(0)..(cx + rad + 1).min(size as i64) {
                let (ux, uy) = (x as usize, y as usize);
                let near_keep = ux + 1 >= keep.x && ux <= keep.right() && uy + 1 >= keep.y && uy <= keep.bottom();
                if (x - cx).pow(2) + (y - cy).pow(2) <= rad * rad && !near_keep {
                    r.set(uy, ux, col);
                }
            }
        }
    }
    r
}

/// A nominal square-ish glyph box covering `lo..hi` of the image side.
fn random_box<R: Rng>(size: usize, lo: f64, hi: f64, rng: &mut R) -> BBox {
    let w = ((rng.random_range(lo..=hi) * size as f64).round() as usize).clamp(4, size);
    let h = ((rng.random_range(lo..=hi) * size as f64).round() as usize).clamp(4, size);
    BBox::new(rng.random_range(0..=size - w), rng.random_range(0..=size - h), w, h)
}

/// One boxed glyph scene; returns the image and the glyph's tight box.
pub fn render_scene<R: Rng>(size: usize, style: &GlyphStyle, rng: &mut R) -> (Raster, BBox) {
    // Side fractions 0.5..0.75 put the box at 25-56% of the image area.
    let nominal = random_box(size, 0.5, 0.75, rng);
    let mut r = render_backdrop(size, &nominal, rng);
    let tight = draw_glyph(&mut r, &nominal, style).expect("glyph covers pixels at these sizes");
    (r, tight)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes a complete shapes-world tree under `out`:
/// `backgrounds/<cat>/<id>.png`, `subjects/<cat>/<subject>/<k>.png`,
/// `corpus/<cat>/<k>.png`, `corpus.json`, and finally `manifest.json`.
pub fn generate_shapes_world(cfg: &ShapesWorldConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mut categories = Vec::new();
    let mut corpus = Vec::new();
    for ci in 0..cfg.n_categories {
        let cat = category_name(ci);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ci as u64);

        let mut backgrounds = Vec::new();
        for bi in 0..cfg.backgrounds_per_category {
            let id = format!("bg{bi}");
            let bbox = random_box(cfg.background_size, 0.25, 0.6, &mut rng);
            let r = render_backdrop(cfg.background_size, &bbox, &mut rng);
            let rel = format!("backgrounds/{cat}/{id}.png");
            save_png(&r, out.join(&rel))?;
            backgrounds.push(BackgroundEntry { id, path: rel, bbox });
        }

        let mut subjects = Vec::new();
        for si in 0..cfg.subjects_per_category {
            let subject_id = format!("{cat}-{si}");
            let style = GlyphStyle::for_subject(ci, si, cfg.subjects_per_category);
            let mut references = Vec::new();
            for k in 0..cfg.refs_per_subject {
                let (r, bbox) = render_scene(cfg.image_size, &style, &mut rng);
                let rel = format!("subjects/{cat}/{subject_id}/{k}.png");
                save_png(&r, out.join(&rel))?;
                references.push(RefItem { path: rel, bbox });
            }
            subjects.push(SubjectEntry {
                subject_id,
                references,
                backgrounds: None,
            });
        }

        for k in 0..cfg.corpus_per_category {
            let style = GlyphStyle {
                family: ci % GLYPH_FAMILIES.len(),
                hue: rng.random::<f64>(),
                saturation: rng.random_range(0.6..=0.95),
                stripes: rng.random_range(2..=4),
                vertical: rng.random::<bool>(),
            };
            let (r, bbox) = render_scene(cfg.image_size, &style, &mut rng);
            let rel = format!("corpus/{cat}/{k}.png");
            save_png(&r, out.join(&rel))?;
            corpus.push(CorpusItem {
                path: rel,
                bbox,
                category: cat.clone(),
            });
        }
        categories.push(CategoryEntry {
            name: cat,
            backgrounds,
            subjects,
        });
    }
    write_atomic(
        &out.join("corpus.json"),
        &serde_json::to_vec_pretty(&Corpus {
            version: MANIFEST_VERSION,
            items: corpus,
        })?,
    )?;
    let m = Manifest {
        version: MANIFEST_VERSION,
        name: format!("shapes-world-{}", cfg.seed),
        categories,
    };
    save_manifest(&m, out.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_png(root: &Path, rel: &str, w: usize, h: usize) {
        save_png(&Raster::filled(h, w, [0.5; 3]), root.join(rel)).unwrap();
    }

    /// A manifest over tiny placeholder images.
    fn layout(root: &Path, cats: usize, bgs: usize, subs: usize, shared: Option<usize>) -> Manifest {
        let mut categories = Vec::new();
        for c in 0..cats {
            let backgrounds = (0..bgs)
                .map(|b| {
                    let path = format!("b/{c}/{b}.png");
                    tiny_png(root, &path, 4, 4);
                    BackgroundEntry {
                        id: format!("bg{b:02}"),
                        path,
                        bbox: BBox::new(1, 1, 2, 2),
                    }
                })
                .collect::<Vec<_>>();
            let subjects = (0..subs)
                .map(|s| {
                    let path = format!("s/{c}/{s}.png");
                    tiny_png(root, &path, 4, 4);
                    SubjectEntry {
                        subject_id: format!("c{c:02}-s{s}"),
                        references: vec![RefItem {
                            path,
                            bbox: BBox::new(0, 0, 4, 4),
                        }],
                        backgrounds: shared.map(|n| backgrounds.iter().take(n).map(|b| b.id.clone()).collect()),
                    }
                })
                .collect();
            categories.push(CategoryEntry {
                name: format!("cat{c:02}"),
                backgrounds,
                subjects,
            });
        }
        Manifest {
            version: MANIFEST_VERSION,
            name: "t".into(),
            categories,
        }
    }

    #[test]
    fn multi_reference_layout_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = layout(dir.path(), 32, 20, 3, None);
        save_manifest(&m, dir.path().join("manifest.json")).unwrap();
        let back = load_manifest(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.pair_count(), 1920);
        assert_eq!(enumerate_pairs(&back).len(), 1920);
    }

    #[test]
    fn shared_background_layout_counts() {
        let dir = tempfile::tempdir().unwrap();
        // 15 categories, 2 subjects each sharing the first 10 of 12 backgrounds.
        let m = layout(dir.path(), 15, 12, 2, Some(10));
        m.validate(Some(dir.path())).unwrap();
        assert_eq!(m.categories.iter().map(|c| c.subjects.len()).sum::<usize>(), 30);
        assert_eq!(m.pair_count(), 300);
        assert_eq!(enumerate_pairs(&m).len(), 300);
    }

    #[test]
    fn pair_order_and_category_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let m = layout(dir.path(), 1, 3, 2, None);
        let pairs = enumerate_pairs(&m);
        let got: Vec<(&str, &str)> = pairs.iter().map(|p| (p.subject_id.as_str(), p.background_id.as_str())).collect();
        assert_eq!(
            got,
            vec![
                ("c00-s0", "bg00"),
                ("c00-s0", "bg01"),
                ("c00-s0", "bg02"),
                ("c00-s1", "bg00"),
                ("c00-s1", "bg01"),
                ("c00-s1", "bg02"),
            ]
        );
        let m2 = layout(dir.path(), 3, 2, 2, None);
        for p in enumerate_pairs(&m2) {
            let (c, _) = m2.subject(&p.subject_id).unwrap();
            assert_eq!(c.name, p.category);
            assert!(c.backgrounds.iter().any(|b| b.id == p.background_id));
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = layout(dir.path(), 1, 1, 1, None);
        m.categories.clear();
        assert!(matches!(m.validate(None), Err(Error::Schema { field, .. }) if field == "categories"));

        let mut m = layout(dir.path(), 1, 2, 1, None);
        m.categories[0].backgrounds[1].bbox = BBox::new(3, 3, 2, 2);
        match m.validate(Some(dir.path())) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "categories[0].backgrounds[1].bbox"),
            other => panic!("{other:?}"),
        }
        let mut m = layout(dir.path(), 1, 1, 1, None);
        m.categories[0].subjects[0].references[0].path = "missing.png".into();
        assert!(matches!(m.validate(Some(dir.path())), Err(Error::Schema { .. })));
        fs::write(dir.path().join("bad.json"), "{\"version\":1}").unwrap();
        assert!(matches!(load_manifest(dir.path().join("bad.json")), Err(Error::Schema { .. })));
        assert!(matches!(load_manifest(dir.path().join("none.json")), Err(Error::MissingFile(_))));
    }

    fn small_world() -> ShapesWorldConfig {
        ShapesWorldConfig {
            corpus_per_category: 3,
            seed: 7,
            ..ShapesWorldConfig::default()
        }
    }

    fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn shapes_world_counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = ShapesWorldConfig {
            background_size: 64,
            ..small_world()
        };
        let m = generate_shapes_world(&cfg, a.path()).unwrap();
        generate_shapes_world(&cfg, b.path()).unwrap();
        let refs: usize = m.categories.iter().flat_map(|c| &c.subjects).map(|s| s.references.len()).sum();
        let bgs: usize = m.categories.iter().map(|c| c.backgrounds.len()).sum();
        assert_eq!((refs, bgs), (20, 8));
        assert_eq!(tree(a.path()), tree(b.path()));
        assert_eq!(load_manifest(a.path().join("manifest.json")).unwrap(), m);
        assert_eq!(Corpus::load_samples(a.path().join("corpus.json")).unwrap().len(), 6);
    }

    #[test]
    fn recorded_boxes_are_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for fam in 0..4 {
            for _ in 0..10 {
                let style = GlyphStyle::for_subject(fam, 0, 2);
                let state = rng.clone();
                let (with, bbox) = render_scene(32, &style, &mut rng);
                // Replay the same stream without the glyph and diff.
                let mut replay = state;
                let nominal = random_box(32, 0.5, 0.75, &mut replay);
                let without = render_backdrop(32, &nominal, &mut replay);
                let vals = (0..32 * 32)
                    .map(|i| (with.get(i / 32, i % 32) != without.get(i / 32, i % 32)) as u8)
                    .collect();
                let diff = crate::imaging::Mask::from_values(32, 32, vals).unwrap();
                let oracle = diff.bounding_box().unwrap();
                assert_eq!(bbox, oracle);
            }
        }
    }

    #[test]
    fn subjects_within_a_category_are_distinguishable() {
        use crate::metrics::{cosine, toy_embed};
        let dir = tempfile::tempdir().unwrap();
        let cfg = ShapesWorldConfig {
            n_categories: 4,
            subjects_per_category: 3,
            ..small_world()
        };
        let m = generate_shapes_world(&cfg, dir.path()).unwrap();
        for c in &m.categories {
            let embs: Vec<Vec<Vec<f64>>> = c
                .subjects
                .iter()
                .map(|s| {
                    s.references
                        .iter()
                        .map(|r| toy_embed(&load_png(dir.path().join(&r.path)).unwrap().crop(&r.bbox).unwrap()).unwrap())
                        .collect()
                })
                .collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    for a in &embs[i] {
                        for b in &embs[j] {
                            let cs = cosine(a, b);
                            assert!(cs < 0.98, "{} subjects {i},{j}: {cs}", c.name);
                        }
                    }
                }
            }
        }
    }
}
