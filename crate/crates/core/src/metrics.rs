//! Evaluation: foreground fidelity (mean cosine similarity of generated
//! foregrounds to every reference foreground) and Fréchet distance between
//! whole-image embedding sets.
//!
//! Two small built-in embedders fill the two fidelity slots of the report:
//! `toy-color` (coarse color layout plus hue histogram) and `toy-structure`
//! (coarse luminance layout). Precomputed embeddings from any external
//! model can be plugged in through embedding files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::composer::{pair_dir, read_pair};
use crate::datasets::{enumerate_pairs, Manifest};
use crate::error::{Error, Result};
use crate::imaging::{load_png, resize, rgb_to_hsv, write_atomic, BBox, Raster};

pub const REPORT_VERSION: u32 = 1;
pub const TOY_DIM: usize = 64;
pub const HUE_BINS: usize = 16;
pub const COV_REGULARIZATION: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-8;

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// 4x4 grid of mean RGB (48 values) followed by a 16-bin hue histogram
/// weighted by chroma, computed on a 64x64 resize. Each part is scaled to
/// unit length before the whole vector is normalized, so neither part
/// dominates by construction.
pub fn toy_embed(r: &Raster) -> Result<Vec<f64>> {
    let im = resize(r, 64, 64)?;
    let mut grid = vec![0.0f64; 48];
    let mut hist = vec![0.0f64; HUE_BINS];
    for y in 0..64 {
        for x in 0..64 {
            let p = im.get(y, x);
            let cell = (y / 16) * 4 + x / 16;
            for c in 0..3 {
                grid[cell * 3 + c] += p[c] as f64 / 256.0;
            }
            let (h, s, v) = rgb_to_hsv(p);
            let bin = ((h * HUE_BINS as f64) as usize).min(HUE_BINS - 1);
            hist[bin] += s * v;
        }
    }
    let grid_ok = normalize(&mut grid);
    let hist_ok = normalize(&mut hist);
    let mut out = grid;
    out.extend(hist);
    if !(grid_ok || hist_ok) {
        // All-black input: fall back to a fixed unit vector.
        out[..48].iter_mut().for_each(|x| *x = 1.0);
    }
    normalize(&mut out);
    Ok(out)
}

/// 8x8 grid of mean luminance on a 64x64 resize, mean-centred and
/// normalized. Flat images map to the constant unit vector.
pub fn toy_structure_embed(r: &Raster) -> Result<Vec<f64>> {
    let im = resize(r, 64, 64)?;
    let mut grid = vec![0.0f64; 64];
    for y in 0..64 {
        for x in 0..64 {
            let [r, g, b] = im.get(y, x).map(|c| c as f64);
            grid[(y / 8) * 8 + x / 8] += (0.299 * r + 0.587 * g + 0.114 * b) / 64.0;
        }
    }
    let mean = grid.iter().sum::<f64>() / 64.0;
    grid.iter_mut().for_each(|x| *x -= mean);
    if !normalize(&mut grid) || grid.iter().all(|x| x.abs() < 1e-12) {
        grid = vec![0.125; 64];
    }
    Ok(grid)
}

/// One vector per source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub source: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub name: String,
    pub d: usize,
    pub count: usize,
    /// Source ids in row order.
    #[serde(default)]
    pub ids: Vec<String>,
}

/// Writes a JSON header line followed by `count x d` little-endian `f32`.
pub fn write_embeddings(path: &Path, name: &str, items: &[Embedding]) -> Result<()> {
    let d = items.first().map_or(0, |e| e.vector.len());
    if items.iter().any(|e| e.vector.len() != d) {
        return Err(Error::ShapeMismatch("embeddings differ in dimension".into()));
    }
    let header = EmbeddingHeader {
        name: name.to_string(),
        d,
        count: items.len(),
        ids: items.iter().map(|e| e.source.clone()).collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for e in items {
        for &v in &e.vector {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingHeader, Vec<Embedding>)> {
    let f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut rd = BufReader::new(f);
    let mut line = String::new();
    rd.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: EmbeddingHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::schema(format!("{}: header", path.display()), e.to_string()))?;
    if !header.ids.is_empty() && header.ids.len() != header.count {
        return Err(Error::schema(format!("{}: ids", path.display()), "length differs from count"));
    }
    let mut body = Vec::new();
    rd.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != header.count * header.d * 4 {
        return Err(Error::schema(
            format!("{}: body", path.display()),
            format!("expected {} bytes, found {}", header.count * header.d * 4, body.len()),
        ));
    }
    let items = body
        .chunks_exact((header.d * 4).max(1))
        .take(header.count)
        .enumerate()
        .map(|(i, row)| Embedding {
            source: header.ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
            vector: row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        })
        .collect();
    Ok((header, items))
}

/// Precomputed vectors looked up by source id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    pub d: usize,
    pub rows: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: &Path) -> Result<Self> {
        let (h, items) = read_embeddings(path)?;
        Ok(Self {
            name: h.name,
            d: h.d,
            rows: items.into_iter().map(|e| (e.source, e.vector)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    ToyColor,
    ToyStructure,
    External(EmbeddingTable),
}

impl Embedder {
    pub fn name(&self) -> &str {
        match self {
            Self::ToyColor => "toy-color",
            Self::ToyStructure => "toy-structure",
            Self::External(t) => &t.name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::External(t) => t.d,
            _ => TOY_DIM,
        }
    }

    /// Embeds `r`; external tables ignore the pixels and look up `source`.
    pub fn embed(&self, r: &Raster, source: &str) -> Result<Vec<f64>> {
        match self {
            Self::ToyColor => toy_embed(r),
            Self::ToyStructure => toy_structure_embed(r),
            Self::External(t) => t
                .rows
                .get(source)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no external embedding for {source:?} in {}", t.name))),
        }
    }

    pub fn embed_foreground(&self, r: &Raster, b: &BBox, source: &str) -> Result<Vec<f64>> {
        self.embed(&r.crop(b)?, source)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per generated vector, the mean cosine to all references.
pub fn per_sample_fidelity(gens: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if gens.is_empty() || refs.is_empty() {
        return Err(Error::InvalidArgument("fidelity needs at least one generated and one reference embedding".into()));
    }
    Ok(gens
        .iter()
        .map(|g| refs.iter().map(|r| cosine(g, r)).sum::<f64>() / refs.len() as f64)
        .collect())
}

/// Mean over generated vectors of their mean cosine to all references.
pub fn fidelity_from_embeddings(gens: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64> {
    let s = per_sample_fidelity(gens, refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Fidelity of generated images to references, both cropped to their boxes.
pub fn subject_fidelity(gens: &[(Raster, BBox)], refs: &[(Raster, BBox)], e: &Embedder) -> Result<f64> {
    let emb = |items: &[(Raster, BBox)]| -> Result<Vec<Vec<f64>>> {
        items.iter().map(|(r, b)| e.embed_foreground(r, b, "")).collect()
    };
    fidelity_from_embeddings(&emb(gens)?, &emb(refs)?)
}

/// Principal square root of a symmetric PSD matrix by eigendecomposition,
/// with negative eigenvalues clipped to zero.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::ShapeMismatch(format!("matrix is {}x{}", s.nrows(), s.ncols())));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidArgument(format!("matrix not symmetric (max deviation {asym:e})")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(xs: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = xs.len();
    let d = xs.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("empty embedding set".into()))?;
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::ShapeMismatch("embeddings differ in dimension".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = if n > 1 {
        centred.transpose() * &centred / (n - 1) as f64
    } else {
        DMatrix::zeros(d, d)
    };
    Ok(GaussianFit { mean, cov, n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    pub value: f64,
    /// Set when either set has at most `d` members.
    pub degraded: bool,
}

/// `‖μA−μB‖² + Tr(ΣA + ΣB − 2 (ΣA^½ ΣB ΣA^½)^½)` with `1e-6·I` added to
/// both covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    let ga = fit_gaussian(a)?;
    let gb = fit_gaussian(b)?;
    let d = ga.mean.len();
    if gb.mean.len() != d {
        return Err(Error::ShapeMismatch(format!("dimensions {d} and {}", gb.mean.len())));
    }
    let eye = DMatrix::<f64>::identity(d, d) * COV_REGULARIZATION;
    let sa = &ga.cov + &eye;
    let sb = &gb.cov + &eye;
    let ra = matrix_sqrt_psd(&sa)?;
    let mid = &ra * &sb * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&mid)?.trace();
    let value = (&ga.mean - &gb.mean).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(FrechetResult {
        value: value.max(0.0),
        degraded: ga.n <= d || gb.n <= d,
    })
}

/// Real images for FID: a directory laid out `<category>/<name>.png` (or
/// flat), or a precomputed embedding file whose ids start `<category>/`.
#[derive(Clone, Debug, PartialEq)]
pub enum RealSet {
    Images(PathBuf),
    Embeddings(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub clip: Embedder,
    pub dino: Embedder,
    pub fid: Embedder,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clip: Embedder::ToyColor,
            dino: Embedder::ToyStructure,
            fid: Embedder::ToyColor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub foreground: String,
    pub fidelity: String,
    pub aggregation: String,
    pub fid_images: String,
    pub covariance_regularization: f64,
    pub eigenvalue_clip: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            foreground: "bbox crop".into(),
            fidelity: "per sample: mean cosine to all reference foregrounds; per pair: mean over samples".into(),
            aggregation: "category and overall: mean over pairs".into(),
            fid_images: "whole composites vs real set".into(),
            covariance_regularization: COV_REGULARIZATION,
            eigenvalue_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub clip_fg: Option<f64>,
    pub dino_fg: Option<f64>,
    pub fid: Option<f64>,
    pub fid_degraded: bool,
    pub n_pairs: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub category: String,
    pub subject_id: String,
    pub background_id: String,
    pub clip_samples: Vec<f64>,
    pub dino_samples: Vec<f64>,
    pub clip_fg: f64,
    pub dino_fg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderNames {
    pub clip_fg: String,
    pub dino_fg: String,
    pub fid: String,
    pub real: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub protocol: Protocol,
    pub embedders: EmbedderNames,
    pub overall: Scores,
    pub per_category: BTreeMap<String, Scores>,
    pub pairs: Vec<PairScores>,
    pub missing: Vec<String>,
    pub partial: bool,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in rd {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.extend(png_files(&p)?);
        } else if p.extension().is_some_and(|x| x == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// `(category, embedding)` for each real image.
fn real_embeddings(real: &RealSet, e: &Embedder) -> Result<(String, Vec<(Option<String>, Vec<f64>)>)> {
    match real {
        RealSet::Images(root) => {
            let files = png_files(root)?;
            let items = files
                .iter()
                .map(|p| {
                    let rel = p.strip_prefix(root).unwrap_or(p);
                    let cat = (rel.components().count() > 1)
                        .then(|| rel.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned()))
                        .flatten();
                    Ok((cat, e.embed(&load_png(p)?, &rel.to_string_lossy())?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((e.name().to_string(), items))
        }
        RealSet::Embeddings(path) => {
            let (h, items) = read_embeddings(path)?;
            let items = items
                .into_iter()
                .map(|it| {
                    let cat = it.source.split_once('/').map(|(c, _)| c.to_string());
                    (cat, it.vector)
                })
                .collect();
            Ok((h.name, items))
        }
    }
}

/// Scores a generation tree `gen_root/<subject>/<background>/<k>.png`
/// against the manifest's references and a real image set. Pairs without a
/// completion marker are listed in `missing` and the report is flagged
/// partial. External embedders are keyed by `<subject>/<background>/<k>.png`
/// for generated images and by the manifest path for references.
pub fn evaluate_run(
    gen_root: &Path,
    manifest: &Manifest,
    manifest_root: &Path,
    real: &RealSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    let mut gen_fid: Vec<(String, Vec<f64>)> = Vec::new();
    let mut ref_cache: HashMap<String, (Vec<Vec<f64>>, Vec<Vec<f64>>)> = HashMap::new();
    for p in enumerate_pairs(manifest) {
        let dir = pair_dir(gen_root, &p.subject_id, &p.background_id);
        let samples = match read_pair(&dir) {
            Ok(s) => s,
            Err(_) => {
                missing.push(format!("{}/{}", p.subject_id, p.background_id));
                continue;
            }
        };
        if !ref_cache.contains_key(&p.subject_id) {
            let (_, subj) = manifest.subject(&p.subject_id).expect("pair from manifest");
            let mut clip = Vec::new();
            let mut dino = Vec::new();
            for r in &subj.references {
                let path = manifest_root.join(&r.path);
                let im = load_png(&path)?;
                clip.push(cfg.clip.embed_foreground(&im, &r.bbox, &r.path)?);
                dino.push(cfg.dino.embed_foreground(&im, &r.bbox, &r.path)?);
            }
            ref_cache.insert(p.subject_id.clone(), (clip, dino));
        }
        let (ref_clip, ref_dino) = &ref_cache[&p.subject_id];
        let mut g_clip = Vec::new();
        let mut g_dino = Vec::new();
        for (k, (im, meta)) in samples.iter().enumerate() {
            let src = format!("{}/{}/{k}.png", p.subject_id, p.background_id);
            g_clip.push(cfg.clip.embed_foreground(im, &meta.bbox, &src)?);
            g_dino.push(cfg.dino.embed_foreground(im, &meta.bbox, &src)?);
            gen_fid.push((p.category.clone(), cfg.fid.embed(im, &src)?));
        }
        let clip_samples = per_sample_fidelity(&g_clip, ref_clip)?;
        let dino_samples = per_sample_fidelity(&g_dino, ref_dino)?;
        pairs.push(PairScores {
            category: p.category.clone(),
            subject_id: p.subject_id.clone(),
            background_id: p.background_id.clone(),
            clip_fg: mean(&clip_samples).expect("non-empty"),
            dino_fg: mean(&dino_samples).expect("non-empty"),
            clip_samples,
            dino_samples,
        });
    }

    let (real_name, real_items) = real_embeddings(real, &cfg.fid)?;
    let fid_for = |cat: Option<&str>| -> Result<(Option<f64>, bool)> {
        let g: Vec<Vec<f64>> = gen_fid
            .iter()
            .filter(|(c, _)| cat.is_none_or(|x| x == c))
            .map(|(_, v)| v.clone())
            .collect();
        let r: Vec<Vec<f64>> = real_items
            .iter()
            .filter(|(c, _)| cat.is_none_or(|x| c.as_deref() == Some(x)))
            .map(|(_, v)| v.clone())
            .collect();
        if g.is_empty() || r.is_empty() {
            return Ok((None, true));
        }
        let f = frechet_distance(&g, &r)?;
        Ok((Some(f.value), f.degraded))
    };
    let scores = |ps: &[&PairScores], cat: Option<&str>| -> Result<Scores> {
        let (fid, fid_degraded) = fid_for(cat)?;
        Ok(Scores {
            clip_fg: mean(&ps.iter().map(|p| p.clip_fg).collect::<Vec<_>>()),
            dino_fg: mean(&ps.iter().map(|p| p.dino_fg).collect::<Vec<_>>()),
            fid,
            fid_degraded,
            n_pairs: ps.len(),
            n_samples: ps.iter().map(|p| p.clip_samples.len()).sum(),
        })
    };
    let mut per_category = BTreeMap::new();
    for c in &manifest.categories {
        let ps: Vec<&PairScores> = pairs.iter().filter(|p| p.category == c.name).collect();
        per_category.insert(c.name.clone(), scores(&ps, Some(&c.name))?);
    }
    let all: Vec<&PairScores> = pairs.iter().collect();
    let overall = scores(&all, None)?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        protocol: Protocol::default(),
        embedders: EmbedderNames {
            clip_fg: cfg.clip.name().to_string(),
            dino_fg: cfg.dino.name().to_string(),
            fid: cfg.fid.name().to_string(),
            real: real_name,
        },
        overall,
        per_category,
        pairs,
        partial: !missing.is_empty(),
        missing,
    })
}
