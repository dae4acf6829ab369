//! Stub visual encoders and the text-prompt classifier weights.
//!
//! Synthetic images are "rendered" into feature grids from their seed and
//! ground-truth layout: every token gets noise plus a fixed positional code,
//! and occupied cells additionally carry class patterns. Real-feature mode
//! reads precomputed grids from embedding files instead.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cue_pipeline::{build_text_embedder, embed_mean, CueEncoderConfig};
use crate::data_model::{cell_of, HoiAnnotation, HoiClassRegistry, SyntheticSceneConfig};
use crate::numerics::Matrix;


const FILE_MAGIC: &[u8; 4] = b"HCVF";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {image_id}: no {what} (needs a feature seed or an embedding file)")]
    Missing { image_id: String, what: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("image {image_id}: expected a {expected:?} feature grid, found {found:?}")]
    Shape { image_id: String, expected: (usize, usize), found: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    /// Side length of the square token grid.
    pub grid: usize,
    pub c_d: usize,
    pub c_i: usize,
    pub noise: f64,
    /// Seed of the class patterns and positional codes shared by all images.
    pub pattern_seed: u64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self { grid: 4, c_d: 64, c_i: 64, noise: 0.3, pattern_seed: 7 }
    }
}

impl VisualConfig {
    pub fn for_scenes(scenes: &SyntheticSceneConfig, c_d: usize, c_i: usize) -> Self {
        Self { grid: scenes.grid, c_d, c_i, noise: scenes.noise, ..Self::default() }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    /// Instance-branch grid, `tokens × c_d`.
    pub f_i: Matrix,
    /// Interaction-branch grid, `tokens × c_i`.
    pub f_c: Matrix,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    Instance,
    Interaction,
}

impl Branch {
    fn tag(self) -> u64 {
        match self {
            Branch::Instance => 0x1a5e_0001,
            Branch::Interaction => 0xc11f_0002,
        }
    }
}

#[derive(Clone, Copy)]
enum Pattern {
    Position(usize),
    Human,
    Verb(usize),
    Object(usize),
    Direction(usize),
}

impl Pattern {
    fn key(self) -> u64 {
        match self {
            Pattern::Position(i) => (1 << 32) | i as u64,
            Pattern::Human => 2 << 32,
            Pattern::Verb(v) => (3 << 32) | v as u64,
            Pattern::Object(o) => (4 << 32) | o as u64,
            Pattern::Direction(d) => (5 << 32) | d as u64,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn gaussian(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn pattern(cfg: &VisualConfig, branch: Branch, p: Pattern, width: usize) -> Vec<f64> {
    gaussian(splitmix(cfg.pattern_seed ^ splitmix(branch.tag() ^ splitmix(p.key()))), width)
}

/// Index of the 4-neighbour direction from `from` to `to` (right, down, left, up; 4 otherwise).
fn direction(from: usize, to: usize, grid: usize) -> usize {
    let (fr, fc) = ((from / grid) as isize, (from % grid) as isize);
    let (tr, tc) = ((to / grid) as isize, (to % grid) as isize);
    match (tr - fr, tc - fc) {
        (0, 1) => 0,
        (1, 0) => 1,
        (0, -1) => 2,
        (-1, 0) => 3,
        _ => 4,
    }
}

fn render(image: &HoiAnnotation, seed: u64, cfg: &VisualConfig, branch: Branch) -> Matrix {
    let width = match branch {
        Branch::Instance => cfg.c_d,
        Branch::Interaction => cfg.c_i,
    };
    let tokens = cfg.tokens();
    let noise = gaussian(splitmix(seed ^ splitmix(branch.tag())), tokens * width);
    let mut f = Array2::from_shape_vec((tokens, width), noise).expect("noise length matches grid");
    f.mapv_inplace(|v| v * cfg.noise);
    let mut add = |cell: usize, p: Pattern| {
        for (x, v) in f.row_mut(cell).iter_mut().zip(pattern(cfg, branch, p, width)) {
            *x += v;
        }
    };
    for t in 0..tokens {
        add(t, Pattern::Position(t));
    }
    for gt in &image.gts {
        let h = cell_of(&gt.hbox, cfg.grid);
        let o = cell_of(&gt.obox, cfg.grid);
        add(h, Pattern::Human);
        add(h, Pattern::Verb(gt.verb));
        add(o, Pattern::Object(gt.obj));
        add(o, Pattern::Direction(direction(o, h, cfg.grid)));
    }
    f
}

/// Reference pattern planted for a verb at a human cell (test and probe use).
pub fn verb_pattern(cfg: &VisualConfig, verb: usize, interaction_branch: bool) -> Vec<f64> {
    let (branch, width) =
        if interaction_branch { (Branch::Interaction, cfg.c_i) } else { (Branch::Instance, cfg.c_d) };
    pattern(cfg, branch, Pattern::Verb(verb), width)
}

/// Reference pattern planted for an object class at an object cell.
pub fn object_pattern(cfg: &VisualConfig, obj: usize, interaction_branch: bool) -> Vec<f64> {
    let (branch, width) =
        if interaction_branch { (Branch::Interaction, cfg.c_i) } else { (Branch::Instance, cfg.c_d) };
    pattern(cfg, branch, Pattern::Object(obj), width)
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn encode(
    image: &HoiAnnotation,
    cfg: &VisualConfig,
    base: Option<&Path>,
    branch: Branch,
) -> Result<Matrix, EncoderError> {
    let (file, width, what) = match branch {
        Branch::Instance => (&image.source.instance_features, cfg.c_d, "instance features"),
        Branch::Interaction => (&image.source.interaction_features, cfg.c_i, "interaction features"),
    };
    if let Some(path) = file {
        let m = read_embedding_file(&resolve(base, path))?;
        if m.ncols() != width || m.nrows() == 0 {
            return Err(EncoderError::Shape {
                image_id: image.id.clone(),
                expected: (cfg.tokens(), width),
                found: m.dim(),
            });
        }
        return Ok(m);
    }
    match image.source.feature_seed {
        Some(seed) => Ok(render(image, seed, cfg, branch)),
        None => Err(EncoderError::Missing { image_id: image.id.clone(), what }),
    }
}

/// F_i: the instance-branch feature grid.
pub fn encode_instance_visual(
    image: &HoiAnnotation,
    cfg: &VisualConfig,
    base: Option<&Path>,
) -> Result<Matrix, EncoderError> {
    encode(image, cfg, base, Branch::Instance)
}

/// F_c: the interaction-branch feature grid, from an independent seed stream.
pub fn encode_interaction_visual(
    image: &HoiAnnotation,
    cfg: &VisualConfig,
    base: Option<&Path>,
) -> Result<Matrix, EncoderError> {
    encode(image, cfg, base, Branch::Interaction)
}

pub fn encode_visual(
    image: &HoiAnnotation,
    cfg: &VisualConfig,
    base: Option<&Path>,
) -> Result<VisualFeatures, EncoderError> {
    Ok(VisualFeatures {
        f_i: encode_instance_visual(image, cfg, base)?,
        f_c: encode_interaction_visual(image, cfg, base)?,
    })
}

/// Writes `m` as `HCVF`, u32 rows, u32 cols, then row-major little-endian f64.
pub fn write_embedding_file(path: &Path, m: &Matrix) -> Result<(), EncoderError> {
    let io = |source| EncoderError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::with_capacity(12 + 8 * m.len());
    buf.extend_from_slice(FILE_MAGIC);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_embedding_file(path: &Path) -> Result<Matrix, EncoderError> {
    let bytes = fs::read(path).map_err(|source| EncoderError::Io { path: path.to_path_buf(), source })?;
    let bad = |reason: String| EncoderError::Format { path: path.to_path_buf(), reason };
    if bytes.len() < 12 || &bytes[..4] != FILE_MAGIC {
        return Err(bad("missing HCVF header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 8 {
        return Err(bad(format!("{rows}x{cols} header but {} payload bytes", body.len())));
    }
    let data: Vec<f64> =
        body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite value at index {i}")));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

/// Text used to embed one HOI class.
pub fn hoi_prompt(verb: &str, object: &str) -> String {
    format!("a photo of a person {} a {}", verb.replace('_', " "), object.replace('_', " "))
}

/// One L2-normalized text embedding per HOI class, in registry order.
pub fn build_classifier_weights(registry: &HoiClassRegistry, cfg: &CueEncoderConfig) -> Matrix {
    let embed = build_text_embedder(cfg);
    let mut w = Array2::zeros((registry.num_classes(), cfg.d_text));
    for (i, c) in registry.classes().iter().enumerate() {
        let text = hoi_prompt(&registry.verbs()[c.verb], &registry.objects()[c.object]);
        let e = embed_mean(&text, &embed, cfg);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (dst, v) in w.row_mut(i).iter_mut().zip(e) {
            *dst = v / norm;
        }
    }
    w
}
