//! Desk-scale synthetic scenes.
//!
//! Each scene places human/object pairs on the centres of a square feature
//! grid. Box sizes are fixed functions of verb (human) and object class
//! (object), and the stub visual encoder plants class patterns at the
//! occupied cells, so every label is recoverable from the features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, DataError, FeatureSource, HoiAnnotation, HoiClassRegistry, HoiInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub images: usize,
    /// Inclusive range of human/object pairs per scene.
    pub pairs_per_scene: (usize, usize),
    /// Side length of the square feature grid.
    pub grid: usize,
    /// Standard deviation of the feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self { images: 20, pairs_per_scene: (1, 2), grid: 4, noise: 0.3, seed: 0 }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.pairs_per_scene;
        if lo == 0 || lo > hi {
            return Err(DataError::Config(format!("pairs_per_scene range {lo}..={hi} is empty or zero")));
        }
        if self.grid < 2 {
            return Err(DataError::Config(format!("grid {} must be at least 2", self.grid)));
        }
        if 2 * hi > self.grid * self.grid {
            return Err(DataError::Config(format!(
                "{hi} pairs do not fit on a {0}x{0} grid",
                self.grid
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(DataError::Config(format!("noise {} must be finite and nonnegative", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub registry: HoiClassRegistry,
    pub annotations: Vec<HoiAnnotation>,
    /// Per-image feature seeds, parallel to `annotations`.
    pub feature_seeds: Vec<u64>,
}

/// Human box extent for a verb, in grid-cell units.
fn human_extent(verb: usize) -> (f64, f64) {
    (0.6 + 0.08 * (verb % 5) as f64, 0.8 + 0.05 * (verb % 4) as f64)
}

/// Object box extent for an object class, in grid-cell units.
fn object_extent(obj: usize) -> (f64, f64) {
    (0.55 + 0.09 * (obj % 5) as f64, 0.6 + 0.07 * (obj % 6) as f64)
}

fn cell_box(cell: usize, grid: usize, (w, h): (f64, f64)) -> BBox {
    let g = grid as f64;
    let cx = ((cell % grid) as f64 + 0.5) / g;
    let cy = ((cell / grid) as f64 + 0.5) / g;
    BBox::from_cxcywh([cx, cy, w / g, h / g])
}

/// Grid cell containing a box centre.
pub fn cell_of(b: &BBox, grid: usize) -> usize {
    let [cx, cy, _, _] = b.to_cxcywh();
    let col = ((cx * grid as f64).floor() as usize).min(grid - 1);
    let row = ((cy * grid as f64).floor() as usize).min(grid - 1);
    row * grid + col
}

fn neighbours(cell: usize, grid: usize) -> Vec<usize> {
    let (r, c) = (cell / grid, cell % grid);
    let mut out = Vec::with_capacity(4);
    if c + 1 < grid {
        out.push(cell + 1);
    }
    if r + 1 < grid {
        out.push(cell + grid);
    }
    if c > 0 {
        out.push(cell - 1);
    }
    if r > 0 {
        out.push(cell - grid);
    }
    out
}

/// Generates scenes over `registry` (the bundled fixture registry when `None`).
pub fn generate_synthetic(
    cfg: &SyntheticSceneConfig,
    registry: Option<HoiClassRegistry>,
) -> Result<SyntheticDataset, DataError> {
    cfg.validate()?;
    let mut registry = registry.unwrap_or_else(HoiClassRegistry::fixture);
    if registry.num_classes() == 0 {
        return Err(DataError::Config("registry has no HOI classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = cfg.grid * cfg.grid;
    let mut annotations = Vec::with_capacity(cfg.images);
    let mut feature_seeds = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let pairs = rng.gen_range(cfg.pairs_per_scene.0..=cfg.pairs_per_scene.1);
        let mut used = vec![false; cells];
        let mut gts = Vec::with_capacity(pairs);
        while gts.len() < pairs {
            let mut order: Vec<usize> = (0..cells).filter(|&c| !used[c]).collect();
            order.shuffle(&mut rng);
            let placed = order.into_iter().find_map(|h| {
                let free: Vec<usize> = neighbours(h, cfg.grid).into_iter().filter(|&n| !used[n]).collect();
                free.choose(&mut rng).map(|&o| (h, o))
            });
            let Some((hcell, ocell)) = placed else {
                return Err(DataError::Config(format!("could not place {pairs} pairs on the grid")));
            };
            used[hcell] = true;
            used[ocell] = true;
            let class = registry.classes()[rng.gen_range(0..registry.num_classes())];
            gts.push(HoiInstance {
                hbox: cell_box(hcell, cfg.grid, human_extent(class.verb)),
                obox: cell_box(ocell, cfg.grid, object_extent(class.object)),
                obj: class.object,
                verb: class.verb,
            });
        }
        let seed: u64 = rng.gen();
        feature_seeds.push(seed);
        annotations.push(HoiAnnotation {
            id: format!("synth_{i:05}"),
            gts,
            source: FeatureSource { feature_seed: Some(seed), ..Default::default() },
        });
    }
    registry.recount(&annotations)?;
    Ok(SyntheticDataset { registry, annotations, feature_seeds })
}
