//! Run configuration, dataset preparation, the training loop and the
//! file-producing commands behind the `hcvc` binary.

mod commands;
mod train;


use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cue_pipeline::{
    generate_cues_batch, CueCache, CueEncoderConfig, CueError, CueSet, CueSource, CueStats, VlmClient, VlmConfig,
};
use crate::data_model::{generate_synthetic, load_annotations, HoiAnnotation, HoiClassRegistry, SyntheticSceneConfig};
use crate::encoders::{build_classifier_weights, encode_visual, VisualConfig};
use crate::evaluation::{
    filter_training_set, make_zero_shot_split_with, SplitSetting, SplitSizes, SplitSpec, DEFAULT_TOP_K,
};
use crate::fusion_decoder::{CheckpointError, FusionConfig, Model, ModelConfig, ModelInput, Preset};
use crate::matching_loss::{build_targets, LossWeights, Target};
use crate::numerics::Matrix;

pub use commands::{
    cmd_cues, cmd_eval, cmd_splits, cmd_synth, cmd_train, evaluate, loss_curve_csv, CueReport, EvalSummary, Manifest,
    TrainSummary, CHECKPOINT_FILE, EVAL_MANIFEST_FILE, LOSS_CURVE_FILE, MANIFEST_FILE, PR_CURVES_FILE, RESULTS_FILE,
};
pub use train::{item_loss_and_grads, train, AdamW, EpochLog};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("no cues for {} image(s): {}", .0.len(), summarize_failures(.0))]
    MissingCues(Vec<(String, String)>),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (image {image_id})")]
    NonFinite { epoch: usize, batch: usize, image_id: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn summarize_failures(f: &[(String, String)]) -> String {
    let mut parts: Vec<String> = f.iter().take(5).map(|(id, e)| format!("{id}: {e}")).collect();
    if f.len() > 5 {
        parts.push(format!("and {} more", f.len() - 5));
    }
    parts.join("; ")
}

impl HarnessError {
    /// 2 for config errors, 3 for data errors, 4 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::MissingCues(_) => 3,
            HarnessError::Checkpoint(CheckpointError::Io { .. }) => 1,
            HarnessError::Checkpoint(_) => 3,
            HarnessError::NonFinite { .. } | HarnessError::Numeric(_) => 4,
            HarnessError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm per step.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 16,
            epochs: 100,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(0.1),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("optimizer.lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("optimizer.batch_size must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("optimizer.weight_decay {} must be nonnegative", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("optimizer.eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("optimizer.grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated scenes over the bundled registry.
    Synthetic(SyntheticSceneConfig),
    /// An annotation JSON file. Images without embedding files need a feature seed.
    Annotations {
        path: PathBuf,
        /// Base directory of relative embedding-file paths (defaults to the file's directory).
        #[serde(default)]
        feature_root: Option<PathBuf>,
        #[serde(default = "default_grid")]
        grid: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_grid() -> usize {
    4
}

fn default_noise() -> f64 {
    0.3
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSceneConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueMode {
    /// Fixture files from `cues.dir`, or texts rendered from synthetic scenes.
    #[default]
    Fixture,
    /// Only cues already in the cache file.
    Cache,
    /// Query the VLM endpoint on cache misses.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CueConfig {
    pub mode: CueMode,
    pub dir: Option<PathBuf>,
    /// JSONL cache file; an in-memory cache is used when absent.
    pub cache: Option<PathBuf>,
    /// Falls back to `HCVC_VLM_ENDPOINT`.
    pub endpoint: String,
    pub image_root: Option<PathBuf>,
    pub timeout_ms: u64,
    pub retries: usize,
    pub backoff_ms: u64,
    pub inline_images: bool,
    pub max_in_flight: usize,
}

impl Default for CueConfig {
    fn default() -> Self {
        let v = VlmConfig::new("");
        Self {
            mode: CueMode::Fixture,
            dir: None,
            cache: None,
            endpoint: String::new(),
            image_root: None,
            timeout_ms: v.timeout_ms,
            retries: v.retries,
            backoff_ms: v.backoff_ms,
            inline_images: false,
            max_in_flight: 4,
        }
    }
}

impl CueConfig {
    pub fn vlm_config(&self) -> VlmConfig {
        VlmConfig {
            timeout_ms: self.timeout_ms,
            retries: self.retries,
            backoff_ms: self.backoff_ms,
            inline_images: self.inline_images,
            ..VlmConfig::new(self.endpoint.clone())
        }
        .with_env()
    }
}

/// Everything a run depends on. Serialized verbatim into the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Applied on top of `model` when set.
    pub preset: Option<Preset>,
    pub model: FusionConfig,
    pub cue_encoder: CueEncoderConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub split: SplitSetting,
    pub split_seed: u64,
    pub split_sizes: SplitSizes,
    pub cues: CueConfig,
    /// Seed of the stub encoder's class patterns.
    pub pattern_seed: u64,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: None,
            model: FusionConfig::default(),
            cue_encoder: CueEncoderConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            split: SplitSetting::Regular,
            split_seed: 0,
            split_sizes: SplitSizes::default(),
            cues: CueConfig::default(),
            pattern_seed: VisualConfig::default().pattern_seed,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl RunConfig {
    /// The fusion config with the preset applied.
    pub fn fusion(&self) -> FusionConfig {
        let mut f = self.model.clone();
        if let Some(p) = self.preset {
            p.apply(&mut f);
        }
        f
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.fusion().validate().map_err(HarnessError::Config)?;
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.optimizer.validate()?;
        if self.top_k == 0 {
            return Err(HarnessError::Config("top_k must be positive".into()));
        }
        if let DataConfig::Synthetic(s) = &self.data {
            s.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_config(&self, registry: &HoiClassRegistry) -> ModelConfig {
        ModelConfig {
            fusion: self.fusion(),
            cue: self.cue_encoder.clone(),
            num_objects: registry.num_objects(),
            num_classes: registry.num_classes(),
        }
    }

    fn visual_config(&self, fusion: &FusionConfig) -> VisualConfig {
        let (grid, noise) = match &self.data {
            DataConfig::Synthetic(s) => (s.grid, s.noise),
            DataConfig::Annotations { grid, noise, .. } => (*grid, *noise),
        };
        VisualConfig { grid, c_d: fusion.c_d, c_i: fusion.c_i, noise, pattern_seed: self.pattern_seed }
    }
}

/// Seeds derived from the run seed, one per consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub model_init: u64,
    pub shuffle: u64,
    pub split: u64,
}

impl RunSeeds {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            run: cfg.seed,
            model_init: splitmix(cfg.seed ^ 0x6d6f_6465_6c00),
            shuffle: splitmix(cfg.seed ^ 0x7368_7566_6600),
            split: cfg.split_seed,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Images and registry before cue generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: HoiClassRegistry,
    pub annotations: Vec<HoiAnnotation>,
    pub feature_root: Option<PathBuf>,
    pub synthetic: bool,
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset, HarnessError> {
    match cfg {
        DataConfig::Synthetic(s) => {
            let d = generate_synthetic(s, None).map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(Dataset { registry: d.registry, annotations: d.annotations, feature_root: None, synthetic: true })
        }
        DataConfig::Annotations { path, feature_root, .. } => {
            let (registry, annotations) = load_annotations(path).map_err(|e| HarnessError::Data(e.to_string()))?;
            let root = feature_root.clone().or_else(|| path.parent().map(Path::to_path_buf));
            Ok(Dataset { registry, annotations, feature_root: root, synthetic: false })
        }
    }
}

/// Resolves cues for every image, in image order, without failing on the first miss.
pub fn resolve_cues(cfg: &CueConfig, data: &Dataset) -> Result<(Vec<Result<CueSet, CueError>>, CueStats), HarnessError> {
    let cache = match &cfg.cache {
        Some(p) => CueCache::open(p).map_err(|e| HarnessError::Data(e.to_string()))?,
        None => CueCache::in_memory(),
    };
    let client;
    let source = match cfg.mode {
        CueMode::Fixture => match (&cfg.dir, data.synthetic) {
            (Some(dir), _) => CueSource::FixtureDir(dir.clone()),
            (None, true) => CueSource::Synthetic(&data.registry),
            (None, false) => {
                return Err(HarnessError::Config("cue mode `fixture` needs cues.dir for annotation data".into()))
            }
        },
        CueMode::Cache => {
            if cfg.cache.is_none() {
                return Err(HarnessError::Config("cue mode `cache` needs cues.cache".into()));
            }
            CueSource::CacheOnly
        }
        CueMode::Live => {
            let vlm = cfg.vlm_config();
            if vlm.endpoint.is_empty() {
                return Err(HarnessError::Config("cue mode `live` needs cues.endpoint or HCVC_VLM_ENDPOINT".into()));
            }
            client = VlmClient::new(vlm).map_err(|e| HarnessError::Config(e.to_string()))?;
            CueSource::Live { client: &client, image_root: cfg.image_root.clone() }
        }
    };
    Ok(generate_cues_batch(&data.annotations, &source, &cache, cfg.max_in_flight))
}

/// Cues for every image; any image without cues is an error listing all failures.
pub fn collect_cues(cfg: &CueConfig, data: &Dataset) -> Result<(Vec<CueSet>, CueStats), HarnessError> {
    let (results, stats) = resolve_cues(cfg, data)?;
    let mut cues = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (ann, r) in data.annotations.iter().zip(results) {
        match r {
            Ok(c) => cues.push(c),
            Err(e) => failures.push((ann.id.clone(), e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok((cues, stats))
    } else {
        Err(HarnessError::MissingCues(failures))
    }
}

/// A dataset with cues, split, encoded inputs and training targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    pub split: SplitSpec,
    pub cue_stats: CueStats,
    pub inputs: Vec<ModelInput>,
    /// Targets after removing unseen classes, parallel to `inputs`.
    pub train_targets: Vec<Vec<Target>>,
    pub class_rows: Matrix,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let split = make_zero_shot_split_with(cfg.split, &data.registry, cfg.split_seed, cfg.split_sizes)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let (cues, cue_stats) = collect_cues(&cfg.cues, &data)?;
    let fusion = cfg.fusion();
    let visual = cfg.visual_config(&fusion);
    let mut inputs = Vec::with_capacity(data.annotations.len());
    for (ann, c) in data.annotations.iter().zip(&cues) {
        let v = encode_visual(ann, &visual, data.feature_root.as_deref()).map_err(|e| HarnessError::Data(e.to_string()))?;
        inputs.push(ModelInput::new(v, c, &cfg.cue_encoder));
    }
    let filtered = filter_training_set(&data.annotations, &data.registry, &split);
    let train_targets: Vec<Vec<Target>> = filtered.iter().map(|a| build_targets(a, &data.registry)).collect();
    if let Some((ann, t)) = data.annotations.iter().zip(&train_targets).find(|(_, t)| t.len() > fusion.queries) {
        return Err(HarnessError::Data(format!(
            "image {} has {} targets but the model has {} queries",
            ann.id,
            t.len(),
            fusion.queries
        )));
    }
    let class_rows = build_classifier_weights(&data.registry, &cfg.cue_encoder);
    Ok(Prepared { data, split, cue_stats, inputs, train_targets, class_rows })
}

impl Prepared {
    pub fn init_model(&self, cfg: &RunConfig) -> Result<Model, HarnessError> {
        Model::new(cfg.model_config(&self.data.registry), Some(&self.class_rows), RunSeeds::new(cfg).model_init)
            .map_err(HarnessError::Config)
    }
}
