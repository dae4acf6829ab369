use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{prepare, resolve_cues, train, EpochLog, HarnessError, Prepared, RunConfig, RunSeeds};
use crate::cue_pipeline::{synthetic_cues, CueRecord, CueStats};
use crate::data_model::{generate_synthetic, save_annotations, HoiClassRegistry, SyntheticSceneConfig};
use crate::evaluation::{compute_map, make_zero_shot_split_with, score_and_rank, MapResults, SplitSetting, SplitSizes, SplitSpec};
use crate::fusion_decoder::{load_checkpoint, save_checkpoint, ClassifierKind, Model, CLASS_ROWS};

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.json";
pub const PR_CURVES_FILE: &str = "pr_curves.csv";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";

/// What a run needs to be reproduced. Contains no timestamps or host data.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub config: RunConfig,
    pub seeds: RunSeeds,
    pub images: usize,
    pub hoi_classes: usize,
    pub split: SplitSetting,
    pub unseen_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, data: &Prepared, checkpoint: Option<&Path>, outputs: &[&str]) -> Self {
        Self {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds: RunSeeds::new(cfg),
            images: data.inputs.len(),
            hoi_classes: data.data.registry.num_classes(),
            split: data.split.setting,
            unseen_classes: data.split.unseen.len(),
            checkpoint: checkpoint.map(Path::to_path_buf),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(path, json).map_err(HarnessError::io(path))
    }
}

pub fn loss_curve_csv(curve: &[EpochLog]) -> String {
    let mut s = String::from("epoch,total,l_b,l_u,l_o,l_c\n");
    for e in curve {
        let l = &e.loss;
        writeln!(s, "{},{},{},{},{},{}", e.epoch, l.total, l.l_b, l.l_u, l.l_o, l.l_c).expect("write to string");
    }
    s
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub curve: Vec<EpochLog>,
    pub cue_stats: CueStats,
    pub checkpoint: PathBuf,
}

/// Trains from scratch and writes the loss curve, checkpoint and manifest into `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary, HarnessError> {
    let data = prepare(cfg)?;
    let mut model = data.init_model(cfg)?;
    create_dir(out_dir)?;
    let curve = train(&mut model, &data, cfg, on_epoch)?;
    let curve_path = out_dir.join(LOSS_CURVE_FILE);
    fs::write(&curve_path, loss_curve_csv(&curve)).map_err(HarnessError::io(&curve_path))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &model)?;
    Manifest::new("train", cfg, &data, None, &[LOSS_CURVE_FILE, CHECKPOINT_FILE])
        .write(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainSummary { model, curve, cue_stats: data.cue_stats, checkpoint })
}

/// Runs the model over every image and scores the ranked detections.
pub fn evaluate(model: &Model, data: &Prepared, top_k: usize) -> Result<MapResults, HarnessError> {
    let registry = &data.data.registry;
    let mut ranked = Vec::with_capacity(data.inputs.len());
    for input in &data.inputs {
        let pred = model.predict(input).map_err(|e| HarnessError::Numeric(e.to_string()))?;
        ranked.push(score_and_rank(&pred, registry, top_k));
    }
    compute_map(&ranked, &data.data.annotations, registry, Some(&data.split)).map_err(|e| HarnessError::Data(e.to_string()))
}

fn check_compatible(model: &Model, data: &Prepared) -> Result<(), HarnessError> {
    let reg = &data.data.registry;
    let mc = &model.config;
    if mc.num_objects != reg.num_objects() || mc.num_classes != reg.num_classes() {
        return Err(HarnessError::Data(format!(
            "checkpoint expects {} objects and {} HOI classes, dataset has {} and {}",
            mc.num_objects,
            mc.num_classes,
            reg.num_objects(),
            reg.num_classes()
        )));
    }
    if mc.fusion.classifier == ClassifierKind::Text && mc.fusion.freeze_classifier {
        let stored = model.params.value(CLASS_ROWS).map_err(|e| HarnessError::Data(e.to_string()))?;
        if stored != data.class_rows {
            return Err(HarnessError::Data("checkpoint classifier rows do not match the dataset's HOI classes".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub results: MapResults,
    pub cue_stats: CueStats,
}

/// Evaluates a checkpoint on the configured dataset and split. The model and
/// cue-encoder settings come from the checkpoint.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalSummary, HarnessError> {
    let model = load_checkpoint(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.preset = None;
    cfg.model = model.config.fusion.clone();
    cfg.cue_encoder = model.config.cue.clone();
    let data = prepare(&cfg)?;
    check_compatible(&model, &data)?;
    let results = evaluate(&model, &data, cfg.top_k)?;
    create_dir(out_dir)?;
    results
        .write(&out_dir.join(RESULTS_FILE), &out_dir.join(PR_CURVES_FILE))
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    Manifest::new("eval", &cfg, &data, Some(checkpoint), &[RESULTS_FILE, PR_CURVES_FILE])
        .write(&out_dir.join(EVAL_MANIFEST_FILE))?;
    Ok(EvalSummary { results, cue_stats: data.cue_stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CueReport {
    pub stats: CueStats,
    pub failures: Vec<(String, String)>,
}

/// Fills the cue cache for every image of the configured dataset.
pub fn cmd_cues(cfg: &RunConfig) -> Result<CueReport, HarnessError> {
    let data = super::load_dataset(&cfg.data)?;
    let (results, stats) = resolve_cues(&cfg.cues, &data)?;
    let failures = data
        .annotations
        .iter()
        .zip(results)
        .filter_map(|(a, r)| r.err().map(|e| (a.id.clone(), e.to_string())))
        .collect();
    Ok(CueReport { stats, failures })
}

/// Builds a split and writes it as JSON to `out` when given.
pub fn cmd_splits(
    setting: SplitSetting,
    seed: u64,
    sizes: SplitSizes,
    registry: &HoiClassRegistry,
    out: Option<&Path>,
) -> Result<SplitSpec, HarnessError> {
    let spec = make_zero_shot_split_with(setting, registry, seed, sizes).map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&spec).expect("split serializes") + "\n";
        fs::write(path, json).map_err(HarnessError::io(path))?;
    }
    Ok(spec)
}

/// Writes a synthetic dataset as an annotation file and, optionally, one cue fixture per image.
pub fn cmd_synth(cfg: &SyntheticSceneConfig, out: &Path, cue_dir: Option<&Path>) -> Result<usize, HarnessError> {
    let d = generate_synthetic(cfg, None).map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_annotations(out, &d.registry, &d.annotations).map_err(|e| HarnessError::Data(e.to_string()))?;
    if let Some(dir) = cue_dir {
        create_dir(dir)?;
        for ann in &d.annotations {
            let rec = CueRecord::from_cue_set(&synthetic_cues(ann, &d.registry));
            let path = dir.join(format!("{}.json", ann.id));
            let json = serde_json::to_string_pretty(&rec).expect("cue record serializes") + "\n";
            fs::write(&path, json).map_err(HarnessError::io(&path))?;
        }
    }
    Ok(d.annotations.len())
}
