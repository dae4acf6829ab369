//! Inference scoring, mAP under the default protocol, and zero-shot splits.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{BBox, HoiAnnotation, HoiClassRegistry};
use crate::matching_loss::Predictions;

mod splits;

pub use splits::{filter_training_set, make_zero_shot_split, make_zero_shot_split_with, SplitSizes};

pub const DEFAULT_TOP_K: usize = 100;
pub const IOU_THRESHOLD: f64 = 0.5;
pub const RARE_THRESHOLD: u64 = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Split(String),
    #[error("{0} prediction lists for {1} images")]
    Length(usize, usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown split setting {0:?} (expected regular, rf_uc, nf_uc, uo or uv)")]
    UnknownSetting(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub hbox: BBox,
    pub obox: BBox,
    pub obj: usize,
    pub hoi_class: usize,
    pub confidence: f64,
}

/// Per query: the most likely foreground object, then one candidate per HOI
/// class of that object scored `p(object) + sigmoid(interaction logit)`.
/// Candidates are sorted by descending confidence (ties by query, then
/// class) and the best `k` kept. Boxes are clipped to the unit square.
pub fn score_and_rank(pred: &Predictions, registry: &HoiClassRegistry, k: usize) -> Vec<ScoredPrediction> {
    let obj_p = pred.object_probs();
    let int_p = pred.interaction_probs();
    let fg = obj_p.ncols().saturating_sub(1).min(registry.num_objects());
    let mut out = Vec::new();
    for q in 0..pred.len() {
        let Some((obj, &p_obj)) = obj_p.row(q).iter().take(fg).enumerate().max_by(|a, b| {
            a.1.total_cmp(b.1).then(b.0.cmp(&a.0))
        }) else {
            continue;
        };
        let (hbox, obox) = (pred.h_box(q).clip_unit(), pred.o_box(q).clip_unit());
        for class in registry.classes_for_object(obj) {
            out.push(ScoredPrediction { hbox, obox, obj, hoi_class: class, confidence: p_obj + int_p[[q, class]] });
        }
    }
    // Candidates were generated in (query, class) order, so a stable sort keeps that tie-break.
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(k);
    out
}

/// Rare (fewer than [`RARE_THRESHOLD`] training instances) and non-rare class ids.
pub fn split_rare_nonrare(registry: &HoiClassRegistry) -> (Vec<usize>, Vec<usize>) {
    (0..registry.num_classes()).partition(|&c| registry.counts()[c] < RARE_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSetting {
    Regular,
    RfUc,
    NfUc,
    Uo,
    Uv,
}

impl SplitSetting {
    pub const ALL: [SplitSetting; 5] =
        [SplitSetting::Regular, SplitSetting::RfUc, SplitSetting::NfUc, SplitSetting::Uo, SplitSetting::Uv];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitSetting::Regular => "regular",
            SplitSetting::RfUc => "rf_uc",
            SplitSetting::NfUc => "nf_uc",
            SplitSetting::Uo => "uo",
            SplitSetting::Uv => "uv",
        }
    }
}

impl FromStr for SplitSetting {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| EvalError::UnknownSetting(s.to_string()))
    }
}

impl std::fmt::Display for SplitSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: SplitSetting,
    pub seed: u64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen_objects: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen_verbs: Vec<usize>,
}

impl SplitSpec {
    pub fn regular(registry: &HoiClassRegistry) -> Self {
        Self {
            setting: SplitSetting::Regular,
            seed: 0,
            seen: (0..registry.num_classes()).collect(),
            unseen: Vec::new(),
            unseen_objects: Vec::new(),
            unseen_verbs: Vec::new(),
        }
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.binary_search(&class).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    pub verb: String,
    pub object: String,
    pub num_gt: usize,
    pub ap: f64,
    pub rare: bool,
    pub seen: bool,
}

/// Evaluation results. Group means are `None` when the group has no class with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResults {
    pub setting: SplitSetting,
    pub split_seed: u64,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
    pub per_class: Vec<ClassResult>,
    #[serde(skip)]
    pub pr_curves: Vec<(usize, Vec<(f64, f64)>)>,
}

/// All-point interpolated AP of a ranked list of hit flags against `num_gt` ground truths.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    pr_curve_ap(hits, num_gt).0
}

fn pr_curve_ap(hits: &[bool], num_gt: usize) -> (f64, Vec<(f64, f64)>) {
    if num_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    (ap, curve)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class AP and group means. `predictions[i]` belongs to `annotations[i]`.
/// Rare classes are taken from the registry counts.
pub fn compute_map(
    predictions: &[Vec<ScoredPrediction>],
    annotations: &[HoiAnnotation],
    registry: &HoiClassRegistry,
    split: Option<&SplitSpec>,
) -> Result<MapResults, EvalError> {
    if predictions.len() != annotations.len() {
        return Err(EvalError::Length(predictions.len(), annotations.len()));
    }
    let k = registry.num_classes();
    // gts[class][image] -> boxes
    let mut gts: Vec<Vec<Vec<(BBox, BBox)>>> = vec![vec![Vec::new(); annotations.len()]; k];
    let mut num_gt = vec![0usize; k];
    for (i, ann) in annotations.iter().enumerate() {
        for gt in &ann.gts {
            if let Some(c) = registry.class_id(gt.verb, gt.obj) {
                gts[c][i].push((gt.hbox, gt.obox));
                num_gt[c] += 1;
            }
        }
    }
    let mut by_class: Vec<Vec<(f64, usize, &ScoredPrediction)>> = vec![Vec::new(); k];
    for (i, preds) in predictions.iter().enumerate() {
        for p in preds {
            if p.hoi_class < k {
                by_class[p.hoi_class].push((p.confidence, i, p));
            }
        }
    }

    let mut per_class = Vec::new();
    let mut pr_curves = Vec::new();
    for c in 0..k {
        if num_gt[c] == 0 {
            continue;
        }
        let cands = &mut by_class[c];
        // Stable: equal confidences keep image order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = gts[c].iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = cands
            .iter()
            .map(|&(_, img, p)| {
                let mut best: Option<(usize, f64)> = None;
                for (j, (h, o)) in gts[c][img].iter().enumerate() {
                    if used[img][j] {
                        continue;
                    }
                    let (ih, io) = (p.hbox.iou(h), p.obox.iou(o));
                    if ih > IOU_THRESHOLD && io > IOU_THRESHOLD {
                        let s = ih.min(io);
                        if best.map_or(true, |(_, b)| s > b) {
                            best = Some((j, s));
                        }
                    }
                }
                match best {
                    Some((j, _)) => {
                        used[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        let (ap, curve) = pr_curve_ap(&hits, num_gt[c]);
        let class = registry.classes()[c];
        per_class.push(ClassResult {
            class: c,
            verb: registry.verbs()[class.verb].clone(),
            object: registry.objects()[class.object].clone(),
            num_gt: num_gt[c],
            ap,
            rare: registry.counts()[c] < RARE_THRESHOLD,
            seen: split.map_or(true, |s| !s.is_unseen(c)),
        });
        pr_curves.push((c, curve));
    }

    let zero_shot = split.filter(|s| s.setting != SplitSetting::Regular);
    Ok(MapResults {
        setting: split.map_or(SplitSetting::Regular, |s| s.setting),
        split_seed: split.map_or(0, |s| s.seed),
        map_full: mean(per_class.iter().map(|r| r.ap)).unwrap_or(0.0),
        map_rare: mean(per_class.iter().filter(|r| r.rare).map(|r| r.ap)),
        map_nonrare: mean(per_class.iter().filter(|r| !r.rare).map(|r| r.ap)),
        map_seen: zero_shot.and_then(|_| mean(per_class.iter().filter(|r| r.seen).map(|r| r.ap))),
        map_unseen: zero_shot.and_then(|_| mean(per_class.iter().filter(|r| !r.seen).map(|r| r.ap))),
        per_class,
        pr_curves,
    })
}

impl MapResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize") + "\n"
    }

    /// `class,rank,recall,precision` rows.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class,rank,recall,precision\n");
        for (c, curve) in &self.pr_curves {
            for (i, (r, p)) in curve.iter().enumerate() {
                writeln!(s, "{c},{},{r},{p}", i + 1).expect("write to string");
            }
        }
        s
    }

    pub fn write(&self, results: &Path, pr_csv: &Path) -> Result<(), EvalError> {
        let io = |p: &Path, source| EvalError::Io { path: p.display().to_string(), source };
        std::fs::write(results, self.to_json()).map_err(|e| io(results, e))?;
        std::fs::write(pr_csv, self.pr_csv()).map_err(|e| io(pr_csv, e))
    }

    /// Human-readable table of the group means.
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x * 100.0));
        let mut s = format!(
            "setting {}  Full {}  Rare {}  Non-Rare {}",
            self.setting,
            f(Some(self.map_full)),
            f(self.map_rare),
            f(self.map_nonrare)
        );
        if self.setting != SplitSetting::Regular {
            write!(s, "  Seen {}  Unseen {}", f(self.map_seen), f(self.map_unseen)).expect("write to string");
        }
        s
    }
}
