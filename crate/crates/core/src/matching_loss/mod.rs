//! Set-prediction matching and the four-term training loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{BBox, HoiAnnotation, HoiClassRegistry};
use crate::numerics::Matrix;

mod giou;
mod hungarian;
#[cfg(test)]
mod tests;

pub use giou::{giou, giou_with_grad};
pub use hungarian::{assignment_cost, hungarian_match};

/// Weight of the background class in the object-classification loss.
pub const BACKGROUND_WEIGHT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cost matrix entry ({row}, {col}) is {value}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("{targets} ground truths cannot be matched to {predictions} predictions")]
    TooManyTargets { targets: usize, predictions: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("prediction shapes disagree: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub box_l1: f64,
    pub giou: f64,
    pub object: f64,
    pub interaction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_l1: 2.5, giou: 1.0, object: 1.0, interaction: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MatchError> {
        for (name, w) in
            [("box_l1", self.box_l1), ("giou", self.giou), ("object", self.object), ("interaction", self.interaction)]
        {
            if !w.is_finite() || w < 0.0 {
                return Err(MatchError::Weights(format!("{name} = {w}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { box_l1: self.box_l1 * k, giou: self.giou * k, object: self.object * k, interaction: self.interaction * k }
    }
}

/// Raw per-query model outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Human boxes as `(cx, cy, w, h)` rows, `N × 4`.
    pub h_boxes: Matrix,
    pub o_boxes: Matrix,
    /// Object logits, `N × (objects + 1)`; the last column is background.
    pub obj_logits: Matrix,
    /// Interaction logits, `N × hoi classes`.
    pub inter_logits: Matrix,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.h_boxes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            h_boxes: Array2::zeros(self.h_boxes.dim()),
            o_boxes: Array2::zeros(self.o_boxes.dim()),
            obj_logits: Array2::zeros(self.obj_logits.dim()),
            inter_logits: Array2::zeros(self.inter_logits.dim()),
        }
    }

    pub fn check(&self) -> Result<(), MatchError> {
        let n = self.len();
        let ok = self.h_boxes.ncols() == 4
            && self.o_boxes.dim() == (n, 4)
            && self.obj_logits.nrows() == n
            && self.obj_logits.ncols() >= 2
            && self.inter_logits.nrows() == n;
        if ok {
            Ok(())
        } else {
            Err(MatchError::Shape(format!(
                "h {:?}, o {:?}, obj {:?}, inter {:?}",
                self.h_boxes.dim(),
                self.o_boxes.dim(),
                self.obj_logits.dim(),
                self.inter_logits.dim()
            )))
        }
    }

    pub fn h_box(&self, q: usize) -> BBox {
        row_box(&self.h_boxes, q)
    }

    pub fn o_box(&self, q: usize) -> BBox {
        row_box(&self.o_boxes, q)
    }

    pub fn object_probs(&self) -> Matrix {
        softmax(&self.obj_logits)
    }

    pub fn interaction_probs(&self) -> Matrix {
        self.inter_logits.mapv(sigmoid)
    }
}

fn row_box(m: &Matrix, q: usize) -> BBox {
    BBox::from_cxcywh([m[[q, 0]], m[[q, 1]], m[[q, 2]], m[[q, 3]]])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// One matching target: a human/object box pair with all its HOI classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub hbox: BBox,
    pub obox: BBox,
    pub obj: usize,
    /// Sorted, distinct HOI class ids.
    pub classes: Vec<usize>,
}

/// Groups ground-truth triplets that share both boxes and the object class
/// into one multi-label target. Triplets outside the registry are skipped.
pub fn build_targets(ann: &HoiAnnotation, registry: &HoiClassRegistry) -> Vec<Target> {
    let mut out: Vec<Target> = Vec::new();
    for gt in &ann.gts {
        let Some(class) = registry.class_id(gt.verb, gt.obj) else { continue };
        match out.iter_mut().find(|t| t.hbox == gt.hbox && t.obox == gt.obox && t.obj == gt.obj) {
            Some(t) => {
                if let Err(pos) = t.classes.binary_search(&class) {
                    t.classes.insert(pos, class);
                }
            }
            None => out.push(Target { hbox: gt.hbox, obox: gt.obox, obj: gt.obj, classes: vec![class] }),
        }
    }
    out
}

fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn row4(m: &Matrix, q: usize) -> [f64; 4] {
    [m[[q, 0]], m[[q, 1]], m[[q, 2]], m[[q, 3]]]
}

/// Matching cost, `targets × predictions`.
pub fn build_cost_matrix(pred: &Predictions, targets: &[Target], w: &LossWeights) -> Result<Matrix, MatchError> {
    pred.check()?;
    w.validate()?;
    let n = pred.len();
    let obj_p = pred.object_probs();
    let int_p = pred.interaction_probs();
    let mut cost = Array2::zeros((targets.len(), n));
    for (g, t) in targets.iter().enumerate() {
        let (th, to) = (t.hbox.to_cxcywh(), t.obox.to_cxcywh());
        for q in 0..n {
            let (ph, po) = (pred.h_box(q), pred.o_box(q));
            let c_b = l1(&row4(&pred.h_boxes, q), &th) + l1(&row4(&pred.o_boxes, q), &to);
            let c_u = (1.0 - giou(&ph, &t.hbox)) + (1.0 - giou(&po, &t.obox));
            let c_o = -obj_p[[q, t.obj]];
            let c_c = -t.classes.iter().map(|&c| int_p[[q, c]]).sum::<f64>() / t.classes.len().max(1) as f64;
            cost[[g, q]] = w.box_l1 * c_b + w.giou * c_u + w.object * c_o + w.interaction * c_c;
        }
    }
    Ok(cost)
}

/// Builds the cost matrix and solves the assignment for one image.
pub fn match_predictions(
    pred: &Predictions,
    targets: &[Target],
    w: &LossWeights,
) -> Result<Vec<(usize, usize)>, MatchError> {
    hungarian_match(&build_cost_matrix(pred, targets, w)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_b: f64,
    pub l_u: f64,
    pub l_o: f64,
    pub l_c: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.l_b += o.l_b;
        self.l_u += o.l_u;
        self.l_o += o.l_o;
        self.l_c += o.l_c;
    }

    pub fn scale(&self, k: f64) -> Self {
        Self { total: self.total * k, l_b: self.l_b * k, l_u: self.l_u * k, l_o: self.l_o * k, l_c: self.l_c * k }
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.box_l1 * self.l_b + w.giou * self.l_u + w.object * self.l_o + w.interaction * self.l_c
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.l_b, self.l_u, self.l_o, self.l_c].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Gradient of the total loss with respect to every field of the predictions.
    pub grads: Predictions,
}

/// The weighted loss for one image under a fixed assignment.
///
/// * `l_b`: L1 over `(cx, cy, w, h)` of both boxes, summed over matched pairs, divided by the target count.
/// * `l_u`: `1 - giou` of both boxes, normalized the same way.
/// * `l_o`: cross-entropy over all queries toward the matched object class or background,
///   weighted mean with background weight [`BACKGROUND_WEIGHT`].
/// * `l_c`: binary cross-entropy over every HOI class of matched queries, divided by the number of positive labels.
pub fn total_loss(
    pred: &Predictions,
    targets: &[Target],
    assignment: &[(usize, usize)],
    w: &LossWeights,
) -> Result<LossOutput, MatchError> {
    pred.check()?;
    w.validate()?;
    let n = pred.len();
    let bg = pred.obj_logits.ncols() - 1;
    let mut grads = pred.zeros_like();
    let norm = targets.len().max(1) as f64;

    let mut matched_to = vec![None; n];
    for &(q, g) in assignment {
        matched_to[q] = Some(g);
    }

    let (mut l_b, mut l_u, mut l_c) = (0.0, 0.0, 0.0);
    let positives = assignment.iter().map(|&(_, g)| targets[g].classes.len()).sum::<usize>().max(1) as f64;
    for &(q, g) in assignment {
        let t = &targets[g];
        for (boxes, gboxes, gt) in [
            (&pred.h_boxes, &mut grads.h_boxes, &t.hbox),
            (&pred.o_boxes, &mut grads.o_boxes, &t.obox),
        ] {
            let p = row4(boxes, q);
            let tc = gt.to_cxcywh();
            l_b += l1(&p, &tc) / norm;
            for k in 0..4 {
                let s = (p[k] - tc[k]).signum();
                gboxes[[q, k]] += w.box_l1 * s / norm;
            }
            let (gi, dg) = giou_with_grad(&BBox::from_cxcywh(p), gt);
            l_u += (1.0 - gi) / norm;
            // corners = (cx - w/2, cy - h/2, cx + w/2, cy + h/2)
            let f = -w.giou / norm;
            gboxes[[q, 0]] += f * (dg[0] + dg[2]);
            gboxes[[q, 1]] += f * (dg[1] + dg[3]);
            gboxes[[q, 2]] += f * 0.5 * (dg[2] - dg[0]);
            gboxes[[q, 3]] += f * 0.5 * (dg[3] - dg[1]);
        }
        for c in 0..pred.inter_logits.ncols() {
            let x = pred.inter_logits[[q, c]];
            let y = if t.classes.binary_search(&c).is_ok() { 1.0 } else { 0.0 };
            // log(1 + e^x) - y x, computed stably
            l_c += (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()) / positives;
            grads.inter_logits[[q, c]] += w.interaction * (sigmoid(x) - y) / positives;
        }
    }

    let probs = pred.object_probs();
    let weights: Vec<f64> = matched_to.iter().map(|m| if m.is_some() { 1.0 } else { BACKGROUND_WEIGHT }).collect();
    let wsum: f64 = weights.iter().sum();
    let mut l_o = 0.0;
    for q in 0..n {
        let target = matched_to[q].map_or(bg, |g| targets[g].obj);
        let row = pred.obj_logits.row(q);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        l_o += weights[q] * (lse - row[target]) / wsum;
        for c in 0..=bg {
            let y = if c == target { 1.0 } else { 0.0 };
            grads.obj_logits[[q, c]] += w.object * weights[q] * (probs[[q, c]] - y) / wsum;
        }
    }

    let mut breakdown = LossBreakdown { total: 0.0, l_b, l_u, l_o, l_c };
    breakdown.total = breakdown.weighted_sum(w);
    Ok(LossOutput { breakdown, grads })
}
