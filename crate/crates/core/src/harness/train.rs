use std::collections::BTreeMap;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, OptimizerConfig, Prepared, RunConfig, RunSeeds};
use crate::fusion_decoder::{forward_on_tape, Model, ModelInput};
use crate::matching_loss::{match_predictions, total_loss, LossBreakdown, LossWeights, MatchError, Target};
use crate::numerics::{accumulate_grads, GradMap, Matrix, ParamStore, Scope};

/// Adam with decoupled weight decay and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Gradients for frozen or unknown parameters are rejected.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<f64, HarnessError> {
        let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(HarnessError::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.trainable => {}
                _ => return Err(HarnessError::Numeric(format!("gradient for non-trainable parameter {name}"))),
            }
            let p = params.value_mut(name).map_err(|e| HarnessError::Numeric(e.to_string()))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.raw_dim()), Matrix::zeros(g.raw_dim())));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * c.weight_decay * *p;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
        Ok(norm)
    }
}

/// Loss and parameter gradients for one image under its Hungarian assignment.
pub fn item_loss_and_grads(
    model: &Model,
    input: &ModelInput,
    targets: &[Target],
    w: &LossWeights,
) -> Result<(LossBreakdown, GradMap), HarnessError> {
    let mut scope = Scope::new(&model.params);
    let vars = forward_on_tape(&mut scope, &model.config, input).map_err(|e| HarnessError::Numeric(e.to_string()))?;
    let pred = vars.predictions(&scope);
    let numeric = |e: MatchError| match e {
        MatchError::TooManyTargets { .. } | MatchError::Shape(_) => HarnessError::Data(e.to_string()),
        _ => HarnessError::Numeric(e.to_string()),
    };
    let assignment = match_predictions(&pred, targets, w).map_err(numeric)?;
    let out = total_loss(&pred, targets, &assignment, w).map_err(numeric)?;
    let mut g = scope.tape.backward(&vars.seeds(out.grads)).map_err(|e| HarnessError::Numeric(e.to_string()))?;
    Ok((out.breakdown, scope.collect(&mut g)))
}

/// Mean per-image loss over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Trains `model` in place. Each step applies the exact sum of the per-image
/// gradients of one batch; batches follow a seeded shuffle per epoch.
pub fn train(
    model: &mut Model,
    data: &Prepared,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, HarnessError> {
    let opt_cfg = &cfg.optimizer;
    let mut opt = AdamW::new(opt_cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(RunSeeds::new(cfg).shuffle);
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    let mut curve = Vec::with_capacity(opt_cfg.epochs);
    for epoch in 1..=opt_cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (batch, chunk) in order.chunks(opt_cfg.batch_size).enumerate() {
            let mut grads = GradMap::new();
            for &i in chunk {
                let (loss, g) = item_loss_and_grads(model, &data.inputs[i], &data.train_targets[i], &cfg.loss)
                    .map_err(|e| match e {
                        HarnessError::Numeric(_) => HarnessError::NonFinite {
                            epoch,
                            batch,
                            image_id: data.data.annotations[i].id.clone(),
                        },
                        other => other,
                    })?;
                if !loss.is_finite() {
                    return Err(HarnessError::NonFinite { epoch, batch, image_id: data.data.annotations[i].id.clone() });
                }
                sum.add(&loss);
                accumulate_grads(&mut grads, g);
            }
            opt.step(&mut model.params, &grads).map_err(|_| HarnessError::NonFinite {
                epoch,
                batch,
                image_id: chunk.iter().map(|&i| data.data.annotations[i].id.as_str()).collect::<Vec<_>>().join(","),
            })?;
        }
        let log = EpochLog { epoch, loss: sum.scale(1.0 / order.len().max(1) as f64) };
        on_epoch(&log);
        curve.push(log);
    }
    Ok(curve)
}
