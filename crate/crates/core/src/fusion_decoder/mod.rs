//! Instance and interaction decoders built from multitower fusion layers,
//! plus the prediction heads.
//!
//! Every decoder layer runs three towers over the same queries. A tower is a
//! pre-norm residual stack of self-attention, cross-attention to the visual
//! grid, cross-attention to one cue stream and a feed-forward block. Instance
//! layers average the tower outputs; the interaction decoder averages in its
//! intermediate layers and concatenates the towers of its last layer.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cue_pipeline::{encode_tokens_on_tape, init_cue_encoder, tokenize, CueEncoderConfig, CueKind, CueSet};
use crate::encoders::VisualFeatures;
use crate::matching_loss::Predictions;
use crate::numerics::{
    attention_block, ffn_block, init_attention, init_ffn, init_layer_norm, init_linear, layer_norm_block, linear,
    Matrix, NumericsError, ParamStore, Scope, Var,
};

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};

pub const CLASS_ROWS: &str = "inter.class_rows";
pub const TEMPERATURE: &str = "inter.temperature";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerMode {
    /// Three towers with independent parameters.
    Multitower,
    /// Three towers sharing one parameter set.
    OneTower,
    /// One tower without the cue attention block.
    NoCues,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Scaled cosine similarity against HOI-class text embeddings.
    Text,
    /// A plain learned linear classifier.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub queries: usize,
    pub layers: usize,
    pub c_d: usize,
    pub c_i: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub tower_mode: TowerMode,
    pub classifier: ClassifierKind,
    /// Keep the text-embedding class rows fixed during training.
    pub freeze_classifier: bool,
    pub init_temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            queries: 64,
            layers: 6,
            c_d: 64,
            c_i: 64,
            heads: 4,
            d_ff: 128,
            tower_mode: TowerMode::Multitower,
            classifier: ClassifierKind::Text,
            freeze_classifier: true,
            init_temperature: 10.0,
        }
    }
}

/// Architecture presets of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// No cue towers, learned classifier.
    Base,
    /// No cue towers, text-embedding classifier.
    TextClassifier,
    OneTower,
    Multitower,
}

impl Preset {
    pub fn apply(self, cfg: &mut FusionConfig) {
        let (mode, classifier) = match self {
            Preset::Base => (TowerMode::NoCues, ClassifierKind::Learned),
            Preset::TextClassifier => (TowerMode::NoCues, ClassifierKind::Text),
            Preset::OneTower => (TowerMode::OneTower, ClassifierKind::Text),
            Preset::Multitower => (TowerMode::Multitower, ClassifierKind::Text),
        };
        cfg.tower_mode = mode;
        cfg.classifier = classifier;
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "base" => Ok(Preset::Base),
            "text_classifier" | "clip_classifier" => Ok(Preset::TextClassifier),
            "one_tower" => Ok(Preset::OneTower),
            "multitower" => Ok(Preset::Multitower),
            other => Err(format!("unknown preset `{other}` (base, text_classifier, one_tower, multitower)")),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.queries == 0 || self.layers == 0 {
            return Err(format!("queries ({}) and layers ({}) must be at least 1", self.queries, self.layers));
        }
        if self.heads == 0 || self.c_d % self.heads != 0 || self.c_i % self.heads != 0 {
            return Err(format!("widths {} / {} are not divisible by {} heads", self.c_d, self.c_i, self.heads));
        }
        if self.d_ff == 0 {
            return Err("d_ff must be positive".into());
        }
        if !self.init_temperature.is_finite() {
            return Err("init_temperature must be finite".into());
        }
        Ok(())
    }

    /// Distinct tower parameter sets per layer.
    pub fn tower_sets(&self) -> usize {
        match self.tower_mode {
            TowerMode::Multitower => 3,
            TowerMode::OneTower | TowerMode::NoCues => 1,
        }
    }

    fn uses_cues(&self) -> bool {
        self.tower_mode != TowerMode::NoCues
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub cue: CueEncoderConfig,
    pub num_objects: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.fusion.validate()?;
        if self.cue.heads == 0 || self.cue.d_text % self.cue.heads != 0 {
            return Err(format!("cue width {} is not divisible by {} heads", self.cue.d_text, self.cue.heads));
        }
        if self.cue.buckets < 2 || self.cue.max_tokens == 0 {
            return Err("cue encoder needs at least 2 buckets and 1 token".into());
        }
        if self.num_objects == 0 || self.num_classes == 0 {
            return Err("registry has no objects or no classes".into());
        }
        Ok(())
    }
}

fn tower_prefix(cfg: &FusionConfig, branch: &str, layer: usize, tower: usize) -> String {
    let t = if cfg.tower_mode == TowerMode::Multitower { tower } else { 0 };
    format!("{branch}.l{layer}.t{t}")
}

fn init_tower<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, d_kv: usize, d_text: usize, cfg: &FusionConfig, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln_sa"), d);
    init_attention(store, &format!("{prefix}.sa"), d, d, d, rng);
    init_layer_norm(store, &format!("{prefix}.ln_v"), d);
    init_attention(store, &format!("{prefix}.ca_v"), d, d_kv, d, rng);
    if cfg.uses_cues() {
        init_layer_norm(store, &format!("{prefix}.ln_c"), d);
        init_attention(store, &format!("{prefix}.ca_c"), d, d_text, d, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln_ff"), d);
    init_ffn(store, &format!("{prefix}.ffn"), d, cfg.d_ff, rng);
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Initializes every parameter. `class_rows` (classes × d_text) seeds the text
/// classifier; zeros are used when absent.
pub fn init_params(cfg: &ModelConfig, class_rows: Option<&Matrix>, seed: u64) -> Result<ParamStore, String> {
    cfg.validate()?;
    let f = &cfg.fusion;
    let d_text = cfg.cue.d_text;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    if f.uses_cues() {
        init_cue_encoder(&mut store, &cfg.cue, &mut rng);
    }
    store.insert("query.h", normal_matrix(f.queries, f.c_d, &mut rng), true);
    store.insert("query.o", normal_matrix(f.queries, f.c_d, &mut rng), true);
    for l in 0..f.layers {
        for t in 0..f.tower_sets() {
            init_tower(&mut store, &tower_prefix(f, "inst", l, t), f.c_d, f.c_d, d_text, f, &mut rng);
        }
    }
    init_layer_norm(&mut store, "inst.final_ln", f.c_d);
    for head in ["head.hbox", "head.obox"] {
        init_linear(&mut store, &format!("{head}.l1"), f.c_d, f.c_d, true, &mut rng);
        init_linear(&mut store, &format!("{head}.l2"), f.c_d, 4, true, &mut rng);
    }
    init_linear(&mut store, "head.obj", f.c_d, cfg.num_objects + 1, true, &mut rng);
    init_linear(&mut store, "proj", 2 * f.c_d, f.c_i, true, &mut rng);
    for l in 0..f.layers {
        for t in 0..f.tower_sets() {
            init_tower(&mut store, &tower_prefix(f, "inter", l, t), f.c_i, f.c_i, d_text, f, &mut rng);
        }
    }
    init_layer_norm(&mut store, "inter.final_ln", f.c_i);
    match f.classifier {
        ClassifierKind::Text => {
            init_linear(&mut store, "inter.out", 3 * f.c_i, d_text, false, &mut rng);
            let rows = match class_rows {
                Some(r) if r.dim() == (cfg.num_classes, d_text) => r.clone(),
                Some(r) => {
                    return Err(format!(
                        "class rows are {:?}, expected {:?}",
                        r.dim(),
                        (cfg.num_classes, d_text)
                    ))
                }
                None => Array2::zeros((cfg.num_classes, d_text)),
            };
            store.insert(CLASS_ROWS, rows, !f.freeze_classifier);
            store.insert(TEMPERATURE, Array2::from_elem((1, 1), f.init_temperature), true);
        }
        ClassifierKind::Learned => init_linear(&mut store, "inter.cls", 3 * f.c_i, cfg.num_classes, true, &mut rng),
    }
    Ok(store)
}

/// One fusion tower over `x`. `cue` is skipped when `None`.
pub fn fusion_tower_step(
    scope: &mut Scope<'_>,
    prefix: &str,
    x: Var,
    visual: Var,
    cue: Option<Var>,
    heads: usize,
) -> Result<Var, NumericsError> {
    let n = layer_norm_block(scope, &format!("{prefix}.ln_sa"), x)?;
    let a = attention_block(scope, &format!("{prefix}.sa"), n, n, heads)?;
    let mut x = scope.tape.add(x, a)?;
    let n = layer_norm_block(scope, &format!("{prefix}.ln_v"), x)?;
    let a = attention_block(scope, &format!("{prefix}.ca_v"), n, visual, heads)?;
    x = scope.tape.add(x, a)?;
    if let Some(cue) = cue {
        let n = layer_norm_block(scope, &format!("{prefix}.ln_c"), x)?;
        let a = attention_block(scope, &format!("{prefix}.ca_c"), n, cue, heads)?;
        x = scope.tape.add(x, a)?;
    }
    let n = layer_norm_block(scope, &format!("{prefix}.ln_ff"), x)?;
    let f = ffn_block(scope, &format!("{prefix}.ffn"), n)?;
    scope.tape.add(x, f)
}

/// The three tower outputs of one layer (one output in no-cue mode).
fn layer_towers(
    scope: &mut Scope<'_>,
    cfg: &FusionConfig,
    branch: &str,
    layer: usize,
    x: Var,
    visual: Var,
    cues: Option<&[Var; 3]>,
) -> Result<Vec<Var>, NumericsError> {
    match cues.filter(|_| cfg.uses_cues()) {
        None => Ok(vec![fusion_tower_step(scope, &tower_prefix(cfg, branch, layer, 0), x, visual, None, cfg.heads)?]),
        Some(cues) => (0..3)
            .map(|t| fusion_tower_step(scope, &tower_prefix(cfg, branch, layer, t), x, visual, Some(cues[t]), cfg.heads))
            .collect(),
    }
}

fn average(scope: &mut Scope<'_>, outs: &[Var]) -> Result<Var, NumericsError> {
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        scope.tape.mean(outs)
    }
}

/// Runs the instance decoder on `[Q_h; Q_o]` and returns `(E_h, E_o)`.
pub fn instance_decode(
    scope: &mut Scope<'_>,
    cfg: &FusionConfig,
    f_i: Var,
    cues: Option<&[Var; 3]>,
) -> Result<(Var, Var), NumericsError> {
    let q_h = scope.param("query.h")?;
    let q_o = scope.param("query.o")?;
    let mut x = scope.tape.concat_rows(&[q_h, q_o])?;
    for l in 0..cfg.layers {
        let outs = layer_towers(scope, cfg, "inst", l, x, f_i, cues)?;
        x = average(scope, &outs)?;
    }
    let x = layer_norm_block(scope, "inst.final_ln", x)?;
    let e_h = scope.tape.slice_rows(x, 0, cfg.queries)?;
    let e_o = scope.tape.slice_rows(x, cfg.queries, cfg.queries)?;
    Ok((e_h, e_o))
}

/// Box heads (sigmoid `(cx, cy, w, h)`) and object logits (`objects + 1` columns).
pub fn instance_heads(scope: &mut Scope<'_>, e_h: Var, e_o: Var) -> Result<(Var, Var, Var), NumericsError> {
    let mut boxes = [e_h, e_o];
    for (head, e) in ["head.hbox", "head.obox"].iter().zip(boxes.iter_mut()) {
        let h = linear(scope, &format!("{head}.l1"), *e, true)?;
        let h = scope.tape.silu(h);
        let raw = linear(scope, &format!("{head}.l2"), h, true)?;
        *e = scope.tape.sigmoid(raw);
    }
    let obj = linear(scope, "head.obj", e_o, true)?;
    Ok((boxes[0], boxes[1], obj))
}

/// `Q_inter = [E_h | E_o] W + b`.
pub fn project_to_interaction(scope: &mut Scope<'_>, e_h: Var, e_o: Var) -> Result<Var, NumericsError> {
    let cat = scope.tape.concat_cols(&[e_h, e_o])?;
    linear(scope, "proj", cat, true)
}

/// Runs the interaction decoder and returns `(E_inter, interaction logits)`.
pub fn interaction_decode(
    scope: &mut Scope<'_>,
    cfg: &FusionConfig,
    q_inter: Var,
    f_c: Var,
    cues: Option<&[Var; 3]>,
) -> Result<(Var, Var), NumericsError> {
    let mut x = q_inter;
    for l in 0..cfg.layers - 1 {
        let outs = layer_towers(scope, cfg, "inter", l, x, f_c, cues)?;
        x = average(scope, &outs)?;
    }
    let outs = layer_towers(scope, cfg, "inter", cfg.layers - 1, x, f_c, cues)?;
    let normed = outs
        .iter()
        .map(|&o| layer_norm_block(scope, "inter.final_ln", o))
        .collect::<Result<Vec<_>, _>>()?;
    let blocks = if normed.len() == 1 { vec![normed[0]; 3] } else { normed };
    let e_inter = scope.tape.concat_cols(&blocks)?;
    let logits = interaction_classifier(scope, cfg, e_inter)?;
    Ok((e_inter, logits))
}

fn interaction_classifier(scope: &mut Scope<'_>, cfg: &FusionConfig, e_inter: Var) -> Result<Var, NumericsError> {
    match cfg.classifier {
        ClassifierKind::Text => {
            let z = linear(scope, "inter.out", e_inter, false)?;
            let z = scope.tape.row_normalize(z);
            let rows = scope.param(CLASS_ROWS)?;
            let rows = scope.tape.row_normalize(rows);
            let cos = scope.tape.matmul_t(z, rows)?;
            let t = scope.param(TEMPERATURE)?;
            scope.tape.scale_by(cos, t)
        }
        ClassifierKind::Learned => linear(scope, "inter.cls", e_inter, true),
    }
}

/// Per-image model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub visual: VisualFeatures,
    /// Token ids of the participant, body-language and environmental cues.
    pub cue_tokens: [Vec<usize>; 3],
}

impl ModelInput {
    pub fn new(visual: VisualFeatures, cues: &CueSet, cfg: &CueEncoderConfig) -> Self {
        let cue_tokens = CueKind::ALL.map(|k| tokenize(cues.text(k), cfg));
        Self { visual, cue_tokens }
    }
}

/// Tape handles of every model output.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub cues: Option<[Var; 3]>,
    pub e_h: Var,
    pub e_o: Var,
    pub h_boxes: Var,
    pub o_boxes: Var,
    pub obj_logits: Var,
    pub q_inter: Var,
    pub e_inter: Var,
    pub inter_logits: Var,
}

/// The full forward pass recorded on `scope`.
pub fn forward_on_tape(scope: &mut Scope<'_>, cfg: &ModelConfig, input: &ModelInput) -> Result<ForwardVars, NumericsError> {
    let f = &cfg.fusion;
    let cues = if f.uses_cues() {
        let mut vars = Vec::with_capacity(3);
        for tokens in &input.cue_tokens {
            vars.push(encode_tokens_on_tape(scope, tokens, &cfg.cue)?);
        }
        Some([vars[0], vars[1], vars[2]])
    } else {
        None
    };
    let f_i = scope.input(input.visual.f_i.clone());
    let f_c = scope.input(input.visual.f_c.clone());
    let (e_h, e_o) = instance_decode(scope, f, f_i, cues.as_ref())?;
    let (h_boxes, o_boxes, obj_logits) = instance_heads(scope, e_h, e_o)?;
    let q_inter = project_to_interaction(scope, e_h, e_o)?;
    let (e_inter, inter_logits) = interaction_decode(scope, f, q_inter, f_c, cues.as_ref())?;
    Ok(ForwardVars { cues, e_h, e_o, h_boxes, o_boxes, obj_logits, q_inter, e_inter, inter_logits })
}

/// Output values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub e_h: Matrix,
    pub e_o: Matrix,
    pub e_inter: Matrix,
    pub predictions: Predictions,
}

impl ForwardVars {
    pub fn predictions(&self, scope: &Scope<'_>) -> Predictions {
        Predictions {
            h_boxes: scope.tape.value(self.h_boxes).clone(),
            o_boxes: scope.tape.value(self.o_boxes).clone(),
            obj_logits: scope.tape.value(self.obj_logits).clone(),
            inter_logits: scope.tape.value(self.inter_logits).clone(),
        }
    }

    pub fn output(&self, scope: &Scope<'_>) -> DecoderOutput {
        DecoderOutput {
            e_h: scope.tape.value(self.e_h).clone(),
            e_o: scope.tape.value(self.e_o).clone(),
            e_inter: scope.tape.value(self.e_inter).clone(),
            predictions: self.predictions(scope),
        }
    }

    /// Backward seeds for gradients given on the four prediction matrices.
    pub fn seeds(&self, g: Predictions) -> Vec<(Var, Matrix)> {
        vec![
            (self.h_boxes, g.h_boxes),
            (self.o_boxes, g.o_boxes),
            (self.obj_logits, g.obj_logits),
            (self.inter_logits, g.inter_logits),
        ]
    }
}

/// A model configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, class_rows: Option<&Matrix>, seed: u64) -> Result<Self, String> {
        let params = init_params(&config, class_rows, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, input: &ModelInput) -> Result<DecoderOutput, NumericsError> {
        let mut scope = Scope::new(&self.params);
        let vars = forward_on_tape(&mut scope, &self.config, input)?;
        Ok(vars.output(&scope))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Predictions, NumericsError> {
        Ok(self.forward(input)?.predictions)
    }
}
