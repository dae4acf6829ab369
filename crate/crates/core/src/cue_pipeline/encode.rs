//! Cue text encoding: a frozen hash-bucket token embedding followed by
//! trainable self-attention encoder layers.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CueKind, CueSet};
use crate::numerics::{
    attention_block, ffn_block, init_attention, init_ffn, init_layer_norm, layer_norm_block, Matrix, NumericsError,
    ParamStore, Scope, Var,
};

pub const PAD_TOKEN: usize = 0;
pub const BASE_EMBED: &str = "cue.base.embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueEncoderConfig {
    pub d_text: usize,
    /// Hash buckets of the frozen embedding; bucket 0 is the padding token.
    pub buckets: usize,
    pub max_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub embed_seed: u64,
}

impl Default for CueEncoderConfig {
    fn default() -> Self {
        Self { d_text: 64, buckets: 1024, max_tokens: 64, layers: 3, heads: 4, d_ff: 128, embed_seed: 0x00c0_ffee }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lower-cased alphanumeric words hashed into buckets `1..buckets`, truncated
/// to `max_tokens`. Text without words becomes a single padding token.
pub fn tokenize(text: &str, cfg: &CueEncoderConfig) -> Vec<usize> {
    let lower = text.to_lowercase();
    let mut tokens: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(cfg.max_tokens)
        .map(|w| 1 + (fnv1a(w) % (cfg.buckets as u64 - 1)) as usize)
        .collect();
    if tokens.is_empty() {
        tokens.push(PAD_TOKEN);
    }
    tokens
}

/// The frozen bucket embedding table (`buckets × d_text`).
pub fn build_text_embedder(cfg: &CueEncoderConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.embed_seed);
    let scale = 1.0 / (cfg.d_text as f64).sqrt();
    let mut m = Array2::from_shape_simple_fn((cfg.buckets, cfg.d_text), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    m.row_mut(PAD_TOKEN).fill(0.0);
    m
}

/// Mean of the frozen token embeddings of `text`.
pub fn embed_mean(text: &str, embed: &Matrix, cfg: &CueEncoderConfig) -> Vec<f64> {
    let tokens = tokenize(text, cfg);
    let mut out = vec![0.0; embed.ncols()];
    for &t in &tokens {
        for (o, v) in out.iter_mut().zip(embed.row(t)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= tokens.len() as f64);
    out
}

pub(crate) fn sinusoid(rows: usize, width: usize) -> Matrix {
    Array2::from_shape_fn((rows, width), |(pos, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn init_cue_encoder<R: Rng>(store: &mut ParamStore, cfg: &CueEncoderConfig, rng: &mut R) {
    store.insert(BASE_EMBED, build_text_embedder(cfg), false);
    for l in 0..cfg.layers {
        let p = format!("cue.layer{l}");
        init_layer_norm(store, &format!("{p}.ln1"), cfg.d_text);
        init_attention(store, &format!("{p}.attn"), cfg.d_text, cfg.d_text, cfg.d_text, rng);
        init_layer_norm(store, &format!("{p}.ln2"), cfg.d_text);
        init_ffn(store, &format!("{p}.ffn"), cfg.d_text, cfg.d_ff, rng);
    }
    init_layer_norm(store, "cue.final_ln", cfg.d_text);
}

/// Encodes one token sequence; the frozen lookup happens off-tape so no
/// gradient can reach the base table.
pub fn encode_tokens_on_tape(
    scope: &mut Scope<'_>,
    tokens: &[usize],
    cfg: &CueEncoderConfig,
) -> Result<Var, NumericsError> {
    let base = scope.store().value(BASE_EMBED)?;
    let mut x0 = Array2::zeros((tokens.len(), cfg.d_text));
    for (r, &t) in tokens.iter().enumerate() {
        x0.row_mut(r).assign(&base.row(t));
    }
    x0 += &(sinusoid(tokens.len(), cfg.d_text) * 0.1);
    let mut x = scope.input(x0);
    for l in 0..cfg.layers {
        let p = format!("cue.layer{l}");
        let n = layer_norm_block(scope, &format!("{p}.ln1"), x)?;
        let a = attention_block(scope, &format!("{p}.attn"), n, n, cfg.heads)?;
        x = scope.tape.add(x, a)?;
        let n = layer_norm_block(scope, &format!("{p}.ln2"), x)?;
        let f = ffn_block(scope, &format!("{p}.ffn"), n)?;
        x = scope.tape.add(x, f)?;
    }
    layer_norm_block(scope, "cue.final_ln", x)
}

/// Encoded participant, body-language and environmental cue matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CueFeatures {
    pub t_p: Matrix,
    pub t_b: Matrix,
    pub t_e: Matrix,
}

impl CueFeatures {
    pub fn get(&self, kind: CueKind) -> &Matrix {
        match kind {
            CueKind::Participant => &self.t_p,
            CueKind::BodyLanguage => &self.t_b,
            CueKind::Environmental => &self.t_e,
        }
    }
}

pub fn encode_cues(cues: &CueSet, store: &ParamStore, cfg: &CueEncoderConfig) -> Result<CueFeatures, NumericsError> {
    let mut out = Vec::with_capacity(3);
    for kind in CueKind::ALL {
        let mut scope = Scope::new(store);
        let v = encode_tokens_on_tape(&mut scope, &tokenize(cues.text(kind), cfg), cfg)?;
        out.push(scope.tape.value(v).clone());
    }
    let t_e = out.pop().expect("three");
    let t_b = out.pop().expect("three");
    let t_p = out.pop().expect("three");
    Ok(CueFeatures { t_p, t_b, t_e })
}
