//! Dense `f64` matrix math with reverse-mode gradients.

mod gradcheck;
mod ops;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
pub use ops::{
    attention_block, ensure_finite, feed_forward, ffn_block, init_attention, init_ffn, init_layer_norm,
    init_linear, layer_norm, layer_norm_block, linear, multi_head_attention, softmax_rows, AttentionParams,
    FeedForwardParams, LAYER_NORM_EPS,
};
pub use params::{accumulate_grads, GradMap, Param, ParamStore, Scope, Tensor};
pub use tape::{Gradients, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::sigmoid;

/// All matrices are row-major `rows × cols`; vectors are `1 × d`, scalars `1 × 1`.
pub type Matrix = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("width {width} is not divisible by {heads} heads")]
    HeadCount { width: usize, heads: usize },
    #[error("non-finite value {value} in {context} at ({row}, {col})")]
    NonFinite { context: String, row: usize, col: usize, value: f64 },
    #[error("non-finite gradient at (tensor, coordinate) {0:?}")]
    NonFiniteGradient(Vec<(usize, usize)>),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}
