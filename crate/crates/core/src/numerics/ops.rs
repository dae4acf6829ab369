//! Layer primitives: attention, feed-forward and layer norm, both as
//! tape-recording building blocks and as plain forward functions.

use super::params::{ParamStore, Scope};
use super::tape::{softmax_rows_in_place, Tape, Var};
use super::{Matrix, NumericsError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numerically stabilised row softmax.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix, NumericsError> {
    ensure_finite(m, "softmax input")?;
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    Ok(out)
}

pub fn ensure_finite(m: &Matrix, context: &str) -> Result<(), NumericsError> {
    match m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        None => Ok(()),
        Some(((r, c), v)) => Err(NumericsError::NonFinite {
            context: context.to_string(),
            row: r,
            col: c,
            value: *v,
        }),
    }
}

/// Projection weights of one multi-head attention block.
///
/// `wq`: d_q × d, `wk`/`wv`: d_kv × d, `wo`: d × d_q.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl AttentionParams {
    pub fn width(&self) -> usize {
        self.wq.ncols()
    }

    fn validate(&self, q_width: usize, kv_width: usize) -> Result<(), NumericsError> {
        let d = self.width();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(NumericsError::HeadCount { width: d, heads: self.heads });
        }
        let check = |op, m: &Matrix, rows, cols| {
            if m.dim() != (rows, cols) {
                Err(NumericsError::ShapeMismatch {
                    op,
                    left: vec![m.nrows(), m.ncols()],
                    right: vec![rows, cols],
                })
            } else {
                Ok(())
            }
        };
        check("attention wq", &self.wq, q_width, d)?;
        check("attention wk", &self.wk, kv_width, d)?;
        check("attention wv", &self.wv, kv_width, d)?;
        check("attention wo", &self.wo, d, q_width)
    }
}

/// Self-attention when `q`, `k`, `v` are the same matrix; cross-attention otherwise.
pub fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    p: &AttentionParams,
) -> Result<Matrix, NumericsError> {
    if k.dim() != v.dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention k/v",
            left: vec![k.nrows(), k.ncols()],
            right: vec![v.nrows(), v.ncols()],
        });
    }
    p.validate(q.ncols(), k.ncols())?;
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let (wq, wk, wv, wo) = (
        tape.leaf(p.wq.clone()),
        tape.leaf(p.wk.clone()),
        tape.leaf(p.wv.clone()),
        tape.leaf(p.wo.clone()),
    );
    let out = attention_on_tape(&mut tape, qi, ki, vi, [wq, wk, wv, wo], p.heads)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    [wq, wk, wv, wo]: [Var; 4],
    heads: usize,
) -> Result<Var, NumericsError> {
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let ctx = tape.attention(qp, kp, vp, heads)?;
    tape.matmul(ctx, wo)
}

/// Two linear maps with a SiLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub fn feed_forward(x: &Matrix, p: &FeedForwardParams) -> Result<Matrix, NumericsError> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let vars = [
        tape.leaf(p.w1.clone()),
        tape.leaf(p.b1.clone()),
        tape.leaf(p.w2.clone()),
        tape.leaf(p.b2.clone()),
    ];
    let out = ffn_on_tape(&mut tape, xi, vars)?;
    if tape.dim(out) != x.dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "feed_forward output",
            left: vec![x.nrows(), x.ncols()],
            right: vec![tape.dim(out).0, tape.dim(out).1],
        });
    }
    Ok(tape.value(out).clone())
}

fn ffn_on_tape(tape: &mut Tape, x: Var, [w1, b1, w2, b2]: [Var; 4]) -> Result<Var, NumericsError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Row layer norm with learnable gain and bias.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix, NumericsError> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let g = tape.leaf(gain.clone());
    let b = tape.leaf(bias.clone());
    let n = tape.standardize(xi, LAYER_NORM_EPS);
    let n = tape.mul_row(n, g)?;
    let out = tape.add_row(n, b)?;
    Ok(tape.value(out).clone())
}

// Scope-level blocks, reading weights by name from the parameter store.

pub fn linear(scope: &mut Scope<'_>, prefix: &str, x: Var, bias: bool) -> Result<Var, NumericsError> {
    let w = scope.param(&format!("{prefix}.w"))?;
    let y = scope.tape.matmul(x, w)?;
    if bias {
        let b = scope.param(&format!("{prefix}.b"))?;
        scope.tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn attention_block(
    scope: &mut Scope<'_>,
    prefix: &str,
    q: Var,
    kv: Var,
    heads: usize,
) -> Result<Var, NumericsError> {
    let ws = [
        scope.param(&format!("{prefix}.wq"))?,
        scope.param(&format!("{prefix}.wk"))?,
        scope.param(&format!("{prefix}.wv"))?,
        scope.param(&format!("{prefix}.wo"))?,
    ];
    attention_on_tape(&mut scope.tape, q, kv, kv, ws, heads)
}

pub fn ffn_block(scope: &mut Scope<'_>, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let ws = [
        scope.param(&format!("{prefix}.w1"))?,
        scope.param(&format!("{prefix}.b1"))?,
        scope.param(&format!("{prefix}.w2"))?,
        scope.param(&format!("{prefix}.b2"))?,
    ];
    ffn_on_tape(&mut scope.tape, x, ws)
}

pub fn layer_norm_block(scope: &mut Scope<'_>, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let g = scope.param(&format!("{prefix}.g"))?;
    let b = scope.param(&format!("{prefix}.b"))?;
    let n = scope.tape.standardize(x, LAYER_NORM_EPS);
    let n = scope.tape.mul_row(n, g)?;
    scope.tape.add_row(n, b)
}

// Initialisers matching the blocks above.

pub fn init_linear<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut R,
) {
    store.init_weight(format!("{prefix}.w"), d_in, d_out, rng);
    if bias {
        store.init_const(format!("{prefix}.b"), 1, d_out, 0.0);
    }
}

pub fn init_attention<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
    d: usize,
    rng: &mut R,
) {
    store.init_weight(format!("{prefix}.wq"), d_q, d, rng);
    store.init_weight(format!("{prefix}.wk"), d_kv, d, rng);
    store.init_weight(format!("{prefix}.wv"), d_kv, d, rng);
    store.init_weight(format!("{prefix}.wo"), d, d_q, rng);
}

pub fn init_ffn<R: rand::Rng>(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut R) {
    store.init_weight(format!("{prefix}.w1"), d, d_ff, rng);
    store.init_const(format!("{prefix}.b1"), 1, d_ff, 0.0);
    store.init_weight(format!("{prefix}.w2"), d_ff, d, rng);
    store.init_const(format!("{prefix}.b2"), 1, d, 0.0);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_const(format!("{prefix}.g"), 1, d, 1.0);
    store.init_const(format!("{prefix}.b"), 1, d, 0.0);
}
