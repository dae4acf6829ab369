//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients for one or more output nodes
//! propagates adjoints back to every recorded node.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::{Matrix, NumericsError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Mean(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Records an input or parameter. Gradients reach leaves like any other node.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.0 {
            return Err(mismatch("matmul", da, db));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.1 {
            return Err(mismatch("matmul_t", da, db));
        }
        let out = self.value(a).dot(&self.value(b).t());
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(mismatch("add", da, db));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (da, dr) = (self.dim(a), self.dim(row));
        if dr.0 != 1 || dr.1 != da.1 {
            return Err(mismatch("add_row", da, dr));
        }
        let out = self.value(a) + self.value(row);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (da, dr) = (self.dim(a), self.dim(row));
        if dr.0 != 1 || dr.1 != da.1 {
            return Err(mismatch("mul_row", da, dr));
        }
        let out = self.value(a) * self.value(row);
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    /// Multiplies `a` by a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, scalar: Var) -> Result<Var, NumericsError> {
        let ds = self.dim(scalar);
        if ds != (1, 1) {
            return Err(mismatch("scale_by", self.dim(a), ds));
        }
        let s = self.value(scalar)[[0, 0]];
        let out = self.value(a) * s;
        Ok(self.push(out, Op::ScaleBy(a, scalar)))
    }

    /// `x · σ(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Per-row zero-mean unit-variance normalization (layer norm without affine terms).
    pub fn standardize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::Standardize { x: a, inv_std })
    }

    /// Scales each row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        self.push(out, Op::RowNormalize { x: a, norms })
    }

    /// Multi-head scaled dot-product attention core on already-projected
    /// queries `q` (n × d), keys `k` (m × d) and values `v` (m × d).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (dq, dk, dv) = (self.dim(q), self.dim(k), self.dim(v));
        if dq.1 != dk.1 {
            return Err(mismatch("attention q/k", dq, dk));
        }
        if dk != dv {
            return Err(mismatch("attention k/v", dk, dv));
        }
        if dk.0 == 0 {
            return Err(NumericsError::Empty("attention keys"));
        }
        if heads == 0 || dq.1 % heads != 0 {
            return Err(NumericsError::HeadCount { width: dq.1, heads });
        }
        let head_dim = dq.1 / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((dq.0, dq.1));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores *= scale;
            softmax_rows_in_place(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Elementwise average of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("mean"))?;
        let d0 = self.dim(first);
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            if self.dim(p) != d0 {
                return Err(mismatch("mean", d0, self.dim(p)));
            }
            out += self.value(p);
        }
        out /= parts.len() as f64;
        Ok(self.push(out, Op::Mean(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let rows = self.dim(first).0;
        for &p in parts {
            if self.dim(p).0 != rows {
                return Err(mismatch("concat_cols", self.dim(first), self.dim(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_rows"))?;
        let cols = self.dim(first).1;
        for &p in parts {
            if self.dim(p).1 != cols {
                return Err(mismatch("concat_rows", self.dim(first), self.dim(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let d = self.dim(a);
        if start + len > d.0 {
            return Err(mismatch("slice_rows", d, (start + len, d.1)));
        }
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows { x: a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let d = self.dim(a);
        if start + len > d.1 {
            return Err(mismatch("slice_cols", d, (d.0, start + len)));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols { x: a, start }))
    }

    /// Propagates the given seed adjoints back through the tape.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients, NumericsError> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if self.dim(*v) != g.dim() {
                return Err(mismatch("backward seed", self.dim(*v), g.dim()));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::ScaleBy(a, sc) => {
                    let s = self.value(*sc)[[0, 0]];
                    let gs = (&g * self.value(*a)).sum();
                    accumulate(&mut grads, *sc, Array2::from_elem((1, 1), gs));
                    accumulate(&mut grads, *a, &g * s);
                }
                Op::Silu(a) => {
                    let mut ga = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = node.value.mapv(|s| s * (1.0 - s));
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Standardize { x, inv_std } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    let n = y.ncols() as f64;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let mean_g = row.sum() / n;
                        let mean_gy = row.dot(&yr) / n;
                        let inv = inv_std[r];
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|gv, &yv| *gv = inv * (*gv - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = row.dot(&yr);
                        let norm = norms[r];
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|gv, &yv| *gv = (*gv - yv * proj) / norm);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let head_dim = qv.ncols() / heads;
                    let scale = 1.0 / (head_dim as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * head_dim..(h + 1) * head_dim];
                        let go = g.slice(cols);
                        let gp = go.dot(&vv.slice(cols).t());
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        let mut gs = &gp * p;
                        let sums = gs.sum_axis(Axis(1));
                        gs = p * &(gp - &sums.insert_axis(Axis(1)));
                        gs *= scale;
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut grads, *v, gv);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *q, gq);
                }
                Op::Mean(parts) => {
                    let share = &g / parts.len() as f64;
                    for &p in parts {
                        accumulate(&mut grads, p, share.clone());
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.dim(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.dim(p).0;
                        accumulate(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::zeros(self.dim(*x));
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.dim(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
            }
            // Leaves keep their adjoint so callers can read it.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
