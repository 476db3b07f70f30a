//! Recorded dense-tensor computation with reverse-mode gradient accumulation.
//!
//! Every forward op appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes once in reverse order,
//! which is a valid reverse topological order because inputs always precede
//! the ops that consume them.
//!
//! ```
//! use hgae_core::matrix::Matrix;
//! use hgae_core::tape::Tape;
//!
//! let mut tape = Tape::default();
//! let x = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
//! let loss = tape.reduce_mean(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.25));
//! ```

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("tape already consumed by a backward pass; record the computation again")]
    Consumed,
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Storage precision of recorded values.
///
/// In `F32` mode every recorded output is rounded to the nearest `f32`
/// (overflow becomes infinity and trips the non-finite check); arithmetic
/// inside a single op still accumulates in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Prelu(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ReduceMean(Var),
    RowCosine(Var, Var),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
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

/// How the right-hand operand of an elementwise op broadcasts to the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Column,
    Row,
    Scalar,
}

fn broadcast_kind(a: (usize, usize), b: (usize, usize), op: &'static str) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if b == (a.0, 1) {
        Ok(Broadcast::Column)
    } else if b == (1, a.1) {
        Ok(Broadcast::Row)
    } else {
        Err(TapeError::Shape { op, lhs: a, rhs: b })
    }
}

#[inline]
fn bidx(kind: Broadcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Column => r,
        Broadcast::Row => c,
        Broadcast::Scalar => 0,
    }
}

/// Sum `g` (shaped like the left operand) down to the right operand's shape.
fn reduce_to(kind: Broadcast, g: &Matrix, b_shape: (usize, usize)) -> Matrix {
    match kind {
        Broadcast::Same => g.clone(),
        _ => {
            let mut out = Matrix::zeros(b_shape.0, b_shape.1);
            let cols = g.cols();
            for r in 0..g.rows() {
                for c in 0..cols {
                    out.data_mut()[bidx(kind, b_shape.1, r, c)] += g.get(r, c);
                }
            }
            out
        }
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A learnable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        let value = self.round(value);
        self.raw_push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        let value = self.round(value);
        self.raw_push(value, Op::Constant, false)
    }

    fn round(&self, mut m: Matrix) -> Matrix {
        if self.precision == Precision::F32 {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }

    fn raw_push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.round(value);
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.raw_push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TapeError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.value(a).matmul(self.value(b));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(TapeError::Shape {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.value(a).matmul_nt(self.value(b));
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    /// `a + b`, where `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_apply("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise `a ⊙ b`, broadcasting `b` like [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_apply("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_apply(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va.shape(), vb.shape(), op)?;
        let (rows, cols) = va.shape();
        let mut out = Matrix::zeros(rows, cols);
        let bd = vb.data();
        let bcols = vb.cols();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] = f(va.get(r, c), bd[bidx(kind, bcols, r, c)]);
            }
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(TapeError::Shape {
                op: "concat_cols",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut out = Matrix::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(va.row(r));
            row[ca..].copy_from_slice(vb.row(r));
        }
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stack inputs with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TapeError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TapeError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(*first),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Matrix::from_vec(rows, cols, data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push("elu", out, Op::Elu(x), &[x])
    }

    /// Parametric ReLU with a single learned slope (`slope` is 1x1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != (1, 1) {
            return Err(TapeError::Shape {
                op: "prelu",
                lhs: self.shape(x),
                rhs: self.shape(slope),
            });
        }
        let a = self.value(slope).get(0, 0);
        let out = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        self.push("prelu", out, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push("log", out, Op::Log(x), &[x])
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TapeError::Invalid {
                op: "reduce_mean",
                msg: "empty tensor".into(),
            });
        }
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        self.push("reduce_mean", out, Op::ReduceMean(x), &[x])
    }

    /// Per-row cosine similarity, `N x 1`. Rows where either side has zero
    /// norm yield 0 and pass no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TapeError::Shape {
                op: "row_cosine",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out: Vec<f64> = (0..va.rows())
            .map(|r| {
                let (x, y) = (va.row(r), vb.row(r));
                cosine(x, y)
            })
            .collect();
        self.push("row_cosine", Matrix::column(out), Op::RowCosine(a, b), &[a, b])
    }

    /// Softmax of an `E x 1` score column within each segment.
    /// `segments[e]` is the segment of entry `e`, in `0..n_segments`.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segments: Rc<[usize]>,
        n_segments: usize,
    ) -> Result<Var> {
        let s = self.value(scores);
        if s.cols() != 1 || s.rows() != segments.len() {
            return Err(TapeError::Shape {
                op: "segment_softmax",
                lhs: s.shape(),
                rhs: (segments.len(), 1),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&g| g >= n_segments) {
            return Err(TapeError::Invalid {
                op: "segment_softmax",
                msg: format!("segment id {bad} >= {n_segments}"),
            });
        }
        let out = Matrix::column(segment_softmax_values(s.data(), &segments, n_segments));
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(scores, segments, n_segments),
            &[scores],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(TapeError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", v.rows()),
            });
        }
        let out = v.gather_rows(&idx);
        self.push("gather_rows", out, Op::GatherRows(x, idx), &[x])
    }

    /// `out[idx[e]] += x[e]` into a fresh `n_out x cols` matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != idx.len() {
            return Err(TapeError::Shape {
                op: "scatter_add_rows",
                lhs: v.shape(),
                rhs: (idx.len(), 1),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(TapeError::Invalid {
                op: "scatter_add_rows",
                msg: format!("target row {bad} >= {n_out}"),
            });
        }
        let mut out = Matrix::zeros(n_out, v.cols());
        for (e, &t) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(t).iter_mut().zip(v.row(e)) {
                *o += x;
            }
        }
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, idx), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| c * v);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// Elementwise `x^gamma` for non-negative inputs. For `gamma != 1`,
    /// negative inputs (rounding residue such as `1 - cos` slightly below
    /// zero) are treated as zero.
    pub fn pow(&mut self, x: Var, gamma: f64) -> Result<Var> {
        let out = if gamma == 1.0 {
            self.value(x).clone()
        } else {
            self.value(x).map(|v| v.max(0.0).powf(gamma))
        };
        self.push("pow", out, Op::Pow(x, gamma), &[x])
    }

    /// Sign pattern of every input to a non-smooth op (`leaky_relu`, `prelu`,
    /// `elu`). Two evaluations with equal patterns lie on the same smooth
    /// piece of the recorded function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let input = match node.op {
                Op::LeakyRelu(x, _) | Op::Elu(x) | Op::Prelu(x, _) => x,
                _ => continue,
            };
            out.extend(self.nodes[input.0].value.data().iter().map(|&v| v > 0.0));
        }
        out
    }

    /// Reverse pass from a 1x1 `loss`. Consumes the recording: a second call
    /// fails with [`TapeError::Consumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accum(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    self.accum(grads, *a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                let kind = broadcast_kind(self.shape(*a), self.shape(*b), "add")
                    .expect("validated at record time");
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, reduce_to(kind, g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let kind =
                    broadcast_kind(va.shape(), vb.shape(), "mul").expect("validated at record time");
                let cols = va.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..va.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] *= vb.data()[bidx(kind, vb.cols(), r, c)];
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let prod = g.zip_map(va, |x, y| x * y);
                    self.accum(grads, *b, reduce_to(kind, &prod, vb.shape()));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let rows = g.rows();
                let mut ga = Matrix::zeros(rows, ca);
                let mut gb = Matrix::zeros(rows, cb);
                for r in 0..rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    offset += rows;
                    self.accum(grads, p, Matrix::from_vec(rows, cols, slice));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { slope * gv });
                self.accum(grads, *x, gx);
            }
            Op::Elu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { v.exp() * gv });
                self.accum(grads, *x, gx);
            }
            Op::Prelu(x, slope) => {
                let a = self.value(*slope).get(0, 0);
                let vx = self.value(*x);
                if self.wants(*x) {
                    self.accum(grads, *x, vx.zip_map(g, |v, gv| if v > 0.0 { gv } else { a * gv }));
                }
                if self.wants(*slope) {
                    let ga: f64 = vx
                        .data()
                        .iter()
                        .zip(g.data())
                        .filter(|(v, _)| **v <= 0.0)
                        .map(|(v, gv)| v * gv)
                        .sum();
                    self.accum(grads, *slope, Matrix::scalar(ga));
                }
            }
            Op::Tanh(x) => self.accum(grads, *x, y.zip_map(g, |t, gv| (1.0 - t * t) * gv)),
            Op::Sigmoid(x) => self.accum(grads, *x, y.zip_map(g, |s, gv| s * (1.0 - s) * gv)),
            Op::Exp(x) => self.accum(grads, *x, y.zip_map(g, |e, gv| e * gv)),
            Op::Log(x) => self.accum(grads, *x, self.value(*x).zip_map(g, |v, gv| gv / v)),
            Op::ReduceMean(x) => {
                let (r, c) = self.shape(*x);
                let gv = g.get(0, 0) / (r * c) as f64;
                self.accum(grads, *x, Matrix::filled(r, c, gv));
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, cols) = va.shape();
                let mut ga = Matrix::zeros(rows, cols);
                let mut gb = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (x, z) = (va.row(r), vb.row(r));
                    let (nx, nz) = (norm(x), norm(z));
                    if nx == 0.0 || nz == 0.0 {
                        continue;
                    }
                    let cos = y.get(r, 0);
                    let gr = g.get(r, 0);
                    let inv = 1.0 / (nx * nz);
                    for c in 0..cols {
                        ga.row_mut(r)[c] = gr * (z[c] * inv - cos * x[c] / (nx * nx));
                        gb.row_mut(r)[c] = gr * (x[c] * inv - cos * z[c] / (nz * nz));
                    }
                }
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::SegmentSoftmax(x, segments, n_segments) => {
                let mut weighted = vec![0.0; *n_segments];
                for (e, &s) in segments.iter().enumerate() {
                    weighted[s] += y.get(e, 0) * g.get(e, 0);
                }
                let gx: Vec<f64> = segments
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y.get(e, 0) * (g.get(e, 0) - weighted[s]))
                    .collect();
                self.accum(grads, *x, Matrix::column(gx));
            }
            Op::GatherRows(x, idx) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for (o, &src) in idx.iter().enumerate() {
                    for (t, &v) in gx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *t += v;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::ScatterAddRows(x, idx) => {
                self.accum(grads, *x, g.gather_rows(idx));
            }
            Op::Scale(x, c) => self.accum(grads, *x, g.map(|v| c * v)),
            Op::AddScalar(x) => self.accum(grads, *x, g.clone()),
            Op::Pow(x, gamma) => {
                let gx = self.value(*x).zip_map(g, |v, gv| {
                    let d = if *gamma == 1.0 {
                        1.0
                    } else if v <= 0.0 {
                        if *gamma > 1.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        gamma * v.powf(gamma - 1.0)
                    };
                    d * gv
                });
                self.accum(grads, *x, gx);
            }
        }
    }
}

/// Cosine similarity, 0 when either vector has zero norm. Evaluated as
/// `sign(d) * sqrt(d^2 / (|x|^2 |y|^2))`, so `cosine(x, x)` is exactly 1 and
/// rescaling either argument by a power of two leaves the result unchanged.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let d = dot(x, y);
    let (sx, sy) = (dot(x, x), dot(y, y));
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let den = sx * sy;
    let c = if den.is_finite() && den > 0.0 && (d * d).is_finite() {
        ((d * d) / den).sqrt().copysign(d)
    } else {
        d / (sx.sqrt() * sy.sqrt())
    };
    c.clamp(-1.0, 1.0)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable per-segment softmax (max-subtracted).
pub fn segment_softmax_values(scores: &[f64], segments: &[usize], n_segments: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; n_segments];
    for (&s, &g) in scores.iter().zip(segments) {
        if s > max[g] {
            max[g] = s;
        }
    }
    let exps: Vec<f64> = scores
        .iter()
        .zip(segments)
        .map(|(&s, &g)| (s - max[g]).exp())
        .collect();
    let mut sums = vec![0.0; n_segments];
    for (&e, &g) in exps.iter().zip(segments) {
        sums[g] += e;
    }
    exps.iter()
        .zip(segments)
        .map(|(&e, &g)| e / sums[g])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc(v: &[usize]) -> Rc<[usize]> {
        Rc::from(v)
    }

    #[test]
    fn equal_logits_split_evenly() {
        let mut t = Tape::default();
        let s = t.constant(Matrix::column(vec![1.0, 1.0]));
        let y = t.segment_softmax(s, rc(&[0, 0]), 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_with_self_is_one() {
        let mut t = Tape::default();
        let x = t.constant(Matrix::from_rows(&[vec![0.3, -2.0, 5.0]]));
        let c = t.row_cosine(x, x).unwrap();
        assert!((t.value(c).get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut t = Tape::default();
        let i = t.constant(Matrix::identity(2));
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let x = t.constant(m.clone());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), &m);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::default();
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 9.0]]));
        let l = t.reduce_mean(x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::default();
        let x = t.leaf(Matrix::scalar(2.0));
        let l = t.scale(x, 3.0).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.backward(l).unwrap_err(), TapeError::Consumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::default();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(TapeError::NonScalarLoss((2, 1)))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::default();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, TapeError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn log_of_zero_trips_finite_check() {
        let mut t = Tape::default();
        let x = t.constant(Matrix::scalar(0.0));
        assert_eq!(t.log(x).unwrap_err(), TapeError::NonFinite { op: "log" });
    }

    #[test]
    fn f32_mode_overflows_to_error() {
        let mut t = Tape::new(Precision::F32);
        let x = t.constant(Matrix::scalar(1e30));
        assert!(t.mul(x, x).is_err());
        let mut t = Tape::new(Precision::F64);
        let x = t.constant(Matrix::scalar(1e30));
        assert!(t.mul(x, x).is_ok());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::default();
        let a = t.leaf(Matrix::zeros(3, 2));
        let b = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let y = t.add(a, b).unwrap();
        let l = t.reduce_mean(y).unwrap();
        let g = t.backward(l).unwrap();
        let gb = g.get(b).unwrap();
        assert_eq!(gb.shape(), (1, 2));
        assert!((gb.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::default();
        let a = t.constant(Matrix::scalar(2.0));
        let b = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().get(0, 0), 2.0);
    }
}
