//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward computation. Values live
//! on the tape and are addressed through copyable [`Var`] handles. After
//! [`Tape::backward`] every node that requires a gradient (parameters and
//! anything computed from them) carries one. A tape is single-use: a second
//! backward needs an explicit [`Tape::zero_grads`] (same graph, new seed) or
//! [`Tape::reset`] (empty graph).
//!
//! Broadcasting is limited to identical shapes and scalar-vs-tensor, plus the
//! two named row/column broadcasts [`Tape::add_bias`] and [`Tape::mul_rows`].

mod gradcheck;
mod kernels;

use std::ops::Range;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport, GRAD_CHECK_ABS_FLOOR};

use crate::error::{dim_err, AcrError, Result};
use crate::tensor::Tensor;
use kernels::gemm;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Broadcast, Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var, Var),
    SqMean(Var, Var),
    SmoothL1Mean(Var, Var, f64),
    BceWithLogits(Var, Var),
    Slice2d {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Gather2d {
        x: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    retain: bool,
}

/// Recorded computation graph plus gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// Clears gradients but keeps the graph so another output can be
    /// back-propagated through the same forward pass.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Marks `v` so that a gradient buffer is guaranteed after backward.
    pub fn retain(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn has_run_backward(&self) -> bool {
        self.backward_done
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.backward_done {
            return Err(AcrError::State("backward has not been run".into()));
        }
        let node = &self.nodes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None if node.requires_grad || node.retain => Ok(Tensor::zeros(node.value.shape())),
            None => Err(AcrError::State(format!(
                "node {} neither requires nor retains a gradient",
                v.0
            ))),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            retain: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor, inputs: &[Var], name: &str) -> Result<Var> {
        if self.backward_done {
            return Err(AcrError::State(
                "tape already consumed by backward; reset before recording".into(),
            ));
        }
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, p) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!("matmul inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * p];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k,
            p,
            false,
            0.0,
            &mut out,
        );
        self.record(Op::MatMul(a, b), Tensor::matrix(m, p, out)?, &[a, b], "matmul")
    }

    /// `a[m×k] · b[p×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (p, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!("matmul_nt inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * p];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            p,
            k,
            true,
            0.0,
            &mut out,
        );
        self.record(Op::MatMulNt(a, b), Tensor::matrix(m, p, out)?, &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        self.record(Op::Transpose(a), t, &[a], "transpose")
    }

    // ----- elementwise ----------------------------------------------------

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if ta.is_scalar() {
            Ok(Broadcast::LhsScalar)
        } else if tb.is_scalar() {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(dim_err!(
                "incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ))
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::Same => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LhsScalar => {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::RhsScalar => {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.record(Op::Binary(kind, bc, a, b), Tensor::new(shape, data)?, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.record(Op::Scale(a, c), out, &[a], "scale")
    }

    /// Adds a length-`n` vector to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(dim_err!(
                "bias of {} values for {n} columns",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        self.record(Op::AddBias(x, bias), Tensor::matrix(m, n, out)?, &[x, bias], "add_bias")
    }

    /// Scales row `r` of `x[m×n]` by `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(s).numel() != m {
            return Err(dim_err!(
                "{} row factors for {m} rows",
                self.value(s).numel()
            ));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, f) in out.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|o| *o *= f);
        }
        self.record(Op::MulRows(x, s), Tensor::matrix(m, n, out)?, &[x, s], "mul_rows")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64, name: &str) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        self.record(op, out, &[a], name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0), "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            Op::Gelu(a),
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            "gelu",
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid, "sigmoid")
    }

    /// Normalizes each row of `x[m×n]` to zero mean and unit variance, then
    /// applies the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err!("layer_norm affine parameters must have {n} values"));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.record(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Tensor::matrix(m, n, out)?,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.record(Op::SoftmaxRows(x), Tensor::matrix(m, n, out)?, &[x], "softmax_rows")
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(Op::Sum(x), Tensor::scalar(s), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record(Op::Mean(x), Tensor::scalar(s), &[x], "mean")
    }

    fn paired(&self, a: Var, b: Var) -> Result<(&[f64], &[f64])> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err!(
                "paired reduction over shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        Ok((ta.data(), tb.data()))
    }

    /// Mean of `|a - b|`.
    pub fn abs_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.paired(a, b)?;
        let s = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
        self.record(Op::AbsMean(a, b), Tensor::scalar(s), &[a, b], "abs_mean")
    }

    /// Mean of `(a - b)²`.
    pub fn sq_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.paired(a, b)?;
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        self.record(Op::SqMean(a, b), Tensor::scalar(s), &[a, b], "sq_mean")
    }

    /// Mean Huber-style smooth-ℓ1 distance with transition point `beta`.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(AcrError::Contract("smooth-l1 beta must be positive".into()));
        }
        let (x, y) = self.paired(a, b)?;
        let s = x
            .iter()
            .zip(y)
            .map(|(p, q)| smooth_l1(p - q, beta))
            .sum::<f64>()
            / x.len() as f64;
        self.record(Op::SmoothL1Mean(a, b, beta), Tensor::scalar(s), &[a, b], "smooth_l1_mean")
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (x, t) = self.paired(logits, targets)?;
        let s = x
            .iter()
            .zip(t)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        self.record(
            Op::BceWithLogits(logits, targets),
            Tensor::scalar(s),
            &[logits, targets],
            "bce_with_logits",
        )
    }

    // ----- indexing -------------------------------------------------------

    pub fn slice2d(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > m || cols.end > n {
            return Err(dim_err!("slice {rows:?}×{cols:?} out of bounds for {m}×{n}"));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&t.data()[r * n + cols.start..r * n + cols.end]);
        }
        let value = Tensor::matrix(rows.len(), cols.len(), out)?;
        self.record(Op::Slice2d { x, rows, cols }, value, &[x], "slice2d")
    }

    /// `out[i][j] = x[rows[i]][cols[j]]`.
    pub fn gather2d(&mut self, x: Var, rows: Vec<usize>, cols: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(dim_err!("gather index out of bounds for {m}×{n}"));
        }
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            out.extend(cols.iter().map(|&c| t[r * n + c]));
        }
        let value = Tensor::matrix(rows.len(), cols.len(), out)?;
        self.record(Op::Gather2d { x, rows, cols }, value, &[x], "gather2d")
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a)?;
        let (mb, nb) = self.dims2(b)?;
        if na != nb {
            return Err(dim_err!("concat_rows column counts {na} vs {nb}"));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.record(Op::ConcatRows(a, b), Tensor::matrix(ma + mb, na, out)?, &[a, b], "concat_rows")
    }

    /// Places the inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AcrError::Contract("concat_cols of nothing".into()));
        }
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(dim_err!("concat_cols row counts {m} vs {pm}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.record(
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix(m, total, out)?,
            parts,
            "concat_cols",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record(Op::Reshape(x), value, &[x], "reshape")
    }

    // ----- backward -------------------------------------------------------

    /// Back-propagates from the scalar `loss`, populating gradients for every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AcrError::State(
                "backward already ran on this tape; call zero_grads or reset first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(AcrError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let Tape { nodes, grads, .. } = self;
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if g.is_none() && (node.requires_grad || node.retain) {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let p = nodes[b.0].value.dims2().unwrap().1;
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(g, m, p, false, val(*b), k, p, true, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(val(*a), m, k, true, g, m, p, false, 1.0, gb);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let p = nodes[b.0].value.dims2().unwrap().0;
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(g, m, p, false, val(*b), p, k, false, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(g, m, p, true, val(*a), m, k, false, 1.0, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a.0].value.dims2().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] += g[y * r + x];
                    }
                }
            }
        }
        Op::Binary(kind, bc, a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let idx = |data: &[f64], j: usize, scalar: bool| if scalar { data[0] } else { data[j] };
            let a_scalar = matches!(bc, Broadcast::LhsScalar);
            let b_scalar = matches!(bc, Broadcast::RhsScalar);
            // Partial derivatives of the elementwise op at output index j.
            let da = |j: usize| match kind {
                BinaryKind::Add | BinaryKind::Sub => 1.0,
                BinaryKind::Mul => idx(xb, j, b_scalar),
                BinaryKind::Div => 1.0 / idx(xb, j, b_scalar),
            };
            let db = |j: usize| match kind {
                BinaryKind::Add => 1.0,
                BinaryKind::Sub => -1.0,
                BinaryKind::Mul => idx(xa, j, a_scalar),
                BinaryKind::Div => {
                    let y = idx(xb, j, b_scalar);
                    -idx(xa, j, a_scalar) / (y * y)
                }
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                for (j, gj) in g.iter().enumerate() {
                    ga[if a_scalar { 0 } else { j }] += gj * da(j);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (j, gj) in g.iter().enumerate() {
                    gb[if b_scalar { 0 } else { j }] += gj * db(j);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, gj)| *o += gj * c);
            }
        }
        Op::AddBias(x, bias) => {
            let n = nodes[x.0].value.dims2().unwrap().1;
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, gj)| *o += gj);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, gj)| *o += gj);
                }
            }
        }
        Op::MulRows(x, s) => {
            let n = nodes[x.0].value.dims2().unwrap().1;
            let (xv, sv) = (val(*x), val(*s));
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, (gr, gxr)) in g.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    gxr.iter_mut().zip(gr).for_each(|(o, gj)| *o += gj * sv[r]);
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for (r, (gr, xr)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                    gs[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Relu(a) => {
            let xa = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    if xa[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let xa = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    let x = xa[j];
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    ga[j] += g[j] * d;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = nodes[x.0].value.dims2().unwrap().1;
            let gam = val(*gamma);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        mean_d += d;
                        mean_dh += d * hr[c];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        gx[r * n + c] += rs * (d - mean_d - hr[c] * mean_dh);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        gg[c] += gr[c] * hr[c];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(n) {
                    gb.iter_mut().zip(gr).for_each(|(o, gj)| *o += gj);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let n = nodes[a.0].value.dims2().unwrap().1;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), gar) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gar[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }
        }
        Op::AbsMean(a, b) | Op::SqMean(a, b) | Op::SmoothL1Mean(a, b, _) => {
            let (xa, xb) = (val(*a), val(*b));
            let scale = g[0] / xa.len() as f64;
            let deriv = |d: f64| match &nodes[i].op {
                Op::AbsMean(..) => sign(d),
                Op::SqMean(..) => 2.0 * d,
                Op::SmoothL1Mean(_, _, beta) => {
                    if d.abs() < *beta {
                        d / beta
                    } else {
                        sign(d)
                    }
                }
                _ => unreachable!(),
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..xa.len() {
                    ga[j] += scale * deriv(xa[j] - xb[j]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for j in 0..xa.len() {
                    gb[j] -= scale * deriv(xa[j] - xb[j]);
                }
            }
        }
        Op::BceWithLogits(logits, targets) => {
            let (x, t) = (val(*logits), val(*targets));
            let scale = g[0] / x.len() as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for j in 0..x.len() {
                    gl[j] += scale * (sigmoid(x[j]) - t[j]);
                }
            }
            if let Some(gt) = slot(nodes, grads, *targets) {
                for j in 0..x.len() {
                    gt[j] -= scale * x[j];
                }
            }
        }
        Op::Slice2d { x, rows, cols } => {
            let n = nodes[x.0].value.dims2().unwrap().1;
            let w = cols.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (ri, r) in rows.clone().enumerate() {
                    for (ci, c) in cols.clone().enumerate() {
                        gx[r * n + c] += g[ri * w + ci];
                    }
                }
            }
        }
        Op::Gather2d { x, rows, cols } => {
            let n = nodes[x.0].value.dims2().unwrap().1;
            let w = cols.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (ri, &r) in rows.iter().enumerate() {
                    for (ci, &c) in cols.iter().enumerate() {
                        gx[r * n + c] += g[ri * w + ci];
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let la = nodes[a.0].value.numel();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&g[..la]).for_each(|(o, gj)| *o += gj);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&g[la..]).for_each(|(o, gj)| *o += gj);
            }
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|p| nodes[p.0].value.dims2().unwrap().1).sum();
            let mut offset = 0;
            for p in parts {
                let (m, w) = nodes[p.0].value.dims2().unwrap();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for r in 0..m {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, gj)| *o += gj);
            }
        }
    }
}
