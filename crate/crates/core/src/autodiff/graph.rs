use std::f64::consts::PI;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    /// scalar node times tensor node
    Scale(Var, Var),
    ScaleConst(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Slice {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    TileRows(Var),
    /// `mix[n_out × block]` applied to each consecutive block of rows
    RowMix {
        x: Var,
        mix: Tensor,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so parents
/// always precede children.
///
/// A graph supports exactly one [`Graph::backward`] call; build a fresh graph
/// for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`], if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Gelu => gelu,
            UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
        };
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(op, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    /// Same-shape elementwise arithmetic. A one-element operand is treated as
    /// a scalar and routed through [`Graph::scale`] for `Mul`.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            if op == BinaryOp::Mul && va.is_scalar() {
                return self.scale(a, b);
            }
            if op == BinaryOp::Mul && vb.is_scalar() {
                return self.scale(b, a);
            }
            return Err(Error::dim("elementwise", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `s · t` where `s` holds a single element.
    pub fn scale(&mut self, s: Var, t: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim("scale", self.value(s).shape(), &[1]));
        }
        let k = self.value(s).item();
        let out = self.value(t).map(|v| k * v);
        let rg = self.rg(&[s, t]);
        Ok(self.push(out, Op::Scale(s, t), rg))
    }

    pub fn scale_const(&mut self, t: Var, k: f64) -> Var {
        let out = self.value(t).map(|v| k * v);
        let rg = self.rg(&[t]);
        self.push(out, Op::ScaleConst(t, k), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Normalize every vector along the last axis, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * inv;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sub-matrix `x[r0..r1, c0..c1]`.
    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice")?;
        if rows.0 >= rows.1 || rows.1 > m || cols.0 >= cols.1 || cols.1 > n {
            return Err(Error::Contract(format!(
                "slice {rows:?}x{cols:?} out of bounds for [{m}, {n}]"
            )));
        }
        let xv = self.value(x);
        let w = cols.1 - cols.0;
        let mut out = Vec::with_capacity((rows.1 - rows.0) * w);
        for r in rows.0..rows.1 {
            out.extend_from_slice(&xv.row(r)[cols.0..cols.1]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.1 - rows.0, w], out)?,
            Op::Slice { x, rows, cols },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let m = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let n = self.matrix_dims(parts[0], "concat_rows")?.1;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            m += pm;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Repeat a length-`d` vector as `n` rows of an `n×d` matrix.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Contract("tile_rows with zero rows".into()));
        }
        let v = self.value(x);
        let d = v.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::TileRows(x), rg))
    }

    /// Apply a constant `mix[n_out × block]` to each consecutive block of
    /// `block` rows of `x`. Used for pooling and strided selection along the
    /// patch axis of a stacked batch.
    pub fn row_mix(&mut self, x: Var, mix: &Tensor) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "row_mix")?;
        if mix.shape().len() != 2 {
            return Err(Error::Contract("row_mix needs a matrix".into()));
        }
        let (out_rows, block) = (mix.shape()[0], mix.shape()[1]);
        if m % block != 0 {
            return Err(Error::dim("row_mix", self.value(x).shape(), mix.shape()));
        }
        let blocks = m / block;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(blocks * out_rows * n);
        for b in 0..blocks {
            let xb = &xv[b * block * n..(b + 1) * block * n];
            out.extend(gemm(mix.data(), xb, out_rows, block, n));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![blocks * out_rows, n], out)?,
            Op::RowMix { x, mix: mix.clone() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Accumulate `∂loss/∂v` into every reachable node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a, "matmul")?;
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let da = gemm_nt(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = gemm_tn(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.matrix_dims(*a, "matmul_nt")?;
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let da = gemm(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = gemm_tn(gd, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = (0..gd.len())
                    .map(|j| {
                        gd[j]
                            * match op {
                                UnaryOp::Sigmoid => yv[j] * (1.0 - yv[j]),
                                UnaryOp::Gelu => gelu_grad(xv[j]),
                                UnaryOp::Relu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    self.accumulate(grads, *a, gd.to_vec());
                    self.accumulate(grads, *b, gd.to_vec());
                }
                BinaryOp::Sub => {
                    self.accumulate(grads, *a, gd.to_vec());
                    self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
                }
                BinaryOp::Mul => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if self.requires_grad(*b) {
                        self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
            },
            Op::Scale(s, t) => {
                let tv = self.value(*t).data();
                if self.requires_grad(*s) {
                    let ds: f64 = gd.iter().zip(tv).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
                if self.requires_grad(*t) {
                    let k = self.value(*s).item();
                    self.accumulate(grads, *t, gd.iter().map(|g| k * g).collect());
                }
            }
            Op::ScaleConst(t, k) => {
                self.accumulate(grads, *t, gd.iter().map(|g| k * g).collect());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let s = r * n;
                    let dot: f64 = (0..n).map(|j| gd[s + j] * yd[s + j]).sum();
                    for j in 0..n {
                        dx[s + j] = yd[s + j] * (gd[s + j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let df = d as f64;
                    for r in 0..rows {
                        let s = r * d;
                        let dxhat: Vec<f64> = (0..d).map(|j| gd[s + j] * gv[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..d).map(|j| dxhat[j] * xhat[s + j]).sum();
                        for j in 0..d {
                            dx[s + j] =
                                inv_std[r] / df * (df * dxhat[j] - sum_d - xhat[s + j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Slice { x, rows, cols } => {
                let n = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                let w = cols.1 - cols.0;
                for (ri, r) in (rows.0..rows.1).enumerate() {
                    dx[r * n + cols.0..r * n + cols.1].copy_from_slice(&gd[ri * w..(ri + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&gd[r * n + offset..r * n + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Transpose(x) => {
                let t = g.transpose()?;
                self.accumulate(grads, *x, t.into_data());
            }
            Op::TileRows(x) => {
                let d = self.value(*x).len();
                let mut dx = vec![0.0; d];
                for chunk in gd.chunks(d) {
                    for (a, v) in dx.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowMix { x, mix } => {
                let n = node.value.cols();
                let (out_rows, block) = (mix.shape()[0], mix.shape()[1]);
                let blocks = node.value.rows() / out_rows;
                let mut dx = Vec::with_capacity(blocks * block * n);
                for b in 0..blocks {
                    let gb = &gd[b * out_rows * n..(b + 1) * out_rows * n];
                    dx.extend(gemm_tn(mix.data(), gb, out_rows, block, n));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
