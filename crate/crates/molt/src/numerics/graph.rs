//! Eager tape-based reverse-mode autodiff.
//!
//! Nodes are appended to a tape as the forward computation is built; values
//! are computed immediately. `backward` walks the tape in reverse and
//! accumulates exact gradients for every node that requires them. Execution
//! is single-threaded per step apart from row-parallel matmul, which is
//! bit-deterministic, so identical inputs always produce identical results.
//!
//! Gradient convention: tensors are row-major, and for `y = x @ w` the
//! gradients are `dx = dy @ w^T` and `dw = x^T @ dy`. Every module inherits
//! this convention.

use crate::error::{MoltError, Result};
use crate::numerics::ops;
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MulScalar(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    Sqrt(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    /// Gather rows of a 2-D tensor; output shape = prefix_shape + [cols].
    GatherRows { src: NodeId, ids: Vec<usize> },
    /// Pick one entry per last-dim row: out[r] = x[r, ids[r]].
    GatherLast { src: NodeId, ids: Vec<usize> },
    /// Softmax over the last dim restricted to unmasked entries; masked
    /// entries are exactly zero and excluded from the normalization.
    MaskedSoftmax { src: NodeId, mask: Vec<bool> },
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Concatenate two 2-D tensors along axis 0.
    ConcatRows(NodeId, NodeId),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
    label: String,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_path(&self, id: NodeId) -> String {
        format!("node#{} {}", id.0, self.nodes[id.0].label)
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool, label: String) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(MoltError::non_finite(
                format!("node#{} {}", id.0, label),
                "forward pass produced NaN/Inf".to_string(),
            ));
        }
        self.nodes.push(Node { op, value, requires_grad, label });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, label: impl Into<String>) -> Result<NodeId> {
        self.push(Op::Leaf, value, requires_grad, label.into())
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>, label: impl Into<String>) -> Result<NodeId> {
        self.leaf(value, false, label)
    }

    fn req2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_op(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, self.req2(a, b), "add".into())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_op(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, self.req2(a, b), "sub".into())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_op(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, self.req2(a, b), "mul".into())
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_op(self.value(a), self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), v, self.req2(a, b), "div".into())
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64c(c);
        let v = self.value(a).map(|x| x * cv);
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::MulScalar(a, c), v, req, "mul_scalar".into())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64c(c);
        let v = self.value(a).map(|x| x + cv);
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::AddScalar(a, c), v, req, "add_scalar".into())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b)).map_err(|e| self.rewrap(e, a, b))?;
        self.push(Op::Matmul(a, b), v, self.req2(a, b), "matmul".into())
    }

    fn rewrap(&self, e: MoltError, a: NodeId, b: NodeId) -> MoltError {
        match e {
            MoltError::Shape { msg, .. } => MoltError::shape(
                format!("{} x {}", self.node_path(a), self.node_path(b)),
                msg,
            ),
            other => other,
        }
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Reshape(a), v, req, "reshape".into())
    }

    pub fn permute(&mut self, a: NodeId, axes: Vec<usize>) -> Result<NodeId> {
        let v = ops::permute(self.value(a), &axes)?;
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Permute(a, axes), v, req, "permute".into())
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(ops::sum_all(self.value(a)));
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::SumAll(a), v, req, "sum_all".into())
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::sum_axis(self.value(a), axis)?;
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::SumAxis(a, axis), v, req, "sum_axis".into())
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.sqrt());
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Sqrt(a), v, req, "sqrt".into())
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Tanh(a), v, req, "tanh".into())
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let one = T::one();
        let v = self.value(a).map(|x| x / (one + (-x).exp()));
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Silu(a), v, req, "silu".into())
    }

    /// Gather rows from a 2-D tensor. `prefix_shape` describes how the row
    /// index list is organized (e.g. `[batch, seq]` for token embedding).
    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize], prefix_shape: &[usize]) -> Result<NodeId> {
        let sv = self.value(src);
        if sv.rank() != 2 {
            return Err(MoltError::shape(self.node_path(src), "gather_rows wants a 2-D source"));
        }
        let (rows, cols) = (sv.shape()[0], sv.shape()[1]);
        let count: usize = prefix_shape.iter().product();
        if count != ids.len() {
            return Err(MoltError::shape(
                self.node_path(src),
                format!("prefix shape {prefix_shape:?} vs {} ids", ids.len()),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(MoltError::shape(
                    self.node_path(src),
                    format!("row index {id} out of range ({rows} rows)"),
                ));
            }
            data.extend_from_slice(&sv.data()[id * cols..(id + 1) * cols]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(cols);
        let v = Tensor::new(shape, data)?;
        let req = self.nodes[src.0].requires_grad;
        self.push(Op::GatherRows { src, ids: ids.to_vec() }, v, req, "gather_rows".into())
    }

    /// Pick one entry per last-dim row: `out[r] = x[r, ids[r]]`.
    pub fn gather_last(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        let sv = self.value(src);
        if sv.rank() < 1 {
            return Err(MoltError::shape(self.node_path(src), "gather_last wants rank >= 1"));
        }
        let cols = *sv.shape().last().unwrap();
        let rows = sv.numel() / cols;
        if ids.len() != rows {
            return Err(MoltError::shape(
                self.node_path(src),
                format!("{rows} rows vs {} ids", ids.len()),
            ));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(MoltError::shape(
                    self.node_path(src),
                    format!("index {id} out of range for last dim {cols}"),
                ));
            }
            data.push(sv.data()[r * cols + id]);
        }
        let shape = sv.shape()[..sv.rank() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        let req = self.nodes[src.0].requires_grad;
        self.push(Op::GatherLast { src, ids: ids.to_vec() }, v, req, "gather_last".into())
    }

    pub fn masked_softmax(&mut self, src: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let sv = self.value(src);
        if mask.len() != sv.numel() {
            return Err(MoltError::shape(
                self.node_path(src),
                format!("mask len {} vs {} elements", mask.len(), sv.numel()),
            ));
        }
        let row_len = *sv.shape().last().ok_or_else(|| {
            MoltError::shape(self.node_path(src), "masked_softmax wants rank >= 1")
        })?;
        let mut v = sv.clone();
        ops::masked_softmax_rows(v.data_mut(), &mask, row_len);
        let req = self.nodes[src.0].requires_grad;
        self.push(Op::MaskedSoftmax { src, mask }, v, req, "masked_softmax".into())
    }

    pub fn log_softmax(&mut self, src: NodeId) -> Result<NodeId> {
        let sv = self.value(src);
        let row_len = *sv.shape().last().ok_or_else(|| {
            MoltError::shape(self.node_path(src), "log_softmax wants rank >= 1")
        })?;
        let mut v = sv.clone();
        ops::log_softmax_rows(v.data_mut(), row_len);
        let req = self.nodes[src.0].requires_grad;
        self.push(Op::LogSoftmax(src), v, req, "log_softmax".into())
    }

    /// Layer normalization over the last dim: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| {
            MoltError::shape(self.node_path(x), "layer_norm wants rank >= 1")
        })?;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(MoltError::shape(
                self.node_path(x),
                format!("layer_norm gamma/beta must have shape [{d}]"),
            ));
        }
        let epst = T::from_f64c(eps);
        let dt = T::from_f64c(d as f64);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dt;
            let inv = T::one() / (var + epst).sqrt();
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv * gv.data()[i] + bv.data()[i]);
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(Op::LayerNorm { x, gamma, beta, eps }, v, req, "layer_norm".into())
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(MoltError::shape(
                format!("{} ++ {}", self.node_path(a), self.node_path(b)),
                "concat_rows wants 2-D tensors with equal column counts",
            ));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::new(vec![av.shape()[0] + bv.shape()[0], av.shape()[1]], data)?;
        self.push(Op::ConcatRows(a, b), v, self.req2(a, b), "concat_rows".into())
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients
    /// (None where no gradient flows or none is required).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(MoltError::shape(
                self.node_path(loss),
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, ops::reduce_to_shape(&g, self.value(*a).shape()))?;
                    self.accum(&mut grads, *b, ops::reduce_to_shape(&g, self.value(*b).shape()))?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, ops::reduce_to_shape(&g, self.value(*a).shape()))?;
                    let neg = g.map(|v| -v);
                    self.accum(&mut grads, *b, ops::reduce_to_shape(&neg, self.value(*b).shape()))?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = ops::binary_op(&g, self.value(*b), |x, y| x * y)?;
                        self.accum(&mut grads, *a, ops::reduce_to_shape(&da, self.value(*a).shape()))?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = ops::binary_op(&g, self.value(*a), |x, y| x * y)?;
                        self.accum(&mut grads, *b, ops::reduce_to_shape(&db, self.value(*b).shape()))?;
                    }
                }
                Op::Div(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = ops::binary_op(&g, self.value(*b), |x, y| x / y)?;
                        self.accum(&mut grads, *a, ops::reduce_to_shape(&da, self.value(*a).shape()))?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gy = ops::binary_op(&g, &node.value, |x, y| x * y)?;
                        let db = ops::binary_op(&gy, self.value(*b), |x, y| -(x / y))?;
                        self.accum(&mut grads, *b, ops::reduce_to_shape(&db, self.value(*b).shape()))?;
                    }
                }
                Op::MulScalar(a, c) => {
                    let cv = T::from_f64c(*c);
                    self.accum(&mut grads, *a, g.map(|v| v * cv))?;
                }
                Op::AddScalar(a, _) => {
                    self.accum(&mut grads, *a, g.clone())?;
                }
                Op::Matmul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.nodes[a.0].requires_grad {
                        let bt = ops::transpose_last2(bv)?;
                        let da = ops::matmul(&g, &bt)?;
                        self.accum(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        if bv.rank() == 2 && av.rank() > 2 {
                            let k = av.shape()[av.rank() - 1];
                            let n = *g.shape().last().unwrap();
                            let a2 = av.reshaped(vec![av.numel() / k, k])?;
                            let g2 = g.reshaped(vec![g.numel() / n, n])?;
                            let at = ops::transpose_last2(&a2)?;
                            let db = ops::matmul(&at, &g2)?;
                            self.accum(&mut grads, *b, db)?;
                        } else {
                            let at = ops::transpose_last2(av)?;
                            let db = ops::matmul(&at, &g)?;
                            self.accum(&mut grads, *b, db)?;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let da = g.reshaped(self.value(*a).shape().to_vec())?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::Permute(a, axes) => {
                    let da = ops::permute(&g, &ops::invert_axes(axes))?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::SumAll(a) => {
                    let da = Tensor::full(self.value(*a).shape(), g.item());
                    self.accum(&mut grads, *a, da)?;
                }
                Op::SumAxis(a, axis) => {
                    let len = self.value(*a).shape()[*axis];
                    let da = ops::broadcast_axis(&g, *axis, len);
                    self.accum(&mut grads, *a, da)?;
                }
                Op::Sqrt(a) => {
                    let half = T::from_f64c(0.5);
                    let da = ops::binary_op(&g, &node.value, |gg, y| gg * half / y)?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::Tanh(a) => {
                    let one = T::one();
                    let da = ops::binary_op(&g, &node.value, |gg, y| gg * (one - y * y))?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::Silu(a) => {
                    let one = T::one();
                    let da = ops::binary_op(&g, self.value(*a), |gg, x| {
                        let s = one / (one + (-x).exp());
                        gg * s * (one + x * (one - s))
                    })?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::GatherRows { src, ids } => {
                    let sv = self.value(*src);
                    let cols = sv.shape()[1];
                    let mut dsrc = Tensor::zeros(sv.shape());
                    {
                        let dd = dsrc.data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            let grow = &g.data()[r * cols..(r + 1) * cols];
                            let target = &mut dd[id * cols..(id + 1) * cols];
                            for (t, &gv) in target.iter_mut().zip(grow) {
                                *t = *t + gv;
                            }
                        }
                    }
                    self.accum(&mut grads, *src, dsrc)?;
                }
                Op::GatherLast { src, ids } => {
                    let sv = self.value(*src);
                    let cols = *sv.shape().last().unwrap();
                    let mut dsrc = Tensor::zeros(sv.shape());
                    {
                        let dd = dsrc.data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            dd[r * cols + id] = dd[r * cols + id] + g.data()[r];
                        }
                    }
                    self.accum(&mut grads, *src, dsrc)?;
                }
                Op::MaskedSoftmax { src, .. } => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let mut dsrc = Tensor::zeros(y.shape());
                    {
                        let dd = dsrc.data_mut();
                        for r in 0..y.numel() / cols {
                            let yrow = &y.data()[r * cols..(r + 1) * cols];
                            let grow = &g.data()[r * cols..(r + 1) * cols];
                            let mut dot = T::zero();
                            for (yv, gv) in yrow.iter().zip(grow) {
                                dot = dot + *yv * *gv;
                            }
                            let drow = &mut dd[r * cols..(r + 1) * cols];
                            for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *dv = *yv * (*gv - dot);
                            }
                        }
                    }
                    self.accum(&mut grads, *src, dsrc)?;
                }
                Op::LogSoftmax(src) => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let mut dsrc = Tensor::zeros(y.shape());
                    {
                        let dd = dsrc.data_mut();
                        for r in 0..y.numel() / cols {
                            let yrow = &y.data()[r * cols..(r + 1) * cols];
                            let grow = &g.data()[r * cols..(r + 1) * cols];
                            let mut gsum = T::zero();
                            for gv in grow {
                                gsum = gsum + *gv;
                            }
                            let drow = &mut dd[r * cols..(r + 1) * cols];
                            for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *dv = *gv - yv.exp() * gsum;
                            }
                        }
                    }
                    self.accum(&mut grads, *src, dsrc)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let d = *xv.shape().last().unwrap();
                    let dt = T::from_f64c(d as f64);
                    let epst = T::from_f64c(*eps);
                    let rows = xv.numel() / d;
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = Tensor::zeros(&[d]);
                    let mut dbeta = Tensor::zeros(&[d]);
                    for r in 0..rows {
                        let xrow = &xv.data()[r * d..(r + 1) * d];
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let mut mean = T::zero();
                        for &v in xrow {
                            mean = mean + v;
                        }
                        mean = mean / dt;
                        let mut var = T::zero();
                        for &v in xrow {
                            let c = v - mean;
                            var = var + c * c;
                        }
                        var = var / dt;
                        let inv = T::one() / (var + epst).sqrt();
                        // dxhat, and the two row means needed for dx
                        let mut m1 = T::zero(); // mean of dxhat
                        let mut m2 = T::zero(); // mean of dxhat * xhat
                        let mut xhat = Vec::with_capacity(d);
                        let mut dxhat = Vec::with_capacity(d);
                        for i in 0..d {
                            let xh = (xrow[i] - mean) * inv;
                            let dxh = grow[i] * gv.data()[i];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh;
                            xhat.push(xh);
                            dxhat.push(dxh);
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for i in 0..d {
                            dx.data_mut()[r * d + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                            dgamma.data_mut()[i] = dgamma.data_mut()[i] + grow[i] * xhat[i];
                            dbeta.data_mut()[i] = dbeta.data_mut()[i] + grow[i];
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        self.accum(&mut grads, *x, dx)?;
                    }
                    if self.nodes[gamma.0].requires_grad {
                        self.accum(&mut grads, *gamma, dgamma)?;
                    }
                    if self.nodes[beta.0].requires_grad {
                        self.accum(&mut grads, *beta, dbeta)?;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let rows_a = self.value(*a).shape()[0];
                    let cols = self.value(*a).shape()[1];
                    let (ga, gb) = g.data().split_at(rows_a * cols);
                    let da = Tensor::new(self.value(*a).shape().to_vec(), ga.to_vec())?;
                    let db = Tensor::new(self.value(*b).shape().to_vec(), gb.to_vec())?;
                    self.accum(&mut grads, *a, da)?;
                    self.accum(&mut grads, *b, db)?;
                }
            }
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        if !g.is_finite() {
            return Err(MoltError::non_finite(
                self.node_path(id),
                "backward pass produced NaN/Inf".to_string(),
            ));
        }
        match &mut grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
