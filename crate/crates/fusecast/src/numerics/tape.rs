//! Reverse-mode autodiff on a flat tape of matrix ops.
//!
//! Each operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and accumulates parameter gradients into the owning
//! `ParamSet`. Backward rules are spelled out per op, next to nothing is
//! captured in closures, so each rule can be read against its forward code.
//!
//! The tape borrows the parameter set for its whole lifetime: build the
//! graph, call `backward`, drop the tape, then run the optimizer.

use super::param::{ParamId, ParamSet};
use super::{concat_cols, layer_norm_rows, softmax_rows, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Adds a 1 x d bias row to every row of x.
    AddRowBroadcast { x: NodeId, bias: NodeId },
    /// Multiplies every row of x elementwise by a 1 x d row.
    MulRowBroadcast { x: NodeId, row: NodeId },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    SumAll(NodeId),
    /// Masked MAE against fixed targets, in original units: predictions are
    /// denormalized with (mean, std) inside the op so the loss is exactly
    /// the reported train metric.
    MaskedMae { pred: NodeId, target: Matrix, mask: Matrix, mean: f64, std: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p mut ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p mut ParamSet) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.get(id).value.clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let value = layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(value, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.shape() != (1, xm.cols()) {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left_rows: xm.rows(),
                left_cols: xm.cols(),
                right_rows: bm.rows(),
                right_cols: bm.cols(),
            });
        }
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bm.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast { x, bias }))
    }

    pub fn mul_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xm, rm) = (self.value(x), self.value(row));
        if rm.shape() != (1, xm.cols()) {
            return Err(Error::Shape {
                op: "mul_row_broadcast",
                left_rows: xm.rows(),
                left_cols: xm.cols(),
                right_rows: rm.rows(),
                right_cols: rm.cols(),
            });
        }
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for (v, s) in value.row_mut(r).iter_mut().zip(rm.data()) {
                *v *= s;
            }
        }
        Ok(self.push(value, Op::MulRowBroadcast { x, row }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::full(1, 1, self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Masked MAE in original units; `pred` is normalized model output,
    /// `target` raw values, `mask` 1.0 where observed. Errors if the mask
    /// selects nothing.
    pub fn masked_mae(
        &mut self,
        pred: NodeId,
        target: Matrix,
        mask: Matrix,
        mean: f64,
        std: f64,
    ) -> Result<NodeId> {
        let pm = self.value(pred);
        if pm.shape() != target.shape() || pm.shape() != mask.shape() {
            return Err(Error::invalid(format!(
                "masked_mae shapes differ: pred {:?}, target {:?}, mask {:?}",
                pm.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        let count = mask.sum();
        if count <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let mut acc = 0.0;
        for i in 0..pm.data().len() {
            let denorm = pm.data()[i] * std + mean;
            acc += mask.data()[i] * (denorm - target.data()[i]).abs();
        }
        let value = Matrix::full(1, 1, acc / count);
        Ok(self.push(value, Op::MaskedMae { pred, target, mask, mean, std }))
    }

    /// Reverse pass from a scalar node; accumulates into `ParamSet` grads
    /// (callers zero them per step).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a 1x1 loss node, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::full(1, 1, 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    self.params.get_mut(*pid).grad.add_assign(&g)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(&self.nodes[b.0].value)?;
                    let db = g.hadamard(&self.nodes[a.0].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose())?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut da = g;
                    for (d, xv) in da.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sigmoid(a) => {
                    // dx = g * y * (1 - y) using the stored output.
                    let y = &self.nodes[i].value;
                    let mut da = g;
                    for (d, yv) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    // Per row: dx_j = s_j * (g_j - sum_k g_k s_k).
                    let s = &self.nodes[i].value;
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = g.row(r);
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = srow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        *eps,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::AddRowBroadcast { x, bias } => {
                    accumulate(&mut grads, *bias, g.col_sums())?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::MulRowBroadcast { x, row } => {
                    let xm = &self.nodes[x.0].value;
                    let rm = &self.nodes[row.0].value;
                    // drow_c = sum_r g_rc * x_rc; dx_rc = g_rc * row_c.
                    let drow = g.hadamard(xm)?.col_sums();
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        for (d, s) in dx.row_mut(r).iter_mut().zip(rm.data()) {
                            *d *= s;
                        }
                    }
                    accumulate(&mut grads, *row, drow)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let dp = g.slice_cols(offset, w)?;
                        accumulate(&mut grads, p, dp)?;
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xm = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for r in 0..dx.rows() {
                        dx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SumAll(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = Matrix::full(x.rows(), x.cols(), g.get(0, 0));
                    accumulate(&mut grads, *a, da)?;
                }
                Op::MaskedMae { pred, target, mask, mean, std } => {
                    // d/dpred of sum(mask * |pred*std + mean - y|) / count.
                    let pm = &self.nodes[pred.0].value;
                    let count = mask.sum();
                    let gscalar = g.get(0, 0);
                    let mut dp = Matrix::zeros(pm.rows(), pm.cols());
                    for idx in 0..pm.data().len() {
                        let res = pm.data()[idx] * std + mean - target.data()[idx];
                        let sign = if res > 0.0 {
                            1.0
                        } else if res < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dp.data_mut()[idx] = gscalar * mask.data()[idx] * sign * std / count;
                    }
                    accumulate(&mut grads, *pred, dp)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Gradients of per-row layer norm. For each row with normalized vector
/// xh and gh = g * gamma:
///   dx = inv_std * (gh - mean(gh) - xh * mean(gh * xh))
/// dgamma and dbeta are column sums over rows.
fn layer_norm_backward(x: &Matrix, gamma: &Matrix, eps: f64, g: &Matrix) -> (Matrix, Matrix, Matrix) {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut dgamma = Matrix::zeros(1, d);
    let dbeta = g.col_sums();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let grow = g.row(r);
        let mut mean_gh = 0.0;
        let mut mean_gh_xh = 0.0;
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            let gh = grow[c] * gamma.data()[c];
            mean_gh += gh;
            mean_gh_xh += gh * xh;
            dgamma.data_mut()[c] += grow[c] * xh;
        }
        mean_gh /= d as f64;
        mean_gh_xh /= d as f64;
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            let gh = grow[c] * gamma.data()[c];
            dx.row_mut(r)[c] = inv * (gh - mean_gh - xh * mean_gh_xh);
        }
    }
    (dx, dgamma, dbeta)
}
