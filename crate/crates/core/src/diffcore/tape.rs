//! Reverse-mode autodiff over a linear compute record.
//!
//! Forward calls append value nodes plus an op entry; `backward` walks the
//! ops once in reverse, accumulating adjoints deterministically in recording
//! order. A record is single-use: `backward` consumes it, and reuse is a
//! lifecycle error. Parameters enter the graph as named leaves whose
//! gradients flow into a [`ParamStore`].

use crate::diffcore::ops;
use crate::diffcore::store::ParamStore;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node on the record.
pub type NodeId = usize;

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Name in the parameter store when this leaf is trainable.
    param: Option<String>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    MatmulTB { a: NodeId, b: NodeId, out: NodeId },
    Transpose { a: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Div { a: NodeId, b: NodeId, out: NodeId },
    Scale { a: NodeId, c: f64, out: NodeId },
    AddRow { a: NodeId, row: NodeId, out: NodeId },
    Relu { a: NodeId, out: NodeId },
    Sqrt { a: NodeId, out: NodeId },
    Softmax { a: NodeId, out: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, out: NodeId },
    SliceCols { a: NodeId, start: usize, out: NodeId },
    ConcatCols { a: NodeId, b: NodeId, out: NodeId },
    ConcatRows { a: NodeId, b: NodeId, out: NodeId },
    BroadcastRows { v: NodeId, out: NodeId },
    RowNormalize { a: NodeId, out: NodeId },
    LogSumExpRows { a: NodeId, out: NodeId },
    TakeDiag { a: NodeId, out: NodeId },
    SumAll { a: NodeId, out: NodeId },
}

/// Single-use record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    consumed: bool,
    score_entries: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            consumed: false,
            score_entries: 0,
        }
    }

    fn push_node(&mut self, value: Tensor, param: Option<String>) -> NodeId {
        self.nodes.push(Node { value, param });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::State(format!(
                "node id {id} out of range (record has {})",
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Number of nodes currently on the record.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total scalar entries across all attention-score nodes recorded so far.
    /// One aggregated query must contribute exactly `heads * n` of these.
    pub fn attention_score_entries(&self) -> usize {
        self.score_entries
    }

    pub(crate) fn mark_attention_scores(&mut self, id: NodeId) {
        self.score_entries += self.nodes[id].value.len();
    }

    /// Value computed at `id` during the forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.check(id)?;
        Ok(self.val(id))
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, value: &Tensor) -> NodeId {
        self.push_node(value.clone(), None)
    }

    /// Scalar constant leaf.
    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.push_node(Tensor::new(1, 1, vec![v])?, None))
    }

    /// Trainable leaf bound to `name`; the current value is snapshotted.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.get(name)?.clone();
        Ok(self.push_node(value, Some(name.to_string())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::matmul(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// `a * b^T`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::matmul_tb(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::MatmulTB { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::transpose(self.val(a));
        let out = self.push_node(v, None);
        self.ops.push(Op::Transpose { a, out });
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::add(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::sub(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::mul(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::div(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Div { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor is {c}")));
        }
        let v = ops::scale(self.val(a), c)?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Scale { a, c, out });
        Ok(out)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(row)?;
        let v = ops::add_row(self.val(a), self.val(row))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::AddRow { a, row, out });
        Ok(out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::relu(self.val(a));
        let out = self.push_node(v, None);
        self.ops.push(Op::Relu { a, out });
        Ok(out)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::sqrt_elem(self.val(a))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Sqrt { a, out });
        Ok(out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::softmax_rows(self.val(a))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::Softmax { a, out });
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let v = ops::layer_norm(self.val(x), self.val(gain), self.val(bias))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::LayerNorm { x, gain, bias, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::slice_cols(self.val(a), start, len)?;
        let out = self.push_node(v, None);
        self.ops.push(Op::SliceCols { a, start, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::concat_cols(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::concat_rows(self.val(a), self.val(b))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::ConcatRows { a, b, out });
        Ok(out)
    }

    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        self.check(v)?;
        let t = ops::broadcast_rows(self.val(v), rows)?;
        let out = self.push_node(t, None);
        self.ops.push(Op::BroadcastRows { v, out });
        Ok(out)
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::row_normalize(self.val(a))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::RowNormalize { a, out });
        Ok(out)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::logsumexp_rows(self.val(a))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::LogSumExpRows { a, out });
        Ok(out)
    }

    pub fn take_diag(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::take_diag(self.val(a))?;
        let out = self.push_node(v, None);
        self.ops.push(Op::TakeDiag { a, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = ops::sum_all(self.val(a));
        let out = self.push_node(v, None);
        self.ops.push(Op::SumAll { a, out });
        Ok(out)
    }

    /// Runs the reverse sweep from scalar node `loss`, accumulating parameter
    /// gradients into `store`. Consumes the record: a second call is a
    /// lifecycle error.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "compute record already consumed by backward".into(),
            ));
        }
        self.check(loss)?;
        let lt = self.val(loss);
        if lt.rows() != 1 || lt.cols() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {}x{}",
                lt.rows(),
                lt.cols()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::ones(1, 1));

        for op in self.ops.iter().rev() {
            self.apply_backward(*op, &mut grads)?;
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(grad)) = (&node.param, &grads[id]) {
                store.accumulate_grad(name, grad)?;
            }
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn apply_backward(&self, op: Op, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        fn accum(grads: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor) -> Result<()> {
            delta.check_finite("backward adjoint")?;
            match &mut grads[id] {
                None => grads[id] = Some(delta),
                Some(t) => {
                    for (g, d) in t.data_mut().iter_mut().zip(delta.data()) {
                        *g += d;
                    }
                }
            }
            Ok(())
        }

        macro_rules! g_out {
            ($out:expr) => {
                match &grads[$out] {
                    Some(g) => g.clone(),
                    None => return Ok(()),
                }
            };
        }

        match op {
            Op::Matmul { a, b, out } => {
                let g = g_out!(out);
                let da = ops::matmul_tb(&g, self.val(b))?;
                let db = ops::matmul_ta(self.val(a), &g)?;
                accum(grads, a, da)?;
                accum(grads, b, db)?;
            }
            Op::MatmulTB { a, b, out } => {
                let g = g_out!(out);
                let da = ops::matmul(&g, self.val(b))?;
                let db = ops::matmul_ta(&g, self.val(a))?;
                accum(grads, a, da)?;
                accum(grads, b, db)?;
            }
            Op::Transpose { a, out } => {
                let g = g_out!(out);
                accum(grads, a, ops::transpose(&g))?;
            }
            Op::Add { a, b, out } => {
                let g = g_out!(out);
                accum(grads, a, g.clone())?;
                accum(grads, b, g)?;
            }
            Op::Sub { a, b, out } => {
                let g = g_out!(out);
                accum(grads, b, ops::scale(&g, -1.0)?)?;
                accum(grads, a, g)?;
            }
            Op::Mul { a, b, out } => {
                let g = g_out!(out);
                accum(grads, a, ops::mul(&g, self.val(b))?)?;
                accum(grads, b, ops::mul(&g, self.val(a))?)?;
            }
            Op::Div { a, b, out } => {
                let g = g_out!(out);
                let da = ops::div(&g, self.val(b))?;
                // d(a/b)/db = -a / b^2 = -out / b
                let db = ops::scale(&ops::div(&ops::mul(&g, self.val(out))?, self.val(b))?, -1.0)?;
                accum(grads, a, da)?;
                accum(grads, b, db)?;
            }
            Op::Scale { a, c, out } => {
                let g = g_out!(out);
                accum(grads, a, ops::scale(&g, c)?)?;
            }
            Op::AddRow { a, row, out } => {
                let g = g_out!(out);
                let mut col_sum = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, v) in col_sum.iter_mut().zip(g.row_slice(i)) {
                        *s += v;
                    }
                }
                accum(grads, row, Tensor::new(1, g.cols(), col_sum)?)?;
                accum(grads, a, g)?;
            }
            Op::Relu { a, out } => {
                let g = g_out!(out);
                let av = self.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accum(grads, a, Tensor::new(g.rows(), g.cols(), data)?)?;
            }
            Op::Sqrt { a, out } => {
                let g = g_out!(out);
                let da = ops::div(&g, &ops::scale(self.val(out), 2.0)?)?;
                accum(grads, a, da)?;
            }
            Op::Softmax { a, out } => {
                let g = g_out!(out);
                let s = self.val(out);
                let mut data = vec![0.0; g.len()];
                for i in 0..g.rows() {
                    let gr = g.row_slice(i);
                    let sr = s.row_slice(i);
                    let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                    for j in 0..g.cols() {
                        data[i * g.cols() + j] = sr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, a, Tensor::new(g.rows(), g.cols(), data)?)?;
            }
            Op::LayerNorm { x, gain, bias, out: out_id } => {
                let g = g_out!(out_id);
                let xv = self.val(x);
                let gainv = self.val(gain);
                let d = xv.cols() as f64;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; gainv.len()];
                let mut dbias = vec![0.0; gainv.len()];
                for i in 0..xv.rows() {
                    let xr = xv.row_slice(i);
                    let gr = g.row_slice(i);
                    let mean = xr.iter().sum::<f64>() / d;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let denom = (var + ops::LAYER_NORM_EPS).sqrt();
                    // gy = upstream grad through the affine gain
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    let mut xhat = vec![0.0; xr.len()];
                    for j in 0..xr.len() {
                        xhat[j] = (xr[j] - mean) / denom;
                        let gy = gr[j] * gainv.data()[j];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    mean_gy /= d;
                    mean_gy_xhat /= d;
                    for j in 0..xr.len() {
                        let gy = gr[j] * gainv.data()[j];
                        dx[i * xv.cols() + j] = (gy - mean_gy - xhat[j] * mean_gy_xhat) / denom;
                    }
                }
                accum(grads, x, Tensor::new(xv.rows(), xv.cols(), dx)?)?;
                accum(grads, gain, Tensor::new(1, gainv.cols(), dgain)?)?;
                accum(grads, bias, Tensor::new(1, gainv.cols(), dbias)?)?;
            }
            Op::SliceCols { a, start, out } => {
                let g = g_out!(out);
                let av = self.val(a);
                let mut da = vec![0.0; av.len()];
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        da[i * av.cols() + start + j] = g.get(i, j);
                    }
                }
                accum(grads, a, Tensor::new(av.rows(), av.cols(), da)?)?;
            }
            Op::ConcatCols { a, b, out } => {
                let g = g_out!(out);
                let ca = self.val(a).cols();
                let da = ops::slice_cols(&g, 0, ca)?;
                let db = ops::slice_cols(&g, ca, g.cols() - ca)?;
                accum(grads, a, da)?;
                accum(grads, b, db)?;
            }
            Op::ConcatRows { a, b, out } => {
                let g = g_out!(out);
                let ra = self.val(a).rows();
                let da = Tensor::new(ra, g.cols(), g.data()[..ra * g.cols()].to_vec())?;
                let db = Tensor::new(
                    g.rows() - ra,
                    g.cols(),
                    g.data()[ra * g.cols()..].to_vec(),
                )?;
                accum(grads, a, da)?;
                accum(grads, b, db)?;
            }
            Op::BroadcastRows { v, out } => {
                let g = g_out!(out);
                let mut col_sum = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, x) in col_sum.iter_mut().zip(g.row_slice(i)) {
                        *s += x;
                    }
                }
                accum(grads, v, Tensor::new(1, g.cols(), col_sum)?)?;
            }
            Op::RowNormalize { a, out } => {
                let g = g_out!(out);
                let av = self.val(a);
                let yv = self.val(out);
                let mut da = vec![0.0; av.len()];
                for i in 0..av.rows() {
                    let ar = av.row_slice(i);
                    let yr = yv.row_slice(i);
                    let gr = g.row_slice(i);
                    let norm = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..ar.len() {
                        da[i * av.cols() + j] = (gr[j] - yr[j] * gy) / norm;
                    }
                }
                accum(grads, a, Tensor::new(av.rows(), av.cols(), da)?)?;
            }
            Op::LogSumExpRows { a, out } => {
                let g = g_out!(out);
                let av = self.val(a);
                let soft = ops::softmax_rows(av)?;
                let mut da = vec![0.0; av.len()];
                for i in 0..av.rows() {
                    let gi = g.get(i, 0);
                    for j in 0..av.cols() {
                        da[i * av.cols() + j] = gi * soft.get(i, j);
                    }
                }
                accum(grads, a, Tensor::new(av.rows(), av.cols(), da)?)?;
            }
            Op::TakeDiag { a, out } => {
                let g = g_out!(out);
                let n = self.val(a).rows();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g.get(i, 0);
                }
                accum(grads, a, Tensor::new(n, n, da)?)?;
            }
            Op::SumAll { a, out } => {
                let g = g_out!(out);
                let av = self.val(a);
                let da = Tensor::new(av.rows(), av.cols(), vec![g.get(0, 0); av.len()])?;
                accum(grads, a, da)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_is_single_use() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![2.0, 3.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[4.0, 6.0]);
        assert!(store.grads_ready());
        let again = tape.backward(loss, &mut store);
        assert!(matches!(again, Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(1, 3)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let err = tape.backward(w, &mut store);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum(a * b) with a = [1 2; 3 4], b = [5 6; 7 8]
        // d loss / da = ones * b^T rows, d loss / db = a^T * ones.
        let mut store = ParamStore::new();
        store
            .insert("a", Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        store
            .insert("b", Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("a").unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(store.grad("b").unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates_adjoints() {
        // loss = sum(w + w) -> dw = 2 per element.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![1.0, -2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.add(w, w).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::row(vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.relu(w).unwrap();
        let loss = tape.sum_all(r).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_gradient_of_picked_entry() {
        // loss = softmax(w)[0]; dw_j = s_0 (delta_0j - s_j).
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::row(vec![0.2, -0.3, 0.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.softmax(w).unwrap();
        let picked = tape.slice_cols(s, 0, 1).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        let sval = tape.value(s).unwrap().data().to_vec();
        tape.backward(loss, &mut store).unwrap();
        let g = store.grad("w").unwrap().data().to_vec();
        for j in 0..3 {
            let expect = sval[0] * (if j == 0 { 1.0 } else { 0.0 } - sval[j]);
            assert!((g[j] - expect).abs() < 1e-12, "coord {j}");
        }
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::row(vec![3.0]).unwrap()).unwrap();
        store.insert("unused", Tensor::row(vec![5.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "used").unwrap();
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("used").unwrap().data(), &[1.0]);
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
        assert!(store.grads_ready());
    }

    #[test]
    fn values_remain_readable_after_forward() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::row(vec![1.0, 2.0]).unwrap());
        let y = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[3.0, 6.0]);
        assert!(tape.value(999).is_err());
    }
}
