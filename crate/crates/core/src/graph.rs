//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Each forward op appends a node to an arena; `backward` walks the arena
//! in reverse, so inputs always carry a smaller index than their consumers.
//! Graphs are rebuilt from scratch every step — nothing is reused across
//! steps, which keeps per-step refinement simple.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Index of a node in a [`Graph`] arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// (r, c) + (1, c), the row added to every row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (r, c) scaled by a (1, 1) node.
    ScaleByScalar(NodeId, NodeId),
    /// (r, c) with row r scaled by the (r, 1) node's entry r.
    ScaleRows(NodeId, NodeId),
    /// a * x + b with constant coefficients.
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Row-wise softmax (last axis).
    Softmax(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Sub-block rows r0..r1, cols c0..c1.
    Block(NodeId, usize, usize, usize, usize),
    /// Row gather from an embedding table.
    Embed(NodeId, Vec<usize>),
    /// Elementwise product with a fixed mask (dropout).
    Mask(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    /// Forward: per-row one-hot at the argmax (ties -> lowest index).
    /// Backward: identity (straight-through).
    HardMax(NodeId),
    /// One fused gated-recurrent transition (see [`Graph::gru_step`]).
    /// Distinct inputs get one node instead of ~20, which is what keeps
    /// per-step re-encoding affordable.
    GruStep(Box<GruStepOp>),
}

#[derive(Clone, Debug)]
struct GruStepOp {
    x: NodeId,
    h: NodeId,
    /// wz, wr, wn, uz, ur, un, bz, br, bn
    params: [NodeId; 9],
    // gate activations saved for backward
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

/// Dynamic computation graph with recorded forward values.
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    /// Flat gradient arena; node i's gradient lives at
    /// `offsets[i] .. offsets[i] + values[i].numel()`.
    grads: Vec<f64>,
    offsets: Vec<usize>,
    total: usize,
    bindings: HashMap<usize, NodeId>,
    training: bool,
}

impl Graph {
    /// Graph in training mode: dropout masks apply, backward is expected.
    pub fn train() -> Self {
        Self::with_mode(true)
    }

    /// Graph in inference mode: callers skip dropout.
    pub fn eval() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(training: bool) -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            offsets: Vec::new(),
            total: 0,
            bindings: HashMap::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() requires a prior backward() call"
        );
        let off = self.offsets[id.0];
        &self.grads[off..off + self.values[id.0].numel()]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.offsets.push(self.total);
        self.total += value.numel();
        self.values.push(value);
        id
    }

    /// Introduces a constant or input value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Binds a parameter as a leaf; repeated binds return the same node so
    /// gradients from all uses accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.bindings.get(&id.0) {
            return node;
        }
        let node = self.leaf(store.get(id).clone());
        self.bindings.insert(id.0, node);
        node
    }

    /// Adds this graph's parameter-leaf gradients into `out`. Parameters
    /// never bound by this graph are left untouched (zero contribution).
    pub fn param_grads_into(&self, out: &mut GradSet) {
        assert!(
            !self.grads.is_empty(),
            "param_grads_into() requires a prior backward() call"
        );
        for (&param_idx, &node) in &self.bindings {
            out.accumulate(ParamId(param_idx), self.grad(node));
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        matmul_kernel(va.data(), m, k, vb.data(), n, &mut out);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(m, n, out)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), Tensor::new(va.rows(), va.cols(), data)?))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), Tensor::new(va.rows(), va.cols(), data)?))
    }

    /// `(r, c) + (1, c)` with the row broadcast down the rows.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let (vm, vr) = (&self.values[mat.0], &self.values[row.0]);
        if vr.rows() != 1 || vm.cols() != vr.cols() {
            return Err(shape_err("add_row", vm, vr));
        }
        let cols = vm.cols();
        let mut data = vm.data().to_vec();
        for r in 0..vm.rows() {
            for (d, rv) in data[r * cols..(r + 1) * cols].iter_mut().zip(vr.data()) {
                *d += rv;
            }
        }
        Ok(self.push(Op::AddRow(mat, row), Tensor::new(vm.rows(), cols, data)?))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), Tensor::new(va.rows(), va.cols(), data)?))
    }

    /// Whole tensor scaled by a `(1, 1)` node.
    pub fn scale_by(&mut self, x: NodeId, scalar: NodeId) -> Result<NodeId> {
        let (vx, vs) = (&self.values[x.0], &self.values[scalar.0]);
        if !vs.is_scalar() {
            return Err(shape_err("scale_by", vx, vs));
        }
        let s = vs.item();
        let data = vx.data().iter().map(|v| v * s).collect();
        Ok(self.push(
            Op::ScaleByScalar(x, scalar),
            Tensor::new(vx.rows(), vx.cols(), data)?,
        ))
    }

    /// Row `r` of `(r, c)` scaled by entry `r` of the `(r, 1)` node.
    pub fn scale_rows(&mut self, mat: NodeId, col: NodeId) -> Result<NodeId> {
        let (vm, vc) = (&self.values[mat.0], &self.values[col.0]);
        if vc.cols() != 1 || vc.rows() != vm.rows() {
            return Err(shape_err("scale_rows", vm, vc));
        }
        let cols = vm.cols();
        let mut data = vm.data().to_vec();
        for r in 0..vm.rows() {
            let s = vc.data()[r];
            data[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|d| *d *= s);
        }
        Ok(self.push(Op::ScaleRows(mat, col), Tensor::new(vm.rows(), cols, data)?))
    }

    /// `a * x + b` elementwise with constant coefficients.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let data = vx.data().iter().map(|v| a * v + b).collect();
        Ok(self.push(Op::Affine(x, a), Tensor::new(vx.rows(), vx.cols(), data)?))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if let Some(v) = vx.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {v}"),
            });
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let data = vx.data().iter().map(|v| f(*v)).collect();
        Ok(self.push(op, Tensor::new(vx.rows(), vx.cols(), data)?))
    }

    /// Row-wise softmax with max subtraction. Outputs are floored at the
    /// smallest positive double so a later `log` never sees zero.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let cols = vx.cols();
        let mut data = vec![0.0; vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut denom = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o = (*o / denom).max(f64::MIN_POSITIVE);
            }
        }
        Ok(self.push(Op::Softmax(x), Tensor::new(vx.rows(), cols, data)?))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.at(i, j);
            }
        }
        Ok(self.push(Op::Transpose(x), Tensor::new(c, r, data)?))
    }

    /// Concatenation along the last axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of no tensors".into()))?;
        let rows = self.values[first.0].rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &self.values[first.0], v));
            }
            cols += v.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let v = &self.values[p.0];
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(rows, cols, data)?))
    }

    /// Stacking along the first axis; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of no tensors".into()))?;
        let cols = self.values[first.0].cols();
        let mut rows = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.cols() != cols {
                return Err(shape_err("concat_rows", &self.values[first.0], v));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(rows, cols, data)?))
    }

    /// Sub-block `rows r0..r1, cols c0..c1`.
    pub fn block(&mut self, x: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if r0 >= r1 || c0 >= c1 || r1 > vx.rows() || c1 > vx.cols() {
            return Err(Error::InvalidArgument(format!(
                "block {r0}..{r1} x {c0}..{c1} out of range for shape {:?}",
                vx.shape()
            )));
        }
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            data.extend_from_slice(&vx.row(r)[c0..c1]);
        }
        Ok(self.push(
            Op::Block(x, r0, r1, c0, c1),
            Tensor::new(r1 - r0, c1 - c0, data)?,
        ))
    }

    /// Single row as a `(1, c)` tensor.
    pub fn row(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let cols = self.values[x.0].cols();
        self.block(x, r, r + 1, 0, cols)
    }

    /// Element at flat position `i` of a `(1, n)` row vector, as `(1, 1)`.
    pub fn element(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        self.block(x, 0, 1, i, i + 1)
    }

    /// Gathers table rows for the given ids; output is `(ids.len(), d)`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = &self.values[table.0];
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embed of empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vt.rows()) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range for table with {} rows",
                vt.rows()
            )));
        }
        let cols = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(vt.row(id));
        }
        Ok(self.push(
            Op::Embed(table, ids.to_vec()),
            Tensor::new(ids.len(), cols, data)?,
        ))
    }

    /// Elementwise product with a pre-sampled mask (dropout application).
    pub fn apply_mask(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if mask.len() != vx.numel() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match tensor with {} elements",
                mask.len(),
                vx.numel()
            )));
        }
        let data = zip_map(vx.data(), mask, |x, m| x * m);
        Ok(self.push(
            Op::Mask(x, mask.to_vec()),
            Tensor::new(vx.rows(), vx.cols(), data)?,
        ))
    }

    /// Sum of all entries as `(1, 1)`.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.values[x.0].data().iter().sum();
        Ok(self.push(Op::Sum(x), Tensor::scalar(s)))
    }

    /// Mean of all entries as `(1, 1)`.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let s: f64 = vx.data().iter().sum();
        let n = vx.numel() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(s / n)))
    }

    /// One gated-recurrent transition:
    /// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
    /// `n = tanh(x Wn + (r (.) h) Un + bn)`,
    /// `out = (1 - z) (.) h + z (.) n`.
    /// `x` is `(1, in)`, `h` is `(1, d)`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        wz: NodeId,
        wr: NodeId,
        wn: NodeId,
        uz: NodeId,
        ur: NodeId,
        un: NodeId,
        bz: NodeId,
        br: NodeId,
        bn: NodeId,
    ) -> Result<NodeId> {
        let (vx, vh) = (&self.values[x.0], &self.values[h.0]);
        let (in_dim, d) = (vx.cols(), vh.cols());
        if vx.rows() != 1 || vh.rows() != 1 {
            return Err(shape_err("gru_step", vx, vh));
        }
        for (w, rows, cols) in [
            (wz, in_dim, d),
            (wr, in_dim, d),
            (wn, in_dim, d),
            (uz, d, d),
            (ur, d, d),
            (un, d, d),
            (bz, 1, d),
            (br, 1, d),
            (bn, 1, d),
        ] {
            let v = &self.values[w.0];
            if v.shape() != [rows, cols] {
                return Err(shape_err("gru_step", vx, v));
            }
        }

        let gate = |w: NodeId, u: NodeId, b: NodeId, hvec: &[f64]| -> Vec<f64> {
            let mut pre = self.values[b.0].data().to_vec();
            vec_mat_into(self.values[x.0].data(), self.values[w.0].data(), d, &mut pre);
            vec_mat_into(hvec, self.values[u.0].data(), d, &mut pre);
            pre
        };
        let hdata = self.values[h.0].data().to_vec();
        let mut z = gate(wz, uz, bz, &hdata);
        z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let mut r = gate(wr, ur, br, &hdata);
        r.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let rh: Vec<f64> = r.iter().zip(&hdata).map(|(a, b)| a * b).collect();
        let mut n = gate(wn, un, bn, &rh);
        n.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<f64> = z
            .iter()
            .zip(&n)
            .zip(&hdata)
            .map(|((zv, nv), hv)| (1.0 - zv) * hv + zv * nv)
            .collect();
        let op = GruStepOp {
            x,
            h,
            params: [wz, wr, wn, uz, ur, un, bz, br, bn],
            z,
            r,
            n,
        };
        Ok(self.push(Op::GruStep(Box::new(op)), Tensor::new(1, d, out)?))
    }

    /// Per-row one-hot at the argmax; backward passes gradients through
    /// unchanged (straight-through estimator).
    pub fn hardmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let cols = vx.cols();
        let mut data = vec![0.0; vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            data[r * cols + best] = 1.0;
        }
        Ok(self.push(Op::HardMax(x), Tensor::new(vx.rows(), cols, data)?))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates gradients of `loss` w.r.t. every node at or below it.
    /// Repeated calls reset previous gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads.clear();
        self.grads.resize(self.total, 0.0);
        self.grads[self.offsets[loss.0]] = 1.0;

        // Node X's gradient slice inside the lower arena region. Inputs
        // always precede node i, so the split at node i's offset keeps
        // every input slice disjoint from g.
        macro_rules! ng {
            ($lo:ident, $n:expr) => {
                &mut $lo[self.offsets[$n.0]..self.offsets[$n.0] + self.values[$n.0].numel()]
            };
        }

        for i in (0..=loss.0).rev() {
            let len_i = self.values[i].numel();
            let (lo, hi) = self.grads.split_at_mut(self.offsets[i]);
            let g: &[f64] = &hi[..len_i];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let out_val = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    matmul_backward_a(g, vb.data(), m, k, n, ng!(lo, a));
                    matmul_backward_b(g, va.data(), m, k, n, ng!(lo, b));
                }
                Op::Add(a, b) => {
                    axpy(ng!(lo, a), g, 1.0);
                    axpy(ng!(lo, b), g, 1.0);
                }
                Op::Sub(a, b) => {
                    axpy(ng!(lo, a), g, 1.0);
                    axpy(ng!(lo, b), g, -1.0);
                }
                Op::AddRow(mat, row) => {
                    axpy(ng!(lo, mat), g, 1.0);
                    let cols = self.values[row.0].cols();
                    let drow = ng!(lo, row);
                    for chunk in g.chunks_exact(cols) {
                        for (d, gv) in drow.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    for ((d, gv), bv) in ng!(lo, a).iter_mut().zip(g).zip(vb.data()) {
                        *d += gv * bv;
                    }
                    for ((d, gv), av) in ng!(lo, b).iter_mut().zip(g).zip(va.data()) {
                        *d += gv * av;
                    }
                }
                Op::ScaleByScalar(x, s) => {
                    let sv = self.values[s.0].item();
                    axpy(ng!(lo, x), g, sv);
                    let dot: f64 = g.iter().zip(self.values[x.0].data()).map(|(a, b)| a * b).sum();
                    ng!(lo, s)[0] += dot;
                }
                Op::ScaleRows(mat, col) => {
                    let (vm, vc) = (&self.values[mat.0], &self.values[col.0]);
                    let cols = vm.cols();
                    for r in 0..vm.rows() {
                        let s = vc.data()[r];
                        let grow = &g[r * cols..(r + 1) * cols];
                        for (d, gv) in ng!(lo, mat)[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *d += gv * s;
                        }
                        let dot: f64 = grow.iter().zip(vm.row(r)).map(|(a, b)| a * b).sum();
                        ng!(lo, col)[r] += dot;
                    }
                }
                Op::Affine(x, a) => axpy(ng!(lo, x), g, *a),
                Op::Sigmoid(x) => {
                    for ((d, gv), y) in ng!(lo, x).iter_mut().zip(g).zip(out_val.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    for ((d, gv), y) in ng!(lo, x).iter_mut().zip(g).zip(out_val.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
                Op::Exp(x) => {
                    for ((d, gv), y) in ng!(lo, x).iter_mut().zip(g).zip(out_val.data()) {
                        *d += gv * y;
                    }
                }
                Op::Log(x) => {
                    for ((d, gv), xv) in ng!(lo, x).iter_mut().zip(g).zip(self.values[x.0].data()) {
                        *d += gv / xv;
                    }
                }
                Op::Softmax(x) => {
                    let cols = out_val.cols();
                    for r in 0..out_val.rows() {
                        let y = out_val.row(r);
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in ng!(lo, x)[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .zip(y)
                        {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (out_val.rows(), out_val.cols());
                    let dx = ng!(lo, x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = out_val.cols();
                    let rows = out_val.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.values[p.0].cols();
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (d, gv) in ng!(lo, p)[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.values[p.0].numel();
                        for (d, gv) in ng!(lo, p).iter_mut().zip(&g[offset..offset + n]) {
                            *d += gv;
                        }
                        offset += n;
                    }
                }
                Op::Block(x, r0, _r1, c0, c1) => {
                    let src_cols = self.values[x.0].cols();
                    let w = c1 - c0;
                    let dx = ng!(lo, x);
                    for (r, chunk) in g.chunks_exact(w).enumerate() {
                        let base = (r0 + r) * src_cols + c0;
                        for (d, gv) in dx[base..base + w].iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
                Op::Embed(table, ids) => {
                    let cols = out_val.cols();
                    let dt = ng!(lo, table);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        for (d, gv) in dt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                Op::Mask(x, mask) => {
                    for ((d, gv), m) in ng!(lo, x).iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    ng!(lo, x).iter_mut().for_each(|d| *d += gv);
                }
                Op::Mean(x) => {
                    let n = self.values[x.0].numel() as f64;
                    let gv = g[0] / n;
                    ng!(lo, x).iter_mut().for_each(|d| *d += gv);
                }
                Op::HardMax(x) => axpy(ng!(lo, x), g, 1.0),
                Op::GruStep(op) => {
                    let GruStepOp { x, h, params, z, r, n } = op.as_ref();
                    let [wz, wr, wn, uz, ur, un, bz, br, bn] = *params;
                    let xv = self.values[x.0].data();
                    let hv = self.values[h.0].data();
                    let (in_dim, d) = (xv.len(), hv.len());

                    // gate pre-activation gradients
                    let da_z: Vec<f64> = g
                        .iter()
                        .zip(n)
                        .zip(hv)
                        .zip(z)
                        .map(|(((gv, nv), hvv), zv)| gv * (nv - hvv) * zv * (1.0 - zv))
                        .collect();
                    let da_n: Vec<f64> = g
                        .iter()
                        .zip(z)
                        .zip(n)
                        .map(|((gv, zv), nv)| gv * zv * (1.0 - nv * nv))
                        .collect();
                    // candidate input gradient through Un
                    let mut drh = vec![0.0; d];
                    matmul_backward_a(&da_n, self.values[un.0].data(), 1, d, d, &mut drh);
                    let da_r: Vec<f64> = drh
                        .iter()
                        .zip(hv)
                        .zip(r)
                        .map(|((dv, hvv), rv)| dv * hvv * rv * (1.0 - rv))
                        .collect();
                    let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();

                    // input and previous-state gradients
                    {
                        let dx = ng!(lo, x);
                        matmul_backward_a(&da_z, self.values[wz.0].data(), 1, in_dim, d, dx);
                        matmul_backward_a(&da_r, self.values[wr.0].data(), 1, in_dim, d, dx);
                        matmul_backward_a(&da_n, self.values[wn.0].data(), 1, in_dim, d, dx);
                    }
                    {
                        let dh = ng!(lo, h);
                        for (((dv, gv), zv), (dr, rv)) in dh
                            .iter_mut()
                            .zip(g)
                            .zip(z)
                            .zip(drh.iter().zip(r))
                        {
                            *dv += gv * (1.0 - zv) + dr * rv;
                        }
                        matmul_backward_a(&da_z, self.values[uz.0].data(), 1, d, d, dh);
                        matmul_backward_a(&da_r, self.values[ur.0].data(), 1, d, d, dh);
                    }

                    // parameter gradients (rank-1 updates)
                    matmul_backward_b(&da_z, xv, 1, in_dim, d, ng!(lo, wz));
                    matmul_backward_b(&da_r, xv, 1, in_dim, d, ng!(lo, wr));
                    matmul_backward_b(&da_n, xv, 1, in_dim, d, ng!(lo, wn));
                    matmul_backward_b(&da_z, hv, 1, d, d, ng!(lo, uz));
                    matmul_backward_b(&da_r, hv, 1, d, d, ng!(lo, ur));
                    matmul_backward_b(&da_n, &rh, 1, d, d, ng!(lo, un));
                    axpy(ng!(lo, bz), &da_z, 1.0);
                    axpy(ng!(lo, br), &da_r, 1.0);
                    axpy(ng!(lo, bn), &da_n, 1.0);
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// out[j] += sum_p x[p] * w[p, j] for a `(1, k)` row vector and `(k, n)`
/// matrix.
fn vec_mat_into(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
}

fn matmul_kernel(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA[i, p] += dot(G[i, :], B[p, :])
fn matmul_backward_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, d) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *d += acc;
        }
    }
}

/// dB[p, :] += A[i, p] * G[i, :]
fn matmul_backward_b(g: &[f64], a: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}
