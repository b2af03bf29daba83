//! Append-only computation tape with reverse-mode differentiation.
//!
//! Each op validates shapes, computes its value eagerly, and records enough
//! metadata to run its exact backward. Backward walks the tape in reverse
//! insertion order, so execution is deterministic for a fixed program.

use std::collections::HashMap;

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::algebra::{relmul_backward_slice, relmul_slice, BranchKind};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf(Option<ParamId>),
    DenseAffine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    L2NormRows(NodeId),
    /// Cosine of every row of `a` against the single row of `b`.
    CosineSim { a: NodeId, b: NodeId },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    ScatterSum { msgs: NodeId, targets: Vec<usize> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    RelMul { kind: BranchKind, x: NodeId, r: NodeId },
    /// Multiply row i of `x` by the scalar in row i of `s` (s is n x 1).
    ScaleRows { x: NodeId, s: NodeId },
    SliceCols { x: NodeId, from: usize, to: usize },
    RepeatRows { x: NodeId },
    AffineScalar { x: NodeId, a: f64 },
    Transpose(NodeId),
    /// Mean over rows of the Shannon entropy of each row.
    EntropyMean(NodeId),
    /// Row-renormalized dropout; `mask` holds the effective 0/1 keep mask.
    DropoutRenorm { x: NodeId, mask: Vec<f64>, row_sums: Vec<f64> },
    /// Weighted, stable binary cross-entropy from logits. Targets and
    /// weights are constants; no gradient flows into them.
    WeightedBce { scores: NodeId, targets: Tensor, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape bound to a parameter store for leaf values.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, NodeId>,
}

/// Per-node gradients produced by [`Tape::backward_scaled`].
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Insert a constant (non-differentiable leaf).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf(None))
    }

    /// Insert a parameter leaf; repeated calls for the same parameter share
    /// one node so its gradient contributions accumulate naturally.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_cache.get(&id) {
            return node;
        }
        let value = self.store.get(id).value.clone();
        let node = self.push(value, Op::Leaf(Some(id)));
        self.param_cache.insert(id, node);
        node
    }

    /// y = x W + bias, bias broadcast over rows.
    pub fn dense_affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, a) = self.value(x).shape();
        let (wa, wb) = self.value(w).shape();
        let (br, bc) = self.value(b).shape();
        if a != wa || br != 1 || bc != wb {
            return Err(Error::Shape(format!(
                "dense_affine: x {n}x{a}, W {wa}x{wb}, bias {br}x{bc}"
            )));
        }
        let mut out = Tensor::zeros(n, wb);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for i in 0..n {
                let xrow = xv.row(i);
                let orow = out.row_mut(i);
                orow.copy_from_slice(bv.row(0));
                for (k, &xik) in xrow.iter().enumerate() {
                    if xik == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(k);
                    for j in 0..wb {
                        orow[j] += xik * wrow[j];
                    }
                }
            }
        }
        Ok(self.push(out, Op::DenseAffine { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(r, c);
        for ((o, x), y) in out
            .data
            .iter_mut()
            .zip(&self.value(a).data)
            .zip(&self.value(b).data)
        {
            *o = x * y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.value(x).shape();
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = self.value(x).row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise L2 normalization; all-zero rows map to zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.value(x).shape();
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = self.value(x).row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        self.push(out, Op::L2NormRows(x))
    }

    /// Cosine similarity of every row of `a` against the single row `b`.
    /// Rows (or `b`) with zero norm get similarity 0 and zero gradient.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(a).shape();
        let (bn, bd) = self.value(b).shape();
        if bn != 1 || bd != d {
            return Err(Error::Shape(format!(
                "cosine_sim: a {n}x{d} vs b {bn}x{bd} (b must be 1x{d})"
            )));
        }
        let mut out = Tensor::zeros(n, 1);
        {
            let av = self.value(a);
            let bv = self.value(b).row(0);
            let bnorm = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..n {
                let arow = av.row(i);
                let anorm = arow.iter().map(|v| v * v).sum::<f64>().sqrt();
                if anorm > 0.0 && bnorm > 0.0 {
                    let dot: f64 = arow.iter().zip(bv).map(|(x, y)| x * y).sum();
                    out.data[i] = dot / (anorm * bnorm);
                }
            }
        }
        Ok(self.push(out, Op::CosineSim { a, b }))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let n = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            if self.value(x).rows() != n {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            total += self.value(x).cols();
        }
        let mut out = Tensor::zeros(n, total);
        for i in 0..n {
            let orow = out.row_mut(i);
            let mut off = 0;
            for &x in xs {
                // Borrow checker: read via raw indexing on self.nodes.
                let v = &self.nodes[x.0].value;
                let c = v.cols();
                orow[off..off + c].copy_from_slice(v.row(i));
                off += c;
            }
        }
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        let c = self.value(xs[0]).cols();
        let mut total = 0;
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(Error::Shape("concat_rows: column counts differ".into()));
            }
            total += self.value(x).rows();
        }
        let mut data = Vec::with_capacity(total * c);
        for &x in xs {
            data.extend_from_slice(&self.value(x).data);
        }
        let out = Tensor::from_vec(total, c, data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    /// out[v] = sum of message rows i with targets[i] == v.
    pub fn scatter_sum(&mut self, msgs: NodeId, targets: &[usize], out_rows: usize) -> Result<NodeId> {
        let (m, d) = self.value(msgs).shape();
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "scatter_sum: {m} messages but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= out_rows) {
            return Err(Error::Index(format!(
                "scatter_sum target {bad} out of range (n = {out_rows})"
            )));
        }
        let mut out = Tensor::zeros(out_rows, d);
        {
            let mv = self.value(msgs);
            for (i, &t) in targets.iter().enumerate() {
                let src = mv.row(i);
                let dst = &mut out.data[t * d..(t + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::ScatterSum {
                msgs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// out[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!(
                "gather_rows index {bad} out of range (n = {n})"
            )));
        }
        let mut out = Tensor::zeros(idx.len(), d);
        {
            let xv = self.value(x);
            for (i, &src) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(xv.row(src));
            }
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row-wise algebra product of two equally-shaped matrices.
    pub fn relmul(&mut self, kind: BranchKind, x: NodeId, r: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if self.value(r).shape() != (n, d) {
            return Err(Error::Shape(format!(
                "relmul: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(r).shape()
            )));
        }
        if !kind.valid_width(d) {
            return Err(Error::Rejected(format!(
                "relmul width {d} invalid for {}",
                kind.name()
            )));
        }
        let mut out = Tensor::zeros(n, d);
        {
            let xv = self.value(x);
            let rv = self.value(r);
            for i in 0..n {
                relmul_slice(kind, xv.row(i), rv.row(i), &mut out.data[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(out, Op::RelMul { kind, x, r }))
    }

    /// Multiply row i of `x` by the scalar s[i] (s is n x 1).
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, _) = self.value(x).shape();
        if self.value(s).shape() != (n, 1) {
            return Err(Error::Shape(format!(
                "scale_rows: x has {n} rows, s is {:?}",
                self.value(s).shape()
            )));
        }
        let mut out = self.value(x).clone();
        for i in 0..n {
            let f = self.value(s).data[i];
            for v in out.row_mut(i) {
                *v *= f;
            }
        }
        Ok(self.push(out, Op::ScaleRows { x, s }))
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if from >= to || to > c {
            return Err(Error::Shape(format!(
                "slice_cols [{from}, {to}) of a {n}x{c} tensor"
            )));
        }
        let mut out = Tensor::zeros(n, to - from);
        for i in 0..n {
            let src = &self.value(x).row(i)[from..to];
            out.row_mut(i).copy_from_slice(src);
        }
        Ok(self.push(out, Op::SliceCols { x, from, to }))
    }

    /// Stack `n` copies of a single-row tensor.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if r != 1 {
            return Err(Error::Shape(format!("repeat_rows needs a 1x{c} input, got {r}x{c}")));
        }
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = self.nodes[x.0].value.row(0).to_vec();
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(self.push(out, Op::RepeatRows { x }))
    }

    /// y = a * x + b elementwise with scalar constants.
    pub fn affine_scalar(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = a * *v + b;
        }
        self.push(out, Op::AffineScalar { x, a })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.value(x).shape();
        let mut out = Tensor::zeros(c, n);
        for i in 0..n {
            for j in 0..c {
                out.set(j, i, self.value(x).at(i, j));
            }
        }
        self.push(out, Op::Transpose(x))
    }

    /// Mean over rows of -sum_k w log w, with 0 log 0 = 0.
    pub fn entropy_mean(&mut self, w: NodeId) -> NodeId {
        let (n, _) = self.value(w).shape();
        let mut total = 0.0;
        for i in 0..n {
            for &v in self.value(w).row(i) {
                if v > 0.0 {
                    total -= v * v.ln();
                }
            }
        }
        let denom = n.max(1) as f64;
        self.push(Tensor::scalar(total / denom), Op::EntropyMean(w))
    }

    /// Dropout on attention weight rows with renormalization to sum 1.
    /// Rows where every entry is dropped keep their original weights.
    pub fn dropout_renorm(&mut self, x: NodeId, drop_prob: f64, rng: &mut impl rand::Rng) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Config(format!("dropout probability {drop_prob} not in [0, 1)")));
        }
        let mut mask = vec![0.0f64; n * c];
        for m in mask.iter_mut() {
            if rng.gen::<f64>() >= drop_prob {
                *m = 1.0;
            }
        }
        let mut row_sums = vec![0.0f64; n];
        {
            let xv = self.value(x);
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..c {
                    s += xv.at(i, j) * mask[i * c + j];
                }
                if s <= 0.0 {
                    // All entries dropped: keep the row unmodified.
                    for j in 0..c {
                        mask[i * c + j] = 1.0;
                    }
                    s = xv.row(i).iter().sum();
                }
                row_sums[i] = s;
            }
        }
        let mut out = Tensor::zeros(n, c);
        {
            let xv = self.value(x);
            for i in 0..n {
                for j in 0..c {
                    out.set(i, j, xv.at(i, j) * mask[i * c + j] / row_sums[i]);
                }
            }
        }
        Ok(self.push(out, Op::DropoutRenorm { x, mask, row_sums }))
    }

    /// Mean over rows of weighted, row-normalized BCE-with-logits.
    /// `targets` and `weights` are constants of the same shape as `scores`.
    pub fn weighted_bce(&mut self, scores: NodeId, targets: Tensor, weights: Tensor) -> Result<NodeId> {
        let shape = self.value(scores).shape();
        if targets.shape() != shape || weights.shape() != shape {
            return Err(Error::Shape(format!(
                "weighted_bce: scores {:?}, targets {:?}, weights {:?}",
                shape,
                targets.shape(),
                weights.shape()
            )));
        }
        let (n, c) = shape;
        let mut total = 0.0;
        for i in 0..n {
            let srow = self.value(scores).row(i);
            let trow = targets.row(i);
            let wrow = weights.row(i);
            let wsum: f64 = wrow.iter().sum();
            if wsum <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..c {
                acc += wrow[j] * bce_with_logits(srow[j], trow[j]);
            }
            total += acc / wsum;
        }
        let loss = total / n.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                scores,
                targets,
                weights,
            },
        ))
    }

    /// Reverse pass seeded with `scale` at `root` (which must be 1x1).
    pub fn backward_scaled(&self, root: NodeId, scale: f64) -> Result<TapeGrads> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(scale));

        for id in (0..=root.0).rev() {
            let upstream = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(_) => {
                    grads[id] = Some(upstream);
                    continue;
                }
                Op::DenseAffine { x, w, b } => {
                    let (n, a) = self.value(*x).shape();
                    let wb = self.value(*w).cols();
                    let mut gx = Tensor::zeros(n, a);
                    let mut gw = Tensor::zeros(a, wb);
                    let mut gb = Tensor::zeros(1, wb);
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    for i in 0..n {
                        let urow = upstream.row(i);
                        for j in 0..wb {
                            gb.data[j] += urow[j];
                        }
                        let gxrow = gx.row_mut(i);
                        let xrow = xv.row(i);
                        for k in 0..a {
                            let wrow = wv.row(k);
                            let mut acc = 0.0;
                            for j in 0..wb {
                                acc += urow[j] * wrow[j];
                            }
                            gxrow[k] = acc;
                            let xik = xrow[k];
                            if xik != 0.0 {
                                let gwrow = gw.row_mut(k);
                                for j in 0..wb {
                                    gwrow[j] += xik * urow[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone());
                    accumulate(&mut grads, *b, upstream);
                }
                Op::Mul(a, b) => {
                    let mut ga = upstream.clone();
                    for (g, v) in ga.data.iter_mut().zip(&self.value(*b).data) {
                        *g *= v;
                    }
                    let mut gb = upstream;
                    for (g, v) in gb.data.iter_mut().zip(&self.value(*a).data) {
                        *g *= v;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = upstream;
                    for (g, v) in gx.data.iter_mut().zip(&self.value(*x).data) {
                        if *v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        let yrow = y.row(i);
                        let urow = upstream.row(i);
                        let dot: f64 = yrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx.set(i, j, yrow[j] * (urow[j] - dot));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2NormRows(x) => {
                    let xv = self.value(*x);
                    let (n, c) = xv.shape();
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        let xrow = xv.row(i);
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let urow = upstream.row(i);
                        let dot: f64 = xrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                        let n3 = norm * norm * norm;
                        for j in 0..c {
                            gx.set(i, j, urow[j] / norm - xrow[j] * dot / n3);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CosineSim { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, d) = av.shape();
                    let brow = bv.row(0);
                    let bnorm = brow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut ga = Tensor::zeros(n, d);
                    let mut gb = Tensor::zeros(1, d);
                    if bnorm > 0.0 {
                        for i in 0..n {
                            let arow = av.row(i);
                            let anorm = arow.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if anorm == 0.0 {
                                continue;
                            }
                            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let cos = dot / (anorm * bnorm);
                            let u = upstream.data[i];
                            let garow = ga.row_mut(i);
                            for j in 0..d {
                                garow[j] = u * (brow[j] / (anorm * bnorm) - cos * arow[j] / (anorm * anorm));
                                gb.data[j] += u * (arow[j] / (anorm * bnorm) - cos * brow[j] / (bnorm * bnorm));
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatCols(xs) => {
                    let n = node.value.rows();
                    let mut off = 0;
                    for &x in xs {
                        let c = self.value(x).cols();
                        let mut gx = Tensor::zeros(n, c);
                        for i in 0..n {
                            gx.row_mut(i).copy_from_slice(&upstream.row(i)[off..off + c]);
                        }
                        accumulate(&mut grads, x, gx);
                        off += c;
                    }
                }
                Op::ConcatRows(xs) => {
                    let c = node.value.cols();
                    let mut off = 0;
                    for &x in xs {
                        let r = self.value(x).rows();
                        let mut gx = Tensor::zeros(r, c);
                        gx.data
                            .copy_from_slice(&upstream.data[off * c..(off + r) * c]);
                        accumulate(&mut grads, x, gx);
                        off += r;
                    }
                }
                Op::ScatterSum { msgs, targets } => {
                    let (m, d) = self.value(*msgs).shape();
                    let mut gm = Tensor::zeros(m, d);
                    for (i, &t) in targets.iter().enumerate() {
                        gm.row_mut(i).copy_from_slice(upstream.row(t));
                    }
                    accumulate(&mut grads, *msgs, gm);
                }
                Op::GatherRows { x, idx } => {
                    let (n, d) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(n, d);
                    for (i, &src) in idx.iter().enumerate() {
                        let urow = upstream.row(i);
                        let grow = &mut gx.data[src * d..(src + 1) * d];
                        for (g, &u) in grow.iter_mut().zip(urow) {
                            *g += u;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RelMul { kind, x, r } => {
                    let xv = self.value(*x);
                    let rv = self.value(*r);
                    let (n, d) = xv.shape();
                    let mut gx = Tensor::zeros(n, d);
                    let mut gr = Tensor::zeros(n, d);
                    for i in 0..n {
                        relmul_backward_slice(
                            *kind,
                            xv.row(i),
                            rv.row(i),
                            upstream.row(i),
                            &mut gx.data[i * d..(i + 1) * d],
                            &mut gr.data[i * d..(i + 1) * d],
                        );
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *r, gr);
                }
                Op::ScaleRows { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let (n, c) = xv.shape();
                    let mut gx = Tensor::zeros(n, c);
                    let mut gs = Tensor::zeros(n, 1);
                    for i in 0..n {
                        let f = sv.data[i];
                        let urow = upstream.row(i);
                        let xrow = xv.row(i);
                        let gxrow = gx.row_mut(i);
                        let mut acc = 0.0;
                        for j in 0..c {
                            gxrow[j] = urow[j] * f;
                            acc += urow[j] * xrow[j];
                        }
                        gs.data[i] = acc;
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *s, gs);
                }
                Op::SliceCols { x, from, to } => {
                    let (n, c) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        gx.row_mut(i)[*from..*to].copy_from_slice(upstream.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RepeatRows { x } => {
                    let c = self.value(*x).cols();
                    let mut gx = Tensor::zeros(1, c);
                    for i in 0..upstream.rows() {
                        for (g, &u) in gx.data.iter_mut().zip(upstream.row(i)) {
                            *g += u;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AffineScalar { x, a } => {
                    let mut gx = upstream;
                    for g in gx.data.iter_mut() {
                        *g *= a;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => {
                    let (n, c) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        for j in 0..c {
                            gx.set(i, j, upstream.at(j, i));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::EntropyMean(w) => {
                    let wv = self.value(*w);
                    let (n, c) = wv.shape();
                    let u = upstream.item() / n.max(1) as f64;
                    let mut gw = Tensor::zeros(n, c);
                    for (g, &v) in gw.data.iter_mut().zip(&wv.data) {
                        if v > 0.0 {
                            *g = -u * (v.ln() + 1.0);
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                }
                Op::DropoutRenorm { x, mask, row_sums } => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        let urow = upstream.row(i);
                        let yrow = y.row(i);
                        let t: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                        let s = row_sums[i];
                        for j in 0..c {
                            gx.set(i, j, mask[i * c + j] * (urow[j] - t) / s);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedBce {
                    scores,
                    targets,
                    weights,
                } => {
                    let sv = self.value(*scores);
                    let (n, c) = sv.shape();
                    let u = upstream.item() / n.max(1) as f64;
                    let mut gs = Tensor::zeros(n, c);
                    for i in 0..n {
                        let wrow = weights.row(i);
                        let wsum: f64 = wrow.iter().sum();
                        if wsum <= 0.0 {
                            continue;
                        }
                        let srow = sv.row(i);
                        let trow = targets.row(i);
                        let grow = gs.row_mut(i);
                        for j in 0..c {
                            grow[j] = u * wrow[j] * (sigmoid(srow[j]) - trow[j]) / wsum;
                        }
                    }
                    accumulate(&mut grads, *scores, gs);
                }
            }
        }
        Ok(TapeGrads { grads })
    }

    /// Run backward and extract the gradients of every parameter leaf.
    pub fn param_grads(&self, root: NodeId, scale: f64) -> Result<Vec<(ParamId, Tensor)>> {
        let mut grads = self.backward_scaled(root, scale)?;
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(pid)) = node.op {
                if let Some(g) = grads.grads[id].take() {
                    out.push((pid, g));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy from a raw score.
pub fn bce_with_logits(score: f64, target: f64) -> f64 {
    score.max(0.0) - score * target + (-score.abs()).exp().ln_1p()
}
