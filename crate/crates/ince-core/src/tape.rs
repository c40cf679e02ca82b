//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] is a flat, topologically ordered compute graph built eagerly:
//! pushing an op evaluates it immediately, so intermediate values can be read
//! back at any time (the interpretability pipeline does exactly that).
//! `backward` walks the tape once in reverse, accumulating gradients
//! additively across fan-out.
//!
//! The op set is intentionally minimal: exactly what columnar embeddings,
//! interaction-network layers, transformer-encoder layers and the MLP decoder
//! need, with batches flattened into the row dimension.

use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use std::sync::Arc;

pub type NodeId = usize;

/// Index of a trainable parameter in the owning parameter store.
pub type ParamId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    /// x . w + broadcast bias row (b is 1 x n).
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x + bias row broadcast over rows (b is 1 x n).
    AddRowBroadcast { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    Scale { x: NodeId, k: f64 },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    GatherRows { x: NodeId, idx: Arc<Vec<u32>> },
    /// out has `out_rows` rows; out[idx[i]] += x[i].
    ScatterAddRows { x: NodeId, idx: Arc<Vec<u32>>, out_rows: usize },
    SoftmaxRows { x: NodeId },
    /// Per consecutive group of `group` rows: C_g = A_g . B_g^T.
    GroupedMatmulNT { a: NodeId, b: NodeId, group: usize },
    /// Per consecutive group of `group` rows: C_g = A_g . B_g (A_g is group x group).
    GroupedMatmulNN { a: NodeId, b: NodeId, group: usize },
    /// Mean over each consecutive group of `group` rows.
    GroupMeanRows { x: NodeId, group: usize },
    SumAll { x: NodeId },
    MseLoss { pred: NodeId, target: Arc<Vec<f64>> },
    CrossEntropyLoss { logits: NodeId, labels: Arc<Vec<u32>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::Relu { .. } => "relu",
            Op::Scale { .. } => "scale",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::GroupedMatmulNT { .. } => "grouped_matmul_nt",
            Op::GroupedMatmulNN { .. } => "grouped_matmul_nn",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MseLoss { .. } => "mse_loss",
            Op::CrossEntropyLoss { .. } => "cross_entropy_loss",
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct TapeGrads {
    grads: Vec<Option<Mat>>,
}

impl TapeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    validate: bool,
    min_abs_relu_input: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), validate: false, min_abs_relu_input: f64::INFINITY }
    }

    /// A tape that checks every op output for NaN/Inf and fails loudly.
    pub fn validating() -> Self {
        Tape { nodes: Vec::new(), validate: true, min_abs_relu_input: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Smallest |x| seen by any relu input on this tape, for kink detection
    /// near the nondifferentiable point. Infinity if no relu was evaluated.
    pub fn min_abs_relu_input(&self) -> f64 {
        self.min_abs_relu_input
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool, param: Option<ParamId>) -> Result<NodeId> {
        if self.validate && !value.all_finite() {
            return Err(Error::numeric(format!("non-finite value produced by op `{}`", op.name())));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, needs_grad, param });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input (no gradient flows into it).
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false, None)
            .expect("leaf push cannot fail validation for caller-checked data")
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Mat, param_id: ParamId) -> NodeId {
        self.push(Op::Leaf, value, true, Some(param_id)).expect("param leaf")
    }

    /// Leaf that participates in backward without being a parameter
    /// (used by tests probing input sensitivities).
    pub fn leaf_with_grad(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true, None).expect("leaf")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(Error::contract(format!(
                "linear: x cols {} != w rows {}",
                xv.cols(),
                wv.rows()
            )));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::contract(format!(
                "linear: bias must be 1x{}, got {}x{}",
                wv.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = mat::matmul_nn(xv, wv);
        let bias = self.value(b).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, bb) in row.iter_mut().zip(bias.data()) {
                *o += *bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Linear { x, w, b }, out, needs, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::contract(format!(
                "matmul: a cols {} != b rows {}",
                av.cols(),
                bv.rows()
            )));
        }
        let out = mat::matmul_nn(av, bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, out, needs, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::contract("add: shape mismatch".to_string()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, needs, None)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::contract(format!(
                "add_row_broadcast: bias must be 1x{}, got {}x{}",
                xv.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = xv.clone();
        let bias = bv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += *bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::AddRowBroadcast { x, b }, out, needs, None)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut min_abs = f64::INFINITY;
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for (o, v) in out.data_mut().iter_mut().zip(xv.data()) {
            let a = v.abs();
            if a < min_abs {
                min_abs = a;
            }
            *o = if *v > 0.0 { *v } else { 0.0 };
        }
        if min_abs < self.min_abs_relu_input {
            self.min_abs_relu_input = min_abs;
        }
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, needs, None)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.scale_assign(k);
        let needs = self.needs(x);
        self.push(Op::Scale { x, k }, out, needs, None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::contract("concat_cols: row mismatch"));
            }
            total_cols += self.value(p).cols();
        }
        let mut out = Mat::zeros(rows, total_cols);
        let mut col0 = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.cols();
            for r in 0..rows {
                let src = pv.row(r);
                out.row_mut(r)[col0..col0 + pc].copy_from_slice(src);
            }
            col0 += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out, needs, None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut total_rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::contract("concat_rows: column mismatch"));
            }
            total_rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Mat::from_vec(total_rows, cols, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, out, needs, None)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.rows() as u32;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather_rows: index {} out of {} rows", bad, n)));
        }
        let mut out = Mat::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i as usize));
        }
        let needs = self.needs(x);
        self.push(Op::GatherRows { x, idx }, out, needs, None)
    }

    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>, out_rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::contract(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                xv.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= out_rows) {
            return Err(Error::contract(format!(
                "scatter_add_rows: index {} out of {} rows",
                bad, out_rows
            )));
        }
        let mut out = Mat::zeros(out_rows, xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            let src = xv.row(r);
            let dst = out.row_mut(i as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        let needs = self.needs(x);
        self.push(Op::ScatterAddRows { x, idx, out_rows }, out, needs, None)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), out.row_mut(r));
        }
        let needs = self.needs(x);
        self.push(Op::SoftmaxRows { x }, out, needs, None)
    }

    pub fn grouped_matmul_nt(&mut self, a: NodeId, b: NodeId, group: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if group == 0 || av.rows() % group != 0 || !av.same_shape(bv) {
            return Err(Error::contract("grouped_matmul_nt: bad group/shape"));
        }
        let groups = av.rows() / group;
        let k = av.cols();
        let mut out = Mat::zeros(av.rows(), group);
        for g in 0..groups {
            let a_g = slice_rows(av, g * group, group);
            let b_g = slice_rows(bv, g * group, group);
            let c = mat::matmul_nt(&a_g, &b_g);
            copy_rows_into(&mut out, g * group, &c);
        }
        let _ = k;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::GroupedMatmulNT { a, b, group }, out, needs, None)
    }

    pub fn grouped_matmul_nn(&mut self, a: NodeId, b: NodeId, group: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if group == 0
            || av.rows() % group != 0
            || av.cols() != group
            || bv.rows() != av.rows()
        {
            return Err(Error::contract("grouped_matmul_nn: bad group/shape"));
        }
        let groups = av.rows() / group;
        let mut out = Mat::zeros(av.rows(), bv.cols());
        for g in 0..groups {
            let a_g = slice_rows(av, g * group, group);
            let b_g = slice_rows(bv, g * group, group);
            let c = mat::matmul_nn(&a_g, &b_g);
            copy_rows_into(&mut out, g * group, &c);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::GroupedMatmulNN { a, b, group }, out, needs, None)
    }

    pub fn group_mean_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::contract("group_mean_rows: rows not divisible by group"));
        }
        let groups = xv.rows() / group;
        let mut out = Mat::zeros(groups, xv.cols());
        let inv = 1.0 / group as f64;
        for g in 0..groups {
            for j in 0..group {
                let src = xv.row(g * group + j);
                let dst = out.row_mut(g);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::GroupMeanRows { x, group }, out, needs, None)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, Mat::scalar(s), needs, None)
    }

    /// Mean squared error between `pred` (n x 1) and `target` (len n).
    pub fn mse_loss(&mut self, pred: NodeId, target: Arc<Vec<f64>>) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.cols() != 1 || pv.rows() != target.len() {
            return Err(Error::contract(format!(
                "mse_loss: pred {}x{} vs {} targets",
                pv.rows(),
                pv.cols(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(pred);
        self.push(Op::MseLoss { pred, target }, Mat::scalar(loss), needs, None)
    }

    /// Softmax cross-entropy, mean over rows. `labels[i]` is the class index.
    pub fn cross_entropy_loss(&mut self, logits: NodeId, labels: Arc<Vec<u32>>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy_loss: {} rows vs {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        let classes = lv.cols() as u32;
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::contract(format!(
                "cross_entropy_loss: label {} out of {} classes",
                bad, classes
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        let loss = total / labels.len() as f64;
        let needs = self.needs(logits);
        self.push(Op::CrossEntropyLoss { logits, labels }, Mat::scalar(loss), needs, None)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// parameter gradients can be read out via the leaf node ids.
    pub fn backward(&self, loss: NodeId) -> Result<TapeGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::numeric("backward: loss is not finite".to_string()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if self.validate && !g.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient at op `{}`",
                    self.nodes[id].op.name()
                )));
            }
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(TapeGrads { grads })
    }

    fn accumulate_parents(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if self.needs(*x) {
                    let gx = ensure(grads, *x, self.value(*x));
                    mat::matmul_nt_acc(gx, g, self.value(*w));
                }
                if self.needs(*w) {
                    let gw = ensure(grads, *w, self.value(*w));
                    mat::matmul_tn_acc(gw, self.value(*x), g);
                }
                if self.needs(*b) {
                    let gb = ensure(grads, *b, self.value(*b));
                    let gbn = gb.cols();
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        let dst = &mut gb.data_mut()[0..gbn];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let ga = ensure(grads, *a, self.value(*a));
                    mat::matmul_nt_acc(ga, g, self.value(*b));
                }
                if self.needs(*b) {
                    let gb = ensure(grads, *b, self.value(*b));
                    mat::matmul_tn_acc(gb, self.value(*a), g);
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].into_iter() {
                    if self.needs(p) {
                        ensure(grads, p, self.value(p)).add_assign(g);
                    }
                }
            }
            Op::AddRowBroadcast { x, b } => {
                if self.needs(*x) {
                    ensure(grads, *x, self.value(*x)).add_assign(g);
                }
                if self.needs(*b) {
                    let gb = ensure(grads, *b, self.value(*b));
                    let n = gb.cols();
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        for (d, s) in gb.data_mut()[0..n].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gx = ensure(grads, *x, xv);
                    for ((d, s), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *v > 0.0 {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let gx = ensure(grads, *x, self.value(*x));
                    for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += *s * *k;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let gp = ensure(grads, p, self.value(p));
                        for r in 0..g.rows() {
                            let src = &g.row(r)[col0..col0 + pc];
                            let dst = gp.row_mut(r);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    col0 += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut row0 = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let gp = ensure(grads, p, self.value(p));
                        let cols = gp.cols();
                        let src = &g.data()[row0 * cols..(row0 + pr) * cols];
                        for (d, s) in gp.data_mut().iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    row0 += pr;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let gx = ensure(grads, *x, self.value(*x));
                    for (r, &i) in idx.iter().enumerate() {
                        let src = g.row(r);
                        let dst = gx.row_mut(i as usize);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::ScatterAddRows { x, idx, .. } => {
                if self.needs(*x) {
                    let gx = ensure(grads, *x, self.value(*x));
                    for (r, &i) in idx.iter().enumerate() {
                        let src = g.row(i as usize);
                        let dst = gx.row_mut(r);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let yv = &node.value;
                    let gx = ensure(grads, *x, self.value(*x));
                    for r in 0..yv.rows() {
                        let y = yv.row(r);
                        let gy = g.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        let dst = gx.row_mut(r);
                        for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::GroupedMatmulNT { a, b, group } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let groups = av.rows() / group;
                if self.needs(*a) {
                    let mut ga_full = Mat::zeros(av.rows(), av.cols());
                    for gi in 0..groups {
                        let g_g = slice_rows(g, gi * group, *group);
                        let b_g = slice_rows(bv, gi * group, *group);
                        let da = mat::matmul_nn(&g_g, &b_g);
                        copy_rows_into(&mut ga_full, gi * group, &da);
                    }
                    ensure(grads, *a, av).add_assign(&ga_full);
                }
                if self.needs(*b) {
                    let mut gb_full = Mat::zeros(bv.rows(), bv.cols());
                    for gi in 0..groups {
                        let g_g = slice_rows(g, gi * group, *group);
                        let a_g = slice_rows(av, gi * group, *group);
                        let db = mat::matmul_tn(&g_g, &a_g);
                        copy_rows_into(&mut gb_full, gi * group, &db);
                    }
                    ensure(grads, *b, bv).add_assign(&gb_full);
                }
            }
            Op::GroupedMatmulNN { a, b, group } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let groups = av.rows() / group;
                if self.needs(*a) {
                    let mut ga_full = Mat::zeros(av.rows(), av.cols());
                    for gi in 0..groups {
                        let g_g = slice_rows(g, gi * group, *group);
                        let b_g = slice_rows(bv, gi * group, *group);
                        let da = mat::matmul_nt(&g_g, &b_g);
                        copy_rows_into(&mut ga_full, gi * group, &da);
                    }
                    ensure(grads, *a, av).add_assign(&ga_full);
                }
                if self.needs(*b) {
                    let mut gb_full = Mat::zeros(bv.rows(), bv.cols());
                    for gi in 0..groups {
                        let g_g = slice_rows(g, gi * group, *group);
                        let a_g = slice_rows(av, gi * group, *group);
                        let db = mat::matmul_tn(&a_g, &g_g);
                        copy_rows_into(&mut gb_full, gi * group, &db);
                    }
                    ensure(grads, *b, bv).add_assign(&gb_full);
                }
            }
            Op::GroupMeanRows { x, group } => {
                if self.needs(*x) {
                    let gx = ensure(grads, *x, self.value(*x));
                    let inv = 1.0 / *group as f64;
                    for gi in 0..g.rows() {
                        let src = g.row(gi);
                        for j in 0..*group {
                            let dst = gx.row_mut(gi * group + j);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gv = g.item();
                    let gx = ensure(grads, *x, self.value(*x));
                    for d in gx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MseLoss { pred, target } => {
                if self.needs(*pred) {
                    let gv = g.item();
                    let pv = self.value(*pred);
                    let n = target.len() as f64;
                    let gp = ensure(grads, *pred, pv);
                    for ((d, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.iter()) {
                        *d += gv * 2.0 * (p - t) / n;
                    }
                }
            }
            Op::CrossEntropyLoss { logits, labels } => {
                if self.needs(*logits) {
                    let gv = g.item();
                    let lv = self.value(*logits);
                    let n = labels.len() as f64;
                    let gl = ensure(grads, *logits, lv);
                    let cols = lv.cols();
                    let mut soft = vec![0.0; cols];
                    for (r, &y) in labels.iter().enumerate() {
                        softmax_into(lv.row(r), &mut soft);
                        let dst = gl.row_mut(r);
                        for (c, d) in dst.iter_mut().enumerate() {
                            let ind = if c == y as usize { 1.0 } else { 0.0 };
                            *d += gv * (soft[c] - ind) / n;
                        }
                    }
                }
            }
        }
    }

    /// Collect gradients for every parameter leaf, summed across re-bindings
    /// of the same parameter on this tape.
    pub fn param_grads(&self, grads: &mut TapeGrads, n_params: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..n_params).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads.take(id) {
                    match &mut out[pid] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        out
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn ensure<'a>(grads: &'a mut [Option<Mat>], id: NodeId, like: &Mat) -> &'a mut Mat {
    if grads[id].is_none() {
        grads[id] = Some(Mat::zeros(like.rows(), like.cols()));
    }
    grads[id].as_mut().unwrap()
}

fn slice_rows(m: &Mat, start: usize, count: usize) -> Mat {
    let cols = m.cols();
    let data = m.data()[start * cols..(start + count) * cols].to_vec();
    Mat::from_vec(count, cols, data)
}

fn copy_rows_into(dst: &mut Mat, start: usize, src: &Mat) {
    let cols = dst.cols();
    debug_assert_eq!(cols, src.cols());
    let n = src.rows() * cols;
    dst.data_mut()[start * cols..start * cols + n].copy_from_slice(src.data());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, loss: NodeId, node: NodeId) -> Mat {
        let mut g = tape.backward(loss).unwrap();
        g.take(node).expect("gradient present")
    }

    #[test]
    fn relu_sum_matches_mask() {
        // f(x) = sum(relu(x)), x = [-1, 2] -> loss 2, grad [0, 1]
        let mut t = Tape::validating();
        let x = t.leaf_with_grad(Mat::from_vec(1, 2, vec![-1.0, 2.0]));
        let r = t.relu(x).unwrap();
        let loss = t.sum_all(r).unwrap();
        assert_eq!(t.value(loss).item(), 2.0);
        let g = grad_of(&t, loss, x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn square_grad_is_two_x() {
        // f(x) = x*x at x=3 -> grad 6 (via matmul of 1x1 matrices)
        let mut t = Tape::new();
        let x = t.leaf_with_grad(Mat::scalar(3.0));
        let y = t.matmul(x, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        assert_eq!(t.value(loss).item(), 9.0);
        let g = grad_of(&t, loss, x);
        assert_eq!(g.item(), 6.0);
    }

    #[test]
    fn fanout_accumulates() {
        // f(x) = x + x -> grad 2
        let mut t = Tape::new();
        let x = t.leaf_with_grad(Mat::scalar(5.0));
        let y = t.add(x, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        let g = grad_of(&t, loss, x);
        assert_eq!(g.item(), 2.0);
    }

    #[test]
    fn softmax_dot_value_and_finite_difference() {
        // f(x) = softmax([0,0]) . [1,0] -> 0.5; grad matches central differences.
        let build = |xv: &Mat| -> (Tape, NodeId, NodeId) {
            let mut t = Tape::new();
            let x = t.leaf_with_grad(xv.clone());
            let s = t.softmax_rows(x).unwrap();
            let w = t.input(Mat::from_vec(2, 1, vec![1.0, 0.0]));
            let y = t.matmul(s, w).unwrap();
            let loss = t.sum_all(y).unwrap();
            (t, x, loss)
        };
        let x0 = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let (t, x, loss) = build(&x0);
        assert!((t.value(loss).item() - 0.5).abs() < 1e-15);
        let analytic = grad_of(&t, loss, x);

        let h = 1e-5;
        for i in 0..2 {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let (tp, _, lp) = build(&xp);
            let (tm, _, lm) = build(&xm);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            assert!(
                (fd - analytic.data()[i]).abs() < 1e-6,
                "fd {} vs analytic {}",
                fd,
                analytic.data()[i]
            );
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf_with_grad(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn validating_tape_catches_nan() {
        let mut t = Tape::validating();
        let x = t.leaf_with_grad(Mat::scalar(-1.0));
        // NaN input flows through the next op and must be caught there
        let id = t.nodes.len();
        t.nodes.push(Node {
            op: Op::Leaf,
            value: Mat::scalar(f64::NAN),
            needs_grad: false,
            param: None,
        });
        let res = t.add(x, id);
        assert!(res.is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2usize, 3, 7] {
            let mut t = Tape::new();
            let logits = t.input(Mat::zeros(4, c));
            let labels = Arc::new(vec![0u32; 4]);
            let loss = t.cross_entropy_loss(logits, labels).unwrap();
            assert!((t.value(loss).item() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_simple() {
        let mut t = Tape::new();
        let p = t.leaf_with_grad(Mat::from_vec(2, 1, vec![1.0, 3.0]));
        let loss = t.mse_loss(p, Arc::new(vec![0.0, 1.0])).unwrap();
        assert!((t.value(loss).item() - 2.5).abs() < 1e-15);
        let g = grad_of(&t, loss, p);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let mut t = Tape::new();
        let x = t.leaf_with_grad(Mat::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let idx = Arc::new(vec![2u32, 0, 2]);
        let gathered = t.gather_rows(x, idx.clone()).unwrap();
        assert_eq!(t.value(gathered).data(), &[5., 6., 1., 2., 5., 6.]);
        let scattered = t.scatter_add_rows(gathered, Arc::new(vec![0, 0, 1]), 2).unwrap();
        assert_eq!(t.value(scattered).data(), &[6., 8., 5., 6.]);
        let loss = t.sum_all(scattered).unwrap();
        let g = grad_of(&t, loss, x);
        // row 0 used once, row 2 used twice
        assert_eq!(g.data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn grouped_matmuls_match_dense_per_group() {
        let a = Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.91).cos()).collect());
        let mut t = Tape::new();
        let an = t.leaf_with_grad(a.clone());
        let bn = t.leaf_with_grad(b.clone());
        let c = t.grouped_matmul_nt(an, bn, 2).unwrap();
        // group 0 check: rows 0..2
        let a0 = slice_rows(&a, 0, 2);
        let b0 = slice_rows(&b, 0, 2);
        let c0 = mat::matmul_nt(&a0, &b0);
        assert!(slice_rows(t.value(c), 0, 2).max_abs_diff(&c0) < 1e-14);

        let w = t.leaf_with_grad(Mat::from_vec(4, 5, (0..20).map(|i| i as f64 * 0.1).collect()));
        let d = t.grouped_matmul_nn(c, w, 2).unwrap();
        let loss = t.sum_all(d).unwrap();
        // finite-difference spot check on one element of a
        let analytic = grad_of(&t, loss, an);
        let h = 1e-6;
        let idx = 4;
        let eval = |av: &Mat| -> f64 {
            let mut tt = Tape::new();
            let an = tt.input(av.clone());
            let bn = tt.input(b.clone());
            let c = tt.grouped_matmul_nt(an, bn, 2).unwrap();
            let w = tt.input(Mat::from_vec(4, 5, (0..20).map(|i| i as f64 * 0.1).collect()));
            let d = tt.grouped_matmul_nn(c, w, 2).unwrap();
            let s = tt.sum_all(d).unwrap();
            tt.value(s).item()
        };
        let mut ap = a.clone();
        ap.data_mut()[idx] += h;
        let mut am = a.clone();
        am.data_mut()[idx] -= h;
        let fd = (eval(&ap) - eval(&am)) / (2.0 * h);
        assert!((fd - analytic.data()[idx]).abs() < 1e-6);
    }

    #[test]
    fn group_mean_rows_forward_backward() {
        let mut t = Tape::new();
        let x = t.leaf_with_grad(Mat::from_vec(4, 1, vec![1., 3., 10., 20.]));
        let m = t.group_mean_rows(x, 2).unwrap();
        assert_eq!(t.value(m).data(), &[2., 15.]);
        let loss = t.sum_all(m).unwrap();
        let g = grad_of(&t, loss, x);
        assert_eq!(g.data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
