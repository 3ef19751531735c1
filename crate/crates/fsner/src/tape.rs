//! Reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; node
//! ids are creation-ordered, so the list is already topologically sorted and
//! `backward` is a single reverse sweep. Gradients are only propagated into
//! subgraphs that contain a differentiable variable, which keeps adapter-only
//! training from paying for base-weight gradients.
//!
//! Variables are registered with caller-chosen slot numbers; after
//! `backward`, [`GradStore`] holds one gradient matrix per slot.

use crate::matrix::{guarded_l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a @ b^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `(m,n) + broadcast (1,n)`
    AddBroadcastRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    Silu(NodeId),
    /// RMS-normalized rows scaled by a `(1,n)` gain.
    RmsNorm(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// `None` entries become zero rows and receive no gradient.
    GatherRowsMasked(NodeId, Vec<Option<usize>>),
    MeanRows(NodeId),
    SumAll(NodeId),
    L2NormalizeRows(NodeId),
    LogSigmoid(NodeId),
    /// Picks `(row, col)` entries into a `(k,1)` column.
    GatherEntries(NodeId, Vec<(usize, usize)>),
    /// Vertical stack of same-width inputs.
    ConcatRows(Vec<NodeId>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    var_slot: Option<usize>,
}

pub struct GradStore {
    grads: Vec<Option<Matrix>>,
}

impl GradStore {
    pub fn get(&self, slot: usize) -> Option<&Matrix> {
        self.grads.get(slot).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, slot: usize) -> Option<Matrix> {
        self.grads.get_mut(slot).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const RMS_EPS: f64 = 1e-8;

pub struct Tape {
    nodes: Vec<Node>,
    n_slots: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_slots: 0,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool, var_slot: Option<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            var_slot,
        });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false, None)
    }

    /// A differentiable variable bound to a gradient slot.
    pub fn var(&mut self, slot: usize, value: Matrix) -> NodeId {
        self.n_slots = self.n_slots.max(slot + 1);
        self.push(value, Op::Leaf, true, Some(slot))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng, None)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b), ng, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng, None)
    }

    pub fn add_broadcast_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "broadcast row shape");
        let mut value = self.value(a).clone();
        for r in 0..m {
            let src = self.nodes[row.0].value.clone();
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v += src.get(0, c);
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddBroadcastRow(a, row), ng, None)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Hadamard(a, b), ng, None)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_row_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::RowSoftmax(a), ng, None)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            log_softmax_row_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::RowLogSoftmax(a), ng, None)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng, None)
    }

    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let x = self.value(a);
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, x.cols()), "rms_norm gain shape");
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            let out = value.row_mut(r);
            for c in 0..row.len() {
                out[c] = row[c] * inv * g.get(0, c);
            }
        }
        let ng = self.ng(a) || self.ng(gain);
        self.push(value, Op::RmsNorm(a, gain), ng, None)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let value = self.value(a).gather_rows(&indices);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, indices), ng, None)
    }

    pub fn gather_rows_masked(&mut self, a: NodeId, indices: Vec<Option<usize>>) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(indices.len(), x.cols());
        for (i, idx) in indices.iter().enumerate() {
            if let Some(r) = idx {
                assert!(*r < x.rows(), "gather_rows_masked: unmasked out of range");
                value.row_mut(i).copy_from_slice(x.row(*r));
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRowsMasked(a, indices), ng, None)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng, None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng, None)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = guarded_l2_norm(row);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a), ng, None)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(log_sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::LogSigmoid(a), ng, None)
    }

    pub fn gather_entries(&mut self, a: NodeId, coords: Vec<(usize, usize)>) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(coords.len(), 1);
        for (i, &(r, c)) in coords.iter().enumerate() {
            assert!(r < x.rows() && c < x.cols(), "gather_entries out of range");
            value.set(i, 0, x.get(r, c));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherEntries(a, coords), ng, None)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows: width mismatch");
            for r in 0..m.rows() {
                value.row_mut(at).copy_from_slice(m.row(r));
                at += 1;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts), ng, None)
    }

    /// Reverse sweep from a scalar root. Returns per-slot variable gradients.
    pub fn backward(&self, root: NodeId) -> GradStore {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            // Only variable leaves keep their gradient for extraction.
            if self.nodes[id].var_slot.is_some() {
                grads[id] = Some(g);
            }
        }

        let mut out: Vec<Option<Matrix>> = (0..self.n_slots).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(slot) = node.var_slot {
                if let Some(g) = grads[id].take() {
                    match &mut out[slot] {
                        Some(acc) => acc.add_assign(&g),
                        e @ None => *e = Some(g),
                    }
                }
            }
        }
        GradStore { grads: out }
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            e @ None => *e = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddBroadcastRow(a, row) => {
                self.add_grad(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        let dst = rg.row_mut(0);
                        for c in 0..src.len() {
                            dst[c] += src[c];
                        }
                    }
                    self.add_grad(grads, *row, rg);
                }
            }
            Op::Scale(a, s) => {
                self.add_grad(grads, *a, g.scale(*s));
            }
            Op::Hadamard(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let out = dx.row_mut(r);
                    for c in 0..yr.len() {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let gsum: f64 = gr.iter().sum();
                    let out = dx.row_mut(r);
                    for c in 0..yr.len() {
                        out[c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    let s = sigmoid(xv);
                    *d *= s * (1.0 + xv * (1.0 - s));
                }
                self.add_grad(grads, *a, dx);
            }
            Op::RmsNorm(a, gain) => {
                let x = self.value(*a);
                let gn = self.value(*gain);
                let n = x.cols();
                if self.ng(*gain) {
                    let mut dg = Matrix::zeros(1, n);
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let gr = g.row(r);
                        let dst = dg.row_mut(0);
                        for c in 0..n {
                            dst[c] += gr[c] * row[c] * inv;
                        }
                    }
                    self.add_grad(grads, *gain, dg);
                }
                if self.ng(*a) {
                    let mut dx = Matrix::zeros(x.rows(), n);
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let gr = g.row(r);
                        // u = g .* gain ; dx = inv * (u - r * mean(u .* r)),
                        // with r = x * inv the normalized row.
                        let mut u_dot_r = 0.0;
                        for c in 0..n {
                            u_dot_r += gr[c] * gn.get(0, c) * row[c] * inv;
                        }
                        let mean_udr = u_dot_r / n as f64;
                        let out = dx.row_mut(r);
                        for c in 0..n {
                            let u = gr[c] * gn.get(0, c);
                            out[c] = inv * (u - row[c] * inv * mean_udr);
                        }
                    }
                    self.add_grad(grads, *a, dx);
                }
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, &r) in indices.iter().enumerate() {
                    let gr = g.row(i);
                    let dst = dx.row_mut(r);
                    for c in 0..gr.len() {
                        dst[c] += gr[c];
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::GatherRowsMasked(a, indices) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, idx) in indices.iter().enumerate() {
                    if let Some(r) = idx {
                        let gr = g.row(i);
                        let dst = dx.row_mut(*r);
                        for c in 0..gr.len() {
                            dst[c] += gr[c];
                        }
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let inv = 1.0 / src.rows() as f64;
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let dst = dx.row_mut(r);
                    let gr = g.row(0);
                    for c in 0..gr.len() {
                        dst[c] = gr[c] * inv;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let mut dx = Matrix::zeros(rows, g.cols());
                        for r in 0..rows {
                            dx.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        self.add_grad(grads, p, dx);
                    }
                    at += rows;
                }
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                let gv = g.item();
                let dx = Matrix::from_vec(
                    src.rows(),
                    src.cols(),
                    vec![gv; src.rows() * src.cols()],
                );
                self.add_grad(grads, *a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = guarded_l2_norm(x.row(r));
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let out = dx.row_mut(r);
                    for c in 0..yr.len() {
                        out[c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *d *= sigmoid(-xv);
                }
                self.add_grad(grads, *a, dx);
            }
            Op::GatherEntries(a, coords) => {
                let src = self.value(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, &(r, c)) in coords.iter().enumerate() {
                    dx.set(r, c, dx.get(r, c) + g.get(i, 0));
                }
                self.add_grad(grads, *a, dx);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sigmoid(x))`; exactly `-ln 2` at `x = 0`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}
