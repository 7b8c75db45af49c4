//! Reverse-mode autodiff over a flat tape.
//!
//! A [`Graph`] is a single-use Wengert tape: forward calls append nodes (the
//! tape is topologically ordered by construction), `backward` walks it in
//! reverse and accumulates parameter gradients. Parameters live outside the
//! graph in a [`ParamStore`]; the first use of a parameter inside a graph
//! clones its value into a leaf node, later uses reuse the same node so
//! gradients from every consumer accumulate in one place.
//!
//! All reductions run in a fixed sequential order; repeated runs over the
//! same inputs are bitwise identical.

use std::collections::HashMap;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors plus trainability flags.
///
/// Names are stable identifiers used by the checkpoint format; registration
/// order defines serialization order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients { slots: (0..n_params).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.axpy(1.0, grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// `self += alpha * other`, slot-wise.
    pub fn axpy(&mut self, alpha: f32, other: &Gradients) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                match &mut self.slots[i] {
                    Some(t) => t.axpy(alpha, g),
                    s @ None => {
                        let mut scaled = g.clone();
                        for v in scaled.data_mut() {
                            *v *= alpha;
                        }
                        *s = Some(scaled);
                    }
                }
            }
        }
    }
}

pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Id, Id),
    /// `a * b^T` with b stored untransposed.
    MatMulNT(Id, Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f32),
    /// `[m,n] + [1,n]` broadcast over rows.
    AddRow(Id, Id),
    SoftmaxRows(Id),
    LogSoftmaxRows(Id),
    LayerNormRows { x: Id, gamma: Id, beta: Id, eps: f32 },
    Gelu(Id),
    Relu(Id),
    Sigmoid(Id),
    Log(Id),
    Clamp(Id, f32, f32),
    ConcatRows(Vec<Id>),
    SliceRows(Id, usize, usize),
    SelectRows(Id, Vec<usize>),
    TileRows(Id, usize),
    ConcatCols(Vec<Id>),
    SliceCols(Id, usize, usize),
    Diag(Id),
    MeanAll(Id),
    SumAll(Id),
    MeanRows(Id),
    L2NormalizeRows(Id, f32),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use autodiff tape bound to a parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Id>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Id {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn req(&self, id: Id) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: Id) -> f32 {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "expected scalar node");
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant (non-differentiable) leaf.
    pub fn input(&mut self, value: Tensor) -> Id {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf; repeated calls for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Id {
        if let Some(&node) = self.param_nodes.get(&id.0) {
            return node;
        }
        let trainable = self.store.is_trainable(id);
        let node = self.push(self.store.get(id).clone(), Op::Param(id), trainable);
        self.param_nodes.insert(id.0, node);
        node
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = matmul(self.value(a), self.value(b));
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let v = matmul_nt(self.value(a), self.value(b));
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert!(self.value(a).same_shape(self.value(b)), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.axpy(1.0, self.value(b));
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert!(self.value(a).same_shape(self.value(b)), "sub shape mismatch");
        let mut v = self.value(a).clone();
        v.axpy(-1.0, self.value(b));
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert!(self.value(a).same_shape(self.value(b)), "mul shape mismatch");
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Tensor::from_vec(r, c, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Id, c: f32) -> Id {
        let v = self.value(a).map(|x| x * c);
        let rg = self.req(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Id) -> Id {
        self.scale(a, -1.0)
    }

    pub fn add_row(&mut self, a: Id, bias: Id) -> Id {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(bias).shape(), (1, n), "add_row bias shape");
        let mut v = self.value(a).clone();
        {
            let b = self.value(bias).row(0).to_vec();
            for r in 0..m {
                for (o, bv) in v.row_mut(r).iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
        }
        let rg = self.req(a) || self.req(bias);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Tensor::zeros(m, n);
        for r in 0..m {
            softmax_row(x.row(r), v.row_mut(r));
        }
        let rg = self.req(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln() + max;
            for (o, &xv) in v.row_mut(r).iter_mut().zip(row.iter()) {
                *o = xv - lse;
            }
        }
        let rg = self.req(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn layer_norm_rows(&mut self, x: Id, gamma: Id, beta: Id, eps: f32) -> Id {
        let (m, n) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (1, n));
        assert_eq!(self.value(beta).shape(), (1, n));
        let mut v = Tensor::zeros(m, n);
        {
            let xv = self.value(x);
            let g = self.value(gamma).row(0).to_vec();
            let b = self.value(beta).row(0).to_vec();
            for r in 0..m {
                let row = xv.row(r);
                let (mean, inv) = row_moments(row, eps);
                for c in 0..n {
                    v.set(r, c, (row[c] - mean) * inv * g[c] + b[c]);
                }
            }
        }
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps }, rg)
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(gelu_fwd);
        let rg = self.req(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.req(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.req(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f32::ln);
        let rg = self.req(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn clamp(&mut self, a: Id, lo: f32, hi: f32) -> Id {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.req(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.req(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Id, r0: usize, r1: usize) -> Id {
        let x = self.value(a);
        assert!(r0 < r1 && r1 <= x.rows(), "slice_rows range");
        let cols = x.cols();
        let data = x.data()[r0 * cols..r1 * cols].to_vec();
        let rg = self.req(a);
        self.push(Tensor::from_vec(r1 - r0, cols, data), Op::SliceRows(a, r0, r1), rg)
    }

    pub fn select_rows(&mut self, a: Id, idx: &[usize]) -> Id {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let rg = self.req(a);
        self.push(
            Tensor::from_vec(idx.len(), cols, data),
            Op::SelectRows(a, idx.to_vec()),
            rg,
        )
    }

    pub fn tile_rows(&mut self, a: Id, m: usize) -> Id {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "tile_rows expects a row vector");
        let mut data = Vec::with_capacity(m * x.cols());
        for _ in 0..m {
            data.extend_from_slice(x.row(0));
        }
        let rg = self.req(a);
        self.push(Tensor::from_vec(m, x.cols(), data), Op::TileRows(a, m), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            let w = x.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(x.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.req(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Id, c0: usize, c1: usize) -> Id {
        let x = self.value(a);
        assert!(c0 < c1 && c1 <= x.cols(), "slice_cols range");
        let mut out = Tensor::zeros(x.rows(), c1 - c0);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[c0..c1]);
        }
        let rg = self.req(a);
        self.push(out, Op::SliceCols(a, c0, c1), rg)
    }

    pub fn diag(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        assert_eq!(m, n, "diag expects a square matrix");
        let data = (0..m).map(|i| x.at(i, i)).collect();
        let rg = self.req(a);
        self.push(Tensor::from_vec(m, 1, data), Op::Diag(a), rg)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let v = x.data().iter().sum::<f32>() / x.numel() as f32;
        let rg = self.req(a);
        self.push(Tensor::scalar(v), Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let v = x.data().iter().sum::<f32>();
        let rg = self.req(a);
        self.push(Tensor::scalar(v), Op::SumAll(a), rg)
    }

    pub fn mean_rows(&mut self, a: Id) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(1, n);
        for r in 0..m {
            for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(r).iter()) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= m as f32;
        }
        let rg = self.req(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Id, eps: f32) -> Id {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row.iter()) {
                *o = v / norm;
            }
        }
        let rg = self.req(a);
        self.push(out, Op::L2NormalizeRows(a, eps), rg)
    }

    /// Backpropagate from a scalar node; returns parameter gradients.
    pub fn backward(&mut self, loss: Id) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        let mut out = Gradients::new(self.store.len());
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input => {}
                Op::Param(pid) => out.accumulate(pid, &g),
                Op::MatMul(a, b) => {
                    if self.req(a) {
                        let da = matmul_nt(&g, &self.nodes[b].value);
                        acc(&mut grads, a, da);
                    }
                    if self.req(b) {
                        let db = matmul_tn(&self.nodes[a].value, &g);
                        acc(&mut grads, b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.req(a) {
                        let da = matmul(&g, &self.nodes[b].value);
                        acc(&mut grads, a, da);
                    }
                    if self.req(b) {
                        let db = matmul_tn(&g, &self.nodes[a].value);
                        acc(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.req(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.req(b) {
                        acc(&mut grads, b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.req(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.req(b) {
                        acc(&mut grads, b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.req(a) {
                        let da = zip_mul(&g, &self.nodes[b].value);
                        acc(&mut grads, a, da);
                    }
                    if self.req(b) {
                        let db = zip_mul(&g, &self.nodes[a].value);
                        acc(&mut grads, b, db);
                    }
                }
                Op::Scale(a, c) => {
                    if self.req(a) {
                        acc(&mut grads, a, g.map(|x| x * c));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.req(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.req(bias) {
                        let (m, n) = g.shape();
                        let mut col = Tensor::zeros(1, n);
                        for r in 0..m {
                            for (o, &v) in col.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, bias, col);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.req(a) {
                        let y = &self.nodes[id].value;
                        let (m, n) = y.shape();
                        let mut da = Tensor::zeros(m, n);
                        for r in 0..m {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot: f32 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                da.set(r, c, yr[c] * (gr[c] - dot));
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.req(a) {
                        let y = &self.nodes[id].value;
                        let (m, n) = y.shape();
                        let mut da = Tensor::zeros(m, n);
                        for r in 0..m {
                            let gr = g.row(r);
                            let gsum: f32 = gr.iter().sum();
                            let yr = y.row(r);
                            for c in 0..n {
                                da.set(r, c, gr[c] - yr[c].exp() * gsum);
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = self.nodes[x].value.clone();
                    let (m, n) = xv.shape();
                    let gam = self.nodes[gamma].value.row(0).to_vec();
                    let mut dx = Tensor::zeros(m, n);
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    for r in 0..m {
                        let row = xv.row(r);
                        let (mean, inv) = row_moments(row, eps);
                        let gr = g.row(r);
                        let mut mean_dy = 0.0f32;
                        let mut mean_dyxhat = 0.0f32;
                        let xhat: Vec<f32> = row.iter().map(|&v| (v - mean) * inv).collect();
                        for c in 0..n {
                            let dy = gr[c] * gam[c];
                            mean_dy += dy;
                            mean_dyxhat += dy * xhat[c];
                            dgamma.row_mut(0)[c] += gr[c] * xhat[c];
                            dbeta.row_mut(0)[c] += gr[c];
                        }
                        mean_dy /= n as f32;
                        mean_dyxhat /= n as f32;
                        for c in 0..n {
                            let dy = gr[c] * gam[c];
                            dx.set(r, c, inv * (dy - mean_dy - xhat[c] * mean_dyxhat));
                        }
                    }
                    if self.req(x) {
                        acc(&mut grads, x, dx);
                    }
                    if self.req(gamma) {
                        acc(&mut grads, gamma, dgamma);
                    }
                    if self.req(beta) {
                        acc(&mut grads, beta, dbeta);
                    }
                }
                Op::Gelu(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let da = zip_with(&g, x, |gv, xv| gv * gelu_grad(xv));
                        acc(&mut grads, a, da);
                    }
                }
                Op::Relu(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let da = zip_with(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                        acc(&mut grads, a, da);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.req(a) {
                        let y = &self.nodes[id].value;
                        let da = zip_with(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                        acc(&mut grads, a, da);
                    }
                }
                Op::Log(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let da = zip_with(&g, x, |gv, xv| gv / xv);
                        acc(&mut grads, a, da);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let da = zip_with(&g, x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 });
                        acc(&mut grads, a, da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in &parts {
                        let rows = self.nodes[p].value.rows();
                        if self.req(p) {
                            let cols = g.cols();
                            let data = g.data()[r0 * cols..(r0 + rows) * cols].to_vec();
                            acc(&mut grads, p, Tensor::from_vec(rows, cols, data));
                        }
                        r0 += rows;
                    }
                }
                Op::SliceRows(a, r0, _r1) => {
                    if self.req(a) {
                        let mut da = Tensor::zeros(self.nodes[a].value.rows(), g.cols());
                        for r in 0..g.rows() {
                            da.row_mut(r0 + r).copy_from_slice(g.row(r));
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::SelectRows(a, idx) => {
                    if self.req(a) {
                        let mut da = Tensor::zeros(self.nodes[a].value.rows(), g.cols());
                        for (r, &i) in idx.iter().enumerate() {
                            for (o, &v) in da.row_mut(i).iter_mut().zip(g.row(r).iter()) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::TileRows(a, _m) => {
                    if self.req(a) {
                        let mut da = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in da.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.cols();
                        if self.req(p) {
                            let mut dp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            acc(&mut grads, p, dp);
                        }
                        c0 += w;
                    }
                }
                Op::SliceCols(a, c0, _c1) => {
                    if self.req(a) {
                        let src = &self.nodes[a].value;
                        let mut da = Tensor::zeros(src.rows(), src.cols());
                        for r in 0..g.rows() {
                            da.row_mut(r)[c0..c0 + g.cols()].copy_from_slice(g.row(r));
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::Diag(a) => {
                    if self.req(a) {
                        let n = self.nodes[a].value.rows();
                        let mut da = Tensor::zeros(n, n);
                        for i in 0..n {
                            da.set(i, i, g.at(i, 0));
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::MeanAll(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let v = g.data()[0] / x.numel() as f32;
                        acc(&mut grads, a, Tensor::full(x.rows(), x.cols(), v));
                    }
                }
                Op::SumAll(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        acc(&mut grads, a, Tensor::full(x.rows(), x.cols(), g.data()[0]));
                    }
                }
                Op::MeanRows(a) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let (m, n) = x.shape();
                        let mut da = Tensor::zeros(m, n);
                        for r in 0..m {
                            for (o, &v) in da.row_mut(r).iter_mut().zip(g.row(0).iter()) {
                                *o = v / m as f32;
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
                Op::L2NormalizeRows(a, eps) => {
                    if self.req(a) {
                        let x = &self.nodes[a].value;
                        let y = &self.nodes[id].value;
                        let (m, n) = x.shape();
                        let mut da = Tensor::zeros(m, n);
                        for r in 0..m {
                            let norm =
                                x.row(r).iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
                            let gr = g.row(r);
                            let yr = y.row(r);
                            let dot: f32 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                da.set(r, c, (gr[c] - yr[c] * dot) / norm);
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], id: Id, g: Tensor) {
    match &mut grads[id] {
        Some(t) => t.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip_with(a, b, |x, y| x * y)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert!(a.same_shape(b));
    let (r, c) = a.shape();
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(r, c, data)
}

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_moments(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C0: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C1: f32 = 0.044_715;

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_grads;
    use crate::rng::{stream, StreamTag};

    fn store_with(shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
        let mut rng = stream(11, StreamTag::Init, &[99]);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.register(&format!("p{i}"), Tensor::randn(r, c, 0.5, &mut rng), true))
            .collect();
        (store, ids)
    }

    fn run_fd_case(
        shapes: &[(usize, usize)],
        build: fn(&mut Graph<'_>, &[ParamId]) -> Id,
    ) -> f32 {
        let (mut store, ids) = store_with(shapes);
        let grads = {
            let mut g = Graph::new(&store);
            let l = build(&mut g, &ids);
            g.backward(l)
        };
        check_param_grads(&mut store, &ids, &grads, 1e-2, |s| {
            let mut g = Graph::new(s);
            let l = build(&mut g, &ids);
            g.scalar_value(l)
        })
    }

    #[test]
    fn matmul_chain_gradients_match_fd() {
        let err = run_fd_case(&[(3, 4), (4, 5), (1, 5)], |g, ids| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let bias = g.param(ids[2]);
            let h = g.matmul(a, b);
            let h = g.add_row(h, bias);
            let h = g.gelu(h);
            g.mean_all(h)
        });
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn softmax_layernorm_gradients_match_fd() {
        let err = run_fd_case(&[(4, 6), (1, 6), (1, 6)], |g, ids| {
            let x = g.param(ids[0]);
            let gamma = g.param(ids[1]);
            let beta = g.param(ids[2]);
            let h = g.layer_norm_rows(x, gamma, beta, 1e-5);
            let p = g.softmax_rows(h);
            let lp = g.log_softmax_rows(h);
            let c = g.mul(p, lp);
            g.mean_all(c)
        });
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn structural_ops_gradients_match_fd() {
        let err = run_fd_case(&[(5, 4), (1, 4)], |g, ids| {
            let x = g.param(ids[0]);
            let t = g.param(ids[1]);
            let sel = g.select_rows(x, &[0, 2, 2, 4]);
            let tiled = g.tile_rows(t, 4);
            let joined = g.concat_rows(&[sel, tiled]);
            let part = g.slice_rows(joined, 1, 7);
            let lo = g.slice_cols(part, 0, 2);
            let hi = g.slice_cols(part, 2, 4);
            let back = g.concat_cols(&[hi, lo]);
            let nrm = g.l2_normalize_rows(back, 1e-12);
            let sq = g.mul(nrm, nrm);
            g.mean_all(sq)
        });
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn contrastive_shaped_gradients_match_fd() {
        let err = run_fd_case(&[(4, 6), (4, 6)], |g, ids| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let an = g.l2_normalize_rows(a, 1e-12);
            let bn = g.l2_normalize_rows(b, 1e-12);
            let sim = g.matmul_nt(an, bn);
            let sim = g.scale(sim, 1.0 / 0.3);
            let lp = g.log_softmax_rows(sim);
            let d = g.diag(lp);
            let m = g.mean_all(d);
            g.neg(m)
        });
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn shared_param_node_accumulates_uses() {
        let (store, ids) = store_with(&[(3, 3)]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let a_again = g.param(ids[0]);
        assert_eq!(a, a_again, "same param must map to one node");
        let prod = g.matmul(a, a);
        let l = g.sum_all(prod);
        let grads = g.backward(l);
        // d/dA sum(A*A) = (A + A^T) * ones-structure; verify against FD on one coord.
        let got = grads.get(ids[0]).unwrap().clone();
        drop(g);
        let mut store2 = store.clone();
        let base = {
            let x = store2.get(ids[0]).clone();
            crate::tensor::matmul(&x, &x).data().iter().sum::<f32>()
        };
        let eps = 1e-2f32;
        store2.get_mut(ids[0]).data_mut()[4] += eps;
        let up = {
            let x = store2.get(ids[0]).clone();
            crate::tensor::matmul(&x, &x).data().iter().sum::<f32>()
        };
        let fd = (up - base) / eps;
        assert!((fd - got.data()[4]).abs() < 2e-2, "fd {fd} vs analytic {}", got.data()[4]);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut rng = stream(5, StreamTag::Init, &[1]);
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::randn(3, 3, 0.5, &mut rng), true);
        let frozen = store.register("frozen", Tensor::randn(3, 3, 0.5, &mut rng), false);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(frozen);
        let c = g.matmul(a, b);
        let l = g.sum_all(c);
        let grads = g.backward(l);
        assert!(grads.get(w).is_some());
        assert!(grads.get(frozen).is_none());
    }
}
