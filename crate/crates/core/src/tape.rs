//! Reverse-mode differentiation over matrix-valued primitive ops.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records every op applied during
//! a forward pass. Parameters enter the graph through [`Tape::param`]
//! without copying. [`Tape::backward`] walks the recorded nodes once in
//! reverse order; since nodes can only reference earlier nodes, insertion
//! order is a topological order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    log_softmax_unchecked, matmul_acc, matmul_t_acc, sigmoid, softmax_unchecked, t_matmul_acc,
    Matrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learned matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// One gradient matrix per parameter, shaped like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|m| m.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flat_map(|m| m.data().iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    TMatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddColBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>),
    Column(NodeId, usize),
    GatherRowsT(NodeId, Vec<usize>),
    Pick(NodeId, usize),
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

struct Node {
    op: Op,
    // Empty for `Op::Param`; the value lives in the store.
    value: Matrix,
}

/// Recorded computation graph over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(p),
            _ => &node.value,
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant or differentiable input; gradients are available through
    /// [`Backward::grad`].
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), Matrix::zeros(0, 0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a^T * b`.
    pub fn t_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).t_matmul(self.value(b))?;
        Ok(self.push(Op::TMatMul(a, b), v))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Adds column vector `v` to every column of `m`.
    pub fn add_col_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (vm, vv) = (self.value(m), self.value(v));
        if vv.cols() != 1 || vv.rows() != vm.rows() {
            return Err(shape_err("add_col_broadcast", vm, vv));
        }
        let mut out = vm.clone();
        let cols = vm.cols();
        for r in 0..vm.rows() {
            let b = vv.data()[r];
            for x in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *x += b;
            }
        }
        Ok(self.push(Op::AddColBroadcast(m, v), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Softmax over all entries of `a`, shape preserved.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::EmptyLogits);
        }
        let v = Matrix::from_vec(va.rows(), va.cols(), softmax_unchecked(va.data()))?;
        Ok(self.push(Op::Softmax(a), v))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::EmptyLogits);
        }
        let v = Matrix::from_vec(va.rows(), va.cols(), log_softmax_unchecked(va.data()))?;
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    /// Stacks column vectors vertically.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    left: v.shape(),
                    right: (v.rows(), 1),
                });
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Matrix::column(data)))
    }

    /// Column `idx` of `a` as a column vector (one-hot lookup).
    pub fn column(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let va = self.value(a);
        if idx >= va.cols() {
            return Err(Error::TokenOutOfRange {
                id: idx,
                size: va.cols(),
            });
        }
        let v = Matrix::column((0..va.rows()).map(|r| va.get(r, idx)).collect());
        Ok(self.push(Op::Column(a, idx), v))
    }

    /// Rows `ids` of `table`, laid out as columns of the result.
    pub fn gather_rows_t(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: vt.rows(),
            });
        }
        let v = Matrix::from_fn(vt.cols(), ids.len(), |r, c| vt.get(ids[c], r));
        Ok(self.push(Op::GatherRowsT(table, ids.to_vec()), v))
    }

    /// Entry `idx` (row-major) of `a` as a scalar node.
    pub fn pick(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let va = self.value(a);
        if idx >= va.len() {
            return Err(Error::TokenOutOfRange {
                id: idx,
                size: va.len(),
            });
        }
        let v = Matrix::scalar(va.data()[idx]);
        Ok(self.push(Op::Pick(a, idx), v))
    }

    /// Sum of all entries as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Elementwise sum of same-shaped nodes, accumulated left to right.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::EmptySequence)?;
        let mut v = self.value(first).clone();
        for &p in &parts[1..] {
            let vp = self.value(p);
            if vp.shape() != v.shape() {
                return Err(shape_err("add_n", &v, vp));
            }
            v.add_assign(vp);
        }
        Ok(self.push(Op::AddN(parts.to_vec()), v))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Backward> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(lv.shape()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Param(p) => {
                    grads.values[p.0].add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // dA = G B^T, dB = A^T G
                    matmul_t_acc(&g, vb, acc(&mut adj, *a, va));
                    t_matmul_acc(va, &g, acc(&mut adj, *b, vb));
                }
                Op::TMatMul(a, b) => {
                    // C = A^T B: dA = B G^T, dB = A G
                    let (va, vb) = (self.value(*a), self.value(*b));
                    matmul_t_acc(vb, &g, acc(&mut adj, *a, va));
                    matmul_acc(va, &g, acc(&mut adj, *b, vb));
                }
                Op::MatMulT(a, b) => {
                    // C = A B^T: dA = G B, dB = G^T A
                    let (va, vb) = (self.value(*a), self.value(*b));
                    matmul_acc(&g, vb, acc(&mut adj, *a, va));
                    t_matmul_acc(&g, va, acc(&mut adj, *b, vb));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g).add_assign(&g);
                    acc(&mut adj, *b, &g).add_assign(&g);
                }
                Op::AddColBroadcast(m, v) => {
                    acc(&mut adj, *m, &g).add_assign(&g);
                    let vv = self.value(*v);
                    let dv = acc(&mut adj, *v, vv);
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        dv.data_mut()[r] += g.data()[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = acc(&mut adj, *a, va);
                    for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gi * bi;
                    }
                    let db = acc(&mut adj, *b, vb);
                    for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gi * ai;
                    }
                }
                Op::Scale(a, s) => {
                    let da = acc(&mut adj, *a, &g);
                    for (d, gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * s;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = acc(&mut adj, *a, y);
                    for ((d, gi), yi) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = acc(&mut adj, *a, y);
                    for ((d, gi), yi) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi).sum();
                    let da = acc(&mut adj, *a, y);
                    for ((d, gi), yi) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += yi * (gi - gy);
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let gsum: f64 = g.data().iter().sum();
                    let da = acc(&mut adj, *a, y);
                    for ((d, gi), yi) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi - yi.exp() * gsum;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let n = vp.len();
                        let dp = acc(&mut adj, p, vp);
                        for (d, gi) in dp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += gi;
                        }
                        off += n;
                    }
                }
                Op::Column(a, idx) => {
                    let va = self.value(*a);
                    let da = acc(&mut adj, *a, va);
                    for r in 0..g.rows() {
                        let cur = da.get(r, *idx);
                        da.set(r, *idx, cur + g.data()[r]);
                    }
                }
                Op::GatherRowsT(t, ids) => {
                    let vt = self.value(*t);
                    let dt = acc(&mut adj, *t, vt);
                    for (c, &row) in ids.iter().enumerate() {
                        for r in 0..g.rows() {
                            let cur = dt.get(row, r);
                            dt.set(row, r, cur + g.get(r, c));
                        }
                    }
                }
                Op::Pick(a, idx) => {
                    let va = self.value(*a);
                    let da = acc(&mut adj, *a, va);
                    da.data_mut()[*idx] += g.item();
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    let s = g.item();
                    let da = acc(&mut adj, *a, va);
                    da.data_mut().iter_mut().for_each(|d| *d += s);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        acc(&mut adj, p, &g).add_assign(&g);
                    }
                }
            }
        }
        Ok(Backward { grads, leaves: adj })
    }
}

/// Adjoint slot for `id`, zero-initialized to `like`'s shape on first use.
fn acc<'a>(adj: &'a mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'a mut Matrix {
    adj[id.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Result of a backward pass.
pub struct Backward {
    grads: Gradients,
    leaves: Vec<Option<Matrix>>,
}

impl Backward {
    pub fn param_grads(&self) -> &Gradients {
        &self.grads
    }

    pub fn into_param_grads(self) -> Gradients {
        self.grads
    }

    /// Gradient w.r.t. a leaf node; `None` if the loss does not depend on it.
    pub fn grad(&self, leaf: NodeId) -> Option<&Matrix> {
        self.leaves.get(leaf.0).and_then(Option::as_ref)
    }
}
