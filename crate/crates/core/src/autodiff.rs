//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates adjoints. Named
//! parameters are registered once per graph and reported back as
//! [`Gradients`] keyed by the same names.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Tensor};

/// Named tensors, ordered by name. Holds every trainable value of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor under `prefix.` into `self`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }
}

/// Gradient buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    WeightNorm {
        direction: NodeId,
        gain: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Act {
        x: NodeId,
        kind: Activation,
        slope: f64,
    },
    SoftmaxRows(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    BroadcastMul {
        x: NodeId,
        y: NodeId,
        group: usize,
    },
    Reshape(NodeId),
    WeightedPool {
        alpha: NodeId,
        values: NodeId,
    },
    Blend {
        new: NodeId,
        old: NodeId,
        take_new: Vec<bool>,
    },
    Sum(NodeId),
    Bce {
        probs: NodeId,
        targets: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp applied to predicted probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, (NodeId, bool)>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        if let Some(&(id, _)) = self.params.get(name) {
            return id;
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), (id, trainable));
        id
    }

    /// Registers `name` from `store`, reusing the node if it is already on the tape.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&(id, _)) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        Ok(self.param(name, value, true))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ (+ b)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    pub fn weight_norm(&mut self, direction: NodeId, gain: NodeId) -> Result<NodeId> {
        let v = tensor::weight_norm_weight(self.value(direction), self.value(gain))?;
        Ok(self.push(v, Op::WeightNorm { direction, gain }, &[direction, gain]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a), &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation, slope: f64) -> Result<NodeId> {
        if kind == Activation::LeakyRelu {
            tensor::check_slope(slope)?;
        }
        if kind == Activation::Linear {
            return Ok(x);
        }
        let v = self.value(x).map(|t| kind.apply(t, slope));
        Ok(self.push(v, Op::Act { x, kind, slope }, &[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(x));
        self.push(
            v,
            Op::Act {
                x,
                kind: Activation::Sigmoid,
                slope: 0.0,
            },
            &[x],
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(
            v,
            Op::Act {
                x,
                kind: Activation::Tanh,
                slope: 0.0,
            },
            &[x],
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxRows(x), &[x]))
    }

    /// Multiplies by a precomputed inverted-dropout mask.
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim("dropout", xv.shape(), &[mask.len()]));
        }
        let v = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup `table[indices[r]]`, producing `[indices.len() × D]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            if i >= rows {
                return Err(Error::Data(format!(
                    "row index {i} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(v, Op::Gather { table, indices }, &[table]))
    }

    /// `out[b·group + k] = x[b·group + k] ∘ y[b]` for `x[(B·group)×W]`, `y[B×W]`.
    pub fn broadcast_mul(&mut self, x: NodeId, y: NodeId, group: usize) -> Result<NodeId> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.rank() != 2 || yv.rank() != 2 || xv.cols() != yv.cols() || xv.rows() != yv.rows() * group {
            return Err(Error::dim("broadcast_mul", xv.shape(), yv.shape()));
        }
        let w = xv.cols();
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(w).enumerate() {
            let yr = yv.row(r / group);
            for (o, b) in row.iter_mut().zip(yr) {
                *o *= b;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::BroadcastMul { x, y, group }, &[x, y]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `out[b] = Σ_k alpha[b,k] · values[b·K + k]` for `alpha[B×K]`, `values[(B·K)×D]`.
    pub fn weighted_pool(&mut self, alpha: NodeId, values: NodeId) -> Result<NodeId> {
        let (av, vv) = (self.value(alpha), self.value(values));
        let (b, k) = (av.rows(), av.cols());
        if vv.rank() != 2 || vv.rows() != b * k {
            return Err(Error::dim("pool", av.shape(), vv.shape()));
        }
        let d = vv.cols();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for ki in 0..k {
                let a = av.data()[bi * k + ki];
                for (o, x) in dst.iter_mut().zip(vv.row(bi * k + ki)) {
                    *o += a * x;
                }
            }
        }
        let v = Tensor::new(vec![b, d], out)?;
        Ok(self.push(v, Op::WeightedPool { alpha, values }, &[alpha, values]))
    }

    /// Row-wise select: row `r` comes from `new` when `take_new[r]`, otherwise from `old`.
    pub fn blend_rows(&mut self, new: NodeId, old: NodeId, take_new: Vec<bool>) -> Result<NodeId> {
        let (nv, ov) = (self.value(new), self.value(old));
        if nv.shape() != ov.shape() || nv.rows() != take_new.len() {
            return Err(Error::dim("blend_rows", nv.shape(), ov.shape()));
        }
        let mut v = ov.clone();
        for (r, &t) in take_new.iter().enumerate() {
            if t {
                v.row_mut(r).copy_from_slice(nv.row(r));
            }
        }
        Ok(self.push(v, Op::Blend { new, old, take_new }, &[new, old]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Multi-label binary cross entropy: summed over answers, averaged over rows.
    pub fn bce(&mut self, probs: NodeId, targets: Tensor) -> Result<NodeId> {
        let loss = bce_value(self.value(probs), &targets)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { probs, targets }, &[probs]))
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// trainable registered parameter; unreachable ones get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &g, &mut adj)?;
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (name, &(id, trainable)) in &self.params {
            if !trainable {
                continue;
            }
            let g = adj[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |id: NodeId, delta: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let need = |id: NodeId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, tensor::matmul_nt(g, self.value(*b))?);
                }
                if need(*b) {
                    acc(*b, tensor::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Linear { x, w, b } => {
                if need(*x) {
                    acc(*x, tensor::matmul(g, self.value(*w))?);
                }
                if need(*w) {
                    acc(*w, tensor::matmul_tn(g, self.value(*x))?);
                }
                if let Some(b) = b {
                    if need(*b) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                    }
                }
            }
            Op::WeightNorm { direction, gain } => {
                let dir = self.value(*direction);
                let gv = self.value(*gain);
                let mut d_dir = Tensor::zeros(dir.shape());
                let mut d_gain = vec![0.0; gv.len()];
                for (i, dg) in d_gain.iter_mut().enumerate() {
                    let v = dir.row(i);
                    let gw = g.row(i);
                    let norm = tensor::row_norm(v);
                    let proj: f64 = gw.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
                    *dg = proj;
                    let s = gv.data()[i] / norm;
                    for ((d, &gwj), &vj) in d_dir.row_mut(i).iter_mut().zip(gw).zip(v) {
                        *d = s * (gwj - proj * vj / norm);
                    }
                }
                acc(*direction, d_dir);
                acc(*gain, Tensor::new(gv.shape().to_vec(), d_gain)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if need(*b) {
                    acc(*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::OneMinus(a) => acc(*a, g.map(|v| -v)),
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::Act { x, kind, slope } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(yv.data())
                    .map(|((gi, &xi), &yi)| gi * kind.derivative(xi, yi, *slope))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::BroadcastMul { x, y, group } => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                if need(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let yr = yv.row(r / group);
                        for (o, b) in dx.row_mut(r).iter_mut().zip(yr) {
                            *o *= b;
                        }
                    }
                    acc(*x, dx);
                }
                if need(*y) {
                    let mut dy = Tensor::zeros(yv.shape());
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for ((o, a), b) in dy.row_mut(r / group).iter_mut().zip(xr).zip(gr) {
                            *o += a * b;
                        }
                    }
                    acc(*y, dy);
                }
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?),
            Op::WeightedPool { alpha, values } => {
                let (av, vv) = (self.value(*alpha), self.value(*values));
                let (b, k) = (av.rows(), av.cols());
                if need(*alpha) {
                    let mut da = vec![0.0; b * k];
                    for bi in 0..b {
                        let gr = g.row(bi);
                        for ki in 0..k {
                            da[bi * k + ki] = vv.row(bi * k + ki).iter().zip(gr).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*alpha, Tensor::new(av.shape().to_vec(), da)?);
                }
                if need(*values) {
                    let mut dv = Tensor::zeros(vv.shape());
                    for bi in 0..b {
                        let gr = g.row(bi);
                        for ki in 0..k {
                            let a = av.data()[bi * k + ki];
                            for (o, x) in dv.row_mut(bi * k + ki).iter_mut().zip(gr) {
                                *o = a * x;
                            }
                        }
                    }
                    acc(*values, dv);
                }
            }
            Op::Blend { new, old, take_new } => {
                let mut dn = Tensor::zeros(g.shape());
                let mut dold = Tensor::zeros(g.shape());
                for (r, &t) in take_new.iter().enumerate() {
                    let dst = if t { dn.row_mut(r) } else { dold.row_mut(r) };
                    dst.copy_from_slice(g.row(r));
                }
                acc(*new, dn);
                acc(*old, dold);
            }
            Op::Sum(x) => {
                let s = g.item()?;
                acc(*x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Bce { probs, targets } => {
                let p = self.value(*probs);
                let s = g.item()? / p.rows() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&pi, &yi)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                            0.0
                        } else {
                            s * ((1.0 - yi) / (1.0 - pi) - yi / pi)
                        }
                    })
                    .collect();
                acc(*probs, Tensor::new(p.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

/// `(1/B) Σ_b Σ_a −[y log ŷ + (1−y) log(1−ŷ)]` with `ŷ` clamped to `[ε, 1−ε]`.
pub fn bce_value(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(Error::dim("bce_loss", probs.shape(), targets.shape()));
    }
    if let Some(y) = targets.data().iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Data(format!("target score {y} outside [0, 1]")));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / probs.rows() as f64)
}
