//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are only ever
//! appended, so the recording order is already a topological order and
//! [`Tape::backward`] simply walks it in reverse. A new tape is built for every
//! forward pass; parameters are borrowed from a [`ParamStore`] rather than
//! copied, and each parameter maps to exactly one leaf node per tape.

use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Storage<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, n: usize, p: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Relu(Var),
    Prelu { x: Var, slope: Var, channels: usize },
    Reduce { x: Var, outer: usize, len: usize, inner: usize, mean: bool },
    Reshape(Var),
    Broadcast { x: Var, src: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Gather { table: Var, ids: Vec<usize>, dim: usize },
    BatchedVecMat { h: Var, w: Var, batch: usize, m: usize, n: usize },
    Bce { pred: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Storage<'p>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape without a parameter store; leaves come from [`Tape::variable`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
        }
    }
}

fn strip_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p> Tape<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Storage::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf that takes a gradient but is not backed by the store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.value(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Storage::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        matmul_acc(self.value(a), self.value(b), &mut out, m, n, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul { a, b, m, n, p }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Relu(x), rg)
    }

    /// Parametric ReLU. `slope` has one element, or one per trailing channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = self.shape(slope).iter().product::<usize>();
        let last = *shape.last().unwrap_or(&1);
        if channels != 1 && channels != last {
            return Err(Error::shape("prelu", &shape, self.shape(slope)));
        }
        let a = self.value(slope);
        if a.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("prelu slope must be finite".into()));
        }
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[i % channels] * v })
            .collect();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(shape, out, Op::Prelu { x, slope, channels }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let base = (o * len + j) * inner;
                for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            strip_axis(&shape, axis),
            out,
            Op::Reduce { x, outer, len, inner, mean },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Broadcast with trailing-dimension alignment: every source dimension must
    /// equal the target's or be 1.
    pub fn broadcast_to(&mut self, x: Var, target: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape == target {
            return Ok(x);
        }
        if shape.len() > target.len() {
            return Err(Error::shape("broadcast_to", &shape, &target));
        }
        let offset = target.len() - shape.len();
        let mut strides = vec![0usize; target.len()];
        let mut stride = 1;
        for (i, &d) in shape.iter().enumerate().rev() {
            let t = target[offset + i];
            if d != t && d != 1 {
                return Err(Error::shape("broadcast_to", &shape, &target));
            }
            strides[offset + i] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let numel: usize = target.iter().product();
        let mut src = Vec::with_capacity(numel);
        let mut idx = vec![0usize; target.len()];
        let mut cur = 0usize;
        for _ in 0..numel {
            src.push(cur);
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                cur += strides[ax];
                if idx[ax] < target[ax] {
                    break;
                }
                cur -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let vals = self.value(x);
        let out = src.iter().map(|&s| vals[s]).collect();
        let rg = self.rg(x);
        Ok(self.push(target, out, Op::Broadcast { x, src }, rg))
    }

    /// `x + bias` where `bias` matches the trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_to(bias, shape)?;
        self.add(x, b)
    }

    pub fn mul_broadcast(&mut self, x: Var, other: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_to(other, shape)?;
        self.mul(x, b)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                axis,
                rank: first.len(),
            });
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            rg,
        ))
    }

    /// Embedding lookup. Row 0 is the padding row and always yields zeros;
    /// the result has shape `index_shape ++ [dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather", &ts, index_shape));
        }
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", index_shape, &[ids.len()]));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Contract(format!("id {bad} outside table of {vocab} rows")));
        }
        let t = self.value(table);
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id != 0 {
                out[i * dim..(i + 1) * dim].copy_from_slice(&t[id * dim..(id + 1) * dim]);
            }
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            shape,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Per-row vector–matrix product: `h[b×m]`, `w[b×(m·n)]` holding one
    /// row-major `m×n` matrix per row, result `[b×n]`.
    pub fn batched_vecmat(&mut self, h: Var, w: Var, n: usize) -> Result<Var> {
        let (sh, sw) = (self.shape(h).to_vec(), self.shape(w).to_vec());
        if sh.len() != 2 || sw.len() != 2 || sh[0] != sw[0] || sh[1] * n != sw[1] {
            return Err(Error::shape("batched_vecmat", &sh, &sw));
        }
        let (batch, m) = (sh[0], sh[1]);
        let (hv, wv) = (self.value(h), self.value(w));
        let mut out = vec![0.0; batch * n];
        for b in 0..batch {
            matmul_acc(
                &hv[b * m..(b + 1) * m],
                &wv[b * m * n..(b + 1) * m * n],
                &mut out[b * n..(b + 1) * n],
                1,
                m,
                n,
            );
        }
        let rg = self.rg(h) || self.rg(w);
        Ok(self.push(vec![batch, n], out, Op::BatchedVecMat { h, w, batch, m, n }, rg))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = self.value(pred);
        if p.len() != labels.len() {
            return Err(Error::shape("bce", self.shape(pred), &[labels.len()]));
        }
        let loss = bce_terms(p, labels).sum::<f64>() / labels.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.as_slice().len()]);
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, op: &Op, out_idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let out_val = nodes[out_idx].value.as_slice();
        // Gradient buffer for an input, or None if it takes no gradient.
        fn slot<'a>(
            nodes: &[Node<'_>],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.as_slice().len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, n, p } => {
                if let Some(da) = slot(nodes, grads, a) {
                    matmul_bt_acc(g, val(b), da, m, n, p);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    matmul_at_acc(val(a), g, db, m, n, p);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = slot(nodes, grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += scale * gv);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out_val) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Prelu { x, slope, channels } => {
                let xs = val(x);
                let a = val(slope);
                if let Some(dx) = slot(nodes, grads, x) {
                    for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += if xs[i] > 0.0 { gv } else { a[i % channels] * gv };
                    }
                }
                if let Some(da) = slot(nodes, grads, slope) {
                    for (i, (&gv, &xv)) in g.iter().zip(xs).enumerate() {
                        if xv <= 0.0 {
                            da[i % channels] += gv * xv;
                        }
                    }
                }
            }
            Op::Reduce { x, outer, len, inner, mean } => {
                let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                if let Some(dx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for (d, &gv) in dx[base..base + inner].iter_mut().zip(src) {
                                *d += scale * gv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Broadcast { x, ref src } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for (&s, &gv) in src.iter().zip(g) {
                        dx[s] += gv;
                    }
                }
            }
            Op::Concat { ref parts, outer, inner, ref lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    if let Some(dp) = slot(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                            let dst = &mut dp[o * l * inner..(o + 1) * l * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                    offset += l;
                }
            }
            Op::Slice { x, outer, inner, axis_len, start, len } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Gather { table, ref ids, dim } => {
                if let Some(dt) = slot(nodes, grads, table) {
                    for (i, &id) in ids.iter().enumerate() {
                        if id == 0 {
                            continue;
                        }
                        let src = &g[i * dim..(i + 1) * dim];
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::BatchedVecMat { h, w, batch, m, n } => {
                let (hv, wv) = (val(h), val(w));
                if let Some(dh) = slot(nodes, grads, h) {
                    for b in 0..batch {
                        matmul_bt_acc(
                            &g[b * n..(b + 1) * n],
                            &wv[b * m * n..(b + 1) * m * n],
                            &mut dh[b * m..(b + 1) * m],
                            1,
                            m,
                            n,
                        );
                    }
                }
                if let Some(dw) = slot(nodes, grads, w) {
                    for b in 0..batch {
                        matmul_at_acc(
                            &hv[b * m..(b + 1) * m],
                            &g[b * n..(b + 1) * n],
                            &mut dw[b * m * n..(b + 1) * m * n],
                            1,
                            m,
                            n,
                        );
                    }
                }
            }
            Op::Bce { pred, ref labels } => {
                if let Some(dp) = slot(nodes, grads, pred) {
                    let scale = g[0] / labels.len() as f64;
                    for ((d, &p), &y) in dp.iter_mut().zip(val(pred)).zip(labels) {
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            *d += scale * ((1.0 - y) / (1.0 - p) - y / p);
                        }
                    }
                }
            }
        }
    }
}

/// Per-element binary cross-entropy with clamped probabilities.
pub fn bce_terms<'a>(p: &'a [f64], labels: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    p.iter().zip(labels).map(|(&p, &y)| {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    })
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` takes no gradient or was
    /// not reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter that was bound on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Dense per-parameter gradients, zero for parameters absent from the tape.
    pub fn dense(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(id, p)| match self.param(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
    }
}
