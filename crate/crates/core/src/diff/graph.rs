//! Define-by-run reverse-mode autodiff.
//!
//! Every forward call appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a trainable leaf.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, numel, Tensor, MAX_RANK,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Sqrt,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[.., m, k] × [k, n]` with one shared right operand.
    MatMul(Var, Var),
    /// `[B, m, k] × [B, k, n]`.
    BatchMatMul(Var, Var),
    Binary(BinKind, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm(Var, f64),
    SumAll(Var),
    SumLast(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Select(Var, Vec<usize>),
    Reshape(Var),
    Permute01(Var),
    TransposeLast2(Var),
    BroadcastTo(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// `(outer, axis, inner)` sizes around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }

    /// A leaf that accumulates gradients regardless of any store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter once per graph; trainable ones get gradients.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa[..sa.len() - 1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    false,
                    &db[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![bsz, m, n],
                data: out,
            },
            Op::BatchMatMul(a, b),
            ng,
        ))
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(name, &sa, &sb)?;
        let mut out = vec![0.0; numel(&shape)];
        let (da, db) = (self.data(a), self.data(b));
        if sa == sb {
            for i in 0..out.len() {
                out[i] = match kind {
                    BinKind::Add => da[i] + db[i],
                    BinKind::Sub => da[i] - db[i],
                    BinKind::Mul => da[i] * db[i],
                    BinKind::Div => da[i] / db[i],
                };
            }
        } else {
            let (ta, tb) = (broadcast_strides(&sa, &shape), broadcast_strides(&sb, &shape));
            for_each_broadcast(&shape, ta, tb, |o, i, j| {
                out[o] = match kind {
                    BinKind::Add => da[i] + db[j],
                    BinKind::Sub => da[i] - db[j],
                    BinKind::Mul => da[i] * db[j],
                    BinKind::Div => da[i] / db[j],
                };
            });
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |v| v * v,
        };
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let ng = self.ng(x);
        self.push(out, Op::Unary(kind, x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.add(x, s)
    }

    // ---- normalizations ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data.clone();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let shape = t.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data: out }, Op::Softmax(x), ng)
    }

    /// Zero-mean, unit-variance over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data.clone();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let shape = t.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data: out }, Op::LayerNorm(x, eps), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(shape_err("sum_last", &t.shape, &[]));
        }
        let d = t.last_dim();
        let rows = t.numel() / d.max(1);
        let data: Vec<f64> = if d == 0 {
            vec![0.0; numel(&t.shape[..t.rank() - 1])]
        } else {
            t.data.chunks(d).map(|r| r.iter().sum()).collect()
        };
        debug_assert!(d == 0 || data.len() == rows);
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::SumLast(x), ng))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let s = self.sum_last(x)?;
        Ok(self.scale(s, 1.0 / d.max(1) as f64))
    }

    // ---- structure ----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", &[], &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice(x, axis, start), ng))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("select", &s, idx));
        }
        let inner = numel(&s[1..]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Select(x, idx.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(s) != numel(shape) || shape.len() > MAX_RANK {
            return Err(shape_err("reshape", s, shape));
        }
        let data = self.data(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
            ng,
        ))
    }

    /// Swaps the first two axes of a rank-3 tensor.
    pub fn permute01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("permute01", &s, &[]));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * c..(j * a + i + 1) * c]
                    .copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, a, c],
                data: out,
            },
            Op::Permute01(x),
            ng,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last2", &s, &[]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = numel(&s[..s.len() - 2]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..batches {
            let o = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = src[o + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data: out }, Op::TransposeLast2(x), ng))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let target = broadcast_shape("broadcast_to", &s, shape)?;
        if target != shape {
            return Err(shape_err("broadcast_to", &s, shape));
        }
        let st = broadcast_strides(&s, shape);
        let src = self.data(x);
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast(shape, st, [0; 3], |o, i, _| out[o] = src[i]);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data: out,
            },
            Op::BroadcastTo(x),
            ng,
        ))
    }

    // ---- backward ----

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulates d(root)/d(node) for every node; `root` must be a scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("backward", self.shape(root), &[]));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let want = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (k, n) = (tb.shape[0], tb.shape[1]);
                let m = numel(&ta.shape[..ta.rank() - 1]);
                if want(*a) {
                    let ga = Self::acc(grads, *a, ta.numel());
                    gemm(m, n, k, g, false, &tb.data, true, ga, true);
                }
                if want(*b) {
                    let gb = Self::acc(grads, *b, tb.numel());
                    gemm(k, m, n, &ta.data, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (bsz, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
                if want(*a) {
                    let ga = Self::acc(grads, *a, ta.numel());
                    for bi in 0..bsz {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &tb.data[bi * k * n..],
                            true,
                            &mut ga[bi * m * k..],
                            true,
                        );
                    }
                }
                if want(*b) {
                    let gb = Self::acc(grads, *b, tb.numel());
                    for bi in 0..bsz {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut gb[bi * k * n..],
                            true,
                        );
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out = &node.value.shape;
                let (sa, sb) = (
                    broadcast_strides(&ta.shape, out),
                    broadcast_strides(&tb.shape, out),
                );
                let (da, db) = (&ta.data, &tb.data);
                if want(*a) {
                    let ga = Self::acc(grads, *a, ta.numel());
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => g[o],
                            BinKind::Mul => g[o] * db[ib],
                            BinKind::Div => g[o] / db[ib],
                        };
                    });
                }
                if want(*b) {
                    let gb = Self::acc(grads, *b, tb.numel());
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinKind::Add => g[o],
                            BinKind::Sub => -g[o],
                            BinKind::Mul => g[o] * da[ia],
                            BinKind::Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                        };
                    });
                }
            }
            Op::Unary(kind, x) => {
                if !want(*x) {
                    return;
                }
                let (xv, y) = (&nodes[x.0].value.data, &node.value.data);
                let gx = Self::acc(grads, *x, xv.len());
                for j in 0..xv.len() {
                    let d = match kind {
                        Unary::Tanh => 1.0 - y[j] * y[j],
                        Unary::Relu => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => y[j],
                        Unary::Log => 1.0 / xv[j],
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Softplus => sigmoid(xv[j]),
                        Unary::Sqrt => 0.5 / y[j],
                        Unary::Square => 2.0 * xv[j],
                    };
                    gx[j] += g[j] * d;
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    let gx = Self::acc(grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * c;
                    }
                }
            }
            Op::Softmax(x) => {
                if !want(*x) {
                    return;
                }
                let y = &node.value.data;
                let d = node.value.last_dim();
                let gx = Self::acc(grads, *x, y.len());
                if d == 0 {
                    return;
                }
                for r in 0..y.len() / d {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm(x, eps) => {
                if !want(*x) {
                    return;
                }
                let xv = &nodes[x.0].value.data;
                let y = &node.value.data;
                let d = node.value.last_dim();
                let gx = Self::acc(grads, *x, y.len());
                if d == 0 {
                    return;
                }
                let df = d as f64;
                for r in 0..y.len() / d {
                    let xs = &xv[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / df;
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let gm = gs.iter().sum::<f64>() / df;
                    let gy = ys.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / df;
                    for j in 0..d {
                        gx[r * d + j] += inv * (gs[j] - gm - ys[j] * gy);
                    }
                }
            }
            Op::SumAll(x) => {
                if want(*x) {
                    let n = nodes[x.0].value.numel();
                    let gx = Self::acc(grads, *x, n);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::SumLast(x) => {
                if want(*x) {
                    let t = &nodes[x.0].value;
                    let d = t.last_dim();
                    let gx = Self::acc(grads, *x, t.numel());
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j / d];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let base = &node.value.shape;
                let (outer, _, inner) = split_at_axis(base, *axis);
                let total = base[*axis] * inner;
                let mut offset = 0;
                for x in xs {
                    let t = &nodes[x.0].value;
                    let len = t.shape[*axis] * inner;
                    if want(*x) {
                        let gx = Self::acc(grads, *x, t.numel());
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (dst, s) in gx[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(x, axis, start) => {
                if !want(*x) {
                    return;
                }
                let t = &nodes[x.0].value;
                let (outer, n, inner) = split_at_axis(&t.shape, *axis);
                let len = node.value.shape[*axis];
                let gx = Self::acc(grads, *x, t.numel());
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (dst, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
            Op::Select(x, idx) => {
                if !want(*x) {
                    return;
                }
                let t = &nodes[x.0].value;
                let inner = numel(&t.shape[1..]);
                let gx = Self::acc(grads, *x, t.numel());
                for (r, &src_row) in idx.iter().enumerate() {
                    for c in 0..inner {
                        gx[src_row * inner + c] += g[r * inner + c];
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    let gx = Self::acc(grads, *x, g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Permute01(x) => {
                if !want(*x) {
                    return;
                }
                let s = &nodes[x.0].value.shape;
                let (a, b, c) = (s[0], s[1], s[2]);
                let gx = Self::acc(grads, *x, a * b * c);
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            gx[(i * b + j) * c + k] += g[(j * a + i) * c + k];
                        }
                    }
                }
            }
            Op::TransposeLast2(x) => {
                if !want(*x) {
                    return;
                }
                let s = &nodes[x.0].value.shape;
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batches = numel(&s[..s.len() - 2]);
                let gx = Self::acc(grads, *x, batches * m * n);
                for bi in 0..batches {
                    let o = bi * m * n;
                    for r in 0..m {
                        for c in 0..n {
                            gx[o + r * n + c] += g[o + c * m + r];
                        }
                    }
                }
            }
            Op::BroadcastTo(x) => {
                if !want(*x) {
                    return;
                }
                let t = &nodes[x.0].value;
                let out = &node.value.shape;
                let st = broadcast_strides(&t.shape, out);
                let gx = Self::acc(grads, *x, t.numel());
                for_each_broadcast(out, st, [0; 3], |o, ix, _| gx[ix] += g[o]);
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter loaded into this graph.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(&[5], vec![3.0; 5]).unwrap();
        let y = g.softmax(x);
        for v in g.data(y) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        match g.matmul(a, b).unwrap_err() {
            Error::Shape { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!((left, right), (vec![2, 3], vec![2, 3]));
            }
            e => panic!("unexpected {e}"),
        }
        let c = g.input(&[4], vec![0.0; 4]).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = g.variable(Tensor::from_vec(vec![0.5, 0.5, 0.5]));
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn empty_matmul_inner_dim_gives_zeros() {
        let mut g = Graph::new();
        let a = g.input(&[2, 0], vec![]).unwrap();
        let b = g.input(&[0, 3], vec![]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert!(g.data(c).iter().all(|v| *v == 0.0));
    }
}
