//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. Because an
//! operation can only consume values that already exist on the tape, the
//! record is topologically sorted by construction, and [`Tape::backward`]
//! is a single reverse sweep that visits each node once.
//!
//! ```
//! use vitp_core::autodiff::Tape;
//! use vitp_core::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

pub mod gradcheck;
pub(crate) mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The two supported GELU formulations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GeluVariant {
    #[default]
    Erf,
    Tanh,
}

impl GeluVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GeluVariant::Erf => "erf",
            GeluVariant::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "erf" => Some(GeluVariant::Erf),
            "tanh" => Some(GeluVariant::Tanh),
            _ => None,
        }
    }
}

/// Gather index for [`Tape::gather_cols`]; `None` yields a constant zero.
pub type GatherIndex = Arc<[Option<u32>]>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<[T]>),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var, GeluVariant),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    TileLeading(Var),
    GatherCols {
        table: Var,
        index: GatherIndex,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// An ordered record of executed operations.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = self.needs(inputs);
        let value = Tensor::new(shape, data)
            .expect("op produced consistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul of {} and {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        Ok(self.emit(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape(format!(
                "batched matmul{} of {} and {}",
                if trans_b { " (b transposed)" } else { "" },
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::mm_nt(m, k, n, ai, bi, ci);
            } else {
                kernels::mm_nn(m, k, n, ai, bi, ci);
            }
        }
        Ok(self.emit(vec![bs, m, n], out, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {} and {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.emit(self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s; `b` is
    /// repeated over the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!(
                "broadcast add of {} and {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let db = self.data(b);
        let nb = db.len();
        let out = self
            .data(a)
            .chunks_exact(nb)
            .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.emit(sa.to_vec(), out, &[a, b], Op::AddBroadcast(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.emit(self.shape(a).to_vec(), out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.emit(self.shape(a).to_vec(), out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        self.emit(self.shape(a).to_vec(), out, &[a], Op::Scale(a, s))
    }

    /// Elementwise product with a constant of the same length (dropout
    /// masks, stochastic-depth factors).
    pub fn mul_const(&mut self, a: Var, mask: Arc<[T]>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "mask of length {} for {}",
                mask.len(),
                shape_str(self.shape(a))
            )));
        }
        let out = self.data(a).iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        Ok(self.emit(self.shape(a).to_vec(), out, &[a], Op::MulConst(a, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.emit(vec![1], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: T = d.iter().copied().sum::<T>() / T::cast(d.len() as f64);
        self.emit(vec![1], vec![s], &[a], Op::Mean(a))
    }

    /// Softmax over the last axis, computed with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).last_dim();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.emit(self.shape(a).to_vec(), out, &[a], Op::Softmax(a))
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm of {} with gamma {} and beta {}",
                shape_str(self.shape(x)),
                shape_str(self.shape(gamma)),
                shape_str(self.shape(beta))
            )));
        }
        let eps = T::cast(eps);
        let dn = T::cast(d as f64);
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.emit(
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var, variant: GeluVariant) -> Var {
        let out = self.data(x).iter().map(|&v| gelu(v, variant)).collect();
        self.emit(self.shape(x).to_vec(), out, &[x], Op::Gelu(x, variant))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "reshape of {} into {}",
                shape_str(self.shape(x)),
                shape_str(shape)
            )));
        }
        let out = self.data(x).to_vec();
        Ok(self.emit(shape.to_vec(), out, &[x], Op::Reshape(x)))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape(format!("permutation {perm:?} of {}", shape_str(shape))));
        }
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let out = kernels::permute(self.data(x), shape, perm);
        Ok(self.emit(out_shape, out, &[x], Op::Permute(x, perm.to_vec())))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Shape(format!(
                "select index {index} on axis {axis} of {}",
                shape_str(shape)
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * extent + index) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
        Ok(self.emit(out_shape, out, &[x], Op::Select { x, axis, index }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {}", shape_str(&first))));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::Shape(format!(
                    "concat on axis {axis} of {} and {}",
                    shape_str(&first),
                    shape_str(s)
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.emit(
            shape,
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn tile_leading(&mut self, x: Var, n: usize) -> Var {
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len() * n);
        for _ in 0..n {
            out.extend_from_slice(d);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        self.emit(shape, out, &[x], Op::TileLeading(x))
    }

    /// `out[r, i] = table[r, index[i]]` (zero where the index is `None`).
    /// Gradients scatter-add back into shared table entries.
    pub fn gather_cols(&mut self, table: Var, index: GatherIndex) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather from {}", shape_str(s))));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(bad) = index.iter().flatten().find(|&&i| i as usize >= cols) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for table {}",
                shape_str(s)
            )));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            out.extend(index.iter().map(|i| i.map_or(T::zero(), |i| row[i as usize])));
        }
        let shape = vec![rows, index.len()];
        Ok(self.emit(shape, out, &[table], Op::GatherCols { table, index }))
    }

    /// Mean cross-entropy of `logits[b,c]` against integer labels, with
    /// optional label smoothing.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy of {} with {} labels",
                shape_str(s),
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let on = T::cast(1.0 - smoothing + smoothing / c as f64);
        let off = T::cast(smoothing / c as f64);
        let mut target = vec![off; b * c];
        for (i, &l) in labels.iter().enumerate() {
            target[i * c + l] = on;
        }
        let mut total = T::zero();
        for (row, trow) in self.data(logits).chunks_exact(c).zip(target.chunks_exact(c)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (&v, &t) in row.iter().zip(trow) {
                if t != T::zero() {
                    total = total + t * (lse - v);
                }
            }
        }
        let loss = total / T::cast(b as f64);
        Ok(self.emit(vec![1], vec![loss], &[logits], Op::CrossEntropy { logits, target }))
    }

    /// Propagates gradients from a scalar `loss` to every reachable value
    /// that requires them. Gradients of leaves stay readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // unreachable leaves get an explicit zero gradient
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![T::zero(); n])?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::mm_nt(m, n, k, g, self.data(*b), ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::mm_tn(k, m, n, self.data(*a), g, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &db[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            kernels::mm_nn(m, n, k, gt, bt, out);
                        } else {
                            kernels::mm_nt(m, n, k, gt, bt, out);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &da[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::mm_tn(n, m, k, gt, at, out);
                        } else {
                            kernels::mm_tn(k, m, n, at, gt, out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        accumulate(gv, g);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let nb = gb.len();
                    for chunk in g.chunks_exact(nb) {
                        accumulate(gb, chunk);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(db) {
                        *o = *o + gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(da) {
                        *o = *o + gv * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o = *o + gv * *s;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                        *o = *o + gv * m;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / T::cast(ga.len() as f64);
                    for o in ga.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let n = node.value.last_dim();
                    for ((orow, grow), yrow) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let s = kernels::dot(grow, yrow);
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let dn = T::cast(d as f64);
                let gm = self.data(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + gv * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(d) {
                        accumulate(gb, grow);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![T::zero(); d];
                    for (r, ((orow, grow), hrow)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * gm[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = kernels::dot(&dh, hrow) / dn;
                        for j in 0..d {
                            orow[j] = orow[j] + rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x, variant) => {
                let dx = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        *o = *o + gv * gelu_grad(xv, *variant);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g);
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let back = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                    accumulate(gx, &back);
                }
            }
            Op::Select { x, axis, index } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let extent = shape[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = (o * extent + index) * inner;
                        accumulate(&mut gx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            accumulate(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::TileLeading(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    for chunk in g.chunks_exact(n) {
                        accumulate(gx, chunk);
                    }
                }
            }
            Op::GatherCols { table, index } => {
                let cols = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (trow, grow) in gt.chunks_exact_mut(cols).zip(g.chunks_exact(index.len())) {
                        for (ix, &gv) in index.iter().zip(grow) {
                            if let Some(ix) = ix {
                                let e = &mut trow[*ix as usize];
                                *e = *e + gv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                let c = self.shape(*logits)[1];
                let b = self.shape(*logits)[0];
                let scale = g[0] / T::cast(b as f64);
                let dl = self.data(*logits);
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((orow, row), trow) in gl
                        .chunks_exact_mut(c)
                        .zip(dl.chunks_exact(c))
                        .zip(target.chunks_exact(c))
                    {
                        let mut p = row.to_vec();
                        softmax_in_place(&mut p);
                        for ((o, &pv), &tv) in orow.iter_mut().zip(&p).zip(trow) {
                            *o = *o + (pv - tv) * scale;
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when
    /// `v` does not require a gradient.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].value.requires_grad() {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }
}

#[inline]
fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_TANH_C: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T, variant: GeluVariant) -> T {
    let half = T::cast(0.5);
    match variant {
        GeluVariant::Erf => half * x * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        GeluVariant::Tanh => {
            let inner = T::cast(SQRT_2_OVER_PI) * (x + T::cast(GELU_TANH_C) * x * x * x);
            half * x * (T::one() + inner.tanh())
        }
    }
}

fn gelu_grad<T: Scalar>(x: T, variant: GeluVariant) -> T {
    let half = T::cast(0.5);
    match variant {
        GeluVariant::Erf => {
            let cdf = half * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-half * x * x).exp() * T::cast(0.398_942_280_401_432_7);
            cdf + x * pdf
        }
        GeluVariant::Tanh => {
            let c = T::cast(SQRT_2_OVER_PI);
            let k = T::cast(GELU_TANH_C);
            let t = (c * (x + k * x * x * x)).tanh();
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cast(3.0) * k * x * x)
        }
    }
}
