//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order and backward is a single reverse sweep. Tensors are
//! viewed as `[rows, cols]` matrices where the trailing axis is `cols`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, gemm_view, Real, View};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse { x: Var, target: Vec<T> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: Conv2dGeometry, hw: (usize, usize), cols: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttentionDims, probs: Vec<T> },
}

#[derive(Debug, Clone, Copy)]
struct AttentionDims {
    groups: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    dim: usize,
}

impl AttentionDims {
    fn dh(&self) -> usize {
        self.dim / self.heads
    }

    /// Views of head `h` of group `b` in the q/k/v/output buffers and its
    /// `[lq, lk]` probability block.
    fn views(&self, b: usize, h: usize) -> (View, View, View) {
        let dh = self.dh();
        let q = View::block(b * self.lq * self.dim + h * dh, self.lq, dh, self.dim);
        let kv = View::block(b * self.lk * self.dim + h * dh, self.lk, dh, self.dim);
        let p = View::block((b * self.heads + h) * self.lq * self.lk, self.lq, self.lk, self.lk);
        (q, kv, p)
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Accumulate another gradient set (e.g. from a second graph).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(s) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// A single-owner computation tape.
pub struct Graph<'s, T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s, T: Real> Graph<'s, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), store: None, param_vars: HashMap::new() }
    }

    /// A graph that can read trainable parameters from `store`.
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read with [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load a parameter (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph created without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    /// `op(a) @ op(b)` for 2-d operands, optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Column count and rows of `a` per row of `row`.
    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let va = self.value(a);
        let cols = va.cols();
        let n = self.value(row).numel();
        let groups = if cols == 0 { 0 } else { n / cols };
        if cols == 0 || n % cols != 0 || groups == 0 || va.rows() % groups != 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok((cols, va.rows() / groups))
    }

    /// Broadcast-add a row vector to every row of `a`. A `[g, cols]` operand
    /// adds its row `i` to the `i`-th of `g` equal blocks of rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (cols, per) = self.row_operand("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.numel());
        for (block, rrow) in va.data().chunks(cols * per).zip(r.chunks(cols)) {
            for row in block.chunks(cols) {
                data.extend(row.iter().zip(rrow).map(|(&x, &y)| x + y));
            }
        }
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Broadcast-multiply every row of `a` by a row vector, grouped like
    /// [`Graph::add_row`].
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (cols, per) = self.row_operand("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.numel());
        for (block, rrow) in va.data().chunks(cols * per).zip(r.chunks(cols)) {
            for row in block.chunks(cols) {
                data.extend(row.iter().zip(rrow).map(|(&x, &y)| x * y));
            }
        }
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    /// Fused multi-head scaled dot-product attention over `groups`
    /// independent sequences: `q` is `[groups * lq, dim]`, `k` and `v` are
    /// `[groups * lk, dim]`, and head `h` uses columns `h * dim / heads ..`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let bad = |msg: String| Error::InvalidArgument { op: "attention", msg };
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::ShapeMismatch { op: "attention", lhs: sq, rhs: sk });
        }
        let dim = sq[1];
        if heads == 0 || dim % heads != 0 {
            return Err(bad(format!("dim {dim} not divisible by {heads} heads")));
        }
        if groups == 0 || sq[0] % groups != 0 || sk[0] % groups != 0 || sk[0] == 0 {
            return Err(bad(format!("{} query rows and {} key rows over {groups} groups", sq[0], sk[0])));
        }
        let d = AttentionDims { groups, heads, lq: sq[0] / groups, lk: sk[0] / groups, dim };
        let scale = T::one() / T::from_usize(d.dh()).unwrap().sqrt();
        let mut probs = vec![T::zero(); groups * heads * d.lq * d.lk];
        let mut out = vec![T::zero(); sq[0] * dim];
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for b in 0..groups {
                for h in 0..heads {
                    let (vq, vkv, vp) = d.views(b, h);
                    gemm_view(scale, qv, vq, kv, vkv.t(), T::zero(), &mut probs, vp);
                    for row in probs[vp.offset..vp.offset + d.lq * d.lk].chunks_mut(d.lk) {
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut z = T::zero();
                        for x in row.iter_mut() {
                            *x = (*x - m).exp();
                            z += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= z);
                    }
                    gemm_view(T::one(), &probs, vp, vv, vkv, T::zero(), &mut out, vq);
                }
            }
        }
        let t = Tensor::new(&[sq[0], dim], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::Attention { q, k, v, dims: d, probs }, rg))
    }

    /// Softmax probabilities of an attention node, `[groups * heads * lq, lk]`.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { dims, probs, .. } => Tensor::new(&[dims.groups * dims.heads * dims.lq, dims.lk], probs.clone()).ok(),
            _ => None,
        }
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        // 0.5 (1 + tanh(u)) evaluated as the logistic function of 2u.
        let two = T::lit(2.0);
        let t = self.value(a).map(|x| x / (T::one() + (-two * c * (x + k * x * x * x)).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(va.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Zero-mean unit-variance normalization over the trailing axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(eps);
        let mut out = va.data().to_vec();
        let mut rstd = Vec::with_capacity(va.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(va.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { x: a, rstd }, rg)
    }

    /// Stack row blocks; all inputs must share the trailing dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > rows {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[len, cols], data)?, Op::SliceRows { x: a, start }, rg))
    }

    /// Join column blocks; all inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > cols {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {cols}", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[rows, len], data)?, Op::SliceCols { x: a, start }, rg))
    }

    /// Row lookup into a table (embedding).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("index {i} out of {rows} rows"),
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[idx.len(), cols], data)?,
            Op::Gather { table, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_usize(v.numel().max(1)).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, a: Var, target: &[T]) -> Result<Var> {
        let v = self.value(a);
        if v.numel() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: v.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = T::from_usize(target.len().max(1)).unwrap();
        let s = v.data().iter().zip(target).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mse { x: a, target: target.to_vec() }, rg))
    }

    /// 2-d convolution of a `[c_in, h, w]` input with a `[c_out, c_in*k*k]`
    /// weight and `[c_out]` bias; returns `[c_out, h_out, w_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let kk = geom.in_channels * geom.kernel * geom.kernel;
        if si.len() != 3 || si[0] != geom.in_channels {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: si, rhs: vec![geom.in_channels] });
        }
        if self.shape(weight) != [geom.out_channels, kk] || self.value(bias).numel() != geom.out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(weight).to_vec(),
                rhs: vec![geom.out_channels, kk],
            });
        }
        let (h, w) = (si[1], si[2]);
        if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
            return Err(Error::InvalidArgument { op: "conv2d", msg: "kernel larger than input".into() });
        }
        let (ho, wo) = geom.output_hw(h, w);
        let cols = im2col(self.value(input).data(), geom, h, w, ho, wo);
        let mut out = vec![T::zero(); geom.out_channels * ho * wo];
        gemm(geom.out_channels, kk, ho * wo, T::one(), self.value(weight).data(), false, &cols, false, T::zero(), &mut out);
        let b = self.value(bias).data();
        for (c, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|x| *x += b[c]);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&[geom.out_channels, ho, wo], out)?,
            Op::Conv2d { input, weight, bias, geom, hw: (h, w), cols },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`. Returns gradients for every
    /// parameter that was loaded into this graph; input gradients are
    /// available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let num_params = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients::empty(num_params);
        for (&pid, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                out.grads[pid.0] = Some(Tensor::new(self.shape(v), g.clone())?);
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let numel_of = |v: Var| self.nodes[v.0].value.numel();
        // Borrow-free accumulator returning a mutable buffer for a parent.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let n = numel_of(v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = if ta { (va.shape()[1], va.shape()[0]) } else { (va.shape()[0], va.shape()[1]) };
                let n = if tb { vb.shape()[0] } else { vb.shape()[1] };
                if self.rg(a) {
                    let da = buf!(a);
                    if ta {
                        gemm(k, n, m, T::one(), vb.data(), tb, g, true, T::one(), da);
                    } else {
                        gemm(m, n, k, T::one(), g, false, vb.data(), !tb, T::one(), da);
                    }
                }
                if self.rg(b) {
                    let db = buf!(b);
                    if tb {
                        gemm(n, m, k, T::one(), g, true, va.data(), ta, T::one(), db);
                    } else {
                        gemm(k, m, n, T::one(), va.data(), !ta, g, false, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.rg(v) {
                        buf!(v).iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.rg(v) {
                        buf!(v).iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = self.nodes[b.0].value.data();
                    buf!(a).iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (&x, &y))| *d += x * y);
                }
                if self.rg(b) {
                    let va = self.nodes[a.0].value.data();
                    buf!(b).iter_mut().zip(g.iter().zip(va)).for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            Op::AddRow(a, r) => {
                let (a, r) = (*a, *r);
                let cols = node.value.cols();
                let span = g.len() * cols / numel_of(r).max(1);
                if self.rg(a) {
                    buf!(a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if self.rg(r) {
                    let dr = buf!(r);
                    for (drow, block) in dr.chunks_mut(cols).zip(g.chunks(span)) {
                        for row in block.chunks(cols) {
                            drow.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (a, r) = (*a, *r);
                let cols = node.value.cols();
                let span = g.len() * cols / numel_of(r).max(1);
                if self.rg(a) {
                    let rv = self.nodes[r.0].value.data();
                    for (dblock, (gblock, rrow)) in buf!(a).chunks_mut(span).zip(g.chunks(span).zip(rv.chunks(cols))) {
                        for (drow, grow) in dblock.chunks_mut(cols).zip(gblock.chunks(cols)) {
                            for j in 0..cols {
                                drow[j] += grow[j] * rrow[j];
                            }
                        }
                    }
                }
                if self.rg(r) {
                    let av = self.nodes[a.0].value.data();
                    let dr = buf!(r);
                    for (drow, (ablock, gblock)) in dr.chunks_mut(cols).zip(av.chunks(span).zip(g.chunks(span))) {
                        for (arow, grow) in ablock.chunks(cols).zip(gblock.chunks(cols)) {
                            for j in 0..cols {
                                drow[j] += grow[j] * arow[j];
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (q, k, v, d) = (*q, *k, *v, *dims);
                let scale = T::one() / T::from_usize(d.dh()).unwrap().sqrt();
                let (qv, kv, vv) = (self.nodes[q.0].value.data(), self.nodes[k.0].value.data(), self.nodes[v.0].value.data());
                let mut dp = vec![T::zero(); d.lq * d.lk];
                let local = View::block(0, d.lq, d.lk, d.lk);
                for b in 0..d.groups {
                    for h in 0..d.heads {
                        let (vq, vkv, vp) = d.views(b, h);
                        if self.rg(v) {
                            gemm_view(T::one(), probs, vp.t(), g, vq, T::one(), buf!(v), vkv);
                        }
                        if !(self.rg(q) || self.rg(k)) {
                            continue;
                        }
                        gemm_view(T::one(), g, vq, vv, vkv.t(), T::zero(), &mut dp, local);
                        let p = &probs[vp.offset..vp.offset + d.lq * d.lk];
                        for (drow, prow) in dp.chunks_mut(d.lk).zip(p.chunks(d.lk)) {
                            let dot: T = drow.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                            drow.iter_mut().zip(prow).for_each(|(x, &y)| *x = y * (*x - dot));
                        }
                        if self.rg(q) {
                            gemm_view(scale, &dp, local, kv, vkv, T::one(), buf!(q), vq);
                        }
                        if self.rg(k) {
                            gemm_view(scale, &dp, local.t(), qv, vq, T::one(), buf!(k), vkv);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if self.rg(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += c * x);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if self.rg(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let two = T::lit(2.0);
                let three = T::lit(3.0);
                let xs = self.nodes[a.0].value.data();
                buf!(a).iter_mut().zip(g.iter().zip(xs)).for_each(|(d, (&gy, &x))| {
                    let s = T::one() / (T::one() + (-two * c * (x + k * x * x * x)).exp());
                    let dudx = c * (T::one() + three * k * x * x);
                    let dy = s + two * x * s * (T::one() - s) * dudx;
                    *d += gy * dy;
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = node.value.data();
                let cols = node.value.cols();
                let da = buf!(a);
                for ((drow, yrow), grow) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let x = *x;
                let y = node.value.data();
                let cols = node.value.cols();
                let n = T::from_usize(cols).unwrap();
                let dx = buf!(x);
                for (r, ((drow, yrow), grow)) in
                    dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)).enumerate()
                {
                    let mg = grow.iter().copied().sum::<T>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for j in 0..cols {
                        drow[j] += rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel_of(p);
                    if self.rg(p) {
                        buf!(p).iter_mut().zip(&g[off..off + n]).for_each(|(d, &x)| *d += x);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let x = *x;
                let cols = node.value.cols();
                let off = start * cols;
                buf!(x)[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.rg(p) {
                        let dp = buf!(p);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let x = *x;
                let cols = self.nodes[x.0].value.cols();
                let w = node.value.cols();
                let dx = buf!(x);
                for (r, grow) in g.chunks(w).enumerate() {
                    dx[r * cols + start..r * cols + start + w]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::Gather { table, idx } => {
                let table = *table;
                let cols = node.value.cols();
                let dt = buf!(table);
                for (row, &i) in g.chunks(cols).zip(idx) {
                    dt[i * cols..(i + 1) * cols].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                buf!(*a).iter_mut().for_each(|d| *d += s);
            }
            Op::Mean(a) => {
                let s = g[0] / T::from_usize(numel_of(*a).max(1)).unwrap();
                buf!(*a).iter_mut().for_each(|d| *d += s);
            }
            Op::Mse { x, target } => {
                let x = *x;
                let n = T::from_usize(target.len().max(1)).unwrap();
                let s = g[0] * T::lit(2.0) / n;
                let xs = self.nodes[x.0].value.data();
                buf!(x).iter_mut().zip(xs.iter().zip(target)).for_each(|(d, (&a, &b))| *d += s * (a - b));
            }
            Op::Conv2d { input, weight, bias, geom, hw, cols } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let (ho, wo) = geom.output_hw(hw.0, hw.1);
                let p = ho * wo;
                let kk = geom.in_channels * geom.kernel * geom.kernel;
                if self.rg(bias) {
                    let db = buf!(bias);
                    for (c, chunk) in g.chunks(p).enumerate() {
                        db[c] += chunk.iter().copied().sum::<T>();
                    }
                }
                if self.rg(weight) {
                    let dw = buf!(weight);
                    gemm(geom.out_channels, p, kk, T::one(), g, false, cols, true, T::one(), dw);
                }
                if self.rg(input) {
                    let wv = self.nodes[weight.0].value.data();
                    let mut dcols = vec![T::zero(); kk * p];
                    gemm(kk, geom.out_channels, p, T::one(), wv, true, g, false, T::zero(), &mut dcols);
                    col2im_add(&dcols, geom, hw.0, hw.1, ho, wo, buf!(input));
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], geom: Conv2dGeometry, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let k = geom.kernel;
    let mut cols = vec![T::zero(); geom.in_channels * k * k * ho * wo];
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[row * ho * wo + oi * wo + oj] = x[(c * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], geom: Conv2dGeometry, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(c * h + ii as usize) * w + jj as usize] += cols[row * ho * wo + oi * wo + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let w = g.input(Tensor::from_fn(&[4, 2], |i| (i as f64).cos()));
        let y = g.matmul(x, w).unwrap();
        let z = g.gelu(y);
        let s = g.sum(z);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        assert_eq!(first, g.grad(x).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[5, 7], |i| (i as f32 * 1.3).sin() * 10.0));
        let y = g.softmax(x);
        for r in 0..5 {
            let s: f32 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_t(a, b, false, true).is_ok());
    }
}
