use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::kernels::{self, is_suffix, split_axis, strides};
use crate::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, usize),
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Cumsum(Var, usize),
    MaskedFill(Var, Arc<Vec<bool>>),
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Embedding { table: Var, ids: Vec<usize> },
    TakeLast { x: Var, ids: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the backward pass is a single reverse sweep. A tape is owned by one
/// thread; independent tapes may run concurrently.
pub struct Tape<T: Scalar = f32> {
    id: u32,
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<T: Scalar> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf that was created with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFiniteResult { op })
    }
}

/// Maps every element of the broadcast output to its source index in `input`.
fn broadcast_map(input: &[usize], output: &[usize]) -> Vec<usize> {
    let rank = output.len();
    let pad = rank - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for d in 0..rank {
        if d >= pad && input[d - pad] != 1 {
            eff[d] = in_strides[d - pad];
        }
    }
    let numel: usize = output.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < output[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// For a permuted output, the source index of every output element.
fn permute_map(input: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(input);
    let out_shape: Vec<usize> = axes.iter().map(|&a| input[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(TensorError::InvalidArgument(
                "variable belongs to another tape".into(),
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| TensorError::InvalidArgument("variable index out of range".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable from this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(TensorError::shape(
                name,
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            ));
        }
        let bn = bv.numel().max(1);
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked(name, out, op, &[a, b])
    }

    /// `a + b`; `b`'s shape must equal a trailing slice of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(name, out, op, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            Op::Sigmoid(x),
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(min), Op::ClampMin(x, min))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    // ── linear algebra and layout ───────────────────────────────────

    /// Batched matrix product over the last two axes.
    ///
    /// `b` may omit leading batch axes of `a`; its batch shape must then equal
    /// the trailing batch axes of `a` (a shared weight matrix is the common case).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(TensorError::shape("matmul", "operands need rank >= 2"));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let abatch = &ash[..ash.len() - 2];
        let bbatch = &bsh[..bsh.len() - 2];
        if k != k2 || !is_suffix(abatch, bbatch) {
            return Err(TensorError::shape(
                "matmul",
                format!("{ash:?} x {bsh:?}"),
            ));
        }
        let na: usize = abatch.iter().product();
        let nb: usize = bbatch.iter().product();
        let mut out = vec![T::zero(); na * m * n];
        for i in 0..na {
            let j = i % nb.max(1);
            kernels::matmul_acc(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[j * k * n..(j + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = abatch.to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.node(x)?.value.rank();
        if rank < 2 {
            return Err(TensorError::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let out = self.permute_value(x, &axes)?;
        self.push_checked("transpose", out, Op::Transpose(x), &[x])
    }

    fn permute_value(&self, x: Var, axes: &[usize]) -> Result<Tensor<T>> {
        let xv = &self.node(x)?.value;
        let mut seen = vec![false; xv.rank()];
        if axes.len() != xv.rank() || axes.iter().any(|&a| a >= seen.len()) {
            return Err(TensorError::shape(
                "permute",
                format!("axes {axes:?} for shape {:?}", xv.shape()),
            ));
        }
        for &a in axes {
            if std::mem::replace(&mut seen[a], true) {
                return Err(TensorError::shape("permute", "repeated axis"));
            }
        }
        let map = permute_map(xv.shape(), axes);
        let data = map.iter().map(|&s| xv.data()[s]).collect();
        Tensor::new(axes.iter().map(|&a| xv.shape()[a]).collect::<Vec<_>>(), data)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.permute_value(x, axes)?;
        self.push_checked("permute", out, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape.to_vec())?;
        self.push_checked("reshape", out, Op::Reshape(x), &[x])
    }

    /// Explicit broadcast to `shape` (numpy rules: missing leading axes and
    /// size-1 axes are repeated).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let ish = xv.shape();
        let ok = ish.len() <= shape.len()
            && ish
                .iter()
                .zip(&shape[shape.len() - ish.len()..])
                .all(|(&i, &o)| i == o || i == 1);
        if !ok {
            return Err(TensorError::shape(
                "expand",
                format!("{ish:?} -> {shape:?}"),
            ));
        }
        let map = broadcast_map(ish, shape);
        let data = map.iter().map(|&s| xv.data()[s]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push_checked("expand", out, Op::Expand(x), &[x])
    }

    // ── reductions ──────────────────────────────────────────────────

    fn reduce(
        &mut self,
        name: &'static str,
        x: Var,
        axis: usize,
        op: Op<T>,
        f: impl Fn(&mut dyn Iterator<Item = T>, usize) -> T,
    ) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if axis >= xv.rank() {
            return Err(TensorError::shape(name, format!("axis {axis} of {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        if len == 0 {
            return Err(TensorError::EmptyReduction { op: name });
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut it = (0..len).map(|i| d[(o * len + i) * inner + j]);
                out.push(f(&mut it, len));
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, out)?;
        self.push_checked(name, out, op, &[x])
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", x, axis, Op::Sum(x, axis), |it, _| {
            it.fold(T::zero(), |a, b| a + b)
        })
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", x, axis, Op::Mean(x, axis), |it, n| {
            it.fold(T::zero(), |a, b| a + b) / T::lit(n as f64)
        })
    }

    /// Max over `axis`; the gradient flows to the first maximal element.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("max", x, axis, Op::Max(x, axis), |it, _| {
            it.fold(T::neg_infinity(), T::max)
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.numel() == 0 {
            return Err(TensorError::EmptyReduction { op: "sum_all" });
        }
        let s = xv.data().iter().fold(T::zero(), |a, &b| a + b);
        self.push_checked("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.numel();
        let s = self.sum_all(x)?;
        self.mul_scalar(s, T::one() / T::lit(n as f64))
    }

    // ── normalisation ───────────────────────────────────────────────

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let d = xv.last_dim();
        if d == 0 {
            return Err(TensorError::EmptyReduction { op: "softmax" });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.push_checked("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let d = xv.last_dim();
        if d == 0 {
            return Err(TensorError::EmptyReduction { op: "log_softmax" });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push_checked("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    // ── structural ──────────────────────────────────────────────────

    /// Concatenation over the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let lead = {
            let s = self.node(xs[0])?.value.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.node(x)?.value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::shape("concat", format!("{s:?} vs lead {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.index].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        self.push_checked("concat", out, Op::Concat(xs.to_vec()), xs)
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if axis >= xv.rank() {
            return Err(TensorError::shape("cumsum", format!("axis {axis}")));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = T::zero();
                for i in 0..len {
                    let idx = (o * len + i) * inner + j;
                    acc += d[idx];
                    d[idx] = acc;
                }
            }
        }
        self.push_checked("cumsum", out, Op::Cumsum(x, axis), &[x])
    }

    /// Replaces elements where `mask` is true with `value`.
    ///
    /// `mask_shape` must equal a trailing slice of `x`'s shape; it repeats over
    /// the leading axes. Masked positions receive zero gradient.
    pub fn masked_fill(
        &mut self,
        x: Var,
        mask: Arc<Vec<bool>>,
        mask_shape: &[usize],
        value: T,
    ) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let mn: usize = mask_shape.iter().product();
        if !is_suffix(xv.shape(), mask_shape) || mn != mask.len() {
            return Err(TensorError::shape(
                "masked_fill",
                format!("mask {mask_shape:?} for {:?}", xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if mask[i % mn.max(1)] {
                *v = value;
            }
        }
        self.push_checked("masked_fill", out, Op::MaskedFill(x, mask), &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push_checked("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if axis >= xv.rank() {
            return Err(TensorError::shape("pad", format!("axis {axis}")));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let new_len = before + len + after;
        let mut out = vec![T::zero(); outer * new_len * inner];
        for o in 0..outer {
            let src = &xv.data()[o * len * inner..(o + 1) * len * inner];
            let dst = (o * new_len + before) * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = new_len;
        let out = Tensor::new(shape, out)?;
        self.push_checked("pad", out, Op::Pad { x, axis, before }, &[x])
    }

    /// Row lookup: `table[V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        if tv.rank() != 2 {
            return Err(TensorError::shape("embedding", "table must be rank 2"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::shape("embedding", format!("id {id} >= {v}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push_checked(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Picks `x[..., ids[row]]` for every row of the last axis, dropping that axis.
    pub fn take_last(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let d = xv.last_dim();
        let rows = xv.numel() / d.max(1);
        if xv.rank() == 0 || rows != ids.len() || ids.iter().any(|&i| i >= d) {
            return Err(TensorError::shape(
                "take_last",
                format!("{} ids for {:?}", ids.len(), xv.shape()),
            ));
        }
        let out: Vec<T> = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| xv.data()[r * d + i])
            .collect();
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let out = Tensor::new(shape, out)?;
        self.push_checked(
            "take_last",
            out,
            Op::TakeLast {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient; leaves that
    /// do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        let lv = &self.nodes[loss.index].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        match &mut grads[v.index] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    /// Sums a gradient shaped like the broadcast result back onto a suffix-shaped operand.
    fn reduce_suffix(g: &[T], target_len: usize) -> Vec<T> {
        if g.len() == target_len {
            return g.to_vec();
        }
        let mut out = vec![T::zero(); target_len];
        for (i, &x) in g.iter().enumerate() {
            out[i % target_len] += x;
        }
        out
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let r = Self::reduce_suffix(g, self.val(*b).numel());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    let r = Self::reduce_suffix(&neg, self.val(*b).numel());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let bn = bv.len().max(1);
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, &x)| x * bv[k % bn]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g.iter().zip(av).map(|(&x, &a)| x * a).collect();
                    let r = Self::reduce_suffix(&gb, bv.len());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let bn = bv.len().max(1);
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, &x)| x / bv[k % bn]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g
                        .iter()
                        .zip(av)
                        .enumerate()
                        .map(|(k, (&x, &a))| {
                            let d = bv[k % bn];
                            -x * a / (d * d)
                        })
                        .collect();
                    let r = Self::reduce_suffix(&gb, bv.len());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }
            Op::MulScalar(x, c) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().zip(y).map(|(&a, &b)| a * b).collect());
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x).data();
                    self.accumulate(grads, *x, g.iter().zip(xv).map(|(&a, &b)| a / b).collect());
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&a, &b)| if b > T::zero() { a } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let gx = g
                        .iter()
                        .zip(y)
                        .map(|(&a, &s)| a * s * (T::one() - s))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let two = T::lit(2.0);
                    let gx = g.iter().zip(y).map(|(&a, &s)| a / (two * s)).collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ClampMin(x, min) => {
                if self.wants(*x) {
                    let xv = self.val(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&a, &b)| if b > *min { a } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let ysh = node.value.shape();
                    let r = ysh.len();
                    let mut axes: Vec<usize> = (0..r).collect();
                    axes.swap(r - 2, r - 1);
                    let map = permute_map(ysh, &axes);
                    let gx = map.iter().map(|&s| g[s]).collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let map = permute_map(self.val(*x).shape(), axes);
                    let mut gx = vec![T::zero(); g.len()];
                    for (o, &s) in map.iter().enumerate() {
                        gx[s] = g[o];
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Expand(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let map = broadcast_map(xv.shape(), node.value.shape());
                    let mut gx = vec![T::zero(); xv.numel()];
                    for (o, &s) in map.iter().enumerate() {
                        gx[s] += g[o];
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let scale = if matches!(node.op, Op::Mean(..)) {
                        T::one() / T::lit(len as f64)
                    } else {
                        T::one()
                    };
                    let mut gx = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                gx[(o * len + l) * inner + j] = g[o * inner + j] * scale;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Max(x, axis) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let d = xv.data();
                    let mut gx = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let target = y[o * inner + j];
                            let first = (0..len)
                                .map(|l| (o * len + l) * inner + j)
                                .find(|&idx| d[idx] == target)
                                .expect("max element present");
                            gx[first] = g[o * inner + j];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.val(*x).numel();
                    self.accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let d = node.value.last_dim();
                    let mut gx = vec![T::zero(); g.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let s = kernels::dot(gr, yr);
                        for k in 0..d {
                            out[k] = yr[k] * (gr[k] - s);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let d = node.value.last_dim();
                    let mut gx = vec![T::zero(); g.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let s: T = gr.iter().copied().sum();
                        for k in 0..d {
                            out[k] = gr[k] - yr[k].exp() * s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = self.val(x).last_dim();
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    offset += w;
                }
            }
            Op::Cumsum(x, axis) => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut gx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut acc = T::zero();
                            for l in (0..len).rev() {
                                let idx = (o * len + l) * inner + j;
                                acc += g[idx];
                                gx[idx] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MaskedFill(x, mask) => {
                if self.wants(*x) {
                    let mn = mask.len().max(1);
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| if mask[k % mn] { T::zero() } else { v })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, full, inner) = split_axis(xv.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Pad { x, axis, before } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let new_len = node.value.shape()[*axis];
                    let mut gx = Vec::with_capacity(xv.numel());
                    for o in 0..outer {
                        let src = (o * new_len + before) * inner;
                        gx.extend_from_slice(&g[src..src + len * inner]);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.val(*table);
                    let d = tv.shape()[1];
                    let mut gt = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::TakeLast { x, ids } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let d = xv.last_dim();
                    let mut gx = vec![T::zero(); xv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        gx[r * d + id] += g[r];
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (av, bv) = (self.val(a), self.val(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let na = av.numel() / (m * k).max(1);
        let nb = (bv.numel() / (k * n).max(1)).max(1);
        if self.wants(a) {
            let mut ga = vec![T::zero(); av.numel()];
            for i in 0..na {
                let j = i % nb;
                kernels::matmul_nt_acc(
                    &g[i * m * n..(i + 1) * m * n],
                    &bv.data()[j * k * n..(j + 1) * k * n],
                    &mut ga[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            self.accumulate(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); bv.numel()];
            for i in 0..na {
                let j = i % nb;
                kernels::matmul_tn_acc(
                    &av.data()[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    &mut gb[j * k * n..(j + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            self.accumulate(grads, b, gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn cumsum_and_exp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.cumsum(x, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0]);
        let e = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let e = tape.exp(e).unwrap();
        let v = tape.value(e).data();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let frozen = tape.leaf(t(&[2], &[1.0, 1.0]), false);
        let y = tape.mul(x, frozen).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
        assert!(g.get(frozen).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(TensorError::DetachedLoss)));
    }

    #[test]
    fn empty_reduction_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 0]));
        assert!(matches!(
            tape.sum(x, 1),
            Err(TensorError::EmptyReduction { .. })
        ));
        assert!(matches!(
            tape.max(x, 1),
            Err(TensorError::EmptyReduction { .. })
        ));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(
            tape.log(x),
            Err(TensorError::NonFiniteResult { op: "log" })
        ));
    }

    #[test]
    fn broadcasting_only_over_leading_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let row = tape.constant(Tensor::zeros(vec![3]));
        let col = tape.constant(Tensor::zeros(vec![2, 1]));
        assert!(tape.add(a, row).is_ok());
        assert!(matches!(
            tape.add(a, col),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let e = tape.expand(col, &[2, 3]).unwrap();
        assert!(tape.add(a, e).is_ok());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element (i,j,k) of x lands at (k,i,j)
        assert_eq!(tape.value(p).data()[(3 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 3) as f64);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
