//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; node order is a
//! topological order, so backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::broadcast::{broadcast_shapes, source_indices, sum_to_shape};
use super::kernels::{self, ConvGeom};
use super::scalar::{gemm, MatRef};
use super::tensor::{check_shape, numel_of};
use super::{Mask, Params, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool2 { x: Var, mask: Option<Arc<Vec<bool>>> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    BatchNormalize { x: Var, inv_std: Vec<T>, mask: Option<Arc<Vec<bool>>> },
    LayerNormalize { x: Var, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Operation record plus accumulated leaf gradients.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: HashMap<usize, Vec<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: HashMap::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = match &kind {
            Op::Leaf => false,
            _ => self.inputs(&kind).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow(a, _, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool2 { x, .. }
            | Op::BatchNormalize { x, .. }
            | Op::LayerNormalize { x, .. } => vec![*x],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    // ---- leaves -------------------------------------------------------

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that accumulates a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a named parameter; repeated lookups share one node.
    pub fn param(&mut self, params: &Params<T>, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.variable(t.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaves registered through [`Graph::param`], by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Accumulated gradient of a leaf (`None` if backward never reached it).
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(&v.0)
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradient of a leaf, zeros when unreached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    // ---- element-wise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        kind: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = broadcast_shapes(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let data = binary_apply(ta, tb, &out, f);
        self.push(name, Tensor::from_parts(out, data), kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.scale(a, -T::one())?;
        self.add_scalar(n, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    /// Multiply by a constant 0/1 mask under broadcasting.
    pub fn apply_mask(&mut self, a: Var, mask: &Mask) -> Result<Var, TensorError> {
        let m = self.constant(mask.to_tensor());
        self.mul(a, m)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(TensorError::InvalidShape { shape, reason: format!("sum over axis {axis}") });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(oshape, out), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = MatMulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.forward(ta.data(), tb.data(), &mut out);
        let shape = plan.out_shape.clone();
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b))
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", t.shape(), perm));
        }
        let (shape, data) = permute_data(t.shape(), t.data(), perm);
        self.push("permute", Tensor::from_parts(shape, data), Op::Permute(a, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).ndim();
        if n < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("narrow", Tensor::from_parts(oshape, out), Op::Narrow(a, axis, start))
    }

    // ---- normalizing maps ---------------------------------------------

    /// Softmax over the last axis. Masked entries (`false`) are exactly zero;
    /// a slice with no unmasked entry is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", &shape, &[]))?;
        let full = match mask {
            Some(m) => Some(m.expand(&shape)?),
            None => None,
        };
        let mut out = vec![T::zero(); t.numel()];
        for (r, (src, dst)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = full.as_ref().map(|m| &m.data()[r * n..(r + 1) * n]);
            let mut mx = T::neg_infinity();
            for (i, &v) in src.iter().enumerate() {
                if keep.is_none_or(|k| k[i]) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(TensorError::InvalidMask { op: "softmax" });
            }
            let mut z = T::zero();
            for (i, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if keep.is_none_or(|k| k[i]) {
                    *d = (v - mx).exp();
                    z += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("log_softmax", &shape, &[]))?;
        let mut out = vec![T::zero(); t.numel()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let lse = log_sum_exp(src);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v - lse;
            }
        }
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(a))
    }

    // ---- convolution & pooling ---------------------------------------

    /// `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `bias: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)
            .ok_or_else(|| shape_err("conv2d (kernel larger than padded input)", &xs, &ws))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            ws[0],
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![xs[0], ws[0], geom.out_h, geom.out_w];
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d { x, w, bias, geom })
    }

    /// Max pooling over `[B, C, H, W]` with `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || pad >= k {
            return Err(shape_err("max_pool2d", &xs, &[k, stride, pad]));
        }
        let geom = ConvGeom::new(1, xs[2], xs[3], k, k, stride, pad)
            .ok_or_else(|| shape_err("max_pool2d", &xs, &[k, stride, pad]))?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), xs[0] * xs[1], &geom);
        let shape = vec![xs[0], xs[1], geom.out_h, geom.out_w];
        self.push("max_pool2d", Tensor::from_parts(shape, out), Op::MaxPool { x, argmax })
    }

    /// 2x2 stride-2 ceil-mode average pool that ignores cells outside `mask`
    /// (`[B, H, W]`).
    pub fn avg_pool2_masked(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("avg_pool2", &xs, &[]));
        }
        let m = match mask {
            Some(m) if m.shape() != [xs[0], xs[2], xs[3]] => {
                return Err(shape_err("avg_pool2 mask", &xs, m.shape()))
            }
            Some(m) => Some(Arc::new(m.data().to_vec())),
            None => None,
        };
        let out = kernels::avg_pool2_forward(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], m.as_deref().map(|v| v.as_slice()));
        let (oh, ow) = kernels::pool2_extent(xs[2], xs[3]);
        self.push("avg_pool2", Tensor::from_parts(vec![xs[0], xs[1], oh, ow], out), Op::AvgPool2 { x, mask: m })
    }

    /// `y[b, c, ..] = x[b, c, ..] * scale[c] + shift[c]` for `x: [B, C, ..]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(scale) != [xs[1]] || self.shape(shift) != [xs[1]] {
            return Err(shape_err("channel_affine", &xs, self.shape(scale)));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * sc[ch] + sh[ch]);
        }
        self.push("channel_affine", Tensor::from_parts(xs, out), Op::ChannelAffine { x, scale, shift })
    }

    /// Normalize `[B, C, H, W]` per channel with statistics over the valid
    /// positions of `mask` (`[B, H, W]`). Returns the normalized map (no affine)
    /// and the batch statistics (biased variance).
    pub fn batch_normalize(
        &mut self,
        x: Var,
        mask: Option<&Mask>,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("batch_norm", &xs, &[]));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = match mask {
            Some(m) if m.shape() != [xs[0], xs[2], xs[3]] => {
                return Err(shape_err("batch_norm mask", &xs, m.shape()))
            }
            Some(m) => Some(Arc::new(m.data().to_vec())),
            None => None,
        };
        let valid = |bi: usize, p: usize| m.as_ref().is_none_or(|m| m[bi * hw + p]);
        let d = self.value(x).data();
        let count = (0..b).map(|bi| (0..hw).filter(|&p| valid(bi, p)).count()).sum::<usize>();
        if count == 0 {
            return Err(TensorError::InvalidMask { op: "batch_norm" });
        }
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let plane = &d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    if valid(bi, p) {
                        s += v;
                    }
                }
            }
            mean[ch] = s / n;
            let mut s2 = T::zero();
            for bi in 0..b {
                let plane = &d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    if valid(bi, p) {
                        s2 += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
            }
            var[ch] = s2 / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = d.to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let v = self.push(
            "batch_norm",
            Tensor::from_parts(xs, out),
            Op::BatchNormalize { x, inv_std, mask: m },
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Normalize over the last axis (no affine).
    pub fn layer_normalize(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        let nt = T::lit(n as f64);
        let mut out = t.to_vec();
        let mut inv_std = Vec::with_capacity(t.numel() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push("layer_norm", Tensor::from_parts(shape, out), Op::LayerNormalize { x, inv_std })
    }

    /// Rows of `table: [V, D]` selected by `ids`, shaped `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding", &ts, &[ids.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding index", &ts, &[bad]));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    /// `sum_i w_i * -log softmax(logits_i)[target_i] / normalizer` over rows of
    /// `logits: [N, C]`. Rows with zero weight contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        normalizer: T,
    ) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || weights.len() != targets.len() {
            return Err(shape_err("cross_entropy", &ls, &[targets.len(), weights.len()]));
        }
        let c = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy target", &ls, &[bad]));
        }
        let mut probs = vec![T::zero(); ls[0] * c];
        let mut loss = T::zero();
        for (r, (src, dst)) in self.value(logits).data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let lse = log_sum_exp(src);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - lse).exp();
            }
            if weights[r] != T::zero() {
                loss += weights[r] * (lse - src[targets[r]]);
            }
        }
        let scaled: Vec<T> = weights.iter().map(|&w| w / normalizer).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / normalizer),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: scaled, probs },
        )
    }

    // ---- backward ------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every gradient-requiring leaf.
    /// Gradients add onto whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if numel_of(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        self.grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    self.accumulate(grads, *a, sum_to_shape(g, out_shape, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut gb = sum_to_shape(g, out_shape, self.shape(*b));
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let full = binary_apply_grad(g, tb, out_shape);
                    self.accumulate(grads, *a, sum_to_shape(&full, out_shape, ta.shape()));
                }
                if self.wants(*b) {
                    let full = binary_apply_grad(g, ta, out_shape);
                    self.accumulate(grads, *b, sum_to_shape(&full, out_shape, tb.shape()));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let gx = g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.accumulate(grads, *a, gx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let plan = MatMulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                let mut ga = if self.wants(*a) { Some(vec![T::zero(); ta.numel()]) } else { None };
                let mut gb = if self.wants(*b) { Some(vec![T::zero(); tb.numel()]) } else { None };
                plan.backward(ta.data(), tb.data(), g, ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = permute_data(out_shape, g, &inv);
                self.accumulate(grads, *a, gx);
            }
            Op::Concat(xs, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    offset += n;
                }
            }
            Op::Narrow(a, axis, start) => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); numel_of(s)];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Softmax(a) => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LogSoftmax(a) => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let out_ch = tw.shape()[0];
                let mut gx = self.wants(*x).then(|| vec![T::zero(); tx.numel()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); tw.numel()]);
                let mut gbias = bias.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); out_ch]);
                kernels::conv2d_backward(
                    tx.data(),
                    batch,
                    tw.data(),
                    out_ch,
                    geom,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gbias.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gbias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2 { x, mask } => {
                let s = self.shape(*x);
                let mut gx = vec![T::zero(); numel_of(s)];
                kernels::avg_pool2_backward(g, s[0], s[1], s[2], s[3], mask.as_deref().map(|v| v.as_slice()), &mut gx);
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let tx = self.value(*x);
                let s = tx.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let sc = self.value(*scale).data();
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    for (i, chunk) in gx.chunks_mut(inner).enumerate() {
                        let k = sc[i % c];
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*scale) || self.wants(*shift) {
                    let mut gs = vec![T::zero(); c];
                    let mut gh = vec![T::zero(); c];
                    for (i, (gc, xc)) in g.chunks(inner).zip(tx.data().chunks(inner)).enumerate() {
                        gs[i % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                        gh[i % c] += gc.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *scale, gs);
                    self.accumulate(grads, *shift, gh);
                }
            }
            Op::BatchNormalize { x, inv_std, mask } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let valid = |bi: usize, p: usize| mask.as_ref().is_none_or(|m| m[bi * hw + p]);
                let count = (0..b).map(|bi| (0..hw).filter(|&p| valid(bi, p)).count()).sum::<usize>();
                let n = T::lit(count as f64);
                let mut gx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for bi in 0..b {
                        let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                        for (&gv, &yv) in g[r.clone()].iter().zip(&y[r]) {
                            sg += gv;
                            sgx += gv * yv;
                        }
                    }
                    let k = inv_std[ch];
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            let j = base + p;
                            gx[j] = if valid(bi, p) {
                                k / n * (n * g[j] - sg - y[j] * sgx)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNormalize { x, inv_std } => {
                let n = *out_shape.last().unwrap();
                let nt = T::lit(n as f64);
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gr, yr), dr)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    let k = inv_std[r];
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = k / nt * (nt * gv - sg - yv * sgx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.shape(*logits)[1];
                let mut gl = probs.clone();
                for (r, row) in gl.chunks_mut(c).enumerate() {
                    let w = weights[r] * g[0];
                    row[targets[r]] -= T::one();
                    row.iter_mut().for_each(|v| *v *= w);
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    mx + xs.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

fn binary_apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &[usize], f: impl Fn(T, T) -> T) -> Vec<T> {
    let (da, db) = (a.data(), b.data());
    let n = numel_of(out);
    if da.len() == n && db.len() == n {
        return da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
    }
    if da.len() == n && out.ends_with(b.shape()) {
        let m = db.len();
        return da.iter().enumerate().map(|(i, &x)| f(x, db[i % m])).collect();
    }
    if db.len() == n && out.ends_with(a.shape()) {
        let m = da.len();
        return db.iter().enumerate().map(|(i, &y)| f(da[i % m], y)).collect();
    }
    let ia = source_indices(out, a.shape());
    let ib = source_indices(out, b.shape());
    ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
}

/// `g * other` evaluated on the broadcast output shape.
fn binary_apply_grad<T: Scalar>(g: &[T], other: &Tensor<T>, out: &[usize]) -> Vec<T> {
    let d = other.data();
    if d.len() == g.len() {
        return g.iter().zip(d).map(|(&a, &b)| a * b).collect();
    }
    if out.ends_with(other.shape()) {
        let m = d.len();
        return g.iter().enumerate().map(|(i, &a)| a * d[i % m]).collect();
    }
    let idx = source_indices(out, other.shape());
    g.iter().zip(idx).map(|(&a, j)| a * d[j]).collect()
}

fn permute_data<T: Scalar>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let n = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if n == 0 {
        return (out_shape, data.to_vec());
    }
    // Innermost output axis handled as a strided run.
    let last = n - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut counter = vec![0usize; last];
    let mut base = 0usize;
    for _ in 0..total / run {
        for k in 0..run {
            out.push(data[base + k * run_stride]);
        }
        for ax in (0..last).rev() {
            counter[ax] += 1;
            base += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Batch layout of a broadcast matmul.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batches: usize,
    b_batches: usize,
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self, TensorError> {
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shapes(ab, bb).ok_or_else(|| shape_err("matmul", a, b))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        check_shape(&out_shape)?;
        Ok(MatMulPlan {
            m,
            k,
            n,
            a_batches: numel_of(ab),
            b_batches: numel_of(bb),
            a_idx: source_indices(&batch, ab),
            b_idx: source_indices(&batch, bb),
            out_shape,
        })
    }

    fn out_numel(&self) -> usize {
        numel_of(&self.out_shape)
    }

    /// `a` batched over the leading axes, `b` a single shared matrix: one GEMM.
    fn folds_into_one(&self) -> bool {
        self.b_batches == 1 && self.a_batches == self.a_idx.len()
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.folds_into_one() {
            let rows = self.a_batches * m;
            gemm(MatRef::new(a, rows, k), MatRef::new(b, k, n), T::zero(), out);
            return;
        }
        for (bi, (&ia, &ib)) in self.a_idx.iter().zip(&self.b_idx).enumerate() {
            gemm(
                MatRef::new(&a[ia * m * k..(ia + 1) * m * k], m, k),
                MatRef::new(&b[ib * k * n..(ib + 1) * k * n], k, n),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    fn backward<T: Scalar>(&self, a: &[T], b: &[T], g: &[T], ga: Option<&mut [T]>, gb: Option<&mut [T]>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.folds_into_one() {
            let rows = self.a_batches * m;
            if let Some(ga) = ga {
                gemm(MatRef::new(g, rows, n), MatRef::t(b, k, n), T::one(), ga);
            }
            if let Some(gb) = gb {
                gemm(MatRef::t(a, rows, k), MatRef::new(g, rows, n), T::one(), gb);
            }
            return;
        }
        if let Some(ga) = ga {
            for (bi, (&ia, &ib)) in self.a_idx.iter().zip(&self.b_idx).enumerate() {
                gemm(
                    MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                    MatRef::t(&b[ib * k * n..(ib + 1) * k * n], k, n),
                    T::one(),
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                );
            }
        }
        if let Some(gb) = gb {
            for (bi, (&ia, &ib)) in self.a_idx.iter().zip(&self.b_idx).enumerate() {
                gemm(
                    MatRef::t(&a[ia * m * k..(ia + 1) * m * k], m, k),
                    MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                    T::one(),
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                );
            }
        }
    }
}
