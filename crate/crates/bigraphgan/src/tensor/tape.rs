//! Recording tape for reverse-mode differentiation.
//!
//! Each forward pass owns one [`Tape`] (single writer). Operations append
//! nodes in topological order; [`Tape::backward`] sweeps the nodes in reverse
//! and accumulates adjoints in a fixed order, which keeps every pass
//! bit-deterministic for a fixed seed.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels;
use super::{check_shape, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Val(pub(crate) usize);

/// Elementwise unary functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

/// Elementwise binary functions (identical shapes; one side may be a
/// one-element scalar).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinFn {
    Add,
    Sub,
    Mul,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul(Val, Val),
    Transpose(Val),
    Conv2d {
        x: Val,
        k: Val,
        stride: usize,
        pad: usize,
        /// Unfolded input patches, cached for the backward pass. `None` for
        /// 1x1 stride-1 kernels where the input buffer itself is the patch
        /// matrix.
        col: Option<Arc<Vec<S>>>,
    },
    ConvTranspose2d {
        y: Val,
        k: Val,
        stride: usize,
        pad: usize,
    },
    Unary(Val, UnaryFn),
    Binary(Val, Val, BinFn),
    Affine {
        x: Val,
        mul: f64,
    },
    Clamp {
        x: Val,
        lo: f64,
        hi: f64,
    },
    Ln(Val),
    Abs(Val),
    Sum(Val),
    Concat(Vec<Val>),
    Narrow {
        x: Val,
        start: usize,
        len: usize,
    },
    Reshape(Val),
    BiasAddChan {
        x: Val,
        b: Val,
    },
    InstanceNorm {
        x: Val,
        gamma: Val,
        beta: Val,
        eps: f64,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Unary(_, UnaryFn::Sigmoid) => "sigmoid",
            Op::Unary(_, UnaryFn::Relu) => "relu",
            Op::Unary(_, UnaryFn::LeakyRelu(_)) => "leaky_relu",
            Op::Unary(_, UnaryFn::Tanh) => "tanh",
            Op::Binary(..) => "ew_binary",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::BiasAddChan { .. } => "bias_add",
            Op::InstanceNorm { .. } => "instance_norm",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Val`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Val) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros in `v`'s shape when `v` was unused.
    pub fn get_or_zeros(&self, v: Val, tape: &Tape<S>) -> Tensor<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)).expect("node shapes are valid"),
        }
    }
}

/// Reverse-mode recording tape.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded value behind a handle.
    pub fn value(&self, v: Val) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Count of recorded nodes per operation name (wiring inspection).
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.op.name()).or_insert(0) += 1;
        }
        m
    }

    /// Handles of every node recorded under the given operation name.
    pub fn nodes_named(&self, name: &str) -> Vec<Val> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.name() == name)
            .map(|(i, _)| Val(i))
            .collect()
    }

    /// Input handles of a recorded node (trace inspection).
    pub fn op_inputs(&self, v: Val) -> Vec<Val> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Binary(a, b, _) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Unary(x, _)
            | Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::Ln(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Narrow { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvTranspose2d { y, k, .. } => vec![*y, *k],
            Op::Concat(xs) => xs.clone(),
            Op::BiasAddChan { x, b } => vec![*x, *b],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Val {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&mut self, t: Tensor<S>) -> Val {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Val {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf with an explicit gradient flag.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Val {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Re-enter a recorded value as a constant leaf (cuts the gradient path).
    pub fn detach(&mut self, v: Val) -> Val {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- primitive operations ------------------------------------------

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {sa:?} x {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::Matmul(a, b),
            rg,
        ))
    }

    /// Matrix transpose of a rank-2 value.
    pub fn transpose(&mut self, x: Val) -> Result<Val> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let mut out = vec![S::zero(); s[0] * s[1]];
        kernels::transpose(s[0], s[1], self.value(x).data(), &mut out);
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![s[1], s[0]], out)?,
            Op::Transpose(x),
            rg,
        ))
    }

    /// Cross-correlation of `x[c_in,h,w]` with `k[c_out,c_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Val, k: Val, stride: usize, pad: usize) -> Result<Val> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (c_in, h, w, c_out, kh, kw) = conv_arg_check(&sx, &sk, stride, pad)?;
        let oh = kernels::conv_out(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: non-integral output for h={h} k={kh} s={stride} p={pad}")))?;
        let ow = kernels::conv_out(w, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: non-integral output for w={w} k={kw} s={stride} p={pad}")))?;
        let l = oh * ow;
        let patch = c_in * kh * kw;
        let mut out = vec![S::zero(); c_out * l];
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let col_cache = if pointwise {
            kernels::gemm_nn(c_out, patch, l, self.value(k).data(), self.value(x).data(), &mut out);
            None
        } else {
            let mut col = vec![S::zero(); patch * l];
            kernels::im2col(self.value(x).data(), c_in, h, w, kh, kw, stride, pad, oh, ow, &mut col);
            kernels::gemm_nn(c_out, patch, l, self.value(k).data(), &col, &mut out);
            Some(Arc::new(col))
        };
        let rg = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::from_vec(vec![c_out, oh, ow], out)?,
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                col: col_cache,
            },
            rg,
        ))
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernel and parameters:
    /// maps `y[c_out,h',w']` back to `[c_in,h,w]`.
    pub fn conv_transpose2d(&mut self, y: Val, k: Val, stride: usize, pad: usize) -> Result<Val> {
        let (sy, sk) = (self.shape(y).to_vec(), self.shape(k).to_vec());
        if sy.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv_transpose2d needs input rank 3 and kernel rank 4, got {sy:?}, {sk:?}"
            )));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if sk[2] != sk[3] {
            return Err(Error::shape(format!("non-square kernel {sk:?}")));
        }
        if stride > 1 && !(kh % 2 == 1 || kh == stride) {
            return Err(Error::shape(format!(
                "strided kernel must be odd or equal to stride, got k={kh} stride={stride}"
            )));
        }
        if sy[0] != c_out {
            return Err(Error::shape(format!(
                "conv_transpose2d channel mismatch: input {sy:?} kernel {sk:?}"
            )));
        }
        let c_in = sk[1];
        let (hy, wy) = (sy[1], sy[2]);
        let h = kernels::conv_transpose_out(hy, kh, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv_transpose2d: invalid h'={hy} k={kh} s={stride} p={pad}")))?;
        let w = kernels::conv_transpose_out(wy, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv_transpose2d: invalid w'={wy} k={kw} s={stride} p={pad}")))?;
        let l = hy * wy;
        let patch = c_in * kh * kw;
        // x = col2im(k^T * y)
        let mut col = vec![S::zero(); patch * l];
        kernels::gemm_tn(patch, c_out, l, self.value(k).data(), self.value(y).data(), &mut col);
        let mut out = vec![S::zero(); c_in * h * w];
        kernels::col2im(&col, c_in, h, w, kh, kw, stride, pad, hy, wy, &mut out);
        let rg = self.needs(y) || self.needs(k);
        Ok(self.push(
            Tensor::from_vec(vec![c_in, h, w], out)?,
            Op::ConvTranspose2d { y, k, stride, pad },
            rg,
        ))
    }

    pub fn unary(&mut self, x: Val, f: UnaryFn) -> Val {
        let out = match f {
            UnaryFn::Sigmoid => self.value(x).map(sigmoid_stable),
            UnaryFn::Relu => self.value(x).map(|v| if v > S::zero() { v } else { S::zero() }),
            UnaryFn::LeakyRelu(alpha) => {
                let a = S::from_f64(alpha);
                self.value(x).map(move |v| if v > S::zero() { v } else { a * v })
            }
            UnaryFn::Tanh => self.value(x).map(|v| v.tanh()),
        };
        let rg = self.needs(x);
        self.push(out, Op::Unary(x, f), rg)
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        self.unary(x, UnaryFn::Sigmoid)
    }

    pub fn relu(&mut self, x: Val) -> Val {
        self.unary(x, UnaryFn::Relu)
    }

    pub fn leaky_relu(&mut self, x: Val, alpha: f64) -> Val {
        self.unary(x, UnaryFn::LeakyRelu(alpha))
    }

    pub fn tanh(&mut self, x: Val) -> Val {
        self.unary(x, UnaryFn::Tanh)
    }

    pub fn binary(&mut self, a: Val, b: Val, f: BinFn) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let scalar_a = numel(&sa) == 1;
        let scalar_b = numel(&sb) == 1;
        if sa != sb && !scalar_a && !scalar_b {
            return Err(Error::shape(format!(
                "elementwise {f:?} of mismatched shapes {sa:?} vs {sb:?} (only scalar broadcast allowed)"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = da.len().max(db.len());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let av = da[if scalar_a { 0 } else { i }];
            let bv = db[if scalar_b { 0 } else { i }];
            out.push(match f {
                BinFn::Add => av + bv,
                BinFn::Sub => av - bv,
                BinFn::Mul => av * bv,
            });
        }
        let shape = if scalar_a && !scalar_b { sb } else { sa };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Binary(a, b, f), rg))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(a, b, BinFn::Add)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(a, b, BinFn::Sub)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(a, b, BinFn::Mul)
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: Val, mul: f64, add: f64) -> Val {
        let (m, c) = (S::from_f64(mul), S::from_f64(add));
        let out = self.value(x).map(move |v| m * v + c);
        let rg = self.needs(x);
        self.push(out, Op::Affine { x, mul }, rg)
    }

    pub fn scale(&mut self, x: Val, mul: f64) -> Val {
        self.affine(x, mul, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Val) -> Val {
        self.affine(x, -1.0, 1.0)
    }

    pub fn clamp(&mut self, x: Val, lo: f64, hi: f64) -> Val {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let out = self.value(x).map(move |v| v.max(l).min(h));
        let rg = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn ln(&mut self, x: Val) -> Val {
        let out = self.value(x).map(|v| v.ln());
        let rg = self.needs(x);
        self.push(out, Op::Ln(x), rg)
    }

    pub fn abs(&mut self, x: Val) -> Val {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.needs(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Val) -> Val {
        let total: S = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, x: Val) -> Val {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate along the first axis; trailing extents must match.
    pub fn concat(&mut self, xs: &[Val]) -> Result<Val> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.shape(xs[0]).to_vec();
        let mut c0 = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape(format!(
                    "concat extent mismatch: {:?} vs {:?}",
                    s, first
                )));
            }
            c0 += s[0];
        }
        let mut shape = first;
        shape[0] = c0;
        let mut data = Vec::with_capacity(numel(&shape));
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let rg = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// Contiguous slice `[start, start+len)` along the first axis.
    pub fn narrow(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape(format!(
                "narrow [{start}, {start}+{len}) out of range for first extent {}",
                s[0]
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            Op::Narrow { x, start, len },
            rg,
        ))
    }

    /// Split along the first axis into pieces of the declared sizes.
    pub fn split_channels(&mut self, x: Val, sizes: &[usize]) -> Result<Vec<Val>> {
        let c0 = self.shape(x)[0];
        if sizes.iter().sum::<usize>() != c0 {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not sum to first extent {c0}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &len in sizes {
            out.push(self.narrow(x, at, len)?);
            at += len;
        }
        Ok(out)
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        check_shape(&shape)?;
        let t = self.value(x).reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[c,h,w] -> [c, h*w]` row-major; exact inverse of
    /// [`Tape::unflatten_spatial`].
    pub fn flatten_spatial(&mut self, x: Val) -> Result<Val> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("flatten_spatial needs rank 3, got {s:?}")));
        }
        self.reshape(x, vec![s[0], s[1] * s[2]])
    }

    pub fn unflatten_spatial(&mut self, x: Val, h: usize, w: usize) -> Result<Val> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != h * w {
            return Err(Error::shape(format!(
                "unflatten_spatial: {s:?} does not match h={h} w={w}"
            )));
        }
        self.reshape(x, vec![s[0], h, w])
    }

    /// Add `b[c]` to every spatial position of channel `c`.
    pub fn bias_add(&mut self, x: Val, b: Val) -> Result<Val> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::shape(format!(
                "bias of shape {sb:?} does not match leading extent of {sx:?}"
            )));
        }
        let c = sx[0];
        let inner = numel(&sx) / c;
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(xd.len());
        for ch in 0..c {
            let bv = bd[ch];
            for &v in &xd[ch * inner..(ch + 1) * inner] {
                out.push(v + bv);
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(sx, out)?,
            Op::BiasAddChan { x, b },
            rg,
        ))
    }

    /// Per-channel spatial standardization followed by the affine map
    /// `gamma * xhat + beta`. With a single spatial element the variance is
    /// degenerate and the result is `beta`.
    pub fn instance_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!("instance_norm needs rank 3, got {sx:?}")));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s != [c] {
                return Err(Error::shape(format!(
                    "instance_norm {name} shape {s:?} does not match {c} channels"
                )));
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = Vec::with_capacity(xd.len());
        if hw == 1 {
            for ch in 0..c {
                out.push(bd[ch]);
            }
        } else {
            let inv_n = S::from_f64(1.0 / hw as f64);
            let epsv = S::from_f64(eps);
            for ch in 0..c {
                let plane = &xd[ch * hw..(ch + 1) * hw];
                let mean = plane.iter().copied().sum::<S>() * inv_n;
                let var = plane
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<S>()
                    * inv_n;
                let inv_std = (var + epsv).sqrt().recip();
                let (g, b) = (gd[ch], bd[ch]);
                for &v in plane {
                    out.push(g * (v - mean) * inv_std + b);
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(sx, out)?,
            Op::InstanceNorm { x, gamma, beta, eps },
            rg,
        ))
    }

    /// `x * x`.
    pub fn square(&mut self, x: Val) -> Result<Val> {
        self.mul(x, x)
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse-topological adjoint accumulation from a one-element root.
    /// Gradients of unused leaves are reported as zero by
    /// [`Grads::get_or_zeros`].
    pub fn backward(&mut self, root: Val) -> Result<Grads<S>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|buf| {
                    Tensor::from_vec(self.nodes[i].value.shape().to_vec(), buf)
                        .expect("adjoint buffer matches node shape")
                })
            })
            .collect();
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // ga += g[m,n] * b[k,n]^T
                    let mut tmp = vec![S::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, self.value(*b).data(), &mut tmp);
                    acc(adj, a.0, m * k, &tmp);
                }
                if self.needs(*b) {
                    // gb += a[m,k]^T * g[m,n]
                    let mut tmp = vec![S::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(*a).data(), g, &mut tmp);
                    acc(adj, b.0, k * n, &tmp);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut tmp = vec![S::zero(); r * c];
                // g has shape [c, r]; transpose back.
                kernels::transpose(c, r, g, &mut tmp);
                acc(adj, x.0, r * c, &tmp);
            }
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                col,
            } => {
                let sx = self.shape(*x);
                let sk = self.shape(*k);
                let (c_in, h, w) = (sx[0], sx[1], sx[2]);
                let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = self.nodes[i].value.shape();
                let (oh, ow) = (so[1], so[2]);
                let l = oh * ow;
                let patch = c_in * kh * kw;
                let pointwise = col.is_none();
                if self.needs(*k) {
                    // gk = g[c_out,l] * col^T
                    let mut tmp = vec![S::zero(); c_out * patch];
                    match col {
                        Some(c) => kernels::gemm_nt(c_out, l, patch, g, c, &mut tmp),
                        None => kernels::gemm_nt(c_out, l, patch, g, self.value(*x).data(), &mut tmp),
                    }
                    acc(adj, k.0, c_out * patch, &tmp);
                }
                if self.needs(*x) {
                    // gcol = k^T * g, then fold back.
                    let mut gcol = vec![S::zero(); patch * l];
                    kernels::gemm_tn(patch, c_out, l, self.value(*k).data(), g, &mut gcol);
                    if pointwise {
                        acc(adj, x.0, c_in * h * w, &gcol);
                    } else {
                        let mut gx = vec![S::zero(); c_in * h * w];
                        kernels::col2im(&gcol, c_in, h, w, kh, kw, *stride, *pad, oh, ow, &mut gx);
                        acc(adj, x.0, c_in * h * w, &gx);
                    }
                }
            }
            Op::ConvTranspose2d { y, k, stride, pad } => {
                let sy = self.shape(*y);
                let sk = self.shape(*k);
                let (c_out, hy, wy) = (sy[0], sy[1], sy[2]);
                let (c_in, kh, kw) = (sk[1], sk[2], sk[3]);
                let so = self.nodes[i].value.shape();
                let (h, w) = (so[1], so[2]);
                let l = hy * wy;
                let patch = c_in * kh * kw;
                // Both rules consume the unfolded output-space gradient.
                let mut colg = vec![S::zero(); patch * l];
                kernels::im2col(g, c_in, h, w, kh, kw, *stride, *pad, hy, wy, &mut colg);
                if self.needs(*y) {
                    // gy = k * im2col(gx)
                    let mut tmp = vec![S::zero(); c_out * l];
                    kernels::gemm_nn(c_out, patch, l, self.value(*k).data(), &colg, &mut tmp);
                    acc(adj, y.0, c_out * l, &tmp);
                }
                if self.needs(*k) {
                    // gk = y * im2col(gx)^T
                    let mut tmp = vec![S::zero(); c_out * patch];
                    kernels::gemm_nt(c_out, l, patch, self.value(*y).data(), &colg, &mut tmp);
                    acc(adj, k.0, c_out * patch, &tmp);
                }
            }
            Op::Unary(x, f) => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let yv = self.nodes[i].value.data();
                let n = xv.len();
                let mut tmp = Vec::with_capacity(n);
                match f {
                    UnaryFn::Sigmoid => {
                        for j in 0..n {
                            tmp.push(g[j] * yv[j] * (S::one() - yv[j]));
                        }
                    }
                    UnaryFn::Relu => {
                        for j in 0..n {
                            tmp.push(if xv[j] > S::zero() { g[j] } else { S::zero() });
                        }
                    }
                    UnaryFn::LeakyRelu(alpha) => {
                        let a = S::from_f64(*alpha);
                        for j in 0..n {
                            tmp.push(if xv[j] > S::zero() { g[j] } else { a * g[j] });
                        }
                    }
                    UnaryFn::Tanh => {
                        for j in 0..n {
                            tmp.push(g[j] * (S::one() - yv[j] * yv[j]));
                        }
                    }
                }
                acc(adj, x.0, n, &tmp);
            }
            Op::Binary(a, b, f) => {
                let na = self.value(*a).len();
                let nb = self.value(*b).len();
                let n = na.max(nb);
                if self.needs(*a) {
                    let tmp = match f {
                        BinFn::Add | BinFn::Sub => reduce_or_pass(g, n, na),
                        BinFn::Mul => {
                            let bv = self.value(*b).data();
                            let full: Vec<S> = (0..n)
                                .map(|j| g[j] * bv[if nb == 1 { 0 } else { j }])
                                .collect();
                            reduce_or_pass(&full, n, na)
                        }
                    };
                    acc(adj, a.0, na, &tmp);
                }
                if self.needs(*b) {
                    let tmp = match f {
                        BinFn::Add => reduce_or_pass(g, n, nb),
                        BinFn::Sub => {
                            let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                            reduce_or_pass(&neg, n, nb)
                        }
                        BinFn::Mul => {
                            let av = self.value(*a).data();
                            let full: Vec<S> = (0..n)
                                .map(|j| g[j] * av[if na == 1 { 0 } else { j }])
                                .collect();
                            reduce_or_pass(&full, n, nb)
                        }
                    };
                    acc(adj, b.0, nb, &tmp);
                }
            }
            Op::Affine { x, mul } => {
                let m = S::from_f64(*mul);
                let tmp: Vec<S> = g.iter().map(|&v| m * v).collect();
                acc(adj, x.0, tmp.len(), &tmp);
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                let xv = self.value(*x).data();
                let tmp: Vec<S> = g
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| if xv[j] >= l && xv[j] <= h { v } else { S::zero() })
                    .collect();
                acc(adj, x.0, tmp.len(), &tmp);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let tmp: Vec<S> = g.iter().enumerate().map(|(j, &v)| v / xv[j]).collect();
                acc(adj, x.0, tmp.len(), &tmp);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let tmp: Vec<S> = g
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        if xv[j] > S::zero() {
                            v
                        } else if xv[j] < S::zero() {
                            -v
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                acc(adj, x.0, tmp.len(), &tmp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let tmp = vec![g[0]; n];
                acc(adj, x.0, n, &tmp);
            }
            Op::Concat(xs) => {
                let mut at = 0usize;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.needs(v) {
                        acc(adj, v.0, n, &g[at..at + n]);
                    }
                    at += n;
                }
            }
            Op::Narrow { x, start, len } => {
                let sx = self.shape(*x);
                let inner: usize = sx[1..].iter().product();
                let n = self.value(*x).len();
                let slot = adj[x.0].get_or_insert_with(|| vec![S::zero(); n]);
                let lo = start * inner;
                for (j, &v) in g.iter().enumerate().take(len * inner) {
                    slot[lo + j] += v;
                }
            }
            Op::Reshape(x) => {
                acc(adj, x.0, g.len(), g);
            }
            Op::BiasAddChan { x, b } => {
                if self.needs(*x) {
                    acc(adj, x.0, g.len(), g);
                }
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let inner = g.len() / c;
                    let mut tmp = vec![S::zero(); c];
                    for (ch, t) in tmp.iter_mut().enumerate() {
                        for &v in &g[ch * inner..(ch + 1) * inner] {
                            *t += v;
                        }
                    }
                    acc(adj, b.0, c, &tmp);
                }
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let sx = self.shape(*x);
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if hw == 1 {
                    // Degenerate case: output is beta, independent of x and gamma.
                    if self.needs(*beta) {
                        acc(adj, beta.0, c, g);
                    }
                    return;
                }
                let inv_n = S::from_f64(1.0 / hw as f64);
                let epsv = S::from_f64(*eps);
                let mut gx = vec![S::zero(); c * hw];
                let mut ggam = vec![S::zero(); c];
                let mut gbet = vec![S::zero(); c];
                for ch in 0..c {
                    let plane = &xv[ch * hw..(ch + 1) * hw];
                    let gp = &g[ch * hw..(ch + 1) * hw];
                    let mean = plane.iter().copied().sum::<S>() * inv_n;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                    let inv_std = (var + epsv).sqrt().recip();
                    let mut sum_g = S::zero();
                    let mut sum_gx = S::zero();
                    for j in 0..hw {
                        let xh = (plane[j] - mean) * inv_std;
                        sum_g += gp[j];
                        sum_gx += gp[j] * xh;
                    }
                    ggam[ch] = sum_gx;
                    gbet[ch] = sum_g;
                    let mg = sum_g * inv_n;
                    let mgx = sum_gx * inv_n;
                    let k = gam[ch] * inv_std;
                    for j in 0..hw {
                        let xh = (plane[j] - mean) * inv_std;
                        gx[ch * hw + j] = k * (gp[j] - mg - xh * mgx);
                    }
                }
                if self.needs(*x) {
                    acc(adj, x.0, c * hw, &gx);
                }
                if self.needs(*gamma) {
                    acc(adj, gamma.0, c, &ggam);
                }
                if self.needs(*beta) {
                    acc(adj, beta.0, c, &gbet);
                }
            }
        }
    }
}

impl From<usize> for Val {
    fn from(v: usize) -> Self {
        Val(v)
    }
}

fn acc<S: Scalar>(adj: &mut [Option<Vec<S>>], idx: usize, n: usize, contribution: &[S]) {
    let slot = adj[idx].get_or_insert_with(|| vec![S::zero(); n]);
    for (s, &c) in slot.iter_mut().zip(contribution.iter()) {
        *s += c;
    }
}

/// Pass a gradient through unchanged, or sum-reduce it onto a broadcast
/// scalar operand (fixed left-to-right order).
fn reduce_or_pass<S: Scalar>(g: &[S], n: usize, target: usize) -> Vec<S> {
    if target == n {
        g.to_vec()
    } else {
        debug_assert_eq!(target, 1);
        let mut total = S::zero();
        for &v in g {
            total += v;
        }
        vec![total]
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn conv_arg_check(
    sx: &[usize],
    sk: &[usize],
    stride: usize,
    _pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if sx.len() != 3 || sk.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d needs input rank 3 and kernel rank 4, got {sx:?}, {sk:?}"
        )));
    }
    if sk[2] != sk[3] {
        return Err(Error::shape(format!("non-square kernel {sk:?}")));
    }
    if sx[0] != sk[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {sx:?} vs kernel {sk:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive".to_string()));
    }
    if stride > 1 && !(sk[2] % 2 == 1 || sk[2] == stride) {
        return Err(Error::shape(format!(
            "strided kernel must be odd or equal to stride, got k={} stride={stride}",
            sk[2]
        )));
    }
    Ok((sx[0], sx[1], sx[2], sk[0], sk[2], sk[3]))
}
