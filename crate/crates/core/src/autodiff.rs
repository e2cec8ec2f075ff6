//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] lives for one forward pass. Ops append nodes whose inputs
//! always precede them, so walking the node list backwards is a valid
//! reverse topological order. After [`Graph::backward`] the saved activations
//! are released and the graph refuses a second backward.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels::{self, Conv3x3Geom};
use crate::tensor::{lit, Real, Shape, Tensor};

/// Denominator guard for [`Graph::div`].
pub const DIV_EPS: f64 = 1e-8;

/// Variance guard of [`Graph::batch_norm`].
pub const BN_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance of one batch-normalization input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Values per channel the statistics were taken over.
    pub count: usize,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside this module (the losses use this).
///
/// `backward` receives the input values, the forward output, and the
/// gradient flowing into the output; it returns one optional gradient buffer
/// per input, each the length of that input.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Gap(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Conv1x1 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv3x3 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: Conv3x3Geom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
    Released,
}

impl<T: Real> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Gap(_) => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Custom { op, .. } => op.name(),
            Op::Released => "released",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    relu_signature: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Index map from an output position to the position of a broadcast operand.
fn broadcast_index(out: &Shape, operand: &Shape) -> Result<Vec<usize>> {
    let od = out.dims();
    let bd = operand.dims();
    if bd.len() > od.len() {
        return Err(dim_err!("cannot broadcast {:?} over {:?}", operand, out));
    }
    let pad = od.len() - bd.len();
    let mut strides = vec![0usize; od.len()];
    let mut s = 1;
    for i in (0..bd.len()).rev() {
        let (o, b) = (od[pad + i], bd[i]);
        if b == o {
            strides[pad + i] = s;
        } else if b != 1 {
            return Err(dim_err!("cannot broadcast {:?} over {:?}", operand, out));
        }
        s *= b;
    }
    let n = out.numel();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; od.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        idx.push(pos);
        for ax in (0..od.len()).rev() {
            counter[ax] += 1;
            pos += strides[ax];
            if counter[ax] < od[ax] {
                break;
            }
            pos -= strides[ax] * od[ax];
            counter[ax] = 0;
        }
    }
    Ok(idx)
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn axis_split(shape: &Shape, axis: usize) -> Result<(usize, usize, usize)> {
    let d = shape.dims();
    if axis >= d.len() {
        return Err(dim_err!("axis {} out of range for {:?}", axis, shape));
    }
    let outer = d[..axis].iter().product();
    let inner = d[axis + 1..].iter().product();
    Ok((outer, d[axis], inner))
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Trainable leaf; holds `d loss / d leaf` after backward.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push_unchecked(t, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced non-finite values (shape {:?})",
                op.kind(),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Matrix product `a·b` of `N×K` and `K×M` operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a).matrix()?;
        let (k2, m) = self.shape(b).matrix()?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dims differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Tensor::from_vec([n, m], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let shape = self.shape(a).clone();
        let idx = broadcast_index(&shape, self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(&idx).map(|(&x, &j)| f(x, bv[j])).collect();
        Tensor::from_vec(shape.dims().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast over singleton or missing leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a / (b + ε)` with ε = [`DIV_EPS`].
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let eps: T = lit(DIV_EPS);
        let v = self.binary(a, b, |x, y| x / (y + eps))?;
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let mut h = self.relu_signature;
        for (i, &a) in self.value(x).data().iter().enumerate() {
            if a > T::zero() {
                h = (h ^ i as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        self.relu_signature = (h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
        self.push(v, Op::Relu(x), &[x])
    }

    /// Fingerprint of which ReLU inputs were positive so far. Two passes
    /// through the same ops with equal signatures took the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`, stabilised by subtracting the running max.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let v = Tensor::from_vec(xv.dims().to_vec(), out)?;
        self.push(v, Op::Softmax { x, axis }, &[x])
    }

    /// Global average pooling `N×H×W×C → N×1×1×C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, h, w, c) = self.shape(x).nhwc()?;
        let src = self.value(x).data();
        let inv: T = lit(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for px in src[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
        self.push(Tensor::from_vec([n, 1, 1, c], out)?, Op::Gap(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v);
        let m = s / lit(xv.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(dims)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Per-pixel linear map: `x: N×H×W×Cin`, `w: Cin×Cout`, `b: Cout`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, h, wd, c_in) = self.shape(x).nhwc()?;
        let (wc_in, c_out) = self.shape(w).matrix()?;
        if wc_in != c_in {
            return Err(dim_err!(
                "conv1x1 channel mismatch: input {:?}, weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if self.shape(b).dims() != [c_out] {
            return Err(dim_err!(
                "conv1x1 bias {:?} does not match {} output channels",
                self.shape(b),
                c_out
            ));
        }
        let rows = n * h * wd;
        let mut out = vec![T::zero(); rows * c_out];
        kernels::gemm(self.value(x).data(), self.value(w).data(), &mut out, rows, c_in, c_out);
        add_bias(&mut out, self.value(b).data());
        let v = Tensor::from_vec([n, h, wd, c_out], out)?;
        self.push(v, Op::Conv1x1 { x, w, b }, &[x, w, b])
    }

    /// 3×3 convolution with padding 1: `x: N×H×W×Cin`, `w: 3×3×Cin×Cout`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (n, h, wd, c_in) = self.shape(x).nhwc()?;
        let wdims = self.shape(w).dims().to_vec();
        if wdims.len() != 4 || wdims[0] != 3 || wdims[1] != 3 || wdims[2] != c_in {
            return Err(dim_err!(
                "conv3x3 weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        let c_out = wdims[3];
        if self.shape(b).dims() != [c_out] {
            return Err(dim_err!("conv3x3 bias {:?} vs {} channels", self.shape(b), c_out));
        }
        if stride == 0 {
            return Err(dim_err!("conv3x3 stride must be positive"));
        }
        let geom = Conv3x3Geom {
            n,
            h,
            w: wd,
            c_in,
            stride,
        };
        let cols = kernels::im2col(self.value(x).data(), geom);
        let rows = geom.rows();
        let mut out = vec![T::zero(); rows * c_out];
        kernels::gemm(&cols, self.value(w).data(), &mut out, rows, geom.patch(), c_out);
        add_bias(&mut out, self.value(b).data());
        let (ho, wo) = geom.out_hw();
        let v = Tensor::from_vec([n, ho, wo, c_out], out)?;
        let keep = if self.nodes[w.0].requires_grad {
            cols
        } else {
            Vec::new()
        };
        self.push(
            v,
            Op::Conv3x3 {
                x,
                w,
                b,
                geom,
                cols: keep,
            },
            &[x, w, b],
        )
    }

    /// Per-channel normalization over every axis but the last, then
    /// `γ·x̂ + β`. With `running = None` the batch's own statistics are used
    /// and returned; otherwise the given mean and variance are constants.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let dims = self.shape(x).dims().to_vec();
        let c = *dims
            .last()
            .ok_or_else(|| dim_err!("batch_norm needs at least one axis"))?;
        if self.shape(gamma).dims() != [c] || self.shape(beta).dims() != [c] {
            return Err(dim_err!(
                "batch_norm affine {:?}/{:?} vs {} channels",
                self.shape(gamma),
                self.shape(beta),
                c
            ));
        }
        let src = self.value(x).data();
        let m = src.len() / c.max(1);
        let (mean, var, stats) = match running {
            Some((mean, var)) => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("batch_norm running statistics do not have {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
            None => {
                if m == 0 {
                    return Err(dim_err!("batch_norm over an empty batch"));
                }
                let inv_m: T = lit(1.0 / m as f64);
                let mut mean = vec![T::zero(); c];
                for px in src.chunks_exact(c) {
                    for (a, &v) in mean.iter_mut().zip(px) {
                        *a = *a + v;
                    }
                }
                mean.iter_mut().for_each(|a| *a = *a * inv_m);
                let mut var = vec![T::zero(); c];
                for px in src.chunks_exact(c) {
                    for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
                        *a = *a + (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|a| *a = *a * inv_m);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
        };
        let eps: T = lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for px in src.chunks_exact(c) {
            for k in 0..c {
                let h = (px[k] - mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(gv[k] * h + bv[k]);
            }
        }
        let v = Tensor::from_vec(dims, out)?;
        let batch = stats.is_some();
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        )?;
        Ok((id, stats))
    }

    /// Appends a node computed outside the graph with a user-supplied backward.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<NodeId> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Gradient of the last backward's loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::from_vec(self.shape(id).dims().to_vec(), g.clone()).ok()
    }

    pub fn grad_data(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0)?.as_deref()
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.local_grads(id, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[id] = Some(g);
        }
        for node in &mut self.nodes {
            node.op = match node.op {
                Op::Leaf => Op::Leaf,
                _ => Op::Released,
            };
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Released => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a).matrix()?;
                let (_, m) = self.shape(*b).matrix()?;
                if self.needs(*a) {
                    let mut da = vec![T::zero(); n * k];
                    kernels::gemm_nt(g, self.value(*b).data(), &mut da, n, m, k);
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * m];
                    kernels::gemm_tn(self.value(*a).data(), g, &mut db, n, k, m);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    let idx = broadcast_index(out.shape(), self.shape(*b))?;
                    let mut db = vec![T::zero(); self.value(*b).numel()];
                    for (&gv, &j) in g.iter().zip(&idx) {
                        db[j] = db[j] + sign * gv;
                    }
                    res.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                let idx = broadcast_index(out.shape(), self.shape(*b))?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let da = g.iter().zip(&idx).map(|(&gv, &j)| gv * bv[j]).collect();
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for ((&gv, &x), &j) in g.iter().zip(av).zip(&idx) {
                        db[j] = db[j] + gv * x;
                    }
                    res.push((*b, db));
                }
            }
            Op::Div(a, b) => {
                let eps: T = lit(DIV_EPS);
                let idx = broadcast_index(out.shape(), self.shape(*b))?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let da = g.iter().zip(&idx).map(|(&gv, &j)| gv / (bv[j] + eps)).collect();
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for ((&gv, &x), &j) in g.iter().zip(av).zip(&idx) {
                        let d = bv[j] + eps;
                        db[j] = db[j] - gv * x / (d * d);
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale(x, f) => res.push((*x, g.iter().map(|&v| v * *f).collect())),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                res.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis)?;
                let s = out.data();
                let mut dx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot = dot + g[at(k)] * s[at(k)];
                        }
                        for k in 0..len {
                            dx[at(k)] = s[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Gap(x) => {
                let (n, h, w, c) = self.shape(*x).nhwc()?;
                let inv: T = lit(1.0 / (h * w) as f64);
                let mut dx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    let gb = &g[b * c..(b + 1) * c];
                    for px in dx[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                        for (d, &gv) in px.iter_mut().zip(gb) {
                            *d = gv * inv;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / lit(n as f64); n]));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Conv1x1 { x, w, b } => {
                let (n, h, wd, c_in) = self.shape(*x).nhwc()?;
                let c_out = out.dims()[3];
                let rows = n * h * wd;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * c_in];
                    kernels::gemm_nt(g, self.value(*w).data(), &mut dx, rows, c_out, c_in);
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); c_in * c_out];
                    kernels::gemm_tn(self.value(*x).data(), g, &mut dw, rows, c_in, c_out);
                    res.push((*w, dw));
                }
                if self.needs(*b) {
                    res.push((*b, bias_grad(g, c_out)));
                }
            }
            Op::Conv3x3 { x, w, b, geom, cols } => {
                let c_out = out.dims()[3];
                let rows = geom.rows();
                let patch = geom.patch();
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    kernels::gemm_nt(g, self.value(*w).data(), &mut dcols, rows, c_out, patch);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    kernels::col2im(&dcols, *geom, &mut dx);
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); patch * c_out];
                    kernels::gemm_tn(cols, g, &mut dw, rows, patch, c_out);
                    res.push((*w, dw));
                }
                if self.needs(*b) {
                    res.push((*b, bias_grad(g, c_out)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gp, hp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        sum_g[k] = sum_g[k] + gp[k];
                        sum_gx[k] = sum_gx[k] + gp[k] * hp[k];
                    }
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    let inv_m: T = lit(1.0 / m as f64);
                    for (gp, hp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            let scale = gv[k] * inv_std[k];
                            dx.push(if *batch {
                                scale * (gp[k] - (sum_g[k] + hp[k] * sum_gx[k]) * inv_m)
                            } else {
                                scale * gp[k]
                            });
                        }
                    }
                    res.push((*x, dx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    res.push((*beta, sum_g));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|i| self.value(*i)).collect();
                let gs = op.backward(&vals, out, g);
                if gs.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (input, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.len() != self.value(*input).numel() {
                            return Err(Error::Graph(format!("{} gradient has wrong length", op.name())));
                        }
                        res.push((*input, gi));
                    }
                }
            }
        }
        Ok(res)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], c: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for row in g.chunks_exact(c) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut g = Graph::new();
        let i2 = g.input(Tensor::identity(2).unwrap());
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.input(t(&[2, 1], &[1.0, 1.0]));
        let q = g.matmul(m, ones).unwrap();
        assert_eq!(g.value(q).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros([2, 3]).unwrap());
        let b = g.input(Tensor::zeros([2, 3]).unwrap());
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2×3]"), "{msg}");
    }

    #[test]
    fn conv1x1_hand_sum_and_identity() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 1, 2], &[3.0, 5.0]));
        let w = g.input(t(&[2, 1], &[1.0, 1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[8.0]);

        let xs = t(&[1, 2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let x = g.input(xs.clone());
        let w = g.input(Tensor::identity(3).unwrap());
        let b = g.input(Tensor::zeros([3]).unwrap());
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(y), &xs);

        let bad = g.input(Tensor::zeros([2, 3]).unwrap());
        assert!(g.conv1x1(x, bad, b).is_err());
    }

    #[test]
    fn gap_values_and_gradient() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full([2, 3, 3, 2], 7.0).unwrap());
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 7.0));

        let x = g.param(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let z = g.input(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);

        let z = g.input(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let z = g.input(t(&[1, 3], &[1000.0, 1000.0, 1000.0]));
        let s = g.softmax(z, 1).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let z = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(z).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        assert!(g.softmax(z, 1).is_err());
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 4.0, 8.0]));
        let q = g.div(a, a).unwrap();
        for &v in g.value(q).data() {
            assert!((v - 1.0).abs() < 1e-8);
        }

        let map = g.input(t(&[1, 2, 2, 1], &[2.0, 4.0, 6.0, 8.0]));
        let gate = g.input(t(&[1, 1, 1, 1], &[0.5]));
        let m = g.mul(map, gate).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);

        let bad = g.input(t(&[1, 2, 1, 3], &[0.0; 6]));
        assert!(g.mul(map, bad).is_err());

        let bias = g.input(t(&[2], &[10.0, 20.0]));
        let s = g.add(a, bias).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 14.0, 28.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_reuse_and_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[1e300]));
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.input(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad_data(c).is_none());
    }
}
