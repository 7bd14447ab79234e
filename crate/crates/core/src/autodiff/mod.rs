//! Reverse-mode automatic differentiation over a record-on-execute tape.
//!
//! A [`Graph`] owns every value produced while it is alive. Leaves are
//! inserted with [`Graph::input`]; each primitive evaluates eagerly and, when
//! any of its inputs requires a gradient, keeps what its backward rule needs.
//! [`Graph::backward`] walks the tape once in reverse and deposits gradients
//! into the leaf tensors. A graph can be differentiated only once; call
//! [`Graph::reset`] to reuse the allocation.

mod gradcheck;
pub mod kernels;

use std::fmt;

pub use gradcheck::{gradcheck, gradcheck_at};
use kernels::{ConvGeom, DepthwiseGeom};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const L2_NORM_EPS: f32 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module. Inputs are read back from the
/// graph at backward time, so implementations only store their attributes.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradient with respect to each input. Entries for inputs whose
    /// `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    /// Elementwise product; the second operand may be a one-element tensor.
    Mul,
    Scale(f32),
    Matmul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Conv2d(ConvGeom),
    DepthwiseConv2d(DepthwiseGeom),
    Relu,
    Gelu,
    Sigmoid,
    SoftmaxLastDim,
    LayerNorm {
        outer: usize,
        channels: usize,
        inner: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    MeanReduce {
        inner: usize,
    },
    UpsampleNearest2x,
    ConcatChannels,
    PadZero([usize; 4]),
    L2NormalizeLastDim {
        norms: Vec<f32>,
    },
    Reshape,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::DepthwiseConv2d(_) => "depthwise_conv2d",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanReduce { .. } => "mean_reduce",
            Op::UpsampleNearest2x => "upsample_nearest2x",
            Op::ConcatChannels => "concat_channels",
            Op::PadZero(_) => "pad_zero",
            Op::L2NormalizeLastDim { .. } => "l2_normalize_lastdim",
            Op::Reshape => "reshape",
            Op::Custom(c) => c.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEF: f32 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f32 = 0.797_884_6;

fn gelu(x: f32) -> f32 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Graph {
    /// Finite-value checks after every primitive are on in debug builds.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value and re-arms the graph.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a leaf that does not require a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a leaf tensor (with its gradient) out of the graph.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        let node = &mut self.nodes[v.0];
        assert!(matches!(node.op, Op::Leaf), "take_leaf on a non-leaf node");
        std::mem::replace(&mut node.value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f32>, inputs: Vec<Var>, op: Op) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t, inputs, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.make(shape, data, vec![a, b], Op::Add)
    }

    /// Elementwise product. `b` may also be a one-element tensor, which
    /// scales all of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f32> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            ta.data().iter().map(|x| x * s).collect()
        } else {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        };
        let shape = ta.shape().to_vec();
        self.make(shape, data, vec![a, b], Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        self.make(shape, data, vec![a], Op::Scale(s))
    }

    /// Matrix product over the last two dims, batched over a shared leading
    /// dim when the operands are 3-D. With `transpose_b`, computes `a · bᵀ`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", &sa, &sb);
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => (1, *m, *k, if transpose_b { *c } else { *r }, if transpose_b { *r } else { *c }),
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                (*ba, *m, *k, if transpose_b { *c } else { *r }, if transpose_b { *r } else { *c })
            }
            _ => return Err(bad()),
        };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.make(shape, out, vec![a, b], Op::Matmul { batch, m, k, n, transpose_b })
    }

    /// Dense convolution with zero padding. `x`: N×C×H×W, `weight`:
    /// O×C×kh×kw, optional `bias` of length O.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let bad = || Error::shape("conv2d", &sx, &sw);
        let ([n, c, h, w], [o, ci, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(bad());
        };
        if c != ci || stride == 0 || h + 2 * pad < *kh || w + 2 * pad < *kw {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [*o] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[*o]));
            }
        }
        let geom = ConvGeom {
            batch: *n,
            in_channels: *c,
            height: *h,
            width: *w,
            out_channels: *o,
            kernel_h: *kh,
            kernel_w: *kw,
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.make(vec![*n, *o, geom.out_h(), geom.out_w()], y, inputs, Op::Conv2d(geom))
    }

    /// Per-channel convolution, stride 1. `weight`: C×1×k×k.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let bad = || Error::shape("depthwise_conv2d", &sx, &sw);
        let ([n, c, h, w], [cw, one, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(bad());
        };
        if c != cw || *one != 1 || kh != kw || h + 2 * pad < *kh || w + 2 * pad < *kw {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [*c] {
                return Err(Error::shape("depthwise_conv2d bias", self.shape(b), &[*c]));
            }
        }
        let geom = DepthwiseGeom {
            batch: *n,
            channels: *c,
            height: *h,
            width: *w,
            kernel: *kh,
            pad,
        };
        let y = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.make(
            vec![*n, *c, geom.out_h(), geom.out_w()],
            y,
            inputs,
            Op::DepthwiseConv2d(geom),
        )
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.make(shape, data, vec![x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu, gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("softmax_lastdim", t.shape(), &[]))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        self.make(shape, out, vec![x], Op::SoftmaxLastDim)
    }

    /// Normalizes over axis 1 of an N×C×... tensor: channels of an NCHW map,
    /// or the last dim of an N×C matrix. `gamma`/`beta` have length C.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("layer_norm", &shape, &[]));
        }
        if gamma.is_none() && beta.is_some() {
            return Err(Error::Contract("layer_norm: beta without gamma is unsupported".into()));
        }
        let (outer, channels) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [channels] {
                return Err(Error::shape("layer_norm affine", self.shape(p), &[channels]));
            }
        }
        let xd = self.value(x).data();
        let gd = gamma.map(|g| self.value(g).data());
        let bd = beta.map(|b| self.value(b).data());
        let mut out = vec![0.0f32; xd.len()];
        let mut mean = vec![0.0f32; outer * inner];
        let mut rstd = vec![0.0f32; outer * inner];
        let inv_c = 1.0 / channels as f32;
        for o in 0..outer {
            let base = o * channels * inner;
            let mu = &mut mean[o * inner..(o + 1) * inner];
            for c in 0..channels {
                let row = &xd[base + c * inner..base + (c + 1) * inner];
                mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mu.iter_mut().for_each(|m| *m *= inv_c);
            let rs = &mut rstd[o * inner..(o + 1) * inner];
            for c in 0..channels {
                let row = &xd[base + c * inner..base + (c + 1) * inner];
                for ((r, v), m) in rs.iter_mut().zip(row).zip(mu.iter()) {
                    let d = v - m;
                    *r += d * d;
                }
            }
            rs.iter_mut()
                .for_each(|r| *r = 1.0 / (*r * inv_c + LAYER_NORM_EPS).sqrt());
            for c in 0..channels {
                let (g, b) = (gd.map_or(1.0, |g| g[c]), bd.map_or(0.0, |b| b[c]));
                let row = &xd[base + c * inner..base + (c + 1) * inner];
                let dst = &mut out[base + c * inner..base + (c + 1) * inner];
                for i in 0..inner {
                    dst[i] = (row[i] - mu[i]) * rs[i] * g + b;
                }
            }
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        // Backward recovers which affine inputs exist from the input count.
        let op = Op::LayerNorm { outer, channels, inner, mean, rstd };
        self.make(shape, out, inputs, op)
    }

    /// Mean over every dim from `keep` onwards. `keep = 0` yields a
    /// one-element result; `keep = 2` on NCHW is global average pooling.
    pub fn mean_reduce(&mut self, x: Var, keep: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if keep > shape.len() {
            return Err(Error::shape("mean_reduce", &shape, &[keep]));
        }
        let inner = numel(&shape[keep..]);
        let out_shape = if keep == 0 { vec![1] } else { shape[..keep].to_vec() };
        let inv = 1.0 / inner as f32;
        let out = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .map(|c| c.iter().sum::<f32>() * inv)
            .collect();
        self.make(out_shape, out, vec![x], Op::MeanReduce { inner })
    }

    /// Sum over every dim from `keep` onwards.
    pub fn sum_reduce(&mut self, x: Var, keep: usize) -> Result<Var> {
        let inner = numel(&self.shape(x)[keep.min(self.shape(x).len())..]);
        let m = self.mean_reduce(x, keep)?;
        self.scale(m, inner as f32)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape("upsample_nearest2x", &shape, &[4]));
        };
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / 2];
                }
            }
        }
        self.make(vec![n, c, oh, ow], out, vec![x], Op::UpsampleNearest2x)
    }

    /// Concatenation along axis 1 of NCHW tensors with equal N, H, W.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| {
            Error::Contract("concat_channels needs at least one input".into())
        })?)
        .to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", &first, &[4]));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_channels", &first, s));
            }
            total_c += s[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        self.make(vec![n, total_c, h, w], out, xs.to_vec(), Op::ConcatChannels)
    }

    /// Zero padding of the last two dims by `[top, bottom, left, right]`.
    pub fn pad_zero(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("pad_zero", &shape, &[2]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let outer = numel(&shape[..shape.len() - 2]);
        let [top, bottom, left, right] = pads;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; outer * oh * ow];
        for p in 0..outer {
            for y in 0..h {
                let s = &src[(p * h + y) * w..(p * h + y + 1) * w];
                let d0 = (p * oh + y + top) * ow + left;
                out[d0..d0 + w].copy_from_slice(s);
            }
        }
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        self.make(out_shape, out, vec![x], Op::PadZero(pads))
    }

    /// Divides each last-dim row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("l2_normalize_lastdim", t.shape(), &[]))?;
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(L2_NORM_EPS);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let shape = t.shape().to_vec();
        self.make(shape, out, vec![x], Op::L2NormalizeLastDim { norms })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let data = t.data().to_vec();
        self.make(shape.to_vec(), data, vec![x], Op::Reshape)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward(&refs)?
        };
        self.push(out, inputs.to_vec(), Op::Custom(op))
    }

    /// Back-propagates from a one-element `root`, accumulating into the
    /// `grad` buffer of every leaf that requires a gradient. The graph is
    /// consumed: a second call fails until [`Graph::reset`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        let root_numel = self.value(root).numel();
        if root_numel != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&gy);
                continue;
            }
            let input_grads = self.node_backward(i, &gy);
            let inputs = self.nodes[i].inputs.clone();
            for (inp, g) in inputs.into_iter().zip(input_grads) {
                if let Some(g) = g {
                    if self.nodes[inp.0].requires_grad {
                        debug_assert_eq!(g.len(), self.nodes[inp.0].value.numel());
                        add_into(&mut grads[inp.0], g);
                    }
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gy: &[f32]) -> Vec<Option<Vec<f32>>> {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let need = |k: usize| node.inputs.get(k).is_some_and(|v| self.nodes[v.0].requires_grad);
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(gy.to_vec()), Some(gy.to_vec())],
            Op::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                if b.len() == a.len() {
                    vec![
                        need(0).then(|| gy.iter().zip(b).map(|(g, y)| g * y).collect()),
                        need(1).then(|| gy.iter().zip(a).map(|(g, x)| g * x).collect()),
                    ]
                } else {
                    let s = b[0];
                    vec![
                        need(0).then(|| gy.iter().map(|g| g * s).collect()),
                        need(1).then(|| vec![gy.iter().zip(a).map(|(g, x)| g * x).sum()]),
                    ]
                }
            }
            Op::Scale(s) => vec![Some(gy.iter().map(|g| g * s).collect())],
            Op::Matmul { batch, m, k, n, transpose_b } => {
                let (a, b) = (val(0).data(), val(1).data());
                let (m, k, n) = (*m, *k, *n);
                let mut da = need(0).then(|| vec![0.0f32; a.len()]);
                let mut db = need(1).then(|| vec![0.0f32; b.len()]);
                for bi in 0..*batch {
                    let g = &gy[bi * m * n..(bi + 1) * m * n];
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        // dA = dY · op(B)ᵀ
                        let dst = &mut da[bi * m * k..(bi + 1) * m * k];
                        kernels::gemm(m, n, k, g, false, bb, !transpose_b, dst, 0.0);
                    }
                    if let Some(db) = db.as_mut() {
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // B is n×k: dB = dYᵀ · A
                            kernels::gemm(n, m, k, g, true, ab, false, dst, 0.0);
                        } else {
                            kernels::gemm(k, m, n, ab, true, g, false, dst, 0.0);
                        }
                    }
                }
                vec![da, db]
            }
            Op::Conv2d(geom) => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(0).data(),
                    val(1).data(),
                    gy,
                    geom,
                    [need(0), need(1), need(2)],
                );
                vec![dx, dw, db]
            }
            Op::DepthwiseConv2d(geom) => {
                let (dx, dw, db) = kernels::depthwise_backward(
                    val(0).data(),
                    val(1).data(),
                    gy,
                    geom,
                    [need(0), need(1), need(2)],
                );
                vec![dx, dw, db]
            }
            Op::Relu => vec![Some(
                gy.iter()
                    .zip(val(0).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Gelu => vec![Some(
                gy.iter().zip(val(0).data()).map(|(g, x)| g * gelu_grad(*x)).collect(),
            )],
            Op::Sigmoid => vec![Some(
                gy.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::SoftmaxLastDim => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0f32; gy.len()];
                for ((dst, y), g) in dx.chunks_exact_mut(d).zip(out.data().chunks_exact(d)).zip(gy.chunks_exact(d)) {
                    let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { outer, channels, inner, mean, rstd } => {
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let x = val(0).data();
                let has_gamma = node.inputs.len() >= 2;
                let has_beta = node.inputs.len() >= 3;
                let gamma = has_gamma.then(|| val(1).data());
                let mut dx = need(0).then(|| vec![0.0f32; x.len()]);
                let mut dgamma = (has_gamma && need(1)).then(|| vec![0.0f32; channels]);
                let mut dbeta = (has_beta && need(2)).then(|| vec![0.0f32; channels]);
                let inv_c = 1.0 / channels as f32;
                let mut sum_g = vec![0.0f32; inner];
                let mut sum_gx = vec![0.0f32; inner];
                for o in 0..outer {
                    let base = o * channels * inner;
                    let mu = &mean[o * inner..(o + 1) * inner];
                    let rs = &rstd[o * inner..(o + 1) * inner];
                    sum_g.fill(0.0);
                    sum_gx.fill(0.0);
                    for c in 0..channels {
                        let gm = gamma.map_or(1.0, |g| g[c]);
                        let xr = &x[base + c * inner..base + (c + 1) * inner];
                        let gr = &gy[base + c * inner..base + (c + 1) * inner];
                        let mut acc_gamma = 0.0f32;
                        let mut acc_beta = 0.0f32;
                        for i in 0..inner {
                            let xhat = (xr[i] - mu[i]) * rs[i];
                            let dxhat = gr[i] * gm;
                            sum_g[i] += dxhat;
                            sum_gx[i] += dxhat * xhat;
                            acc_gamma += gr[i] * xhat;
                            acc_beta += gr[i];
                        }
                        if let Some(d) = dgamma.as_mut() {
                            d[c] += acc_gamma;
                        }
                        if let Some(d) = dbeta.as_mut() {
                            d[c] += acc_beta;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for c in 0..channels {
                            let gm = gamma.map_or(1.0, |g| g[c]);
                            let xr = &x[base + c * inner..base + (c + 1) * inner];
                            let gr = &gy[base + c * inner..base + (c + 1) * inner];
                            let dst = &mut dx[base + c * inner..base + (c + 1) * inner];
                            for i in 0..inner {
                                let xhat = (xr[i] - mu[i]) * rs[i];
                                let dxhat = gr[i] * gm;
                                dst[i] = rs[i] * (dxhat - inv_c * sum_g[i] - xhat * inv_c * sum_gx[i]);
                            }
                        }
                    }
                }
                let mut v = vec![dx];
                if has_gamma {
                    v.push(dgamma);
                }
                if has_beta {
                    v.push(dbeta);
                }
                v
            }
            Op::MeanReduce { inner } => {
                let inv = 1.0 / *inner as f32;
                let mut dx = Vec::with_capacity(gy.len() * inner);
                for g in gy {
                    dx.extend(std::iter::repeat_n(g * inv, *inner));
                }
                vec![Some(dx)]
            }
            Op::UpsampleNearest2x => {
                let s = val(0).shape();
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                let mut dx = vec![0.0f32; val(0).numel()];
                for (p, dst) in dx.chunks_exact_mut(h * w).enumerate() {
                    let g = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for oy in 0..2 * h {
                        let row = &mut dst[(oy / 2) * w..(oy / 2 + 1) * w];
                        for ox in 0..ow {
                            row[ox / 2] += g[oy * ow + ox];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::ConcatChannels => {
                let s = out.shape();
                let (n, total_c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let c = val(k).shape()[1];
                        let g = need(k).then(|| {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                d.extend_from_slice(&gy[start..start + c * hw]);
                            }
                            d
                        });
                        offset += c;
                        g
                    })
                    .collect()
            }
            Op::PadZero([top, _, left, _]) => {
                let s = val(0).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let os = out.shape();
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                let outer = val(0).numel() / (h * w);
                let mut dx = vec![0.0f32; val(0).numel()];
                for p in 0..outer {
                    for y in 0..h {
                        let s0 = (p * oh + y + top) * ow + left;
                        dx[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&gy[s0..s0 + w]);
                    }
                }
                vec![Some(dx)]
            }
            Op::L2NormalizeLastDim { norms } => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0f32; gy.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let g = &gy[r * d..(r + 1) * d];
                    let dst = &mut dx[r * d..(r + 1) * d];
                    if *nrm > L2_NORM_EPS {
                        let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = (g[j] - y[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..d {
                            dst[j] = g[j] / nrm;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(gy.to_vec())],
            Op::Custom(op) => {
                let refs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = (0..node.inputs.len()).map(need).collect();
                op.backward(&refs, out, gy, &needs)
            }
        }
    }
}

#[cfg(test)]
mod tests;
