//! Parameterized blocks built from the autodiff primitives.
//!
//! Every block is described by a [`LayerSpec`], which both declares the
//! parameters it owns (names, shapes, initializers) and runs its forward pass
//! against a [`Bound`] view of a [`ParamBundle`]. Parameter names are
//! `<layer name>.<local name>` and form the checkpoint contract.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ConvStem,
    ConvEncoderBlock,
    TransposeAttentionBlock,
    Downsample,
    UpBlock,
    ClsHead,
    MaskHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Depthwise kernel for blocks, patch size for the stem and downsampling.
    pub kernel: usize,
    pub expansion: usize,
    /// Channels concatenated from the encoder skip (up blocks only).
    pub skip_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        let kernel = match kind {
            LayerKind::ConvStem => 4,
            LayerKind::Downsample => 2,
            LayerKind::ClsHead | LayerKind::MaskHead => 1,
            _ => 3,
        };
        LayerSpec {
            kind,
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            expansion: 4,
            skip_channels: 0,
        }
    }

    pub fn with_skip(mut self, skip_channels: usize) -> Self {
        self.skip_channels = skip_channels;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("{}: channels, kernel and expansion must be positive", self.name)));
        }
        let depthwise = matches!(
            self.kind,
            LayerKind::ConvEncoderBlock | LayerKind::UpBlock
        );
        if depthwise && self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{}: depthwise kernel must be odd, got {}", self.name, self.kernel)));
        }
        let residual = matches!(
            self.kind,
            LayerKind::ConvEncoderBlock | LayerKind::TransposeAttentionBlock
        );
        if residual && self.in_channels != self.out_channels {
            return Err(Error::Config(format!("{}: residual block must keep its width", self.name)));
        }
        Ok(())
    }

    fn cls_hidden(&self) -> usize {
        (self.in_channels / 4).max(1)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let mut decl = |local: &str, shape: Vec<usize>, init: Init| {
            out.push(ParamDecl {
                name: format!("{}.{local}", self.name),
                shape,
                init,
            })
        };
        let (ci, co, k, e) = (self.in_channels, self.out_channels, self.kernel, self.expansion);
        let he = |fan_in| Init::HeUniform { fan_in };
        match self.kind {
            LayerKind::ConvStem => {
                decl("conv.weight", vec![co, ci, k, k], he(ci * k * k));
                decl("conv.bias", vec![co], Init::Zeros);
                decl("norm.weight", vec![co], Init::Ones);
                decl("norm.bias", vec![co], Init::Zeros);
            }
            LayerKind::Downsample => {
                decl("norm.weight", vec![ci], Init::Ones);
                decl("norm.bias", vec![ci], Init::Zeros);
                decl("conv.weight", vec![co, ci, k, k], he(ci * k * k));
                decl("conv.bias", vec![co], Init::Zeros);
            }
            LayerKind::ConvEncoderBlock => {
                decl("dw.weight", vec![ci, 1, k, k], he(k * k));
                decl("dw.bias", vec![ci], Init::Zeros);
                decl("norm.weight", vec![ci], Init::Ones);
                decl("norm.bias", vec![ci], Init::Zeros);
                decl("pw1.weight", vec![e * ci, ci, 1, 1], he(ci));
                decl("pw1.bias", vec![e * ci], Init::Zeros);
                decl("pw2.weight", vec![ci, e * ci, 1, 1], he(e * ci));
                decl("pw2.bias", vec![ci], Init::Zeros);
            }
            LayerKind::TransposeAttentionBlock => {
                decl("norm1.weight", vec![ci], Init::Ones);
                decl("norm1.bias", vec![ci], Init::Zeros);
                for p in ["q", "k", "v"] {
                    decl(&format!("{p}.weight"), vec![ci, ci, 1, 1], he(ci));
                    decl(&format!("{p}.bias"), vec![ci], Init::Zeros);
                }
                decl("temperature", vec![1], Init::Constant(1.0));
                decl("norm2.weight", vec![ci], Init::Ones);
                decl("norm2.bias", vec![ci], Init::Zeros);
                decl("mlp1.weight", vec![e * ci, ci, 1, 1], he(ci));
                decl("mlp1.bias", vec![e * ci], Init::Zeros);
                decl("mlp2.weight", vec![ci, e * ci, 1, 1], he(e * ci));
                decl("mlp2.bias", vec![ci], Init::Zeros);
            }
            LayerKind::UpBlock => {
                let cin = ci + self.skip_channels;
                decl("dw.weight", vec![cin, 1, k, k], he(k * k));
                decl("dw.bias", vec![cin], Init::Zeros);
                decl("pw.weight", vec![co, cin, 1, 1], he(cin));
                decl("pw.bias", vec![co], Init::Zeros);
                decl("norm.weight", vec![co], Init::Ones);
                decl("norm.bias", vec![co], Init::Zeros);
            }
            LayerKind::ClsHead => {
                let hidden = self.cls_hidden();
                decl("fc1.weight", vec![hidden, ci, 1, 1], he(ci));
                decl("fc1.bias", vec![hidden], Init::Zeros);
                decl("fc2.weight", vec![1, hidden, 1, 1], he(hidden));
                decl("fc2.bias", vec![1], Init::Zeros);
            }
            LayerKind::MaskHead => {
                decl("weight", vec![1, ci, 1, 1], he(ci));
                decl("bias", vec![1], Init::Zeros);
            }
        }
        out
    }

    /// Runs the block. `skip` is only consulted by up blocks.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, skip: Option<Var>) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || c != self.in_channels {
            return Err(Error::shape(
                "layer input",
                g.shape(x),
                &[0, self.in_channels, 0, 0],
            ));
        }
        let n = |local: &str| p.get(&format!("{}.{local}", self.name));
        match self.kind {
            LayerKind::ConvStem => {
                let y = g.conv2d(x, n("conv.weight")?, Some(n("conv.bias")?), self.kernel, 0)?;
                g.layer_norm(y, Some(n("norm.weight")?), Some(n("norm.bias")?))
            }
            LayerKind::Downsample => {
                let y = g.layer_norm(x, Some(n("norm.weight")?), Some(n("norm.bias")?))?;
                g.conv2d(y, n("conv.weight")?, Some(n("conv.bias")?), self.kernel, 0)
            }
            LayerKind::ConvEncoderBlock => {
                let y = g.depthwise_conv2d(x, n("dw.weight")?, Some(n("dw.bias")?), self.kernel / 2)?;
                let y = g.layer_norm(y, Some(n("norm.weight")?), Some(n("norm.bias")?))?;
                let y = g.conv2d(y, n("pw1.weight")?, Some(n("pw1.bias")?), 1, 0)?;
                let y = g.gelu(y)?;
                let y = g.conv2d(y, n("pw2.weight")?, Some(n("pw2.bias")?), 1, 0)?;
                g.add(x, y)
            }
            LayerKind::TransposeAttentionBlock => {
                let z = g.layer_norm(x, Some(n("norm1.weight")?), Some(n("norm1.bias")?))?;
                let q = g.conv2d(z, n("q.weight")?, Some(n("q.bias")?), 1, 0)?;
                let k = g.conv2d(z, n("k.weight")?, Some(n("k.bias")?), 1, 0)?;
                let v = g.conv2d(z, n("v.weight")?, Some(n("v.bias")?), 1, 0)?;
                let (_, attended) = channel_attention(g, q, k, v, n("temperature")?)?;
                let x1 = g.add(x, attended)?;
                let z = g.layer_norm(x1, Some(n("norm2.weight")?), Some(n("norm2.bias")?))?;
                let z = g.conv2d(z, n("mlp1.weight")?, Some(n("mlp1.bias")?), 1, 0)?;
                let z = g.gelu(z)?;
                let z = g.conv2d(z, n("mlp2.weight")?, Some(n("mlp2.bias")?), 1, 0)?;
                g.add(x1, z)
            }
            LayerKind::UpBlock => {
                let up = g.upsample_nearest2x(x)?;
                let cat = match skip {
                    Some(s) => {
                        let (su, ss) = (g.shape(up), g.shape(s));
                        if su[0] != ss[0] || su[2..] != ss[2..] || ss[1] != self.skip_channels {
                            return Err(Error::shape("up_block skip", su, ss));
                        }
                        g.concat_channels(&[up, s])?
                    }
                    None if self.skip_channels == 0 => up,
                    None => {
                        return Err(Error::Contract(format!("{}: missing skip input", self.name)));
                    }
                };
                let y = g.depthwise_conv2d(cat, n("dw.weight")?, Some(n("dw.bias")?), self.kernel / 2)?;
                let y = g.conv2d(y, n("pw.weight")?, Some(n("pw.bias")?), 1, 0)?;
                let y = g.layer_norm(y, Some(n("norm.weight")?), Some(n("norm.bias")?))?;
                g.relu(y)
            }
            LayerKind::ClsHead => {
                let batch = g.shape(x)[0];
                let pooled = g.mean_reduce(x, 2)?;
                let pooled = g.reshape(pooled, &[batch, self.in_channels, 1, 1])?;
                let h = g.conv2d(pooled, n("fc1.weight")?, Some(n("fc1.bias")?), 1, 0)?;
                let h = g.relu(h)?;
                let logit = g.conv2d(h, n("fc2.weight")?, Some(n("fc2.bias")?), 1, 0)?;
                g.reshape(logit, &[batch, 1])
            }
            LayerKind::MaskHead => g.conv2d(x, n("weight")?, Some(n("bias")?), 1, 0),
        }
    }
}

/// Cross-covariance attention over channels. `q`, `k`, `v` are N×C×H×W;
/// rows of Q and K are L2-normalized over the spatial axis and
/// `A = softmax(tau · Q Kᵀ)` is C×C. Returns `(A, reshape(A V))`.
pub fn channel_attention(g: &mut Graph, q: Var, k: Var, v: Var, tau: Var) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape("channel_attention", &shape, &[4]));
    };
    let flat = [n, c, h * w];
    let qf = g.reshape(q, &flat)?;
    let kf = g.reshape(k, &flat)?;
    let vf = g.reshape(v, &flat)?;
    let qn = g.l2_normalize_lastdim(qf)?;
    let kn = g.l2_normalize_lastdim(kf)?;
    let logits = g.matmul(qn, kn, true)?;
    let logits = g.mul(logits, tau)?;
    let attn = g.softmax_lastdim(logits)?;
    let out = g.matmul(attn, vf, false)?;
    let out = g.reshape(out, &shape)?;
    Ok((attn, out))
}

/// Named learnable tensors in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBundle {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every declared parameter, drawing from
    /// `rng` in declaration order.
    pub fn from_decls(decls: &[ParamDecl], rng: &mut SplitMix64) -> Result<Self> {
        let mut bundle = ParamBundle::new();
        for d in decls {
            let mut t = Tensor::zeros(d.shape.clone());
            match d.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f32).sqrt();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Init::Zeros => {}
                Init::Ones => t.data_mut().fill(1.0),
                Init::Constant(c) => t.data_mut().fill(c),
            }
            bundle.insert(d.name.clone(), t)?;
        }
        Ok(bundle)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, (name, t)| {
            let h = name.bytes().fold(h, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            (h ^ t.checksum()).wrapping_mul(0x100_0000_01b3)
        })
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors.values_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Inserts every parameter as a graph leaf. Leaves require a gradient
    /// when the bundle tensor does.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                (name.clone(), g.input(leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Like [`ParamBundle::bind`] but nothing is recorded for backward.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients left on bound leaves by `Graph::backward` into the
    /// bundle's own gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(grad) = bound.vars.get(name).and_then(|v| g.grad(*v)) {
                t.accumulate_grad(grad);
            }
        }
    }
}

/// Parameter name → graph leaf for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Rebinds `name` to another node, e.g. a probe leaf in a gradient check.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}
