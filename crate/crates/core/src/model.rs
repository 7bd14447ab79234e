//! The full detector: hybrid encoder, U-Net style decoder, classification
//! and mask heads.
//!
//! Encoder: a 4×4 stride-4 stem, then four stages at strides 4/8/16/32, each
//! made of convolution encoder blocks optionally followed by one transpose
//! attention block, with LayerNorm + 2×2 stride-2 downsampling in between.
//! Decoder: three up blocks consuming the stage 3/2/1 skips (back to stride
//! 4), then two skip-less up blocks to full resolution.

use std::collections::BTreeMap;

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerKind, LayerSpec, ParamBundle, ParamDecl};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    /// 1-based stage numbers that end with a transpose attention block.
    pub attention_stages: Vec<usize>,
    pub input_size: (usize, usize),
    /// Widths of the four decoder levels; the final full-resolution block
    /// reuses the last width.
    pub decoder_channels: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            attention_stages: vec![2, 3, 4],
            input_size: (256, 256),
            decoder_channels: [64, 32, 16, 8],
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected comma-separated integers, got {v:?}")))
        })
        .collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    parse_list(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} values, got {v:?}")))
}

impl ModelConfig {
    /// Small widths for gradient checks and quick experiments.
    pub fn reduced(input: usize) -> Self {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            stage_channels: [8, 16, 16, 32],
            stage_depths: [1, 1, 1, 1],
            attention_stages: vec![2, 3, 4],
            input_size: (input, input),
            decoder_channels: [16, 8, 8, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "in_channels must be {INPUT_CHANNELS} (green + residual), got {}",
                self.in_channels
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 32")));
        }
        if self.stage_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("stage depths must be at least 1".into()));
        }
        if let Some(s) = self.attention_stages.iter().find(|s| !(1..=NUM_STAGES).contains(*s)) {
            return Err(Error::Config(format!("attention stage {s} outside 1..={NUM_STAGES}")));
        }
        Ok(())
    }

    /// Every block in execution order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.stage_channels;
        let d = self.decoder_channels;
        let mut layers = vec![LayerSpec::new(LayerKind::ConvStem, "stem", self.in_channels, c[0])];
        for s in 0..NUM_STAGES {
            if s > 0 {
                layers.push(LayerSpec::new(LayerKind::Downsample, format!("downsample.{s}"), c[s - 1], c[s]));
            }
            for b in 0..self.stage_depths[s] {
                layers.push(LayerSpec::new(
                    LayerKind::ConvEncoderBlock,
                    format!("stages.{s}.blocks.{b}"),
                    c[s],
                    c[s],
                ));
            }
            if self.attention_stages.contains(&(s + 1)) {
                layers.push(LayerSpec::new(
                    LayerKind::TransposeAttentionBlock,
                    format!("stages.{s}.attn"),
                    c[s],
                    c[s],
                ));
            }
        }
        let up = |i: usize, cin, skip, cout| {
            LayerSpec::new(LayerKind::UpBlock, format!("decoder.{i}"), cin, cout).with_skip(skip)
        };
        layers.push(up(0, c[3], c[2], d[0]));
        layers.push(up(1, d[0], c[1], d[1]));
        layers.push(up(2, d[1], c[0], d[2]));
        layers.push(up(3, d[2], 0, d[3]));
        layers.push(up(4, d[3], 0, d[3]));
        layers.push(LayerSpec::new(LayerKind::ClsHead, "cls_head", c[3], 1));
        layers.push(LayerSpec::new(LayerKind::MaskHead, "mask_head", d[3], 1));
        layers
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.layers().iter().flat_map(LayerSpec::params).collect()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("in_channels".into(), self.in_channels.to_string()),
            ("stage_channels".into(), join(&self.stage_channels)),
            ("stage_depths".into(), join(&self.stage_depths)),
            ("attention_stages".into(), join(&self.attention_stages)),
            ("input_size".into(), format!("{},{}", self.input_size.0, self.input_size.1)),
            ("decoder_channels".into(), join(&self.decoder_channels)),
        ]
    }

    /// Applies any recognized keys onto `self`; unknown keys are ignored so
    /// callers can pass a wider map.
    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            match k {
                "in_channels" => {
                    self.in_channels = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("in_channels: bad integer {v:?}")))?
                }
                "stage_channels" => self.stage_channels = parse_array(k, v)?,
                "stage_depths" => self.stage_depths = parse_array(k, v)?,
                "attention_stages" => self.attention_stages = parse_list(k, v)?,
                "input_size" => {
                    let [h, w] = parse_array::<2>(k, v)?;
                    self.input_size = (h, w);
                }
                "decoder_channels" => self.decoder_channels = parse_array(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// N×1 raw classification logits.
    pub cls_logit: Var,
    /// N×1×H×W raw mask logits.
    pub mask_logit: Var,
    pub stage_features: [Var; NUM_STAGES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub score: f32,
    /// Row-major H×W probabilities.
    pub mask: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDoc {
    config: ModelConfig,
    params: ParamBundle,
}

impl EdgeDoc {
    /// Deterministic initialization: the same seed gives a bit-identical
    /// bundle.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        for l in config.layers() {
            l.validate()?;
        }
        let mut rng = SplitMix64::derive(seed, 0x1417);
        let params = ParamBundle::from_decls(&config.param_decls(), &mut rng)?;
        Ok(EdgeDoc { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against the
    /// architecture.
    pub fn from_params(config: ModelConfig, params: ParamBundle) -> Result<Self> {
        config.validate()?;
        let decls = config.param_decls();
        let mut expected: BTreeMap<&str, &[usize]> = BTreeMap::new();
        for d in &decls {
            expected.insert(&d.name, &d.shape);
        }
        for (name, t) in params.iter() {
            match expected.remove(name.as_str()) {
                None => return Err(Error::Checkpoint(format!("unexpected parameter {name}"))),
                Some(shape) if shape != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match architecture {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(missing) = expected.keys().next() {
            return Err(Error::Checkpoint(format!("missing parameter {missing}")));
        }
        Ok(EdgeDoc { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamBundle {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamBundle {
        &mut self.params
    }

    pub fn into_params(self) -> ParamBundle {
        self.params
    }

    /// Records one forward pass. `x` must be N×2×H×W at the configured size.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<ForwardOutput> {
        let (h, w) = self.config.input_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != h || shape[3] != w {
            return Err(Error::shape("forward", shape, &[shape.first().copied().unwrap_or(1), self.config.in_channels, h, w]));
        }
        let layers = self.config.layers();
        let mut it = layers.iter().peekable();
        let mut cur = x;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        // Encoder: everything up to the first up block.
        while let Some(l) = it.next_if(|l| l.kind != LayerKind::UpBlock) {
            if l.kind == LayerKind::Downsample {
                stages.push(cur);
            }
            cur = l.forward(g, p, cur, None)?;
        }
        stages.push(cur);
        let stage_features: [Var; NUM_STAGES] = stages
            .try_into()
            .map_err(|_| Error::Contract("encoder did not produce four stages".into()))?;
        let bottleneck = cur;
        for (i, l) in it.by_ref().take(5).enumerate() {
            let skip = (i < 3).then(|| stage_features[2 - i]);
            cur = l.forward(g, p, cur, skip)?;
        }
        let cls_spec = layers.iter().find(|l| l.kind == LayerKind::ClsHead).expect("cls head");
        let mask_spec = layers.iter().find(|l| l.kind == LayerKind::MaskHead).expect("mask head");
        let cls_logit = cls_spec.forward(g, p, bottleneck, None)?;
        let mask_logit = mask_spec.forward(g, p, cur, None)?;
        Ok(ForwardOutput {
            cls_logit,
            mask_logit,
            stage_features,
        })
    }

    /// Sigmoid scores and masks for a batch, with no gradient recording.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        let (h, w) = self.config.input_size;
        let cls = g.value(out.cls_logit).data();
        let masks = g.value(out.mask_logit).data();
        Ok(cls
            .iter()
            .zip(masks.chunks_exact(h * w))
            .map(|(&z, m)| Prediction {
                score: sigmoid(z),
                mask: m.iter().map(|&v| sigmoid(v)).collect(),
                height: h,
                width: w,
            })
            .collect())
    }
}
