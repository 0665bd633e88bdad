//! Small convolutional backbone plus a two-layer MLP projection head.
//!
//! backbone: conv(3×3, s2, p1) → relu → conv(3×3, s2, p1) → relu → global
//! average pool → affine; head: affine → relu → affine; the embedding is the
//! L2-normalised head output.

use serde::{Deserialize, Serialize};

use crate::augment::{frames_to_batch, Frame};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Graph, NodeId, ParamSet, Tensor};

pub const CONV1: &str = "backbone.conv1.weight";
pub const CONV2: &str = "backbone.conv2.weight";
pub const FC_W: &str = "backbone.fc.weight";
pub const FC_B: &str = "backbone.fc.bias";
pub const HEAD1_W: &str = "head.fc1.weight";
pub const HEAD1_B: &str = "head.fc1.bias";
pub const HEAD2_W: &str = "head.fc2.weight";
pub const HEAD2_B: &str = "head.fc2.bias";

/// Architecture extents. Every field is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// `[height, width]` of the input frames.
    pub input_size: [usize; 2],
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub d_backbone: usize,
    pub d_embed: usize,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            input_size: [32, 32],
            conv1_channels: 8,
            conv2_channels: 16,
            kernel: 3,
            stride: 2,
            pad: 1,
            d_backbone: 64,
            d_embed: 32,
            norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    /// Expected `(name, shape)` of every parameter, backbone first.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let k = self.kernel;
        vec![
            (CONV1, vec![self.conv1_channels, self.in_channels, k, k]),
            (CONV2, vec![self.conv2_channels, self.conv1_channels, k, k]),
            (FC_W, vec![self.conv2_channels, self.d_backbone]),
            (FC_B, vec![self.d_backbone]),
            (HEAD1_W, vec![self.d_backbone, self.d_backbone]),
            (HEAD1_B, vec![self.d_backbone]),
            (HEAD2_W, vec![self.d_backbone, self.d_embed]),
            (HEAD2_B, vec![self.d_embed]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.input_size[0],
            self.input_size[1],
            self.conv1_channels,
            self.conv2_channels,
            self.kernel,
            self.stride,
            self.d_backbone,
            self.d_embed,
        ];
        if dims.contains(&0) {
            return Err(Error::Parameter("encoder extents must be positive".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Parameter("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [_, c, kh, kw] => c * kh * kw,
        [inp, _] => *inp,
        _ => 0,
    }
}

/// Query- or key-side encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub backbone: ParamSet,
    pub head: ParamSet,
}

/// Output of one forward pass recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub features: NodeId,
    pub embedding: NodeId,
}

impl EncoderParams {
    /// Uniform `[−s, s]` initialisation with `s = 1/√fan_in`; biases use the
    /// fan-in of their weight matrix.
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut backbone = ParamSet::new();
        let mut head = ParamSet::new();
        let mut last_fan = 1;
        for (name, shape) in config.layout() {
            let fan = if shape.len() == 1 { last_fan } else { fan_in(&shape) };
            last_fan = fan;
            let s = 1.0 / (fan as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.range(-s, s)).collect();
            let t = Tensor::new(shape, data)?;
            if name.starts_with("backbone.") {
                backbone.insert(name, t)?;
            } else {
                head.insert(name, t)?;
            }
        }
        Ok(Self {
            config,
            backbone,
            head,
        })
    }

    /// Builds from explicit parameter sets after checking them against `config`.
    pub fn from_parts(config: EncoderConfig, backbone: ParamSet, head: ParamSet) -> Result<Self> {
        let enc = Self {
            config,
            backbone,
            head,
        };
        enc.check_layout()?;
        Ok(enc)
    }

    pub fn check_layout(&self) -> Result<()> {
        let layout = self.config.layout();
        if self.backbone.len() + self.head.len() != layout.len() {
            return Err(Error::Contract("encoder parameter count does not match layout".into()));
        }
        for (name, shape) in layout {
            let v = self.value(name)?;
            if v.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter \"{name}\" has shape {:?}, expected {:?}",
                    v.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        if name.starts_with("backbone.") {
            self.backbone.value(name)
        } else {
            self.head.value(name)
        }
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.backbone.set_frozen(frozen);
    }

    pub fn backbone_frozen(&self) -> bool {
        !self.backbone.is_empty() && self.backbone.all_frozen()
    }

    pub fn bitwise_eq(&self, other: &EncoderParams) -> bool {
        self.backbone.values_bitwise_eq(&other.backbone) && self.head.values_bitwise_eq(&other.head)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        match x.shape() {
            [_, ch, h, w] if *ch == c.in_channels && [*h, *w] == c.input_size => Ok(()),
            s => Err(Error::Dimension {
                op: "encode",
                detail: format!(
                    "batch {:?} does not match encoder input {}×{}×{}",
                    s, c.in_channels, c.input_size[0], c.input_size[1]
                ),
            }),
        }
    }

    /// Records the forward pass on `graph`. Parameters become trainable leaves
    /// only when `record_grads` is set and they are not frozen.
    pub fn forward(&self, graph: &mut Graph, x: NodeId, record_grads: bool) -> Result<EncoderNodes> {
        self.check_input(graph.value(x))?;
        let cfg = &self.config;
        let leaf = |g: &mut Graph, set: &ParamSet, name: &str| -> Result<NodeId> {
            let p = set
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter \"{name}\"")))?;
            Ok(g.param(name, p.value.clone(), record_grads && !p.frozen))
        };
        let c1 = leaf(graph, &self.backbone, CONV1)?;
        let c2 = leaf(graph, &self.backbone, CONV2)?;
        let fw = leaf(graph, &self.backbone, FC_W)?;
        let fb = leaf(graph, &self.backbone, FC_B)?;
        let h1w = leaf(graph, &self.head, HEAD1_W)?;
        let h1b = leaf(graph, &self.head, HEAD1_B)?;
        let h2w = leaf(graph, &self.head, HEAD2_W)?;
        let h2b = leaf(graph, &self.head, HEAD2_B)?;

        let a = graph.conv2d(x, c1, cfg.stride, cfg.pad)?;
        let a = graph.relu(a);
        let a = graph.conv2d(a, c2, cfg.stride, cfg.pad)?;
        let a = graph.relu(a);
        let pooled = graph.global_avg_pool(a)?;
        let features = graph.affine(pooled, fw, fb)?;
        let h = graph.affine(features, h1w, h1b)?;
        let h = graph.relu(h);
        let z = graph.affine(h, h2w, h2b)?;
        let embedding = graph.l2_normalize(z, cfg.norm_eps)?;
        Ok(EncoderNodes {
            features,
            embedding,
        })
    }

    /// Unit-norm embeddings (`B×d`) for a batch of frames, without gradients.
    pub fn encode(&self, frames: &[Frame]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(frames_to_batch(frames)?);
        let out = self.forward(&mut g, x, false)?;
        Ok(g.value(out.embedding).clone())
    }

    /// Backbone outputs (`B×d_backbone`), the pre-head features.
    pub fn features(&self, frames: &[Frame]) -> Result<Tensor> {
        self.features_from_batch(&frames_to_batch(frames)?)
    }

    /// As [`features`](Self::features) for an already batched `B×C×H×W` tensor.
    pub fn features_from_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let cfg = &self.config;
        let a = ops::relu(&ops::conv2d(x, self.backbone.value(CONV1)?, cfg.stride, cfg.pad)?);
        let a = ops::relu(&ops::conv2d(&a, self.backbone.value(CONV2)?, cfg.stride, cfg.pad)?);
        ops::affine(
            &ops::global_avg_pool(&a)?,
            self.backbone.value(FC_W)?,
            self.backbone.value(FC_B)?,
        )
    }

    /// Replaces one parameter value; the shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .backbone
            .get_mut(name)
            .or_else(|| self.head.get_mut(name))
            .ok_or_else(|| Error::Contract(format!("missing parameter \"{name}\"")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "parameter \"{name}\" has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Iterates over every parameter, backbone first.
    pub fn all_params(&self) -> impl Iterator<Item = (&str, &crate::tensor::Param)> {
        self.backbone.iter().chain(self.head.iter())
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.head.zero_grad();
    }

    pub fn grads_all_zero(&self) -> bool {
        self.all_params()
            .all(|(_, p)| p.grad.data().iter().all(|&g| g == 0.0))
    }
}
