use rand::Rng;

use super::layers::{ConformerLayer, Ctx, Norm};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// `N × V_feat` matrix of input frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "features must be a matrix, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Invalid("features contain non-finite values".into()));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// Number of frames `N`.
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

const SUB_KERNEL: usize = 4;
const SUB_STRIDE: usize = 2;
const SUB_PAD: usize = 1;

/// Two stride-2 convolutions followed by the conformer stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pos: ParamId,
    layers: Vec<ConformerLayer>,
    norm: Norm,
    feat_dim: usize,
    max_positions: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let conv1_w = store.add_uniform(
            "encoder.subsample.conv1.weight",
            &[SUB_KERNEL * cfg.feat_dim, d],
            SUB_KERNEL * cfg.feat_dim,
            rng,
        );
        let conv1_b = store.add("encoder.subsample.conv1.bias", Tensor::zeros(&[d]));
        let conv2_w = store.add_uniform(
            "encoder.subsample.conv2.weight",
            &[SUB_KERNEL * d, d],
            SUB_KERNEL * d,
            rng,
        );
        let conv2_b = store.add("encoder.subsample.conv2.bias", Tensor::zeros(&[d]));
        let pos = store.add_uniform("encoder.pos", &[cfg.max_positions, d], d, rng);
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                ConformerLayer::new(
                    store,
                    &format!("encoder.layers.{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.conv_kernel,
                    rng,
                )
            })
            .collect();
        let norm = Norm::new(store, "encoder.norm", d);
        Encoder {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            pos,
            layers,
            norm,
            feat_dim: cfg.feat_dim,
            max_positions: cfg.max_positions,
        }
    }

    /// 4× temporal subsampling: `N' = ⌊N / 4⌋` rows of width `d_model`.
    pub fn subsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if n < 4 {
            return Err(Error::Invalid(format!(
                "need at least 4 frames to subsample, got {n}"
            )));
        }
        let (w1, b1) = (g.param(self.conv1_w), g.param(self.conv1_b));
        let h = g.conv1d(x, w1, Some(b1), SUB_KERNEL, SUB_STRIDE, SUB_PAD)?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(self.conv2_w), g.param(self.conv2_b));
        let h = g.conv1d(h, w2, Some(b2), SUB_KERNEL, SUB_STRIDE, SUB_PAD)?;
        Ok(g.relu(h))
    }

    /// Encoder output `H` as a graph node of shape `[N', d_model]`.
    pub fn forward(&self, g: &mut Graph, x: &FeatureSequence, ctx: &mut Ctx) -> Result<Var> {
        if x.dim() != self.feat_dim {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match model V_feat {}",
                x.dim(),
                self.feat_dim
            )));
        }
        let input = g.constant(x.frames().clone());
        let h = self.subsample(g, input)?;
        let n = g.value(h).rows();
        let h = add_positions(g, h, self.pos, n, self.max_positions)?;
        let mut h = ctx.drop(g, h);
        for layer in &self.layers {
            h = layer.forward(g, h, ctx)?;
        }
        self.norm.forward(g, h)
    }
}

/// Adds rows `0..n` of a positional table.
pub(crate) fn add_positions(
    g: &mut Graph,
    x: Var,
    table: ParamId,
    n: usize,
    max_positions: usize,
) -> Result<Var> {
    if n > max_positions {
        return Err(Error::Invalid(format!(
            "sequence of length {n} exceeds max_positions {max_positions}"
        )));
    }
    let t = g.param(table);
    let idx: Vec<usize> = (0..n).collect();
    let p = g.gather_rows(t, &idx)?;
    g.add(x, p)
}
