use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{add_positions, Encoder, FeatureSequence};
use super::layers::{Ctx, DecoderLayer, Linear, Norm};
use super::{upsample_index, DecodeStats, ModelConfig, Variant};
use crate::ctc::{greedy_decode, LogProbLattice};
use crate::error::{Error, Result};
use crate::glat::GlancePlan;
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::units::UnitSequence;

/// Parallel CTC model: encoder, λ× upsampler and bidirectional decoder.
#[derive(Clone, Debug)]
pub struct NarModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    norm: Norm,
    out: Linear,
}

/// Graph nodes produced by one training forward pass.
pub struct NarForward {
    pub encoded: Var,
    pub logp: Var,
}

impl NarModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.variant = Variant::Nar;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let d = cfg.d_model;
        // Token embeddings are only used for glancing; the blank has its own row.
        let embed = params.add_uniform("decoder.embed", &[cfg.units + 1, d], 1, &mut rng);
        let pos = params.add_uniform("decoder.pos", &[cfg.max_positions, d], d, &mut rng);
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("decoder.layers.{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let norm = Norm::new(&mut params, "decoder.norm", d);
        let out = Linear::new(&mut params, "decoder.out", d, cfg.units + 1, &mut rng);
        Ok(NarModel {
            cfg,
            params,
            encoder,
            embed,
            pos,
            layers,
            norm,
            out,
        })
    }

    /// Writes a `CS2U` checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        super::checkpoint::save(path, &self.cfg, &self.params)
    }

    /// Loads a checkpoint. With `expected`, the stored config must match it.
    pub fn load(path: &std::path::Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = super::checkpoint::load(path, expected)?;
        let mut model = NarModel::new(&ckpt.config, 0)?;
        if ckpt.config.variant != model.cfg.variant {
            return Err(Error::ConfigMismatch {
                field: "variant",
                left: model.cfg.variant.to_string(),
                right: ckpt.config.variant.to_string(),
            });
        }
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Glancing embedding table, `[K+1, d_model]`.
    pub fn embedding_table(&self) -> &Tensor {
        self.params.value(self.embed)
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embed
    }

    /// Encoder output `H`, shape `[⌊N/4⌋, d_model]`.
    pub fn encode(&self, x: &FeatureSequence) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let h = self.encoder.forward(&mut g, x, &mut Ctx::eval())?;
        Ok(g.value(h).clone())
    }

    /// Decoder layers over a pre-positional input `e` (`[T, d]`), returning the
    /// `[T, K+1]` log-probability node.
    fn decode_nodes(&self, g: &mut Graph, e: Var, h: Var, ctx: &mut Ctx) -> Result<Var> {
        let t = g.value(e).rows();
        let x = add_positions(g, e, self.pos, t, self.cfg.max_positions)?;
        let mut x = ctx.drop(g, x);
        for layer in &self.layers {
            x = layer.forward(g, x, h, &AttnMask::None, ctx)?;
        }
        let x = self.norm.forward(g, x)?;
        let logits = self.out.forward(g, x)?;
        g.log_softmax(logits, 1)
    }

    /// One parallel decoder pass from decoder input `e` and encoder output `h`.
    pub fn nar_decode(&self, e: &Tensor, h: &Tensor) -> Result<LogProbLattice> {
        if e.cols() != self.cfg.d_model || h.cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "decoder inputs {:?} / {:?} do not have width {}",
                e.shape(),
                h.shape(),
                self.cfg.d_model
            )));
        }
        let mut g = Graph::inference(&self.params);
        let (ev, hv) = (g.constant(e.clone()), g.constant(h.clone()));
        let logp = self.decode_nodes(&mut g, ev, hv, &mut Ctx::eval())?;
        LogProbLattice::from_tensor(g.value(logp))
    }

    /// Full forward pass on `g`, optionally replacing decoder inputs with
    /// glancing embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &FeatureSequence,
        glance: Option<&GlancePlan>,
        ctx: &mut Ctx,
    ) -> Result<NarForward> {
        let h = self.encoder.forward(g, x, ctx)?;
        let n = g.value(h).rows();
        let mut e = g.gather_rows(h, &upsample_index(n, self.cfg.upsample))?;
        if let Some(plan) = glance.filter(|p| !p.positions.is_empty()) {
            let table = g.param(self.embed);
            let src = g.embedding(table, &plan.tokens)?;
            e = g.replace_rows(e, src, &plan.positions)?;
        }
        let logp = self.decode_nodes(g, e, h, ctx)?;
        Ok(NarForward { encoded: h, logp })
    }

    /// Inference lattice for `x`.
    pub fn lattice(&self, x: &FeatureSequence) -> Result<LogProbLattice> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, x, None, &mut Ctx::eval())?;
        LogProbLattice::from_tensor(g.value(out.logp))
    }

    /// Encode, one decoder pass, argmax and collapse.
    pub fn translate(&self, x: &FeatureSequence) -> Result<(UnitSequence, DecodeStats)> {
        let lattice = self.lattice(x)?;
        let stats = DecodeStats {
            decoder_passes: 1,
            truncated: false,
        };
        Ok((greedy_decode(&lattice), stats))
    }
}
