use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{add_positions, Encoder, FeatureSequence};
use super::layers::{Ctx, DecoderLayer, Linear, Norm, StepCache};
use super::{DecodeStats, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::units::UnitSequence;

/// Added to the begin-of-sequence logit so it is never predicted.
const MASKED_LOGIT: f64 = -1e9;

/// Autoregressive baseline: same encoder, causal decoder over
/// `K` units plus begin (`K`) and end (`K + 1`) symbols.
#[derive(Clone, Debug)]
pub struct ArModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    norm: Norm,
    out: Linear,
}

/// Output of greedy generation.
#[derive(Clone, Debug, PartialEq)]
pub struct ArOutput {
    pub units: UnitSequence,
    pub stats: DecodeStats,
}

impl ArModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.variant = Variant::Ar;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let d = cfg.d_model;
        let embed = params.add_uniform("ar_decoder.embed", &[cfg.units + 2, d], 1, &mut rng);
        let pos = params.add_uniform("ar_decoder.pos", &[cfg.max_positions, d], d, &mut rng);
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("ar_decoder.layers.{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let norm = Norm::new(&mut params, "ar_decoder.norm", d);
        let out = Linear::new(&mut params, "ar_decoder.out", d, cfg.units + 2, &mut rng);
        Ok(ArModel {
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
        let mut model = ArModel::new(&ckpt.config, 0)?;
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

    pub fn bos(&self) -> usize {
        self.cfg.units
    }

    pub fn eos(&self) -> usize {
        self.cfg.units + 1
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let h = self.encoder.forward(&mut g, x, &mut Ctx::eval())?;
        Ok(g.value(h).clone())
    }

    /// Causal decoder over `[BOS] + prefix`, returning `[len+1, K+2]` log-probs.
    fn decode_nodes(&self, g: &mut Graph, inputs: &[usize], h: Var, ctx: &mut Ctx) -> Result<Var> {
        let table = g.param(self.embed);
        let x = g.embedding(table, inputs)?;
        let x = add_positions(g, x, self.pos, inputs.len(), self.cfg.max_positions)?;
        let mut x = ctx.drop(g, x);
        for layer in &self.layers {
            x = layer.forward(g, x, h, &AttnMask::Causal, ctx)?;
        }
        let x = self.norm.forward(g, x)?;
        let logits = self.out.forward(g, x)?;
        let mut mask = Tensor::zeros(&[self.cfg.units + 2]);
        mask.data_mut()[self.bos()] = MASKED_LOGIT;
        let mask = g.constant(mask);
        let logits = g.add_row(logits, mask)?;
        g.log_softmax(logits, 1)
    }

    /// Next-symbol distribution (probabilities over `K + 2` ids) given the
    /// prefix generated so far and the encoder output.
    pub fn ar_decode_step(&self, prefix: &UnitSequence, h: &Tensor) -> Result<Vec<f64>> {
        let cap = self.cfg.max_positions.saturating_sub(1);
        if prefix.len() >= cap {
            return Err(Error::Invalid(format!(
                "prefix length {} reaches the position cap {cap}",
                prefix.len()
            )));
        }
        prefix.check(crate::units::UnitVocab::new(self.cfg.units)?)?;
        let mut g = Graph::inference(&self.params);
        let hv = g.constant(h.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.bos());
        inputs.extend_from_slice(prefix.units());
        let logp = self.decode_nodes(&mut g, &inputs, hv, &mut Ctx::eval())?;
        let out = g.value(logp);
        Ok(out.row(out.rows() - 1).iter().map(|x| x.exp()).collect())
    }

    /// One incremental decoder pass: feeds `token` at position `pos` and
    /// returns log-probabilities of the next symbol.
    fn step(&self, token: usize, pos: usize, caches: &mut [StepCache]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let table = g.param(self.embed);
        let x = g.embedding(table, &[token])?;
        let p = g.param(self.pos);
        let p = g.gather_rows(p, &[pos])?;
        let mut x = g.add(x, p)?;
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            x = layer.step(&mut g, x, cache)?;
        }
        let x = self.norm.forward(&mut g, x)?;
        let logits = self.out.forward(&mut g, x)?;
        let mut row = g.value(logits).data().to_vec();
        row[self.bos()] += MASKED_LOGIT;
        Ok(row)
    }

    /// Greedy generation until end-of-sequence or `2·T` steps, where
    /// `T = λ · ⌊N/4⌋`. Each step runs the decoder on the newest position
    /// only, reusing cached keys and values of earlier positions.
    pub fn generate(&self, x: &FeatureSequence) -> Result<ArOutput> {
        let h = self.encode(x)?;
        let cap = (2 * self.cfg.decoder_len(x.len()))
            .max(1)
            .min(self.cfg.max_positions - 1);
        let mut caches = self
            .layers
            .iter()
            .map(|l| l.start(&self.params, &h))
            .collect::<Result<Vec<_>>>()?;
        let mut units = Vec::new();
        let mut steps = 0;
        let mut truncated = true;
        let mut token = self.bos();
        while units.len() < cap {
            let scores = self.step(token, steps, &mut caches)?;
            steps += 1;
            let best = argmax(&scores);
            if best == self.eos() {
                truncated = false;
                break;
            }
            units.push(best);
            token = best;
        }
        Ok(ArOutput {
            units: UnitSequence::from_raw(units),
            stats: DecodeStats {
                decoder_passes: steps,
                truncated,
            },
        })
    }

    /// Teacher-forced pass. Returns the `[M+1, K+2]` log-prob node and the
    /// target id for each row (`y_1 … y_M, EOS`).
    pub fn forward_teacher(
        &self,
        g: &mut Graph,
        x: &FeatureSequence,
        y: &UnitSequence,
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<usize>)> {
        let h = self.encoder.forward(g, x, ctx)?;
        let mut inputs = vec![self.bos()];
        inputs.extend_from_slice(y.units());
        let mut targets = y.units().to_vec();
        targets.push(self.eos());
        let logp = self.decode_nodes(g, &inputs, h, ctx)?;
        Ok((logp, targets))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
