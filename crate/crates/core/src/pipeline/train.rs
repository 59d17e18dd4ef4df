//! Optimizer, learning-rate schedule and the three training stages.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{mix_seed, Dataset};
use crate::bleu::unit_bleu;
use crate::ctc::{ctc_loss_grad, LogProbLattice};
use crate::error::{Error, Result};
use crate::glat::{plan_glance, GlancePlan, GlancingSchedule};
use crate::model::{ArModel, Ctx, NarModel};
use crate::nmla::nmla_loss_grad;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::units::UnitSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ar,
    /// CTC with optional glancing.
    NarStage1,
    /// NMLA fine-tuning with a fixed glancing ratio.
    NarStage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ar => "ar",
            Stage::NarStage1 => "nar1",
            Stage::NarStage2 => "nar2",
        }
    }
}

/// Linear warmup to `peak`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    /// Rate for update number `step` (the first update is step 1).
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return self.peak;
        }
        let s = step as f64;
        let w = self.warmup as f64;
        if step <= self.warmup {
            self.peak * s / w
        } else {
            self.peak * (w / s).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Samples are added to a batch until it holds this many source frames.
    pub batch_frames: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// `None` trains without glancing.
    pub glancing: Option<GlancingSchedule>,
    pub valid_every: u64,
    pub valid_samples: usize,
    /// Abort when the recent loss exceeds this multiple of the first-epoch mean.
    pub divergence_factor: f64,
}

impl TrainConfig {
    pub fn ar() -> Self {
        TrainConfig {
            steps: 8000,
            peak_lr: 1e-3,
            warmup: 800,
            batch_frames: 8000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: 1.0,
            seed: 1,
            glancing: None,
            valid_every: 0,
            valid_samples: 50,
            divergence_factor: 10.0,
        }
    }

    pub fn stage1() -> Self {
        TrainConfig {
            glancing: Some(GlancingSchedule::default()),
            ..Self::ar()
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            steps: 1000,
            peak_lr: 3e-4,
            warmup: 100,
            glancing: Some(GlancingSchedule::constant(0.3).unwrap()),
            ..Self::ar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.peak_lr > 0.0) || self.batch_frames == 0 {
            return Err(Error::Config(
                "steps, peak_lr and batch_frames must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup,
        }
    }
}

/// Adam with bias correction, reading gradients from the store.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g[i];
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g[i] * g[i];
                let vhat = *vi / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub glance_ratio: Option<f64>,
    pub n_replaced_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    /// `(step, unit-BLEU)` on the validation subset.
    pub valid: Vec<(u64, f64)>,
    /// Samples skipped because no alignment of length `T` exists.
    pub skipped_infeasible: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }
}

/// Yields batches of sample indices in a seeded order, reshuffled every epoch.
struct Batcher {
    order: Vec<usize>,
    lengths: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    budget: usize,
}

impl Batcher {
    fn new(data: &Dataset, budget: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..data.len()).collect(),
            lengths: data.samples.iter().map(|s| s.features.len()).collect(),
            pos: 0,
            epoch: 0,
            seed,
            budget,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut frames = 0;
        while frames < self.budget {
            if self.pos == self.order.len() {
                self.pos = 0;
                self.epoch += 1;
                self.shuffle();
                if !batch.is_empty() {
                    break;
                }
            }
            let i = self.order[self.pos];
            self.pos += 1;
            frames += self.lengths[i];
            batch.push(i);
        }
        batch
    }

    fn steps_per_epoch(&self) -> u64 {
        let total: usize = self.lengths.iter().sum();
        total.div_ceil(self.budget).max(1) as u64
    }
}

/// NaN and blow-up detection against the first-epoch mean loss.
struct DivergenceGuard {
    factor: f64,
    first_epoch: u64,
    first: Vec<f64>,
    recent: Vec<f64>,
}

impl DivergenceGuard {
    const WINDOW: usize = 10;

    fn check(&mut self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        if step <= self.first_epoch {
            self.first.push(loss);
            return Ok(());
        }
        self.recent.push(loss);
        if self.recent.len() > Self::WINDOW {
            self.recent.remove(0);
        }
        let base = self.first.iter().sum::<f64>() / self.first.len() as f64;
        let now = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        if self.factor > 0.0 && base > 0.0 && now > self.factor * base {
            return Err(Error::Diverged {
                step,
                reason: format!("recent loss {now:.4} exceeds {}x first-epoch mean {base:.4}", self.factor),
            });
        }
        Ok(())
    }
}

struct MetricsLog {
    out: Option<BufWriter<File>>,
    glancing: bool,
}

impl MetricsLog {
    fn open(path: Option<&Path>, glancing: bool) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
                let header = if glancing {
                    "step\tstage\tloss\tlr\tglance_ratio\tn_replaced_mean\n"
                } else {
                    "step\tstage\tloss\tlr\n"
                };
                w.write_all(header.as_bytes()).map_err(|e| Error::io(p, e))?;
                Some(w)
            }
            None => None,
        };
        Ok(MetricsLog { out, glancing })
    }

    fn line(&mut self, stage: Stage, m: &StepMetrics) -> Result<()> {
        let Some(w) = self.out.as_mut() else {
            return Ok(());
        };
        let mut s = format!("{}\t{}\t{:.6}\t{:.6e}", m.step, stage.name(), m.loss, m.lr);
        if self.glancing {
            write!(
                s,
                "\t{:.4}\t{:.4}",
                m.glance_ratio.unwrap_or(0.0),
                m.n_replaced_mean.unwrap_or(0.0)
            )
            .unwrap();
        }
        s.push('\n');
        w.write_all(s.as_bytes())
            .map_err(|e| Error::io("metrics log", e))
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

/// Per-update bookkeeping shared by both model families.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    stage: Stage,
    batcher: Batcher,
    guard: DivergenceGuard,
    log: MetricsLog,
    report: TrainReport,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, stage: Stage, data: &Dataset, log: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let batcher = Batcher::new(data, cfg.batch_frames, cfg.seed);
        let guard = DivergenceGuard {
            factor: cfg.divergence_factor,
            first_epoch: batcher.steps_per_epoch(),
            first: Vec::new(),
            recent: Vec::new(),
        };
        let glancing = stage != Stage::Ar;
        Ok(Loop {
            cfg,
            stage,
            batcher,
            guard,
            log: MetricsLog::open(log, glancing)?,
            report: TrainReport::default(),
        })
    }

    fn finish_step(&mut self, store: &mut ParamStore, opt: &mut Adam, m: StepMetrics) -> Result<()> {
        self.guard.check(m.step, m.loss)?;
        clip_grad_norm(store, self.cfg.clip);
        opt.step(store, m.lr);
        store.zero_grad();
        self.log.line(self.stage, &m)?;
        if m.step.is_multiple_of(100) {
            debug!("{} step {} loss {:.4} lr {:.2e}", self.stage.name(), m.step, m.loss, m.lr);
        }
        self.report.metrics.push(m);
        Ok(())
    }

    fn wants_validation(&self, step: u64) -> bool {
        self.cfg.valid_every > 0 && (step % self.cfg.valid_every == 0 || step == self.cfg.steps)
    }
}

/// Teacher-forced cross-entropy training of the autoregressive baseline.
pub fn train_ar(
    model: &mut ArModel,
    cfg: &TrainConfig,
    data: &Dataset,
    valid: Option<&Dataset>,
    log: Option<&Path>,
) -> Result<TrainReport> {
    let mut lp = Loop::new(cfg, Stage::Ar, data, log)?;
    let mut opt = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD0));
    let dropout = model.config().dropout;
    for step in 1..=cfg.steps {
        let batch = lp.batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in &batch {
            let s = &data.samples[i];
            let grads = {
                let mut g = Graph::new(model.params());
                let mut ctx = Ctx {
                    dropout,
                    rng: Some(&mut rng),
                };
                let (logp, targets) = model.forward_teacher(&mut g, &s.features, &s.units, &mut ctx)?;
                let lv = g.value(logp);
                let rows = targets.len() as f64;
                let mut seed = Tensor::zeros(lv.shape());
                for (r, &t) in targets.iter().enumerate() {
                    total -= lv.get2(r, t) / rows * scale;
                    seed.data_mut()[r * lv.cols() + t] = -scale / rows;
                }
                g.backward(logp, seed)?.into_params()
            };
            model.params_mut().accumulate(&grads);
        }
        let m = StepMetrics {
            step,
            loss: total,
            lr: cfg.schedule().at(step),
            glance_ratio: None,
            n_replaced_mean: None,
        };
        lp.finish_step(model.params_mut(), &mut opt, m)?;
        if let Some(v) = valid.filter(|_| lp.wants_validation(step)) {
            let b = evaluate_ar(model, &subset(v, cfg.valid_samples))?;
            info!("ar step {step}: valid unit-BLEU {b:.4}");
            lp.report.valid.push((step, b));
        }
    }
    lp.log.finish()?;
    Ok(lp.report)
}

/// Result of the NAR loss on one sample.
enum ItemOutcome {
    Trained { loss: f64, replaced: usize },
    Infeasible,
}

fn nar_item(
    model: &NarModel,
    stage: Stage,
    x: &crate::model::FeatureSequence,
    y: &UnitSequence,
    ratio: f64,
    glance_seed: u64,
    scale: f64,
    ctx: &mut Ctx,
) -> Result<(ItemOutcome, Vec<(crate::numerics::ParamId, Tensor)>)> {
    let plan: Option<GlancePlan> = if ratio > 0.0 {
        // First pass without gradient tracking, only to choose what to reveal.
        let lattice = model.lattice(x)?;
        match plan_glance(&lattice, y, ratio, glance_seed) {
            Ok(p) => Some(p),
            Err(Error::Infeasible { .. }) => return Ok((ItemOutcome::Infeasible, Vec::new())),
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let replaced = plan.as_ref().map_or(0, GlancePlan::n_replaced);
    let mut g = Graph::new(model.params());
    let out = model.forward(&mut g, x, plan.as_ref(), ctx)?;
    let lattice = LogProbLattice::from_tensor(g.value(out.logp))?;
    let use_nmla = stage == Stage::NarStage2 && y.len() >= 2;
    let (loss, mut seed) = if use_nmla {
        let r = nmla_loss_grad(&lattice, y)?;
        (r.loss, r.grad)
    } else {
        match ctc_loss_grad(&lattice, y) {
            Ok(r) => {
                // Per-unit normalization keeps long and short targets comparable.
                let per = 1.0 / y.len().max(1) as f64;
                let mut grad = r.grad;
                grad.data_mut().iter_mut().for_each(|v| *v *= per);
                (r.loss * per, grad)
            }
            Err(Error::Infeasible { .. }) => return Ok((ItemOutcome::Infeasible, Vec::new())),
            Err(e) => return Err(e),
        }
    };
    seed.data_mut().iter_mut().for_each(|v| *v *= scale);
    let grads = g.backward(out.logp, seed)?.into_params();
    Ok((ItemOutcome::Trained { loss, replaced }, grads))
}

/// Trains the parallel model: CTC (stage 1) or NMLA (stage 2), with glancing
/// when configured.
pub fn train_nar(
    model: &mut NarModel,
    stage: Stage,
    cfg: &TrainConfig,
    data: &Dataset,
    valid: Option<&Dataset>,
    log: Option<&Path>,
) -> Result<TrainReport> {
    if stage == Stage::Ar {
        return Err(Error::Invalid("train_nar called with the AR stage".into()));
    }
    let mut lp = Loop::new(cfg, stage, data, log)?;
    let mut opt = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD1));
    let dropout = model.config().dropout;
    for step in 1..=cfg.steps {
        let batch = lp.batcher.next_batch();
        let ratio = cfg.glancing.map_or(0.0, |s| s.ratio_at(step - 1));
        let base_seed = mix_seed(cfg.seed, step);
        let scale = 1.0 / batch.len() as f64;
        let (mut total, mut replaced, mut used) = (0.0, 0usize, 0usize);
        for &i in &batch {
            let s = &data.samples[i];
            let mut ctx = Ctx {
                dropout,
                rng: Some(&mut rng),
            };
            let (outcome, grads) = nar_item(
                model,
                stage,
                &s.features,
                &s.units,
                ratio,
                base_seed ^ i as u64,
                scale,
                &mut ctx,
            )?;
            match outcome {
                ItemOutcome::Trained { loss, replaced: r } => {
                    total += loss * scale;
                    replaced += r;
                    used += 1;
                    model.params_mut().accumulate(&grads);
                }
                ItemOutcome::Infeasible => lp.report.skipped_infeasible += 1,
            }
        }
        let m = StepMetrics {
            step,
            loss: total,
            lr: cfg.schedule().at(step),
            glance_ratio: Some(ratio),
            n_replaced_mean: Some(if used > 0 { replaced as f64 / used as f64 } else { 0.0 }),
        };
        lp.finish_step(model.params_mut(), &mut opt, m)?;
        if let Some(v) = valid.filter(|_| lp.wants_validation(step)) {
            let b = evaluate_nar(model, &subset(v, cfg.valid_samples))?;
            info!("{} step {step}: valid unit-BLEU {b:.4}", stage.name());
            lp.report.valid.push((step, b));
        }
    }
    lp.log.finish()?;
    Ok(lp.report)
}

/// First `n` samples (all when `n` is 0).
pub fn subset(data: &Dataset, n: usize) -> Dataset {
    let n = if n == 0 { data.len() } else { n.min(data.len()) };
    Dataset {
        samples: data.samples[..n].to_vec(),
    }
}

pub fn decode_nar(model: &NarModel, data: &Dataset) -> Result<Vec<UnitSequence>> {
    data.samples
        .iter()
        .map(|s| model.translate(&s.features).map(|(u, _)| u))
        .collect()
}

pub fn decode_ar(model: &ArModel, data: &Dataset) -> Result<Vec<UnitSequence>> {
    data.samples
        .iter()
        .map(|s| model.generate(&s.features).map(|o| o.units))
        .collect()
}

pub fn evaluate_nar(model: &NarModel, data: &Dataset) -> Result<f64> {
    unit_bleu(&decode_nar(model, data)?, &data.units())
}

pub fn evaluate_ar(model: &ArModel, data: &Dataset) -> Result<f64> {
    unit_bleu(&decode_ar(model, data)?, &data.units())
}
