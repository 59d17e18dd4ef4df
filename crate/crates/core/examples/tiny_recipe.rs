//! The whole two-stage recipe at toy size: teacher, distillation, encoder
//! transfer, glancing CTC training, then NMLA fine-tuning.
use ctc_s2ut::glat::GlancingSchedule;
use ctc_s2ut::model::{transfer_encoder, ArModel, ModelConfig, NarModel, Variant};
use ctc_s2ut::pipeline::synth::{Split, SynthTask, SynthTaskSpec};
use ctc_s2ut::pipeline::train::{evaluate_ar, evaluate_nar};
use ctc_s2ut::pipeline::{distill, train_ar, train_nar, Stage, TrainConfig};

fn main() -> ctc_s2ut::Result<()> {
    let spec = SynthTaskSpec { train: 300, test: 50, max_phones: 8, ..SynthTaskSpec::default() };
    let task = SynthTask::new(&spec)?;
    let (train, test) = (task.generate(Split::Train), task.generate(Split::Test));

    let mut cfg = ModelConfig {
        d_model: 32,
        heads: 4,
        ffn_dim: 64,
        upsample: 4,
        units: spec.units,
        feat_dim: spec.feat_dim,
        variant: Variant::Ar,
        ..ModelConfig::default()
    };
    let base = TrainConfig { steps: 300, peak_lr: 3e-3, warmup: 30, batch_frames: 400, ..TrainConfig::ar() };

    let mut ar = ArModel::new(&cfg, 1)?;
    train_ar(&mut ar, &base, &train, None, None)?;
    println!("teacher unit-BLEU {:.4}", evaluate_ar(&ar, &test)?);

    let (kd, report) = distill(&ar, &train)?;
    println!("distilled {} targets", report.samples);

    cfg.variant = Variant::Nar;
    let mut nar = NarModel::new(&cfg, 2)?;
    println!("copied {} encoder tensors", transfer_encoder(&ar, &mut nar)?);
    let stage1 = TrainConfig { glancing: Some(GlancingSchedule::new(0.5, 0.3, 300)?), ..base.clone() };
    let r = train_nar(&mut nar, Stage::NarStage1, &stage1, &kd, None, None)?;
    println!("stage 1 final loss {:.4}, unit-BLEU {:.4}", r.final_loss(), evaluate_nar(&nar, &test)?);

    let stage2 = TrainConfig {
        steps: 100,
        peak_lr: 1e-3,
        warmup: 10,
        glancing: Some(GlancingSchedule::constant(0.3)?),
        ..base
    };
    train_nar(&mut nar, Stage::NarStage2, &stage2, &kd, None, None)?;
    println!("stage 2 unit-BLEU {:.4}", evaluate_nar(&nar, &test)?);
    Ok(())
}
