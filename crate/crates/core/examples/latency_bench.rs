//! Batch-size-1 decode latency of the two decoders by input length. The
//! models are untrained, so the autoregressive side usually runs to its
//! length cap; this shows the cost shape, not translation quality.
use ctc_s2ut::cli::bench_latency;
use ctc_s2ut::model::{ArModel, ModelConfig, NarModel, Variant};
use ctc_s2ut::pipeline::synth::{Split, SynthTask, SynthTaskSpec};

fn main() -> ctc_s2ut::Result<()> {
    let spec = SynthTaskSpec { bench: 12, bench_min_phones: 5, bench_max_phones: 40, ..SynthTaskSpec::default() };
    let data = SynthTask::new(&spec)?.generate(Split::Bench);
    let mut cfg = ModelConfig {
        d_model: 32,
        heads: 4,
        ffn_dim: 64,
        upsample: 4,
        units: spec.units,
        feat_dim: spec.feat_dim,
        variant: Variant::Ar,
        max_positions: 1024,
        ..ModelConfig::default()
    };
    let ar = ArModel::new(&cfg, 1)?;
    cfg.variant = Variant::Nar;
    let nar = NarModel::new(&cfg, 2)?;
    let report = bench_latency(&ar, &nar, &data, &[0, 60, 120], 2)?;
    print!("{}", report.to_text());
    for s in &report.samples {
        println!("frames {:4}: AR passes {:4}, NAR passes {}", s.frames, s.ar_passes, s.nar_passes);
    }
    Ok(())
}
