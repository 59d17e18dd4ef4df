//! Turning continuous frames into discrete units with k-means.
use ctc_s2ut::pipeline::synth::{Split, SynthTask, SynthTaskSpec};
use ctc_s2ut::pipeline::{kmeans_assign, kmeans_fit};

fn main() -> ctc_s2ut::Result<()> {
    let spec = SynthTaskSpec { train: 50, ..SynthTaskSpec::default() };
    let task = SynthTask::new(&spec)?;
    let data = task.generate(Split::Train);
    let frames: Vec<Vec<f64>> = data
        .samples
        .iter()
        .flat_map(|s| (0..s.features.len()).map(|i| s.features.frames().row(i).to_vec()).collect::<Vec<_>>())
        .collect();
    let (book, history) = kmeans_fit(&frames, spec.phones, 10, 7)?;
    println!("{} frames, objective per iteration: {:.3?}", frames.len(), history);
    let first = &data.samples[0].features;
    let units: Vec<usize> = (0..first.len()).map(|i| kmeans_assign(first.frames().row(i), &book)).collect();
    println!("frame units of sample 0: {units:?}");
    Ok(())
}
