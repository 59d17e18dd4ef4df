//! Generating the synthetic task and writing it in the on-disk formats.
use ctc_s2ut::pipeline::io::{load_split, write_split, Manifest};
use ctc_s2ut::pipeline::synth::{infeasible_fraction, Split, SynthTask, SynthTaskSpec};

fn main() -> ctc_s2ut::Result<()> {
    let spec = SynthTaskSpec { train: 200, valid: 20, test: 20, bench: 5, ..SynthTaskSpec::default() };
    let task = SynthTask::new(&spec)?;
    for (phone, units) in task.expansion_table().iter().enumerate() {
        println!("phone {phone:2} -> units {units:?}");
    }
    let dir = std::env::temp_dir().join("ctc_s2ut_synth_example");
    let mut manifest = Manifest::default();
    for split in Split::ALL {
        let data = task.generate(split);
        manifest.entries.push(write_split(&dir, split.name(), &data, spec.feat_dim)?);
    }
    manifest.write(&dir)?;
    print!("{}", manifest.to_text());
    let train = load_split(&dir, Split::Train)?;
    for lambda in [2, 4, 6] {
        println!("lambda {lambda}: {:.1}% infeasible", 100.0 * infeasible_fraction(&train, lambda));
    }
    println!("files written under {}", dir.display());
    Ok(())
}
