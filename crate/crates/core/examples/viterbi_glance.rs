//! Best alignment, greedy decoding and a glancing plan on one lattice.
use ctc_s2ut::ctc::{greedy_decode, viterbi_alignment, LogProbLattice};
use ctc_s2ut::glat::{plan_glance, GlancingSchedule};
use ctc_s2ut::units::UnitSequence;

fn main() -> ctc_s2ut::Result<()> {
    let lattice = LogProbLattice::from_probs(&[
        vec![0.2, 0.1, 0.7],
        vec![0.5, 0.2, 0.3],
        vec![0.1, 0.2, 0.7],
        vec![0.3, 0.3, 0.4],
        vec![0.1, 0.6, 0.3],
        vec![0.1, 0.1, 0.8],
    ])?;
    let y = UnitSequence::from_raw(vec![0, 1, 0]);
    let best = viterbi_alignment(&lattice, &y)?;
    println!("greedy alignment {:?} -> [{}]", lattice.argmax_alignment().tokens(), greedy_decode(&lattice));
    println!("best alignment for [{y}]: {:?}", best.tokens());

    let schedule = GlancingSchedule::new(0.5, 0.3, 1000)?;
    for step in [0, 500, 1000] {
        let ratio = schedule.ratio_at(step);
        let plan = plan_glance(&lattice, &y, ratio, 42)?;
        println!(
            "step {step}: ratio {ratio:.2}, distance {}, reveal positions {:?} with tokens {:?}",
            plan.distance, plan.positions, plan.tokens
        );
    }
    Ok(())
}
