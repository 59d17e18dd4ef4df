//! Expected bigram counts and the non-monotonic alignment loss.
use ctc_s2ut::ctc::LogProbLattice;
use ctc_s2ut::nmla::{expected_bigrams, nmla_loss_grad, reference_bigrams};
use ctc_s2ut::units::UnitSequence;

fn main() -> ctc_s2ut::Result<()> {
    let lattice = LogProbLattice::from_probs(&[
        vec![0.7, 0.1, 0.2],
        vec![0.1, 0.1, 0.8],
        vec![0.1, 0.8, 0.1],
        vec![0.6, 0.2, 0.2],
    ])?;
    // The target reverses the order the lattice prefers; bigram matching
    // still gives partial credit.
    let y = UnitSequence::from_raw(vec![1, 0, 1]);
    for ((u, v), c) in expected_bigrams(&lattice).iter() {
        println!("E[C({u},{v})] = {c:.4}");
    }
    for ((u, v), c) in reference_bigrams(&y).iter() {
        println!("C_ref({u},{v}) = {c}");
    }
    let r = nmla_loss_grad(&lattice, &y)?;
    println!("matched {:.4}, F1 {:.4}, loss {:.4}", r.matched, r.f1, r.loss);
    Ok(())
}
