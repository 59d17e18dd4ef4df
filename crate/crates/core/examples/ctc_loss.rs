//! CTC likelihood by dynamic programming, checked against brute force.
use ctc_s2ut::ctc::{ctc_log_likelihood, ctc_loss_grad, LogProbLattice};
use ctc_s2ut::numerics::logsumexp;
use ctc_s2ut::units::{enumerate_preimage, UnitSequence, DEFAULT_ENUMERATION_CAP};

fn main() -> ctc_s2ut::Result<()> {
    // Three positions over units {0, 1} plus blank.
    let lattice = LogProbLattice::from_probs(&[
        vec![0.6, 0.1, 0.3],
        vec![0.2, 0.5, 0.3],
        vec![0.1, 0.3, 0.6],
    ])?;
    let y = UnitSequence::from_raw(vec![0, 1]);
    let dp = ctc_log_likelihood(&lattice, &y)?;
    let paths = enumerate_preimage(&y, lattice.len(), lattice.vocab(), DEFAULT_ENUMERATION_CAP)?;
    let scores: Vec<f64> = paths.iter().map(|a| lattice.alignment_log_prob(a)).collect();
    println!("log P(y|x): dynamic programming {dp:.12}, enumeration {:.12}", logsumexp(&scores));

    let loss = ctc_loss_grad(&lattice, &y)?;
    println!("loss {:.6}", loss.loss);
    for t in 0..lattice.len() {
        let row = loss.grad.row(t);
        println!("  d loss / d logp[{t}] = {row:.4?}  (sum {:.3})", row.iter().sum::<f64>());
    }
    Ok(())
}
