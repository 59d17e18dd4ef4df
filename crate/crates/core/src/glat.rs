//! Glancing training: reveal part of the best alignment to the decoder input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{viterbi_alignment, LogProbLattice};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::units::UnitSequence;

/// Linearly decaying glancing ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlancingSchedule {
    pub start_ratio: f64,
    pub end_ratio: f64,
    pub decay_steps: u64,
}

impl Default for GlancingSchedule {
    fn default() -> Self {
        GlancingSchedule {
            start_ratio: 0.5,
            end_ratio: 0.3,
            decay_steps: 4000,
        }
    }
}

impl GlancingSchedule {
    pub fn new(start_ratio: f64, end_ratio: f64, decay_steps: u64) -> Result<Self> {
        if !(0.0 <= end_ratio && end_ratio <= start_ratio && start_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "glancing ratios must satisfy 0 <= end ({end_ratio}) <= start ({start_ratio}) <= 1"
            )));
        }
        Ok(GlancingSchedule {
            start_ratio,
            end_ratio,
            decay_steps,
        })
    }

    /// A schedule that always returns `ratio`.
    pub fn constant(ratio: f64) -> Result<Self> {
        Self::new(ratio, ratio, 0)
    }

    pub fn ratio_at(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end_ratio;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start_ratio + (self.end_ratio - self.start_ratio) * frac
    }
}

/// Which decoder rows to overwrite, and with which alignment tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlancePlan {
    /// Sorted, distinct positions in `0..T`.
    pub positions: Vec<usize>,
    /// Token of the best alignment at each position.
    pub tokens: Vec<usize>,
    /// Hamming distance between the greedy and best alignments.
    pub distance: usize,
}

impl GlancePlan {
    pub fn n_replaced(&self) -> usize {
        self.positions.len()
    }
}

/// Number of rows to reveal: `⌈ratio · d⌉`, clamped to `[0, T]`.
pub fn replacement_count(ratio: f64, distance: usize, t: usize) -> usize {
    if ratio <= 0.0 || distance == 0 {
        return 0;
    }
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let raw = ratio * distance as f64;
    let n = (raw - 1e-9).ceil().max(0.0) as usize;
    n.min(t)
}

/// Seeded permutation of `0..t`; prefixes of it give nested position sets.
pub fn position_order(t: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(&mut rng);
    order
}

/// Plans a glance from the first-pass lattice. Fails with `Infeasible` when
/// `y` has no alignment of length `T`.
pub fn plan_glance(
    lattice: &LogProbLattice,
    y: &UnitSequence,
    ratio: f64,
    seed: u64,
) -> Result<GlancePlan> {
    let best = viterbi_alignment(lattice, y)?;
    let greedy = lattice.argmax_alignment();
    let distance = greedy.hamming(&best);
    let n = replacement_count(ratio, distance, lattice.len());
    let mut positions = position_order(lattice.len(), seed);
    positions.truncate(n);
    positions.sort_unstable();
    let tokens = positions.iter().map(|&i| best.tokens()[i]).collect();
    Ok(GlancePlan {
        positions,
        tokens,
        distance,
    })
}

/// Applies a plan outside any graph: rows of `e` at the planned positions
/// are replaced by rows of `table`.
pub fn apply_glance(e: &Tensor, table: &Tensor, plan: &GlancePlan) -> Result<Tensor> {
    if e.cols() != table.cols() {
        return Err(Error::Shape(format!(
            "decoder input width {} differs from embedding width {}",
            e.cols(),
            table.cols()
        )));
    }
    let mut out = e.clone();
    for (&pos, &tok) in plan.positions.iter().zip(&plan.tokens) {
        if pos >= e.rows() || tok >= table.rows() {
            return Err(Error::Shape(format!(
                "glance position {pos} / token {tok} out of range"
            )));
        }
        out.row_mut(pos).copy_from_slice(table.row(tok));
    }
    Ok(out)
}

/// Plan and apply in one go, returning the modified input and the number of
/// replaced rows.
pub fn glance(
    e: &Tensor,
    table: &Tensor,
    lattice: &LogProbLattice,
    y: &UnitSequence,
    ratio: f64,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let plan = plan_glance(lattice, y, ratio, seed)?;
    Ok((apply_glance(e, table, &plan)?, plan.n_replaced()))
}
