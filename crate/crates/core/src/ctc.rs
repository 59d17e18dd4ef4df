//! Exact CTC likelihood, its gradient, Viterbi alignment and greedy decoding.
//!
//! All dynamic programs run over the expanded label sequence
//! `ε y_1 ε y_2 … y_M ε` (length `2M + 1`). A skip from state `s - 2` to `s`
//! is allowed only when `s` holds a unit that differs from the unit at
//! `s - 2`, which is what forces a blank between repeated units.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Tensor};
use crate::units::{collapse_ids, min_alignment_length, Alignment, UnitSequence, UnitVocab};

/// Values at or below this are treated as `log 0`.
pub const LOG_ZERO_THRESHOLD: f64 = -1e30;

/// Returns true for the `log 0` sentinel.
pub fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO_THRESHOLD
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// `T × (K+1)` table of per-position log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    t: usize,
    width: usize,
    logp: Vec<f64>,
}

impl LogProbLattice {
    /// Validates that each row is a log-distribution.
    pub fn new(t: usize, width: usize, logp: Vec<f64>) -> Result<Self> {
        let lattice = Self::new_unchecked(t, width, logp)?;
        for row in 0..t {
            let r = lattice.row(row);
            let lse = logsumexp(r);
            if (lse.abs() > NORMALIZATION_TOL) || r.iter().any(|&x| x > NORMALIZATION_TOL) {
                return Err(Error::UnnormalizedLattice { row, lse });
            }
        }
        Ok(lattice)
    }

    /// Builds a lattice without the normalization check. Only the DP entry
    /// points that document it accept such tables meaningfully.
    pub fn new_unchecked(t: usize, width: usize, logp: Vec<f64>) -> Result<Self> {
        if width < 2 || logp.len() != t * width {
            return Err(Error::Shape(format!(
                "lattice data of length {} does not fit {t} x {width}",
                logp.len()
            )));
        }
        Ok(LogProbLattice { t, width, logp })
    }

    /// Takes a `[T, K+1]` tensor of log-probabilities.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("lattice tensor has shape {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Rows of probabilities, each summing to one.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let logp = rows.iter().flatten().map(|p| p.ln()).collect();
        Self::new(rows.len(), width, logp)
    }

    /// Row-wise log-softmax of arbitrary scores.
    pub fn from_scores(t: usize, width: usize, scores: &[f64]) -> Result<Self> {
        if scores.len() != t * width {
            return Err(Error::Shape("score table size".into()));
        }
        let mut logp = scores.to_vec();
        for row in logp.chunks_mut(width) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::new(t, width, logp)
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blank(&self) -> usize {
        self.width - 1
    }

    pub fn vocab(&self) -> UnitVocab {
        UnitVocab::new(self.width - 1).expect("width >= 2")
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.logp[t * self.width..(t + 1) * self.width]
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.logp[t * self.width + v]
    }

    pub fn prob(&self, t: usize, v: usize) -> f64 {
        self.get(t, v).exp()
    }

    pub fn data(&self) -> &[f64] {
        &self.logp
    }

    /// Log-probability of a single alignment under the factorized model.
    pub fn alignment_log_prob(&self, a: &Alignment) -> f64 {
        assert_eq!(a.len(), self.t);
        a.tokens().iter().enumerate().map(|(t, &v)| self.get(t, v)).sum()
    }

    /// Per-position argmax, ties to the smallest id.
    pub fn argmax_alignment(&self) -> Alignment {
        let tokens = (0..self.t)
            .map(|t| {
                let r = self.row(t);
                let mut best = 0;
                for v in 1..self.width {
                    if r[v] > r[best] {
                        best = v;
                    }
                }
                best
            })
            .collect();
        Alignment::from_raw(tokens)
    }
}

fn expand(y: &UnitSequence, blank: usize) -> Vec<usize> {
    let mut labels = Vec::with_capacity(2 * y.len() + 1);
    labels.push(blank);
    for &u in y.units() {
        labels.push(u);
        labels.push(blank);
    }
    labels
}

/// Whether state `s` may be entered from `s - 2`.
fn can_skip(labels: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && labels[s] != blank && labels[s] != labels[s - 2]
}

fn check_target(lattice: &LogProbLattice, y: &UnitSequence) -> Result<()> {
    y.check(lattice.vocab())
}

/// Forward variables `alpha[t][s]` (log space), flattened row-major.
fn forward(lattice: &LogProbLattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, s_len, blank) = (lattice.len(), labels.len(), lattice.blank());
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lattice.get(0, labels[0]);
    if s_len > 1 {
        alpha[1] = lattice.get(0, labels[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut terms = [prev[s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if can_skip(labels, s, blank) {
                terms[2] = prev[s - 2];
            }
            cur[s] = logsumexp(&terms) + lattice.get(t, labels[s]);
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: log-probability of emitting positions
/// `t..T` starting in state `s`, including the emission at `t`.
fn backward(lattice: &LogProbLattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, s_len, blank) = (lattice.len(), labels.len(), lattice.blank());
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lattice.get(t_len - 1, labels[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lattice.get(t_len - 1, labels[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut terms = [next[s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && can_skip(labels, s + 2, blank) {
                terms[2] = next[s + 2];
            }
            cur[s] = logsumexp(&terms) + lattice.get(t, labels[s]);
        }
    }
    beta
}

fn final_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        logsumexp(&[last[s_len - 1], last[s_len - 2]])
    } else {
        last[0]
    }
}

/// `log P(Y | X)` summed over every alignment that collapses to `y`.
/// Returns `-inf` (see [`is_log_zero`]) when the lattice is too short.
pub fn ctc_log_likelihood(lattice: &LogProbLattice, y: &UnitSequence) -> Result<f64> {
    check_target(lattice, y)?;
    if lattice.is_empty() || lattice.len() < min_alignment_length(y) {
        return Ok(f64::NEG_INFINITY);
    }
    let labels = expand(y, lattice.blank());
    let alpha = forward(lattice, &labels);
    Ok(final_log_prob(&alpha, lattice.len(), labels.len()))
}

/// CTC loss and its gradient with respect to the lattice entries.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    /// `-log P(Y | X)`.
    pub loss: f64,
    /// `[T, K+1]`; entry `(t, v)` is minus the posterior of `a_t = v`.
    pub grad: Tensor,
}

/// Negative log-likelihood and its gradient via forward–backward.
pub fn ctc_loss_grad(lattice: &LogProbLattice, y: &UnitSequence) -> Result<CtcLoss> {
    check_target(lattice, y)?;
    let min = min_alignment_length(y);
    if lattice.is_empty() || lattice.len() < min {
        return Err(Error::Infeasible {
            t: lattice.len(),
            min,
        });
    }
    let labels = expand(y, lattice.blank());
    let (t_len, s_len, width) = (lattice.len(), labels.len(), lattice.width());
    let alpha = forward(lattice, &labels);
    let beta = backward(lattice, &labels);
    let log_p = final_log_prob(&alpha, t_len, s_len);

    let mut grad = Tensor::zeros(&[t_len, width]);
    for t in 0..t_len {
        let g = grad.row_mut(t);
        for s in 0..s_len {
            let idx = t * s_len + s;
            let v = labels[s];
            let occ = alpha[idx] + beta[idx] - lattice.get(t, v) - log_p;
            if occ > f64::NEG_INFINITY {
                g[v] -= occ.exp();
            }
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// Highest-probability alignment among those collapsing to `y`.
///
/// Ties are broken toward the smallest expanded-state index, both when
/// choosing the final state and at every backtrace step.
pub fn viterbi_alignment(lattice: &LogProbLattice, y: &UnitSequence) -> Result<Alignment> {
    check_target(lattice, y)?;
    let min = min_alignment_length(y);
    if lattice.is_empty() || lattice.len() < min {
        return Err(Error::Infeasible {
            t: lattice.len(),
            min,
        });
    }
    let blank = lattice.blank();
    let labels = expand(y, blank);
    let (t_len, s_len) = (lattice.len(), labels.len());
    let mut score = vec![f64::NEG_INFINITY; t_len * s_len];
    let mut back = vec![0usize; t_len * s_len];
    score[0] = lattice.get(0, labels[0]);
    if s_len > 1 {
        score[1] = lattice.get(0, labels[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            // Predecessors in increasing state order; strict `>` keeps the
            // smallest index on ties.
            let skip = can_skip(&labels, s, blank).then(|| s - 2);
            let step = s.checked_sub(1);
            let mut best: Option<(usize, f64)> = None;
            for p in skip.into_iter().chain(step).chain([s]) {
                let v = score[prev + p];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((p, v));
                }
            }
            let (best_s, best) = best.expect("state s is always a candidate");
            score[t * s_len + s] = best + lattice.get(t, labels[s]);
            back[t * s_len + s] = best_s;
        }
    }
    let last = (t_len - 1) * s_len;
    let mut s = if s_len > 1 && score[last + s_len - 2] >= score[last + s_len - 1] {
        s_len - 2
    } else {
        s_len - 1
    };
    let mut tokens = vec![0; t_len];
    for t in (0..t_len).rev() {
        tokens[t] = labels[s];
        if t > 0 {
            s = back[t * s_len + s];
        }
    }
    Ok(Alignment::from_raw(tokens))
}

/// One-pass parallel decode: per-position argmax, then collapse.
pub fn greedy_decode(lattice: &LogProbLattice) -> UnitSequence {
    collapse_ids(lattice.argmax_alignment().tokens(), lattice.blank())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_diff, max_rel_error};
    use crate::units::{collapse, enumerate_preimage, for_each_alignment, DEFAULT_ENUMERATION_CAP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 0;
    const B: usize = 1;
    const E: usize = 2;

    fn seq(u: &[usize]) -> UnitSequence {
        UnitSequence::from_raw(u.to_vec())
    }

    fn random_lattice<R: Rng>(t: usize, width: usize, rng: &mut R) -> LogProbLattice {
        let scores: Vec<f64> = (0..t * width).map(|_| rng.random_range(-2.0..2.0)).collect();
        LogProbLattice::from_scores(t, width, &scores).unwrap()
    }

    /// log of the sum over the enumerated preimage.
    fn brute_log_likelihood(l: &LogProbLattice, y: &UnitSequence) -> f64 {
        let pre = enumerate_preimage(y, l.len(), l.vocab(), DEFAULT_ENUMERATION_CAP).unwrap();
        let terms: Vec<f64> = pre.iter().map(|a| l.alignment_log_prob(a)).collect();
        logsumexp(&terms)
    }

    #[test]
    fn uniform_lattice_single_unit() {
        let l = LogProbLattice::from_probs(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap();
        let ll = ctc_log_likelihood(&l, &seq(&[A])).unwrap();
        assert!((ll - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((ll - brute_log_likelihood(&l, &seq(&[A]))).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_gives_sentinel_and_error() {
        let l = LogProbLattice::from_probs(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap();
        let ll = ctc_log_likelihood(&l, &seq(&[A, A])).unwrap();
        assert!(is_log_zero(ll) && !ll.is_nan());
        match ctc_loss_grad(&l, &seq(&[A, A])) {
            Err(Error::Infeasible { t: 2, min: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(viterbi_alignment(&l, &seq(&[A, A])).is_err());
    }

    #[test]
    fn empty_target_on_certain_blank_is_one() {
        let mut logp = vec![f64::NEG_INFINITY; 4 * 3];
        for t in 0..4 {
            logp[t * 3 + E] = 0.0;
        }
        let l = LogProbLattice::new(4, 3, logp).unwrap();
        assert_eq!(ctc_log_likelihood(&l, &seq(&[])).unwrap(), 0.0);
    }

    #[test]
    fn rejects_unnormalized_rows_and_bad_targets() {
        assert!(matches!(
            LogProbLattice::new(1, 3, vec![0.0, 0.0, 0.0]),
            Err(Error::UnnormalizedLattice { row: 0, .. })
        ));
        let l = LogProbLattice::from_probs(&[vec![1.0 / 3.0; 3]]).unwrap();
        assert!(ctc_log_likelihood(&l, &seq(&[2])).is_err());
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let l = random_lattice(7, 4, &mut rng);
            let y = seq(&[0, 2, 2, 1]);
            let out = ctc_loss_grad(&l, &y).unwrap();
            for t in 0..7 {
                let s: f64 = out.grad.row(t).iter().sum();
                assert!((s + 1.0).abs() < 1e-9, "row {t} sums to {s}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, w) = (3, 3);
        let y = seq(&[A, B]);
        let scores: Vec<f64> = (0..t * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let loss_of = |z: &[f64]| {
            let l = LogProbLattice::from_scores(t, w, z).unwrap();
            -ctc_log_likelihood(&l, &y).unwrap()
        };
        let numeric = central_diff(loss_of, &scores, 1e-4);
        let l = LogProbLattice::from_scores(t, w, &scores).unwrap();
        let g = ctc_loss_grad(&l, &y).unwrap().grad;
        // Chain through log-softmax: dz = g - p * sum(g).
        let mut analytic = vec![0.0; t * w];
        for r in 0..t {
            let gs: f64 = g.row(r).iter().sum();
            for v in 0..w {
                analytic[r * w + v] = g.row(r)[v] - l.prob(r, v) * gs;
            }
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn matches_enumeration_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let k = rng.random_range(1..=3);
            let t = rng.random_range(1..=6);
            let m = rng.random_range(0..=4);
            let y = seq(&(0..m).map(|_| rng.random_range(0..k)).collect::<Vec<_>>());
            let l = random_lattice(t, k + 1, &mut rng);
            let dp = ctc_log_likelihood(&l, &y).unwrap();
            let bf = brute_log_likelihood(&l, &y);
            if is_log_zero(bf) {
                assert!(is_log_zero(dp));
            } else {
                assert!((dp - bf).abs() < 1e-9, "dp {dp} bf {bf}");
            }
        }
    }

    #[test]
    fn viterbi_worked_example() {
        let l = LogProbLattice::from_probs(&[vec![0.6, 0.1, 0.3], vec![0.2, 0.1, 0.7]]).unwrap();
        let a = viterbi_alignment(&l, &seq(&[A])).unwrap();
        assert_eq!(a.tokens(), &[A, E]);
        assert!((l.alignment_log_prob(&a) - 0.42f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn viterbi_empty_target_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_lattice(5, 3, &mut rng);
        assert_eq!(viterbi_alignment(&l, &seq(&[])).unwrap().tokens(), &[E; 5]);
    }

    #[test]
    fn viterbi_tie_break_prefers_smaller_states() {
        let l = LogProbLattice::from_probs(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap();
        // Final state: unit (index 1) beats trailing blank (index 2); the
        // first step then prefers the leading blank (index 0).
        let a = viterbi_alignment(&l, &seq(&[A])).unwrap();
        assert_eq!(a.tokens(), &[E, A]);
        assert_eq!(viterbi_alignment(&l, &seq(&[A])).unwrap(), a);
    }

    #[test]
    fn viterbi_is_the_enumerated_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..60 {
            let k = rng.random_range(1..=3);
            let t = rng.random_range(1..=6);
            let m = rng.random_range(0..=4);
            let y = seq(&(0..m).map(|_| rng.random_range(0..k)).collect::<Vec<_>>());
            let l = random_lattice(t, k + 1, &mut rng);
            let pre = enumerate_preimage(&y, t, l.vocab(), DEFAULT_ENUMERATION_CAP).unwrap();
            let Some(best) = pre.iter().max_by(|a, b| {
                l.alignment_log_prob(a).total_cmp(&l.alignment_log_prob(b))
            }) else {
                assert!(viterbi_alignment(&l, &y).is_err());
                continue;
            };
            let a = viterbi_alignment(&l, &y).unwrap();
            assert_eq!(collapse(&a, l.vocab()).unwrap(), y);
            assert!((l.alignment_log_prob(&a) - l.alignment_log_prob(best)).abs() < 1e-12);
            assert_eq!(&a, best);
        }
    }

    #[test]
    fn greedy_decode_examples() {
        let onehot = |tokens: &[usize]| {
            let rows: Vec<Vec<f64>> = tokens
                .iter()
                .map(|&v| (0..3).map(|j| if j == v { 0.8 } else { 0.1 }).collect())
                .collect();
            LogProbLattice::from_probs(&rows).unwrap()
        };
        assert_eq!(greedy_decode(&onehot(&[A, A, E, B])), seq(&[A, B]));
        assert_eq!(greedy_decode(&onehot(&[E, E, E])), seq(&[]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let l = random_lattice(8, 4, &mut rng);
            let mut manual = Vec::new();
            let mut prev = None;
            for t in 0..8 {
                let row = l.row(t);
                let best = (0..4).fold(0, |b, v| if row[v] > row[b] { v } else { b });
                if Some(best) != prev && best != 3 {
                    manual.push(best);
                }
                prev = Some(best);
            }
            assert_eq!(greedy_decode(&l).units(), manual.as_slice());
        }
    }

    #[test]
    fn adding_mass_to_target_symbols_never_lowers_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..30 {
            let l = random_lattice(5, 3, &mut rng);
            let y = seq(&[A, B, A]);
            let base = ctc_log_likelihood(&l, &y).unwrap();
            for t in 0..5 {
                for &v in &[A, B] {
                    let mut data = l.data().to_vec();
                    data[t * 3 + v] += h;
                    let bumped = LogProbLattice::new_unchecked(5, 3, data).unwrap();
                    let up = ctc_log_likelihood(&bumped, &y).unwrap();
                    assert!((up - base) / h >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn enumeration_helper_counts() {
        let mut n = 0;
        for_each_alignment(3, 3, 100, |_| n += 1).unwrap();
        assert_eq!(n, 27);
    }
}
