//! Corpus BLEU over unit sequences.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::units::UnitSequence;

const MAX_ORDER: usize = 4;

fn ngram_counts(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics: clipped matches and totals per order, lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_pair(&mut self, hyp: &[usize], reference: &[usize]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// Score in `[0, 1]`. Orders two and up get add-one smoothing when they
    /// have no matches; an empty hypothesis corpus scores 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_ORDER {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            let p = if n == 0 {
                m / t
            } else if self.matches[n] == 0 {
                1.0 / (t + 1.0)
            } else {
                m / t
            };
            if p == 0.0 {
                return 0.0;
            }
            log_p += p.ln() / MAX_ORDER as f64;
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * log_p.exp()
    }
}

pub fn unit_bleu(hyps: &[UnitSequence], refs: &[UnitSequence]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one pair".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_pair(h.units(), r.units());
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> UnitSequence {
        UnitSequence::from_raw(v.to_vec())
    }

    #[test]
    fn identity_scores_one() {
        let h = vec![seq(&[1, 2, 3, 4, 5]), seq(&[2])];
        assert!((unit_bleu(&h, &h).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let h = vec![seq(&[]), seq(&[])];
        let r = vec![seq(&[1, 2]), seq(&[3])];
        assert_eq!(unit_bleu(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let b = unit_bleu(&[seq(&[0, 1, 2, 3])], &[seq(&[0, 1, 2, 3, 4])]).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12, "{b}");
    }

    #[test]
    fn smoothing_on_missing_higher_orders() {
        // Unigrams match, no bigram does: p2 = p3 = p4 = 1 / (t + 1).
        let b = unit_bleu(&[seq(&[2, 1])], &[seq(&[1, 2])]).unwrap();
        let expected = (1.0f64.ln() + 0.5f64.ln() + 1.0f64.ln() + 1.0f64.ln()) / 4.0;
        assert!((b - expected.exp()).abs() < 1e-12, "{b}");
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(unit_bleu(&[seq(&[1])], &[]).is_err());
    }
}
