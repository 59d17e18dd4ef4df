//! Non-monotonic alignment loss: one minus the F1 of clipped expected bigram
//! matches between the collapsed alignment distribution and the target.
//!
//! Under the factorized model, a collapsed bigram `(u, v)` comes from
//! positions `t < t'` with `a_t = u`, `a_t' = v` and only blanks strictly in
//! between (the case `u == v`, `t' == t + 1` is one run, not a bigram). With
//! the suffix sums
//!
//! ```text
//! q_t(v) = P_{t+1}(v) + P_{t+1}(ε) q_{t+1}(v)
//! ```
//!
//! the expectation is `E[C(u,v)] = Σ_t P_t(u) (q_t(v) - [u = v] P_{t+1}(v))`.
//! The gradient uses the matching prefix sums
//! `f_t(u) = P_{t-1}(u) + P_{t-1}(ε) f_{t-1}(u)`.

use std::collections::BTreeMap;

use crate::ctc::LogProbLattice;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::units::UnitSequence;

/// Nonnegative counts keyed by ordered unit pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BigramTable {
    counts: BTreeMap<(usize, usize), f64>,
}

impl BigramTable {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.counts.get(&(u, v)).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn add(&mut self, u: usize, v: usize, c: f64) {
        *self.counts.entry((u, v)).or_insert(0.0) += c;
    }
}

/// Integer counts of adjacent pairs in `y`.
pub fn reference_bigrams(y: &UnitSequence) -> BigramTable {
    let mut table = BigramTable::default();
    for w in y.units().windows(2) {
        table.add(w[0], w[1], 1.0);
    }
    table
}

struct Sweeps {
    k: usize,
    /// `probs[t * width + v]`
    probs: Vec<f64>,
    /// `q[t * k + v]`
    q: Vec<f64>,
    /// `f[t * k + u]`
    f: Vec<f64>,
}

impl Sweeps {
    fn new(lattice: &LogProbLattice) -> Self {
        let (t_len, width) = (lattice.len(), lattice.width());
        let k = width - 1;
        let probs: Vec<f64> = lattice.data().iter().map(|x| x.exp()).collect();
        let p = |t: usize, v: usize| probs[t * width + v];
        let mut q = vec![0.0; t_len * k];
        for t in (0..t_len.saturating_sub(1)).rev() {
            for v in 0..k {
                q[t * k + v] = p(t + 1, v) + p(t + 1, k) * q[(t + 1) * k + v];
            }
        }
        let mut f = vec![0.0; t_len * k];
        for t in 1..t_len {
            for u in 0..k {
                f[t * k + u] = p(t - 1, u) + p(t - 1, k) * f[(t - 1) * k + u];
            }
        }
        Sweeps { k, probs, q, f }
    }

    fn p(&self, t: usize, v: usize) -> f64 {
        self.probs[t * (self.k + 1) + v]
    }

    fn t_len(&self) -> usize {
        self.probs.len() / (self.k + 1)
    }

    /// Dense `K × K` matrix of expected collapsed bigram counts.
    fn expected(&self) -> Vec<f64> {
        let (k, t_len) = (self.k, self.t_len());
        let mut e = vec![0.0; k * k];
        for t in 0..t_len {
            for u in 0..k {
                let pu = self.p(t, u);
                if pu == 0.0 {
                    continue;
                }
                for v in 0..k {
                    let mut next = self.q[t * k + v];
                    if u == v && t + 1 < t_len {
                        next -= self.p(t + 1, v);
                    }
                    e[u * k + v] += pu * next;
                }
            }
        }
        e
    }
}

/// Expected count of every collapsed bigram under `P(A | X)`.
pub fn expected_bigrams(lattice: &LogProbLattice) -> BigramTable {
    let sweeps = Sweeps::new(lattice);
    let k = sweeps.k;
    let e = sweeps.expected();
    let mut table = BigramTable::default();
    for u in 0..k {
        for v in 0..k {
            table.counts.insert((u, v), e[u * k + v].max(0.0));
        }
    }
    table
}

/// Loss value, diagnostics, and gradient with respect to the lattice.
#[derive(Clone, Debug)]
pub struct NmlaLoss {
    pub loss: f64,
    pub f1: f64,
    /// `Σ_g min(E[C(g)], C_ref(g))`.
    pub matched: f64,
    pub expected_total: f64,
    pub reference_total: f64,
    /// `[T, K+1]`.
    pub grad: Tensor,
}

/// `1 - F1` from an expected table and a reference table.
pub fn loss_from_tables(expected: &BigramTable, reference: &BigramTable) -> f64 {
    let p = expected.total();
    let r = reference.total();
    if p + r == 0.0 {
        return 0.0;
    }
    let matched: f64 = reference
        .iter()
        .map(|((u, v), c)| expected.get(u, v).min(c))
        .sum();
    1.0 - 2.0 * matched / (p + r)
}

/// `1 - F1` of clipped expected bigram matching and its gradient.
///
/// The `min` passes gradient only when the expected count is strictly below
/// the reference count. When both totals are zero the loss and gradient are
/// zero.
pub fn nmla_loss_grad(lattice: &LogProbLattice, y: &UnitSequence) -> Result<NmlaLoss> {
    y.check(lattice.vocab())?;
    let (t_len, width) = (lattice.len(), lattice.width());
    let sweeps = Sweeps::new(lattice);
    let k = sweeps.k;
    let e = sweeps.expected();
    let reference = reference_bigrams(y);

    let p_total: f64 = e.iter().sum();
    let r_total = reference.total();
    let denom = p_total + r_total;
    let mut grad = Tensor::zeros(&[t_len, width]);
    if denom <= 0.0 {
        return Ok(NmlaLoss {
            loss: 0.0,
            f1: 1.0,
            matched: 0.0,
            expected_total: p_total,
            reference_total: r_total,
            grad,
        });
    }
    let mut matched = 0.0;
    let mut active = Vec::new();
    for ((u, v), c) in reference.iter() {
        let ev = e[u * k + v];
        matched += ev.min(c);
        if ev < c {
            active.push((u, v));
        }
    }
    let f1 = 2.0 * matched / denom;

    // dL/dE(u,v) = base + boost·[(u,v) active]
    let base = 2.0 * matched / (denom * denom);
    let boost = -2.0 / denom;
    let mut w = vec![base; k * k];
    for &(u, v) in &active {
        w[u * k + v] += boost;
    }

    let mut wq = vec![0.0; k];
    for t in 0..t_len {
        let q = &sweeps.q[t * k..(t + 1) * k];
        let f = &sweeps.f[t * k..(t + 1) * k];
        // wq[u] = Σ_v W(u,v) q_t(v)
        for u in 0..k {
            wq[u] = (0..k).map(|v| w[u * k + v] * q[v]).sum();
        }
        let g = grad.row_mut(t);
        let mut d_blank = 0.0;
        for u in 0..k {
            d_blank += f[u] * wq[u];
        }
        for x in 0..k {
            let mut d = wq[x];
            d += (0..k).map(|u| w[u * k + x] * f[u]).sum::<f64>();
            let wxx = w[x * k + x];
            if t + 1 < t_len {
                d -= wxx * sweeps.p(t + 1, x);
            }
            if t > 0 {
                d -= wxx * sweeps.p(t - 1, x);
            }
            g[x] = d * sweeps.p(t, x);
        }
        g[k] = d_blank * sweeps.p(t, k);
    }

    Ok(NmlaLoss {
        loss: 1.0 - f1,
        f1,
        matched,
        expected_total: p_total,
        reference_total: r_total,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_diff, max_rel_error};
    use crate::units::{collapse_ids, for_each_alignment, DEFAULT_ENUMERATION_CAP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 0;
    const B: usize = 1;

    fn seq(u: &[usize]) -> UnitSequence {
        UnitSequence::from_raw(u.to_vec())
    }

    fn random_lattice<R: Rng>(t: usize, width: usize, rng: &mut R) -> LogProbLattice {
        let scores: Vec<f64> = (0..t * width).map(|_| rng.random_range(-2.0..2.0)).collect();
        LogProbLattice::from_scores(t, width, &scores).unwrap()
    }

    fn point_mass(tokens: &[usize], width: usize) -> LogProbLattice {
        let mut logp = vec![f64::NEG_INFINITY; tokens.len() * width];
        for (t, &v) in tokens.iter().enumerate() {
            logp[t * width + v] = 0.0;
        }
        LogProbLattice::new(tokens.len(), width, logp).unwrap()
    }

    /// Expected bigram table by summing over every alignment.
    fn brute_expected(l: &LogProbLattice) -> BigramTable {
        let mut table = BigramTable::default();
        for_each_alignment(l.len(), l.width(), DEFAULT_ENUMERATION_CAP, |a| {
            let p: f64 = a.iter().enumerate().map(|(t, &v)| l.get(t, v)).sum::<f64>().exp();
            for w in collapse_ids(a, l.blank()).units().windows(2) {
                table.add(w[0], w[1], p);
            }
        })
        .unwrap();
        table
    }

    #[test]
    fn reference_examples() {
        let r = reference_bigrams(&seq(&[A, B, A]));
        assert_eq!(r.get(A, B), 1.0);
        assert_eq!(r.get(B, A), 1.0);
        assert_eq!(r.len(), 2);
        assert!(reference_bigrams(&seq(&[A])).is_empty());
        let r = reference_bigrams(&seq(&[A, A, A]));
        assert_eq!(r.get(A, A), 2.0);
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn expected_two_positions() {
        let l = LogProbLattice::from_probs(&[vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2]]).unwrap();
        let e = expected_bigrams(&l);
        assert!((e.get(A, B) - 0.15).abs() < 1e-12);
        assert!((e.get(B, A) - 0.15).abs() < 1e-12);
        assert!(e.get(A, A).abs() < 1e-12);
        assert!(e.get(B, B).abs() < 1e-12);
    }

    #[test]
    fn expected_single_unit_three_positions() {
        let l = LogProbLattice::from_probs(&vec![vec![0.5, 0.5]; 3]).unwrap();
        assert!((expected_bigrams(&l).get(A, A) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn point_mass_gives_reference_counts() {
        let tokens = [A, A, 2, A, B, B, 2];
        let l = point_mass(&tokens, 3);
        let e = expected_bigrams(&l);
        let r = reference_bigrams(&collapse_ids(&tokens, 2));
        for u in 0..2 {
            for v in 0..2 {
                assert_eq!(e.get(u, v), r.get(u, v), "({u},{v})");
            }
        }
    }

    #[test]
    fn point_mass_losses() {
        let l = point_mass(&[A, 2, B, B], 3);
        let out = nmla_loss_grad(&l, &seq(&[A, B])).unwrap();
        assert!(out.loss.abs() < 1e-12);
        let out = nmla_loss_grad(&l, &seq(&[B, A])).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_totals_give_zero() {
        let l = point_mass(&[2, 2, 2], 3);
        let out = nmla_loss_grad(&l, &seq(&[A])).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let k = rng.random_range(1..=3);
            let t = rng.random_range(1..=6);
            let l = random_lattice(t, k + 1, &mut rng);
            let fast = expected_bigrams(&l);
            let slow = brute_expected(&l);
            for u in 0..k {
                for v in 0..k {
                    assert!((fast.get(u, v) - slow.get(u, v)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 20 {
            let k = rng.random_range(2..=3);
            let t = rng.random_range(2..=5);
            let m = rng.random_range(2..=4);
            let y = seq(&(0..m).map(|_| rng.random_range(0..k)).collect::<Vec<_>>());
            let w = k + 1;
            let scores: Vec<f64> = (0..t * w).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = LogProbLattice::from_scores(t, w, &scores).unwrap();
            // Skip instances sitting near a min() switch.
            let e = expected_bigrams(&l);
            let r = reference_bigrams(&y);
            if r.iter().any(|((u, v), c)| (e.get(u, v) - c).abs() < 1e-3) {
                continue;
            }
            let g = nmla_loss_grad(&l, &y).unwrap().grad;
            let mut analytic = vec![0.0; t * w];
            for row in 0..t {
                let gs: f64 = g.row(row).iter().sum();
                for v in 0..w {
                    analytic[row * w + v] = g.row(row)[v] - l.prob(row, v) * gs;
                }
            }
            let numeric = central_diff(
                |z| {
                    let l = LogProbLattice::from_scores(t, w, z).unwrap();
                    nmla_loss_grad(&l, &y).unwrap().loss
                },
                &scores,
                1e-4,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "rel err {err} for y={y}");
            checked += 1;
        }
    }

    #[test]
    fn loss_depends_on_target_only_through_its_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let l = random_lattice(6, 4, &mut rng);
        let e = expected_bigrams(&l);
        for y in [seq(&[0, 1, 2]), seq(&[2, 0, 1]), seq(&[1, 1, 0, 2])] {
            let direct = nmla_loss_grad(&l, &y).unwrap().loss;
            let via_table = loss_from_tables(&e, &reference_bigrams(&y));
            assert!((direct - via_table).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&direct));
        }
    }
}
