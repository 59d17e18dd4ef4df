//! Unit vocabulary, CTC alignments and the collapse map.
//!
//! Unit ids `0..K` are real units (cluster indices); id `K` is the blank.
//! An [`Alignment`] is a fixed-length string over all `K + 1` ids and
//! [`collapse`] maps it to the [`UnitSequence`] it stands for: merge runs of
//! identical ids, then drop blanks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default bound on `(K+1)^T` for brute-force enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// The unit alphabet plus blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UnitVocab {
    k: usize,
}

impl UnitVocab {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("unit vocabulary needs K >= 1".into()));
        }
        Ok(UnitVocab { k })
    }

    /// Number of real units.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blank(&self) -> usize {
        self.k
    }

    /// Size of the alignment alphabet, `K + 1`.
    pub fn width(&self) -> usize {
        self.k + 1
    }
}

/// Blank-free target sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitSequence(Vec<usize>);

impl UnitSequence {
    pub fn new(units: Vec<usize>, vocab: UnitVocab) -> Result<Self> {
        if let Some(&bad) = units.iter().find(|&&u| u >= vocab.k()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                width: vocab.k(),
            });
        }
        Ok(UnitSequence(units))
    }

    /// Wraps ids without range checking; callers guarantee `id < K`.
    pub fn from_raw(units: Vec<usize>) -> Self {
        UnitSequence(units)
    }

    pub fn units(&self) -> &[usize] {
        &self.0
    }

    pub fn into_units(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, vocab: UnitVocab) -> Result<()> {
        match self.0.iter().find(|&&u| u >= vocab.k()) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                width: vocab.k(),
            }),
            None => Ok(()),
        }
    }
}

/// One line of space-separated decimal ids.
impl fmt::Display for UnitSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{u}")?;
        }
        Ok(())
    }
}

impl FromStr for UnitSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("bad unit id '{tok}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(UnitSequence)
    }
}

/// Length-T string over units and blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Alignment(Vec<usize>);

impl Alignment {
    pub fn new(tokens: Vec<usize>, vocab: UnitVocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&a| a > vocab.blank()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                width: vocab.width(),
            });
        }
        Ok(Alignment(tokens))
    }

    pub(crate) fn from_raw(tokens: Vec<usize>) -> Self {
        Alignment(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where the two alignments differ.
    pub fn hamming(&self, other: &Alignment) -> usize {
        assert_eq!(self.len(), other.len(), "hamming distance needs equal lengths");
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// Merges runs of identical tokens, then removes blanks.
pub fn collapse(a: &Alignment, vocab: UnitVocab) -> Result<UnitSequence> {
    if let Some(&bad) = a.0.iter().find(|&&t| t > vocab.blank()) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            width: vocab.width(),
        });
    }
    Ok(collapse_ids(&a.0, vocab.blank()))
}

pub(crate) fn collapse_ids(tokens: &[usize], blank: usize) -> UnitSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &t in tokens {
        if Some(t) != prev && t != blank {
            out.push(t);
        }
        prev = Some(t);
    }
    UnitSequence(out)
}

/// Shortest alignment that collapses to `y`: one slot per unit plus a
/// separating blank between each pair of equal neighbours.
pub fn min_alignment_length(y: &UnitSequence) -> usize {
    let repeats = y.0.windows(2).filter(|w| w[0] == w[1]).count();
    y.len() + repeats
}

/// Visits every length-`t` string over `width` symbols in lexicographic order.
pub fn for_each_alignment(
    t: usize,
    width: usize,
    cap: u64,
    mut visit: impl FnMut(&[usize]),
) -> Result<()> {
    let candidates = (width as f64).powi(t as i32);
    if candidates > cap as f64 {
        return Err(Error::EnumerationCap { candidates, cap });
    }
    let mut cur = vec![0usize; t];
    loop {
        visit(&cur);
        let mut i = t;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < width {
                break;
            }
            cur[i] = 0;
        }
    }
}

/// All length-`t` alignments whose collapse is `y`, by brute force over the
/// `(K+1)^t` candidates. Returned in lexicographic order.
pub fn enumerate_preimage(
    y: &UnitSequence,
    t: usize,
    vocab: UnitVocab,
    cap: u64,
) -> Result<Vec<Alignment>> {
    if t == 0 {
        return Err(Error::Invalid("alignment length must be at least 1".into()));
    }
    y.check(vocab)?;
    let mut out = Vec::new();
    for_each_alignment(t, vocab.width(), cap, |a| {
        if collapse_ids(a, vocab.blank()) == *y {
            out.push(Alignment(a.to_vec()));
        }
    })?;
    Ok(out)
}
