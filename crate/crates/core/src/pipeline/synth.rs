//! Synthetic translation task: phone strings rendered as noisy frames on the
//! source side, locally reordered and expanded into units on the target side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::numerics::Tensor;
use crate::units::{min_alignment_length, UnitSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskSpec {
    /// Source alphabet size.
    pub phones: usize,
    /// Inclusive frame-duration range per phone.
    pub min_duration: usize,
    pub max_duration: usize,
    pub feat_dim: usize,
    pub noise: f64,
    /// Unit vocabulary `K`.
    pub units: usize,
    /// Inclusive range of units each phone expands to.
    pub min_expansion: usize,
    pub max_expansion: usize,
    pub p_swap: f64,
    /// Inclusive phone-string length range for train/valid/test.
    pub min_phones: usize,
    pub max_phones: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Long-input split used only for latency measurements.
    pub bench: usize,
    pub bench_min_phones: usize,
    pub bench_max_phones: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            phones: 12,
            min_duration: 2,
            max_duration: 5,
            feat_dim: 8,
            noise: 0.1,
            units: 16,
            min_expansion: 1,
            max_expansion: 3,
            p_swap: 0.15,
            min_phones: 4,
            max_phones: 12,
            train: 2000,
            valid: 100,
            test: 500,
            bench: 48,
            bench_min_phones: 10,
            bench_max_phones: 100,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
    Bench,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::Test, Split::Bench];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Bench => "bench",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split '{s}'")))
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
            Split::Bench => 4,
        }
    }
}

/// One source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureSequence,
    pub units: UnitSequence,
}

/// Features and targets in lockstep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(features: Vec<FeatureSequence>, units: Vec<UnitSequence>) -> Result<Self> {
        if features.len() != units.len() {
            return Err(Error::Invalid(format!(
                "{} feature sequences but {} unit sequences",
                features.len(),
                units.len()
            )));
        }
        let samples = features
            .into_iter()
            .zip(units)
            .map(|(features, units)| Sample { features, units })
            .collect();
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Vec<FeatureSequence> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn units(&self) -> Vec<UnitSequence> {
        self.samples.iter().map(|s| s.units.clone()).collect()
    }

    pub fn with_units(&self, units: Vec<UnitSequence>) -> Result<Dataset> {
        Dataset::new(self.features(), units)
    }

    pub fn total_frames(&self) -> usize {
        self.samples.iter().map(|s| s.features.len()).sum()
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The fixed parts of the task derived from the master seed.
#[derive(Clone, Debug)]
pub struct SynthTask {
    spec: SynthTaskSpec,
    embeddings: Vec<Vec<f64>>,
    expansion: Vec<Vec<usize>>,
}

impl SynthTask {
    pub fn new(spec: &SynthTaskSpec) -> Result<Self> {
        validate(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let embeddings = (0..spec.phones)
            .map(|_| (0..spec.feat_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let expansion = (0..spec.phones)
            .map(|_| {
                let n = rng.random_range(spec.min_expansion..=spec.max_expansion);
                (0..n).map(|_| rng.random_range(0..spec.units)).collect()
            })
            .collect();
        Ok(SynthTask {
            spec: spec.clone(),
            embeddings,
            expansion,
        })
    }

    pub fn spec(&self) -> &SynthTaskSpec {
        &self.spec
    }

    /// Units emitted for each phone.
    pub fn expansion_table(&self) -> &[Vec<usize>] {
        &self.expansion
    }

    pub fn phone_embedding(&self, phone: usize) -> &[f64] {
        &self.embeddings[phone]
    }

    /// Target units for a source phone string, with adjacent swaps drawn from `rng`.
    pub fn target_units<R: Rng>(&self, phones: &[usize], rng: &mut R) -> UnitSequence {
        let mut order = phones.to_vec();
        let mut i = 0;
        while i + 1 < order.len() {
            if rng.random::<f64>() < self.spec.p_swap {
                order.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        let units = order
            .iter()
            .flat_map(|&p| self.expansion[p].iter().copied())
            .collect();
        UnitSequence::from_raw(units)
    }

    /// Sample `index` of `split`, with the phone string and per-phone durations.
    pub fn sample_detailed(&self, split: Split, index: usize) -> (Sample, Vec<usize>, Vec<usize>) {
        let s = &self.spec;
        let seed = mix_seed(mix_seed(s.seed, split.tag()), index as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = match split {
            Split::Bench => (s.bench_min_phones, s.bench_max_phones),
            _ => (s.min_phones, s.max_phones),
        };
        let p = rng.random_range(lo..=hi);
        let phones: Vec<usize> = (0..p).map(|_| rng.random_range(0..s.phones)).collect();
        let durations: Vec<usize> = (0..p)
            .map(|_| rng.random_range(s.min_duration..=s.max_duration))
            .collect();
        let noise = Normal::new(0.0, s.noise.max(0.0)).unwrap();
        let n: usize = durations.iter().sum::<usize>().max(4);
        let mut data = Vec::with_capacity(n * s.feat_dim);
        for (&ph, &d) in phones.iter().zip(&durations) {
            for _ in 0..d {
                data.extend(self.embeddings[ph].iter().map(|&e| e + noise.sample(&mut rng)));
            }
        }
        // Pad very short renderings with silence so the encoder has 4 frames.
        data.resize(n * s.feat_dim, 0.0);
        let frames = Tensor::new(&[n, s.feat_dim], data).expect("frame shape");
        let units = self.target_units(&phones, &mut rng);
        let sample = Sample {
            features: FeatureSequence::new(frames).expect("finite frames"),
            units,
        };
        (sample, phones, durations)
    }

    pub fn sample(&self, split: Split, index: usize) -> Sample {
        self.sample_detailed(split, index).0
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.spec.train,
            Split::Valid => self.spec.valid,
            Split::Test => self.spec.test,
            Split::Bench => self.spec.bench,
        }
    }

    pub fn generate(&self, split: Split) -> Dataset {
        let samples = (0..self.split_size(split))
            .map(|i| self.sample(split, i))
            .collect();
        Dataset { samples }
    }
}

fn validate(spec: &SynthTaskSpec) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if spec.phones == 0 || spec.units == 0 || spec.feat_dim == 0 {
        return bad("phones, units and feat_dim must be positive");
    }
    if spec.min_duration == 0 || spec.min_duration > spec.max_duration {
        return bad("duration range must satisfy 1 <= min <= max");
    }
    if spec.min_expansion == 0 || spec.min_expansion > spec.max_expansion {
        return bad("expansion range must satisfy 1 <= min <= max");
    }
    if spec.min_phones == 0 || spec.min_phones > spec.max_phones {
        return bad("phone range must satisfy 1 <= min <= max");
    }
    if spec.bench_min_phones == 0 || spec.bench_min_phones > spec.bench_max_phones {
        return bad("bench phone range must satisfy 1 <= min <= max");
    }
    if !(0.0..=0.5).contains(&spec.p_swap) {
        return bad("p_swap must lie in [0, 0.5]");
    }
    if !(spec.noise >= 0.0) {
        return bad("noise must be non-negative");
    }
    Ok(())
}

/// Fraction of samples whose targets admit no alignment of length
/// `λ · ⌊N/4⌋`.
pub fn infeasible_fraction(data: &Dataset, lambda: usize) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let bad = data
        .samples
        .iter()
        .filter(|s| min_alignment_length(&s.units) > lambda * (s.features.len() / 4))
        .count();
    bad as f64 / data.len() as f64
}

/// Smallest candidate upsampling factor leaving fewer than `max_fraction`
/// of the samples infeasible, with the fraction for every candidate tried.
pub fn sweep_lambda(
    data: &Dataset,
    candidates: &[usize],
    max_fraction: f64,
) -> (Option<usize>, Vec<(usize, f64)>) {
    let mut table = Vec::new();
    let mut chosen = None;
    for &l in candidates {
        let f = infeasible_fraction(data, l);
        table.push((l, f));
        if chosen.is_none() && f < max_fraction {
            chosen = Some(l);
        }
    }
    (chosen, table)
}
