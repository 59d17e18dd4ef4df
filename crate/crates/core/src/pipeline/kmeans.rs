//! Lloyd's k-means, used to turn continuous frames into unit ids.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(point, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Sum of squared distances to the assigned centroids.
    pub fn objective(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|p| sq_dist(p, &self.centroids[self.assign(p)]))
            .sum()
    }
}

pub fn kmeans_assign(point: &[f64], codebook: &Codebook) -> usize {
    codebook.assign(point)
}

/// Fits `k` centroids, initialized from `k` distinct points chosen with
/// `seed`. Returns the codebook and the objective after each iteration.
pub fn kmeans_fit(
    points: &[Vec<f64>],
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    let mut seen = HashSet::new();
    let distinct: Vec<&Vec<f64>> = points
        .iter()
        .filter(|p| seen.insert(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        .collect();
    if k == 0 || distinct.len() < k {
        return Err(Error::Invalid(format!(
            "k-means needs at least {k} distinct points, found {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, distinct.len(), k);
    let mut book = Codebook {
        centroids: chosen.iter().map(|i| distinct[i].clone()).collect(),
    };
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = book.assign(p);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                book.centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        history.push(book.objective(points));
    }
    Ok((book, history))
}
