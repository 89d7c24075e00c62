//! Lloyd's k-means with seeded k-means++ initialization.

use rand::Rng;

use super::{sq_dist, ClassifierError};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per input point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, seed_value: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed_value, &[0x6b6d]);
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    if target < *d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("some point has positive distance")
        } else {
            // Every point coincides with a center; take the first unused index.
            (0..points.len()).find(|i| !chosen.contains(i)).expect("k <= points")
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Clusters `points` into `k` groups. Empty clusters keep their previous centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed_value: u64,
    max_iter: usize,
) -> Result<KMeansResult, ClassifierError> {
    if k == 0 || k > points.len() {
        return Err(ClassifierError::TooFewPoints {
            k,
            points: points.len(),
        });
    }
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, seed_value);
    let mut assignment: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let (next, sse): (Vec<usize>, f64) = points.iter().fold((Vec::new(), 0.0), |(mut a, s), p| {
            let (i, d) = nearest(p, &centroids);
            a.push(i);
            (a, s + d)
        });
        sse_history.push(sse);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    if !converged {
        // Final assignment against the last centroid update.
        let (next, sse): (Vec<usize>, f64) = points.iter().fold((Vec::new(), 0.0), |(mut a, s), p| {
            let (i, d) = nearest(p, &centroids);
            a.push(i);
            (a, s + d)
        });
        converged = next == assignment;
        assignment = next;
        sse_history.push(sse);
    }
    Ok(KMeansResult {
        assignment,
        centroids,
        sse_history,
        converged,
    })
}
