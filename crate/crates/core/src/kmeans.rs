//! Lloyd's k-means with k-means++ seeding.
//!
//! Everything is deterministic for a given input order and seed: the RNG is a
//! seeded ChaCha stream, assignment ties go to the lowest centroid index, and
//! iteration stops once assignments no longer change (or `max_iters` is hit).

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 5, max_iters: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Total inertia after seeding, then after every centroid update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("history is never empty")
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of distinct points; `-0.0` and `0.0` count as the same value.
pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &j)| sq_dist(p, &centroids[j]))
        .sum()
}

fn cluster_mean(points: &[Vec<f64>], assignments: &[usize], cluster: usize, dim: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for (p, _) in points.iter().zip(assignments).filter(|(_, &a)| a == cluster) {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("k never exceeds the number of distinct points");
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Clusters `points` into `min(config.k, distinct points)` groups.
///
/// An empty cluster is repaired by moving into it the point that lies
/// farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeans> {
    if config.k == 0 {
        return Err(Error::config("k", "must be >= 1"));
    }
    if config.max_iters == 0 {
        return Err(Error::config("max_iters", "must be >= 1"));
    }
    let Some(first) = points.first() else {
        return Err(Error::EmptyRegion("k-means needs at least one point".into()));
    };
    let dim = first.len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape(format!("point of dim {} among points of dim {dim}", p.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite coordinate in k-means input".into()));
    }

    let k = config.k.min(distinct_count(points));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = assign(points, &centroids);
    let mut history = vec![inertia(points, &centroids, &assignments)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        for j in 0..k {
            if let Some(mean) = cluster_mean(points, &assignments, j, dim) {
                centroids[j] = mean;
            }
        }
        for j in 0..k {
            if assignments.contains(&j) {
                continue;
            }
            let mut far = (0, -1.0);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, &centroids[assignments[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            let (i, _) = far;
            let donor = assignments[i];
            assignments[i] = j;
            centroids[j] = points[i].clone();
            if let Some(mean) = cluster_mean(points, &assignments, donor, dim) {
                centroids[donor] = mean;
            }
        }
        history.push(inertia(points, &centroids, &assignments));

        let next = assign(points, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }

    Ok(KMeans { centroids, assignments, inertia_history: history, iterations, converged })
}
