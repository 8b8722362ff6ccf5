//! Lloyd's algorithm with k-means++ seeding.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Within-cluster SSE after seeding, then after every Lloyd iteration.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("history is never empty")
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid (lowest index on ties).
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Greedy k-means++: each new centroid is the best of a few D²-weighted
/// candidates, judged by the potential it leaves behind.
fn plus_plus_init<R: Rng>(points: &Matrix, p: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let trials = 2 + (p as f64).ln() as usize;
    let mut centroids = Matrix::zeros(p, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..p {
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = match WeightedIndex::new(&dist) {
                Ok(w) => w.sample(rng),
                // every point already coincides with a centroid
                Err(_) => rng.random_range(0..n),
            };
            let next: Vec<f64> =
                dist.iter().enumerate().map(|(i, d)| d.min(sq_dist(points.row(i), points.row(pick)))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.1) {
                best = Some((pick, potential, next));
            }
        }
        let (pick, _, next) = best.expect("at least two trials");
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        dist = next;
    }
    centroids
}

fn assign_all(points: &Matrix, centroids: &Matrix, assignment: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut sse = 0.0;
    for i in 0..points.rows() {
        let (c, d) = nearest(points.row(i), centroids);
        assignment[i] = c;
        dist[i] = d;
        sse += d;
    }
    sse
}

/// Clusters the rows of `points` into `p` groups.
///
/// Each iteration assigns every point to its nearest centroid and moves each
/// centroid to the mean of its points. A centroid left without points is
/// re-seeded at the point farthest from its own centroid.
pub fn kmeans(points: &Matrix, p: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if p == 0 {
        return Err(Error::Invalid("k-means needs at least one cluster".into()));
    }
    if n < p {
        return Err(Error::Invalid(format!("k-means with {p} clusters over only {n} points")));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, p, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut sse_history = vec![assign_all(points, &centroids, &mut assignment, &mut dist)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..iters {
        iterations += 1;
        let mut sums = Matrix::zeros(p, d);
        let mut counts = vec![0usize; p];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for c in 0..p {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (dst, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold((0, f64::NEG_INFINITY), |best, i| if dist[i] > best.1 { (i, dist[i]) } else { best })
                    .0;
                taken[far] = true;
                next.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        let before = assignment.clone();
        let sse = assign_all(points, &next, &mut assignment, &mut dist);
        let moved = next != centroids;
        centroids = next;
        sse_history.push(sse);
        if !moved && before == assignment {
            converged = true;
            break;
        }
    }
    Ok(KMeansResult { centroids, assignment, sse_history, iterations, converged })
}

/// Runs [`kmeans`] `restarts` times and keeps the lowest final SSE (earliest on ties).
///
/// Restart 0 uses `seed` itself, so one restart equals a plain [`kmeans`] call.
pub fn kmeans_restarts(points: &Matrix, p: usize, iters: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut best = kmeans(points, p, iters, seed)?;
    for _ in 1..restarts {
        let next = kmeans(points, p, iters, seeds.random())?;
        if next.sse() < best.sse() {
            best = next;
        }
    }
    Ok(best)
}
