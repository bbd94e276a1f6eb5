//! Deterministic vector kernels, seeded randomness, and k-means clustering.
//!
//! Everything here is pure f64 over plain slices. Clustering and sampling
//! draw exclusively from [`SeededRng`], so identical seeds reproduce
//! identical results on every platform.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Norm below which a vector is treated as zero and rejected.
pub const ZERO_NORM_EPS: f64 = 1e-30;

// ── Seeded randomness ───────────────────────────────────────────────

/// Deterministic random stream. Identical seed ⇒ identical draws,
/// independent of platform and of the `rand` crate's distribution code
/// (uniform/normal transforms are done here, on raw 64-bit output).
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent substream. Consumers forked in a fixed order
    /// stay reproducible even when one consumer is disabled.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform in [-a, a].
    pub fn uniform_sym(&mut self, a: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * a
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }
}

// ── Vector kernels ──────────────────────────────────────────────────

pub fn check_finite(context: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite("l2_normalize", v)?;
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            context: "sq_dist",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn mean_of(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let mut m = vec![0.0; dim];
    for p in points {
        for (mi, pi) in m.iter_mut().zip(p.iter()) {
            *mi += pi;
        }
    }
    let n = points.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// Softmin assignment probabilities P(e_k|z) = exp(-||z-e_k||^2) / Σ_l exp(-||z-e_l||^2),
/// computed with min-distance subtraction for stability.
pub fn softmin_dist(z: &[f64], entries: &[Vec<f64>]) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("softmin_dist: no entries"));
    }
    let mut d2 = Vec::with_capacity(entries.len());
    for e in entries {
        d2.push(sq_dist(z, e)?);
    }
    Ok(softmin_from_sq_dists(&d2))
}

/// Same as [`softmin_dist`] given precomputed squared distances.
pub fn softmin_from_sq_dists(d2: &[f64]) -> Vec<f64> {
    let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d2.iter().map(|d| (-(d - m)).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

// ── K-means ─────────────────────────────────────────────────────────

/// Number of independent k-means++ restarts; the lowest-SSE result wins.
const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding from `rng`, best of
/// [`KMEANS_RESTARTS`] restarts.
///
/// Empty clusters are repaired by reassigning the point currently farthest
/// from its centroid. When `k` exceeds the number of distinct points the
/// surplus centroids are separated by 1e-6 jitter rather than failing.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut SeededRng,
    max_iter: usize,
) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("kmeans: no points"));
    }
    if k == 0 {
        return Err(Error::EmptyInput("kmeans: k must be >= 1"));
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimMismatch {
                context: "kmeans",
                expected: dim,
                got: p.len(),
            });
        }
        check_finite("kmeans", p)?;
    }

    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centroids = kmeans_once(points, k, rng, max_iter);
        let sse = kmeans_sse(points, &centroids);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, centroids));
        }
    }
    Ok(best.unwrap().1)
}

fn kmeans_once(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut SeededRng,
    max_iter: usize,
) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut centroids = kmeanspp_seed(points, k, rng);
    jitter_duplicates(&mut centroids, rng);

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (best, _) = nearest_centroid(p, &centroids);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        repair_empty_clusters(points, &mut centroids, &mut assign);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ci, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ci = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    jitter_duplicates(&mut centroids, rng);
    centroids
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid).expect("dims checked");
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeanspp_seed(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.index(points.len())].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]).unwrap())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass at existing centroids; pick uniformly
            points[rng.index(points.len())].clone()
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            points[chosen].clone()
        };
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &next).unwrap();
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(next);
    }
    centroids
}

fn jitter_duplicates(centroids: &mut [Vec<f64>], rng: &mut SeededRng) {
    for i in 1..centroids.len() {
        let duplicated = (0..i).any(|j| centroids[j] == centroids[i]);
        if duplicated {
            for x in centroids[i].iter_mut() {
                *x += rng.uniform_sym(1e-6);
            }
        }
    }
}

/// Move the globally farthest point into each empty cluster.
fn repair_empty_clusters(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut worst = 0usize;
        let mut worst_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            // only steal from clusters that can spare a point
            if counts[assign[i]] <= 1 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]).unwrap();
            if d > worst_d {
                worst_d = d;
                worst = i;
            }
        }
        if worst_d < 0.0 {
            return; // fewer movable points than empty clusters
        }
        centroids[empty] = points[worst].clone();
        assign[worst] = empty;
    }
}

/// Within-cluster sum of squared distances for the given centroids.
pub fn kmeans_sse(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| nearest_centroid(p, centroids).1)
        .sum()
}
