//! Seeded k-means with k-means++ initialization and best-of-restarts selection.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            max_iters: 300,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// k x dim centroid matrix.
    pub centroids: Array2<f64>,
    /// Total squared distance of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

/// Cluster the rows of `points`. Per-restart seeds are `seed + restart`;
/// the run with the lowest inertia wins (ties break to the earliest restart),
/// so the result is deterministic for a fixed config.
pub fn cluster(points: ArrayView2<'_, f64>, config: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.nrows();
    if config.k == 0 || config.k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {} must be in 1..={n}",
            config.k
        )));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }

    let runs: Vec<(Vec<usize>, Array2<f64>, f64)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(r as u64);
            single_run(points, config.k, config.max_iters, seed)
        })
        .collect();

    let restart_inertias: Vec<f64> = runs.iter().map(|run| run.2).collect();
    let mut best = 0;
    for (i, &inertia) in restart_inertias.iter().enumerate() {
        if inertia < restart_inertias[best] {
            best = i;
        }
    }
    let (assignments, centroids, inertia) = runs[best].clone();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        restart_inertias,
    })
}

fn single_run(
    points: ArrayView2<'_, f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> (Vec<usize>, Array2<f64>, f64) {
    let n = points.nrows();
    let dim = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];

    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let nearest = nearest_centroid(points.row(i), &centroids);
            if assignments[i] != nearest {
                assignments[i] = nearest;
                changed = true;
            }
        }

        let mut sums = Array2::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids.row_mut(c).assign(&(&sums.row(c) * inv));
            } else {
                // reseed with the point farthest from its centroid
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = sq_dist(points.row(i), centroids.row(assignments[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids.row_mut(c).assign(&points.row(far));
                assignments[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let inertia = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(assignments[i])))
        .sum();
    (assignments, centroids, inertia)
}

fn plus_plus_init(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));

    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points coincide with a center; take the lowest unused index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            let d = sq_dist(points.row(i), points.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut centroids = Array2::zeros((k, dim));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }
    centroids
}

fn nearest_centroid(point: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.nrows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
