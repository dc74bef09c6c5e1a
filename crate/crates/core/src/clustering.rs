//! Seeded Lloyd k-means, used to split each class's selected features into
//! several intra-class prototypes.
//!
//! Distances are squared Euclidean on whatever points the caller passes;
//! the labeling code hands in unit-normalized features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    /// D²-weighted seeding.
    #[serde(rename = "kmeans_plus_plus")]
    KMeansPlusPlus,
    /// The first `S` points in input order, cycling when `n < S`.
    FirstPoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub num_clusters: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: KMeansInit,
}

impl KMeansConfig {
    pub fn new(num_clusters: usize) -> Self {
        Self {
            num_clusters,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            init: KMeansInit::KMeansPlusPlus,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: KMeansInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::InvalidConfig("num_clusters must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step, final assignment included.
    pub inertia_history: Vec<f64>,
}

/// k-means++ seeding. When every remaining point already sits on a chosen
/// centroid (duplicates, or `S > n`) the next centroid is taken by cycling
/// through the points in order, so exactly `S` rows come back.
pub fn kmeans_plus_plus_init(points: &Matrix, num_clusters: usize, rng: &mut SeededRng) -> Result<Matrix> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::EmptyClusterInput);
    }
    let mut chosen = Vec::with_capacity(num_clusters);
    if num_clusters == 0 {
        return Ok(points.select_rows(&chosen));
    }
    chosen.push(rng.index(n));
    let mut min_d2: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();

    while chosen.len() < num_clusters {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut pick = None;
            for (i, &d) in min_d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                r -= d;
                if r < 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave r marginally >= 0 after the scan
            pick.unwrap_or_else(|| min_d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            chosen.len() % n
        };
        chosen.push(pick);
        let c = points.row(pick);
        for (d, p) in min_d2.iter_mut().zip(points.iter_rows()) {
            let nd = squared_distance(p, c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(points.select_rows(&chosen))
}

fn first_points_init(points: &Matrix, num_clusters: usize) -> Matrix {
    let idx: Vec<usize> = (0..num_clusters).map(|i| i % points.rows()).collect();
    points.select_rows(&idx)
}

/// Nearest centroid per point (ties to the lowest index), with each
/// point's squared distance.
fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for p in points.iter_rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter_rows().enumerate() {
            let d = squared_distance(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        labels.push(best);
        dists.push(best_d);
    }
    (labels, dists)
}

/// Centroid update: per-cluster running mean in point order (the same
/// arithmetic as [`Matrix::row_mean`]), with empty clusters reseeded at the
/// point farthest from its own centroid.
fn update(points: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    let d = points.cols();
    let mut means = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignments) {
        counts[a] += 1;
        let c = counts[a] as f64;
        for (m, &v) in means.row_mut(a).iter_mut().zip(p) {
            *m += (v - *m) / c;
        }
    }

    if counts.contains(&0) {
        let mut dist: Vec<f64> = points
            .iter_rows()
            .zip(assignments)
            .map(|(p, &a)| squared_distance(p, means.row(a)))
            .collect();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = 0;
            for (i, &v) in dist.iter().enumerate() {
                if v > dist[far] {
                    far = i;
                }
            }
            means.row_mut(j).copy_from_slice(points.row(far));
            // a second empty cluster must not land on the same point
            dist[far] = 0.0;
        }
    }
    means
}

pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    cfg.validate()?;
    if points.rows() == 0 {
        return Err(Error::EmptyClusterInput);
    }
    if points.cols() == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    let k = cfg.num_clusters;
    let mut centroids = match cfg.init {
        KMeansInit::KMeansPlusPlus => {
            let mut rng = SeededRng::new(cfg.seed);
            kmeans_plus_plus_init(points, k, &mut rng)?
        }
        KMeansInit::FirstPoints => first_points_init(points, k),
    };

    let mut history = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..cfg.max_iters {
        let (assignments, dists) = assign(points, &centroids);
        let inertia: f64 = dists.iter().sum();
        debug_assert!(
            history.last().is_none_or(|&prev: &f64| inertia <= prev + 1e-9 * prev.max(1.0)),
            "k-means inertia increased"
        );
        history.push(inertia);
        let next = update(points, &assignments, k);
        let shift = next
            .iter_rows()
            .zip(centroids.iter_rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0_f64, f64::max);
        centroids = next;
        iterations_run += 1;
        if shift < cfg.tol {
            break;
        }
    }

    let (assignments, dists) = assign(points, &centroids);
    let inertia: f64 = dists.iter().sum();
    history.push(inertia);
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations_run,
        inertia_history: history,
    })
}
