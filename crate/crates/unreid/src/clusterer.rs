//! Self-paced clustering: DBSCAN over a precomputed distance matrix (the
//! re-ranked Jaccard distance), a k-means alternative for ablations, noise
//! removal, and dense pseudo-label assignment.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// Which clustering algorithm drives pseudo-label assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    /// Density clustering on the re-ranked distance; noise rows get -1.
    Dbscan,
    /// Lloyd's algorithm on raw features with `k` clusters; never noisy.
    KMeans { k: usize },
}

/// Clustering configuration. `eps` and `min_samples` apply to DBSCAN,
/// `seed` to the k-means initialization.
#[derive(Debug, Clone, Copy)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_samples: usize,
    pub method: ClusterMethod,
    pub seed: u64,
}

impl ClusterParams {
    pub fn new(eps: f64, min_samples: usize, method: ClusterMethod, seed: u64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::ConfigError(format!(
                "eps must be in (0,1], got {eps}"
            )));
        }
        if min_samples == 0 {
            return Err(Error::ConfigError("min_samples must be >= 1".into()));
        }
        if let ClusterMethod::KMeans { k } = method {
            if k < 2 {
                return Err(Error::ConfigError(format!(
                    "k-means needs k >= 2, got {k}"
                )));
            }
        }
        Ok(ClusterParams { eps, min_samples, method, seed })
    }

    /// Runs the configured method: DBSCAN on the distance matrix, k-means
    /// on the feature rows.
    pub fn run(&self, distances: &Matrix, features: &Matrix) -> Result<Vec<i64>> {
        match self.method {
            ClusterMethod::Dbscan => dbscan(distances, self.eps, self.min_samples),
            ClusterMethod::KMeans { k } => kmeans(features, k, self.seed),
        }
    }
}

/// Noise-free pseudo labels over the kept (non-noise) rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabeling {
    /// Original labels for every row, -1 marking noise.
    pub labels: Vec<i64>,
    /// Rows that survived noise removal, strictly increasing.
    pub kept_indices: Vec<usize>,
    /// Dense labels 0..c-1 for the kept rows, numbered by first appearance.
    pub y: Vec<usize>,
    /// Number of distinct clusters among kept rows.
    pub c: usize,
}

/// Density clustering on a precomputed distance matrix.
///
/// A point is core iff at least `min_samples` points (itself included) lie
/// within `eps`. Clusters grow breadth-first from core points in ascending
/// index order; border points join the first cluster that reaches them;
/// unreachable points keep the label -1. Fully deterministic.
pub fn dbscan(d: &Matrix, eps: f64, min_samples: usize) -> Result<Vec<i64>> {
    let n = d.rows();
    if n == 0 || d.cols() != n {
        return Err(Error::ShapeError(format!(
            "distance matrix must be square and non-empty, got {}x{}",
            n,
            d.cols()
        )));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut labels = vec![-1_i64; n];
    let mut cluster = 0_i64;
    for start in 0..n {
        if !core[start] || labels[start] != -1 {
            continue;
        }
        labels[start] = cluster;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == -1 {
                    labels[q] = cluster;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

/// Lloyd's k-means on feature rows with greedy farthest-point seeding.
///
/// The first center is a seeded random row; each further center is the row
/// farthest from all chosen centers (ties to the smallest index). Runs at
/// most 100 iterations or until the largest centroid shift drops below
/// 1e-6. A cluster that loses all members is re-seeded at the point
/// farthest from its assigned centroid.
pub fn kmeans(f: &Matrix, k: usize, seed: u64) -> Result<Vec<i64>> {
    use rand::{Rng, SeedableRng};
    let n = f.rows();
    if n == 0 {
        return Err(Error::ShapeError("empty feature matrix".into()));
    }
    if k < 1 || k > n {
        return Err(Error::ConfigError(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut center_rows = vec![rng.gen_range(0..n)];
    while center_rows.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for p in 0..n {
            let d_min = center_rows
                .iter()
                .map(|&c| euclidean(f.row(p), f.row(c)))
                .fold(f64::INFINITY, f64::min);
            if d_min > best.0 {
                best = (d_min, p);
            }
        }
        center_rows.push(best.1);
    }
    let mut centroids: Vec<Vec<f64>> = center_rows.iter().map(|&r| f.row(r).to_vec()).collect();

    let mut assign = vec![0_usize; n];
    for _ in 0..100 {
        for (p, slot) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = euclidean(f.row(p), centroid);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            *slot = best.1;
        }

        let mut counts = vec![0_usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Re-seed the empty cluster at the worst-fit point.
            let mut worst = (f64::NEG_INFINITY, 0);
            for p in 0..n {
                let dist = euclidean(f.row(p), &centroids[assign[p]]);
                if dist > worst.0 {
                    worst = (dist, p);
                }
            }
            counts[assign[worst.1]] -= 1;
            assign[worst.1] = c;
            counts[c] = 1;
        }

        let mut next: Vec<Vec<f64>> = vec![vec![0.0; f.cols()]; k];
        for p in 0..n {
            for (acc, v) in next[assign[p]].iter_mut().zip(f.row(p)) {
                *acc += v;
            }
        }
        let mut shift = 0.0_f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for v in next[c].iter_mut() {
                *v *= inv;
            }
            shift = shift.max(euclidean(&next[c], &centroids[c]));
        }
        centroids = next;
        if shift < 1e-6 {
            break;
        }
    }
    Ok(assign.into_iter().map(|a| a as i64).collect())
}

/// Drops noise rows and renumbers the survivors densely in first-appearance
/// order.
pub fn select_clean(labels: &[i64]) -> Result<PseudoLabeling> {
    let mut kept_indices = Vec::new();
    let mut y = Vec::new();
    let mut dense: Vec<(i64, usize)> = Vec::new();
    for (row, &label) in labels.iter().enumerate() {
        if label < 0 {
            continue;
        }
        let id = match dense.iter().find(|(l, _)| *l == label) {
            Some(&(_, id)) => id,
            None => {
                let id = dense.len();
                dense.push((label, id));
                id
            }
        };
        kept_indices.push(row);
        y.push(id);
    }
    if kept_indices.is_empty() {
        return Err(Error::EmptyCleanSet);
    }
    Ok(PseudoLabeling {
        labels: labels.to_vec(),
        kept_indices,
        y,
        c: dense.len(),
    })
}

/// Agreement between predicted labels and ground truth over rows that are
/// neither predicted noise nor truth-unknown.
#[derive(Debug, Clone, Copy)]
pub struct ClusterQuality {
    /// Adjusted Rand index; 1 at perfect agreement, near 0 for random labels.
    pub ari: f64,
    /// Mean over clusters of the dominant truth-class fraction.
    pub purity: f64,
}

/// Computes ARI by pair counting and purity by dominant-class counting.
/// Degenerate agreement (both partitions trivial) scores ARI 1.
pub fn cluster_quality(labels: &[i64], truth: &[i64]) -> Result<ClusterQuality> {
    if labels.len() != truth.len() {
        return Err(Error::ShapeError(format!(
            "label/truth length mismatch: {} vs {}",
            labels.len(),
            truth.len()
        )));
    }
    let kept: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] >= 0 && truth[i] >= 0)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCleanSet);
    }

    let mut pred_ids: Vec<i64> = kept.iter().map(|&i| labels[i]).collect();
    let mut true_ids: Vec<i64> = kept.iter().map(|&i| truth[i]).collect();
    let mut pred_classes = pred_ids.clone();
    pred_classes.sort_unstable();
    pred_classes.dedup();
    let mut true_classes = true_ids.clone();
    true_classes.sort_unstable();
    true_classes.dedup();
    for v in pred_ids.iter_mut() {
        *v = pred_classes.binary_search(v).unwrap() as i64;
    }
    for v in true_ids.iter_mut() {
        *v = true_classes.binary_search(v).unwrap() as i64;
    }

    let (rows, cols) = (pred_classes.len(), true_classes.len());
    let mut table = vec![vec![0_u64; cols]; rows];
    for (p, t) in pred_ids.iter().zip(&true_ids) {
        table[*p as usize][*t as usize] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let n = kept.len() as u64;
    let sum_ij: f64 = table.iter().flatten().map(|&x| choose2(x)).sum();
    let sum_a: f64 = table
        .iter()
        .map(|row| choose2(row.iter().sum::<u64>()))
        .sum();
    let sum_b: f64 = (0..cols)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum::<u64>()))
        .sum();
    let total = choose2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if max_index == expected {
        1.0
    } else {
        (sum_ij - expected) / (max_index - expected)
    };

    let purity = table
        .iter()
        .map(|row| *row.iter().max().expect("cols >= 1") as f64)
        .sum::<f64>()
        / n as f64;
    Ok(ClusterQuality { ari, purity })
}

/// Writes one JSON object per row: {"row": int, "label": int}. Noise rows
/// keep the label -1.
pub fn write_pseudo_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut out = Vec::new();
    for (row, &label) in labels.iter().enumerate() {
        let line = serde_json::json!({"row": row, "label": label});
        writeln!(out, "{line}").expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
