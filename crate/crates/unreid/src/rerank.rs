//! K-reciprocal re-ranking: turns a Euclidean distance matrix into the
//! Jaccard distance used by self-paced clustering.
//!
//! The construction follows the standard k-reciprocal encoding: mutual
//! k-nearest sets, a half-size expansion with a 2/3 overlap rule, Gaussian
//! weighting `exp(-d)`, local query expansion over the k2 neighborhood, and
//! the min/max-ratio Jaccard distance between encoding vectors.

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// Neighborhood sizes and the final mixing weight.
#[derive(Debug, Clone, Copy)]
pub struct RerankParams {
    /// Reciprocal-set neighborhood size.
    pub k1: usize,
    /// Local-query-expansion size.
    pub k2: usize,
    /// Weight of the max-rescaled original distance in the blended output;
    /// 0 keeps the pure Jaccard distance.
    pub lambda_mix: f64,
}

impl RerankParams {
    pub fn new(k1: usize, k2: usize, lambda_mix: f64) -> Result<Self> {
        if k2 == 0 || k1 < k2 {
            return Err(Error::ConfigError(format!(
                "need k1 >= k2 >= 1, got k1={k1}, k2={k2}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda_mix) {
            return Err(Error::ConfigError(format!(
                "lambda_mix must be in [0,1], got {lambda_mix}"
            )));
        }
        Ok(RerankParams { k1, k2, lambda_mix })
    }
}

/// The Jaccard distance matrix and its blend with the rescaled original.
#[derive(Debug, Clone)]
pub struct RerankedDistances {
    /// Pure Jaccard distance, symmetric, entries in [0,1].
    pub jaccard: Matrix,
    /// `(1 - lambda_mix) * jaccard + lambda_mix * original/max(original)`.
    pub blended: Matrix,
}

/// All pairwise Euclidean distances between the rows of `f`; symmetric with
/// a zero diagonal by construction.
pub fn pairwise_euclidean(f: &Matrix) -> Matrix {
    let n = f.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let dist = euclidean(f.row(i), f.row(j));
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

/// The `k` nearest neighbors of `p` by ascending distance, ties by ascending
/// index, self excluded. Asking for more neighbors than exist returns all.
fn topk_excluding_self(d: &Matrix, p: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.rows()).filter(|&g| g != p).collect();
    idx.sort_by(|&a, &b| d.get(p, a).total_cmp(&d.get(p, b)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// As above but with `p` itself eligible (it ranks first at distance 0
/// unless an earlier index ties it).
fn topk_including_self(d: &Matrix, p: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.rows()).collect();
    idx.sort_by(|&a, &b| d.get(p, a).total_cmp(&d.get(p, b)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mutual k-nearest set: `g` qualifies iff each point lies in the other's
/// top-k list (self excluded). Returned in ascending index order.
pub fn k_reciprocal_set(d: &Matrix, p: usize, k: usize) -> Vec<usize> {
    let forward = topk_excluding_self(d, p, k);
    let mut set: Vec<usize> = forward
        .into_iter()
        .filter(|&g| topk_excluding_self(d, g, k).contains(&p))
        .collect();
    set.sort_unstable();
    set
}

/// Reciprocal set expanded by the half-size sets of its members: member `q`
/// contributes `R(q, ceil(k1/2))` when at least two thirds of that set
/// already lies in `R(p, k1)`. Returned in ascending index order.
pub fn expanded_set(d: &Matrix, p: usize, k1: usize) -> Vec<usize> {
    let base = k_reciprocal_set(d, p, k1);
    let half_k = k1.div_ceil(2);
    let mut result = base.clone();
    for &q in &base {
        let half = k_reciprocal_set(d, q, half_k);
        let overlap = half
            .iter()
            .filter(|x| base.binary_search(x).is_ok())
            .count();
        if 3 * overlap >= 2 * half.len() {
            result.extend(half);
        }
    }
    result.sort_unstable();
    result.dedup();
    result
}

/// Builds the Jaccard distance from a precomputed distance matrix.
///
/// Encoding vectors are `V[p][g] = exp(-D[p][g])` on the expanded reciprocal
/// set, then averaged over the k2 nearest rows (self included). The distance
/// is `1 - sum(min)/sum(max)`; a pair with no support anywhere is fully
/// dissimilar (distance 1).
pub fn jaccard_matrix(d: &Matrix, params: &RerankParams) -> Result<RerankedDistances> {
    RerankParams::new(params.k1, params.k2, params.lambda_mix)?;
    let n = d.rows();
    if n == 0 || d.cols() != n {
        return Err(Error::ShapeError(format!(
            "distance matrix must be square and non-empty, got {}x{}",
            n,
            d.cols()
        )));
    }
    if !d.is_finite() {
        return Err(Error::DataError("non-finite distance".into()));
    }

    let mut v = Matrix::zeros(n, n);
    for p in 0..n {
        for g in expanded_set(d, p, params.k1) {
            v.set(p, g, (-d.get(p, g)).exp());
        }
    }

    // Local query expansion: each row becomes the mean of its k2
    // neighborhood's rows, pulling the self-weight above zero.
    let mut expanded = Matrix::zeros(n, n);
    for p in 0..n {
        let neigh = topk_including_self(d, p, params.k2);
        let inv = 1.0 / neigh.len() as f64;
        let row = expanded.row_mut(p);
        for &q in &neigh {
            for (out, val) in row.iter_mut().zip(v.row(q)) {
                *out += val;
            }
        }
        for out in row.iter_mut() {
            *out *= inv;
        }
    }

    let mut jaccard = Matrix::zeros(n, n);
    for p in 0..n {
        for g in p..n {
            let mut min_sum = 0.0;
            let mut max_sum = 0.0;
            for (a, b) in expanded.row(p).iter().zip(expanded.row(g)) {
                min_sum += a.min(*b);
                max_sum += a.max(*b);
            }
            let dist = if max_sum == 0.0 { 1.0 } else { 1.0 - min_sum / max_sum };
            jaccard.set(p, g, dist);
            jaccard.set(g, p, dist);
        }
    }

    let d_max = d.max_value();
    let mut blended = Matrix::zeros(n, n);
    for i in 0..n * n {
        let normalized = if d_max > 0.0 { d.data()[i] / d_max } else { 0.0 };
        blended.data_mut()[i] =
            (1.0 - params.lambda_mix) * jaccard.data()[i] + params.lambda_mix * normalized;
    }
    Ok(RerankedDistances { jaccard, blended })
}
