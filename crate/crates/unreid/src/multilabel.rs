//! Multi-hot label prediction from memory-bank similarities and the
//! multi-label classification loss.
//!
//! For a sample i the pipeline is: rank all similarity scores, keep the
//! prefix above a threshold, walk that prefix accepting candidates whose own
//! candidate set contains i (cycle consistency), mark accepted indices +1 and
//! everything else -1, then mine the highest-scoring non-positives as hard
//! negatives. The loss is squared error between similarity scores and their
//! +-1 targets, positives upweighted by delta.
//!
//! Note: when scores on both sides of the cycle check come from the same
//! bank, the similarity is symmetric and a thresholded candidate always
//! contains i in return, so the walk accepts the whole prefix. The walk still
//! implements the general rule and rejects under asymmetric score sources.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;

/// Ranked candidates and the accepted positive prefix for one sample.
#[derive(Debug, Clone)]
pub struct PositiveSet {
    /// The sample the set belongs to.
    pub index: usize,
    /// Thresholded rank-list prefix, descending similarity.
    pub candidates: Vec<usize>,
    /// Cycle-consistent prefix of `candidates`; always contains `index`.
    pub positives: Vec<usize>,
    /// Threshold the set was built with.
    pub threshold: f64,
}

/// The +-1 label vector and its mined hard negatives.
#[derive(Debug, Clone)]
pub struct MultiHotLabel {
    /// One entry per sample: +1 for positives, -1 otherwise.
    pub y: Vec<i8>,
    /// Hard negative indices, descending score, disjoint from the positives.
    pub negatives: Vec<usize>,
}

/// Multi-label loss value and its gradient w.r.t. the query feature.
#[derive(Debug, Clone)]
pub struct MmclOutput {
    pub loss: f64,
    pub grad_f: Vec<f64>,
}

/// Indices sorted by descending score; ties broken by ascending index.
pub fn rank_list(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The rank-list prefix whose scores reach `t`.
///
/// `t` must lie in (0, 1]. An empty prefix is an error: every healthy sample
/// scores 1 against its own populated memory slot.
pub fn candidate_set(scores: &[f64], t: f64) -> Result<Vec<usize>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::ConfigError(format!("threshold must be in (0,1], got {t}")));
    }
    let ranked = rank_list(scores);
    let candidates: Vec<usize> = ranked
        .into_iter()
        .take_while(|&j| scores[j] >= t)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates { threshold: t });
    }
    Ok(candidates)
}

/// Accepts candidates in rank order while the candidate's own thresholded
/// set contains `i`; stops at the first rejection.
fn cycle_walk<F>(i: usize, candidates: &[usize], t: f64, mut scores_of: F) -> Result<Vec<usize>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut positives = Vec::new();
    for &j in candidates {
        let back = candidate_set(&scores_of(j)?, t)?;
        if back.contains(&i) {
            positives.push(j);
        } else {
            break;
        }
    }
    Ok(positives)
}

/// Predicts the positive set for sample `i` from bank-to-bank similarities.
pub fn cycle_consistent_positives(bank: &MemoryBank, i: usize, t: f64) -> Result<PositiveSet> {
    if i >= bank.len() {
        return Err(Error::ShapeError(format!(
            "sample {i} out of range for bank of {}",
            bank.len()
        )));
    }
    let scores = bank.similarity_row(bank.row(i))?;
    let candidates = candidate_set(&scores, t)?;
    let positives = cycle_walk(i, &candidates, t, |j| bank.similarity_row(bank.row(j)))?;
    Ok(PositiveSet { index: i, candidates, positives, threshold: t })
}

/// The +-1 multi-hot vector over `n` classes: +1 exactly on `positives`.
///
/// `positives` must be valid indices below `n`.
pub fn multihot(positives: &[usize], n: usize) -> Vec<i8> {
    let mut y = vec![-1i8; n];
    for &j in positives {
        y[j] = 1;
    }
    y
}

/// The `max(1, round((N - |P|) * r / 100))` highest-scoring indices outside
/// the positive set, in descending score order.
pub fn hard_negatives(scores: &[f64], positives: &[usize], r_percent: f64) -> Result<Vec<usize>> {
    if !(r_percent > 0.0 && r_percent <= 100.0) {
        return Err(Error::ConfigError(format!(
            "r_percent must be in (0,100], got {r_percent}"
        )));
    }
    let n = scores.len();
    let mut is_positive = vec![false; n];
    for &j in positives {
        if j >= n {
            return Err(Error::ShapeError(format!("positive index {j} out of range for {n} scores")));
        }
        is_positive[j] = true;
    }
    let free = n - is_positive.iter().filter(|&&p| p).count();
    if free == 0 {
        return Err(Error::NoNegatives);
    }
    let count = ((free as f64) * r_percent / 100.0).round().max(1.0) as usize;
    Ok(rank_list(scores)
        .into_iter()
        .filter(|&j| !is_positive[j])
        .take(count)
        .collect())
}

/// Bundles [`multihot`] and [`hard_negatives`] for one sample.
pub fn predict_label(scores: &[f64], positives: &[usize], r_percent: f64) -> Result<MultiHotLabel> {
    let y = multihot(positives, scores.len());
    let negatives = hard_negatives(scores, positives, r_percent)?;
    Ok(MultiHotLabel { y, negatives })
}

/// Multi-label classification loss over the counted classes:
///
/// `L = (delta/|P|) * sum_{p in P} (s_p - y_p)^2 + (1/|S|) * sum_{s in S} (s_s - y_s)^2`
///
/// The gradient is taken w.r.t. the query feature with the memory held
/// constant, so it is a weighted sum of memory rows; `scores` must be the
/// similarities of that same feature against `bank`.
pub fn mmcl_loss(
    bank: &MemoryBank,
    scores: &[f64],
    y: &[i8],
    positives: &[usize],
    negatives: &[usize],
    delta: f64,
) -> Result<MmclOutput> {
    let n = bank.len();
    if scores.len() != n || y.len() != n {
        return Err(Error::ShapeError(format!(
            "scores/labels of length {}/{} against bank of {n}",
            scores.len(),
            y.len()
        )));
    }
    if positives.is_empty() {
        return Err(Error::EmptySet("positive"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySet("negative"));
    }
    if let Some(&bad) = positives.iter().chain(negatives).find(|&&j| j >= n) {
        return Err(Error::ShapeError(format!("class index {bad} out of range for {n}")));
    }

    let mut loss = 0.0;
    let mut grad_f = vec![0.0; bank.dim()];
    for (set, weight) in [
        (positives, delta / positives.len() as f64),
        (negatives, 1.0 / negatives.len() as f64),
    ] {
        for &j in set {
            let residual = scores[j] - y[j] as f64;
            loss += weight * residual * residual;
            let coeff = weight * 2.0 * residual;
            for (g, m) in grad_f.iter_mut().zip(bank.row(j)) {
                *g += coeff * m;
            }
        }
    }
    Ok(MmclOutput { loss, grad_f })
}

#[derive(Serialize)]
struct LabelDumpRow<'a> {
    i: usize,
    positives: &'a [usize],
    negatives: &'a [usize],
}

/// Writes the predicted-label debugging dump: one
/// `{"i":..,"positives":[..],"negatives":[..]}` object per line.
pub fn write_label_dump(path: &Path, rows: &[(usize, Vec<usize>, Vec<usize>)]) -> Result<()> {
    let mut out = String::new();
    for (i, positives, negatives) in rows {
        let row = LabelDumpRow { i: *i, positives, negatives };
        out.push_str(&serde_json::to_string(&row).unwrap());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
