//! Retrieval evaluation: ranked gallery search, CMC Rank-k accuracy, and
//! mean average precision under the single-query cross-camera protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// A set of samples to search from or against.
#[derive(Debug, Clone)]
pub struct EvalSet {
    /// One feature row per sample.
    pub features: Matrix,
    /// Identity per row; -1 marks junk rows that count neither way.
    pub ids: Vec<i64>,
    /// Camera index per row.
    pub cams: Vec<i64>,
}

impl EvalSet {
    pub fn new(features: Matrix, ids: Vec<i64>, cams: Vec<i64>) -> Result<Self> {
        if ids.len() != features.rows() || cams.len() != features.rows() {
            return Err(Error::ShapeError(format!(
                "{} feature rows but {} ids and {} cams",
                features.rows(),
                ids.len(),
                cams.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::DataError("non-finite features".into()));
        }
        Ok(EvalSet { features, ids, cams })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How queries are matched against the gallery.
#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol {
    /// Drop gallery entries sharing both id and camera with the query.
    pub exclude_same_camera: bool,
}

/// Retrieval quality over all evaluated queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Queries with no valid match left after exclusions.
    pub skipped_queries: u64,
}

/// Gallery indices by ascending Euclidean distance to the query feature,
/// ties broken toward the smaller index.
pub fn retrieve(q_feature: &[f64], gallery: &Matrix) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if q_feature.len() != gallery.cols() {
        return Err(Error::ShapeError(format!(
            "query dim {} vs gallery dim {}",
            q_feature.len(),
            gallery.cols()
        )));
    }
    let dists: Vec<f64> = (0..gallery.rows())
        .map(|g| euclidean(q_feature, gallery.row(g)))
        .collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    Ok(order)
}

/// CMC Rank-1/5/10 and mAP for every query against the gallery.
///
/// Per query the ranked gallery is filtered: junk rows (id -1) and, under
/// the cross-camera protocol, rows sharing both id and camera with the
/// query never occupy a position. A query with no remaining correct entry
/// is skipped and tallied; metrics average over the rest.
pub fn cmc_map(query: &EvalSet, gallery: &EvalSet, protocol: &EvalProtocol) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if query.features.cols() != gallery.features.cols() {
        return Err(Error::ShapeError(format!(
            "query dim {} vs gallery dim {}",
            query.features.cols(),
            gallery.features.cols()
        )));
    }

    let mut evaluated = 0_u64;
    let mut skipped = 0_u64;
    let (mut hit1, mut hit5, mut hit10, mut ap_sum) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);

    for qi in 0..query.len() {
        let q_id = query.ids[qi];
        if q_id < 0 {
            return Err(Error::DataError(format!(
                "query row {qi} has negative id {q_id}"
            )));
        }
        let ranking = retrieve(query.features.row(qi), &gallery.features)?;

        let mut position = 0_usize;
        let mut correct = 0_usize;
        let mut first_correct: Option<usize> = None;
        let mut ap = 0.0;
        for g in ranking {
            let g_id = gallery.ids[g];
            if g_id < 0 {
                continue;
            }
            if protocol.exclude_same_camera && g_id == q_id && gallery.cams[g] == query.cams[qi] {
                continue;
            }
            position += 1;
            if g_id == q_id {
                correct += 1;
                ap += correct as f64 / position as f64;
                first_correct.get_or_insert(position);
            }
        }

        let Some(first) = first_correct else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap / correct as f64;
        if first <= 1 {
            hit1 += 1.0;
        }
        if first <= 5 {
            hit5 += 1.0;
        }
        if first <= 10 {
            hit10 += 1.0;
        }
    }

    let denom = if evaluated > 0 { evaluated as f64 } else { 1.0 };
    Ok(RetrievalMetrics {
        rank1: hit1 / denom,
        rank5: hit5 / denom,
        rank10: hit10 / denom,
        map: ap_sum / denom,
        skipped_queries: skipped,
    })
}
