//! Desk-scale engine for unsupervised re-identification.
//!
//! The pipeline learns an embedding without any identity labels: a multi-scale
//! linear extractor is trained against a momentum memory bank using multi-hot
//! labels predicted from rank lists, then refined with pseudo labels obtained
//! by clustering k-reciprocal re-ranked distances. Retrieval quality is scored
//! with CMC curves and mean average precision.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: synthetic identity blobs, embedding files, manifests
//! - [`extractor`]: the linear multi-scale feature extractor and its SGD
//! - [`memory_bank`]: L2-normalized memory slots with momentum updates
//! - [`multilabel`]: rank lists, cycle-consistent positives, multi-hot loss
//! - [`rerank`]: k-reciprocal sets and Jaccard re-ranked distances
//! - [`clusterer`]: DBSCAN and k-means over precomputed inputs, clean-set
//!   selection, clustering quality scores
//! - [`losses`]: smoothed cross-entropy, batch-hard triplet, joint objective
//! - [`evaluator`]: ranked retrieval, CMC rank-k, mAP
//! - [`pipeline`]: the training schedule tying everything together
//!
//! Every random draw flows through seeded ChaCha streams and every reduction
//! runs single-threaded in a fixed order, so a fixed seed reproduces runs
//! byte-for-byte.

pub mod clusterer;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod extractor;
pub mod losses;
pub mod matrix;
pub mod memory_bank;
pub mod multilabel;
pub mod pipeline;
pub mod rerank;

pub use error::{Error, Result};
pub use matrix::Matrix;
