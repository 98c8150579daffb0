//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error enumeration.
///
/// Variants are grouped by the stage that raises them: configuration and file
/// ingestion, per-sample feature math, label prediction, clustering, and
/// evaluation. Functions only ever return variants listed in their docs.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid configuration: {0}")]
    ConfigError(String),

    /// A file does not follow its declared layout (bad magic, truncation,
    /// malformed records, inconsistent row numbering).
    #[error("malformed file: {0}")]
    FormatError(String),

    /// Ingested values violate a data contract (non-finite entries, negative
    /// identities where they are not allowed, mismatched lengths).
    #[error("invalid data: {0}")]
    DataError(String),

    /// The concatenated branch feature has a norm too small to normalize.
    #[error("degenerate feature: concatenated norm {norm:.3e} below 1e-12")]
    DegenerateFeature { norm: f64 },

    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    /// A momentum blend collapsed to a near-zero vector and cannot be
    /// renormalized.
    #[error("degenerate memory update for row {row}: blend norm {norm:.3e} below 1e-12")]
    DegenerateUpdate { row: usize, norm: f64 },

    /// No score reached the candidate threshold, so the rank-list prefix is
    /// empty. Signals a corrupted or unpopulated memory row.
    #[error("no candidates: no similarity reached threshold {threshold}")]
    EmptyCandidates { threshold: f64 },

    /// The positive set covers every sample, leaving nothing to mine.
    #[error("no negatives available: positive set covers all samples")]
    NoNegatives,

    /// A loss was called with an empty index set.
    #[error("empty {0} set in loss computation")]
    EmptySet(&'static str),

    /// Clustering marked every sample as noise; there is no clean subset to
    /// train on.
    #[error("clustering marked every sample as noise")]
    EmptyCleanSet,

    /// Retrieval was asked to rank an empty gallery.
    #[error("gallery contains no rows")]
    EmptyGallery,

    /// A mini-batch cannot support the batch-hard triplet loss.
    #[error("bad batch composition: {0}")]
    BatchCompositionError(String),

    /// Arithmetic produced or received a non-finite value.
    #[error("numeric failure: {0}")]
    NumericError(String),

    /// An operating-system I/O failure, tagged with the path involved.
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
