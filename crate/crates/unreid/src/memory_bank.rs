//! Momentum memory bank: one up-to-date unit-norm feature slot per sample.
//!
//! The bank starts as zeros and is populated by the warm-up epochs. Each
//! update blends the stored slot with a fresh feature and renormalizes, so a
//! touched row is always unit norm while untouched rows stay exactly zero
//! (and score 0 against every query).

use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm, Matrix};

/// Tolerance for the caller's promise that an update vector is unit norm.
const UNIT_TOL: f64 = 1e-6;

/// N x d feature memory with momentum updates.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    m: Matrix,
    touched: Vec<bool>,
}

impl MemoryBank {
    /// All-zero bank for `n` samples of dimension `d`.
    pub fn init(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::ConfigError(format!(
                "memory bank needs n, d >= 1, got {n}x{d}"
            )));
        }
        Ok(MemoryBank { m: Matrix::zeros(n, d), touched: vec![false; n] })
    }

    /// Bank seeded from precomputed features, each row normalized. This is
    /// the feature-initialization alternative to the all-zeros default.
    pub fn from_features(features: &Matrix) -> Result<Self> {
        let mut bank = MemoryBank::init(features.rows(), features.cols())?;
        for i in 0..features.rows() {
            let norm = l2_norm(features.row(i));
            if norm < 1e-12 {
                return Err(Error::DataError(format!(
                    "feature row {i} has zero norm and cannot seed the bank"
                )));
            }
            for (slot, v) in bank.m.row_mut(i).iter_mut().zip(features.row(i)) {
                *slot = v / norm;
            }
            bank.touched[i] = true;
        }
        Ok(bank)
    }

    /// Rebuilds a bank from checkpointed rows: all-zero rows stay untouched,
    /// anything else is renormalized to repair narrowing from the on-disk
    /// single-precision format.
    pub fn from_checkpoint(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::DataError("empty bank checkpoint".into()));
        }
        if !m.is_finite() {
            return Err(Error::DataError("non-finite value in bank checkpoint".into()));
        }
        let mut bank = MemoryBank { touched: vec![false; m.rows()], m };
        for i in 0..bank.m.rows() {
            let norm = l2_norm(bank.m.row(i));
            if norm == 0.0 {
                continue;
            }
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::DataError(format!(
                    "bank checkpoint row {i} has norm {norm}, expected ~1 or exactly 0"
                )));
            }
            for v in bank.m.row_mut(i) {
                *v /= norm;
            }
            bank.touched[i] = true;
        }
        Ok(bank)
    }

    /// As `from_checkpoint` but without the renormalization pass, for
    /// full-precision checkpoints where repairing would perturb bits and
    /// break exact training resume. Rows must already be unit to 1e-9.
    pub(crate) fn from_checkpoint_exact(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::DataError("empty bank checkpoint".into()));
        }
        if !m.is_finite() {
            return Err(Error::DataError("non-finite value in bank checkpoint".into()));
        }
        let mut touched = vec![false; m.rows()];
        for (i, flag) in touched.iter_mut().enumerate() {
            let norm = l2_norm(m.row(i));
            if norm == 0.0 {
                continue;
            }
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::DataError(format!(
                    "bank checkpoint row {i} has norm {norm}, expected unit or exactly 0"
                )));
            }
            *flag = true;
        }
        Ok(MemoryBank { m, touched })
    }

    /// Number of slots N.
    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.rows() == 0
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.m.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.m.row(i)
    }

    /// Whether row `i` has received at least one update.
    pub fn is_touched(&self, i: usize) -> bool {
        self.touched[i]
    }

    /// The full slot matrix, for checkpointing and inspection.
    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Momentum update of one slot:
    /// `M[i] <- alpha * M[i] + (1 - alpha) * f_all`, renormalized to unit
    /// norm. Every other row is untouched.
    pub fn update(&mut self, i: usize, f_all: &[f64], alpha: f64) -> Result<()> {
        if i >= self.len() {
            return Err(Error::ShapeError(format!(
                "row {i} out of range for bank of {}",
                self.len()
            )));
        }
        if f_all.len() != self.dim() {
            return Err(Error::ShapeError(format!(
                "update vector of length {} for bank dimension {}",
                f_all.len(),
                self.dim()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::ConfigError(format!("alpha must be in [0,1], got {alpha}")));
        }
        if (l2_norm(f_all) - 1.0).abs() > UNIT_TOL {
            return Err(Error::DataError(format!(
                "update vector for row {i} is not unit norm ({})",
                l2_norm(f_all)
            )));
        }
        let blended: Vec<f64> = self
            .m
            .row(i)
            .iter()
            .zip(f_all)
            .map(|(m, f)| alpha * m + (1.0 - alpha) * f)
            .collect();
        let norm = l2_norm(&blended);
        if norm < 1e-12 {
            return Err(Error::DegenerateUpdate { row: i, norm });
        }
        for (slot, b) in self.m.row_mut(i).iter_mut().zip(&blended) {
            *slot = b / norm;
        }
        self.touched[i] = true;
        Ok(())
    }

    /// Similarity of `f` against every slot: `s[j] = M[j] . f`. Scores lie
    /// in [-1, 1] when both sides are unit norm; zero rows score 0.
    pub fn similarity_row(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::ShapeError(format!(
                "query of length {} for bank dimension {}",
                f.len(),
                self.dim()
            )));
        }
        Ok((0..self.len()).map(|j| dot(self.m.row(j), f)).collect())
    }
}

/// Momentum schedule: alpha grows linearly from 0 at epoch 0 to 0.5 at the
/// final epoch. A single-epoch run stays at 0.
pub fn alpha_schedule(epoch: usize, total_epochs: usize) -> f64 {
    debug_assert!(epoch < total_epochs.max(1));
    if total_epochs <= 1 {
        return 0.0;
    }
    0.5 * epoch as f64 / (total_epochs - 1) as f64
}
