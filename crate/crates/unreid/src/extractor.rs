//! Multi-scale linear feature extractor and its SGD-with-momentum optimizer.
//!
//! The extractor stands in for a branch-split backbone: a global branch sees
//! the whole input, an upper branch sees the first half, a lower branch sees
//! the second half. Branches are bias-free linear maps; their outputs are
//! concatenated and L2-normalized into the final representation `f_all`.
//! Keeping the maps linear makes every gradient in the crate exact and easy
//! to verify against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm, outer, Matrix};

/// Norm below which a concatenated feature cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// The three-branch linear extractor.
///
/// `W_g` is `d_b x D`, `W_up` and `W_low` are `d_b x D/2`; the output
/// dimension is `d = 3 * d_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorModel {
    w_g: Matrix,
    w_up: Matrix,
    w_low: Matrix,
}

/// Per-sample branch outputs and their normalized concatenation.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub f_g: Vec<f64>,
    pub f_up: Vec<f64>,
    pub f_low: Vec<f64>,
    /// Unit-norm concatenation `[f_g; f_up; f_low] / norm`.
    pub f_all: Vec<f64>,
    /// Norm of the concatenation before normalization.
    pub concat_norm: f64,
}

/// Loss gradients for each weight matrix.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub g_wg: Matrix,
    pub g_wup: Matrix,
    pub g_wlow: Matrix,
}

impl ModelGradients {
    /// Zero gradients shaped like `model`.
    pub fn zeros_like(model: &ExtractorModel) -> Self {
        ModelGradients {
            g_wg: Matrix::zeros(model.w_g.rows(), model.w_g.cols()),
            g_wup: Matrix::zeros(model.w_up.rows(), model.w_up.cols()),
            g_wlow: Matrix::zeros(model.w_low.rows(), model.w_low.cols()),
        }
    }

    /// `self += other`, entrywise.
    pub fn accumulate(&mut self, other: &ModelGradients) -> Result<()> {
        self.g_wg.add_assign(&other.g_wg)?;
        self.g_wup.add_assign(&other.g_wup)?;
        self.g_wlow.add_assign(&other.g_wlow)
    }

    /// Multiplies every gradient entry by `c`.
    pub fn scale(&mut self, c: f64) {
        self.g_wg.scale(c);
        self.g_wup.scale(c);
        self.g_wlow.scale(c);
    }
}

impl ExtractorModel {
    /// Seeded init with i.i.d. uniform weights in `[-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)]`. `input_dim` must be even and at least 2.
    pub fn init(input_dim: usize, branch_dim: usize, seed: u64) -> Result<Self> {
        if input_dim < 2 || input_dim % 2 != 0 {
            return Err(Error::ConfigError(format!(
                "input_dim must be even and >= 2, got {input_dim}"
            )));
        }
        if branch_dim == 0 {
            return Err(Error::ConfigError("branch_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform_matrix = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Matrix::from_vec(rows, cols, data).unwrap()
        };
        let w_g = uniform_matrix(branch_dim, input_dim);
        let w_up = uniform_matrix(branch_dim, input_dim / 2);
        let w_low = uniform_matrix(branch_dim, input_dim / 2);
        Ok(ExtractorModel { w_g, w_up, w_low })
    }

    /// Assembles a model from explicit weights, validating shapes and
    /// finiteness.
    pub fn from_weights(w_g: Matrix, w_up: Matrix, w_low: Matrix) -> Result<Self> {
        let d_b = w_g.rows();
        let d_in = w_g.cols();
        if d_b == 0 || d_in < 2 || d_in % 2 != 0 {
            return Err(Error::ShapeError(format!(
                "global branch must be d_b x D with even D >= 2, got {d_b}x{d_in}"
            )));
        }
        for (name, m, cols) in [
            ("upper", &w_up, d_in / 2),
            ("lower", &w_low, d_in / 2),
        ] {
            if m.rows() != d_b || m.cols() != cols {
                return Err(Error::ShapeError(format!(
                    "{name} branch is {}x{}, expected {d_b}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for m in [&w_g, &w_up, &w_low] {
            if !m.is_finite() {
                return Err(Error::DataError("non-finite weight".into()));
            }
        }
        Ok(ExtractorModel { w_g, w_up, w_low })
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.cols()
    }

    pub fn branch_dim(&self) -> usize {
        self.w_g.rows()
    }

    /// Output dimension `d = 3 * d_b`.
    pub fn feature_dim(&self) -> usize {
        3 * self.branch_dim()
    }

    pub fn weights(&self) -> [(&'static str, &Matrix); 3] {
        [("w_g", &self.w_g), ("w_up", &self.w_up), ("w_low", &self.w_low)]
    }

    #[cfg(test)]
    pub(crate) fn weights_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_g, &mut self.w_up, &mut self.w_low]
    }

    /// Forward pass: branch outputs plus the normalized concatenation.
    pub fn extract(&self, x: &[f64]) -> Result<MultiScaleFeatures> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeError(format!(
                "input of length {} for extractor over dimension {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataError("non-finite input vector".into()));
        }
        let half = self.input_dim() / 2;
        let f_g = self.w_g.matvec(x)?;
        let f_up = self.w_up.matvec(&x[..half])?;
        let f_low = self.w_low.matvec(&x[half..])?;
        let concat: Vec<f64> = f_g
            .iter()
            .chain(&f_up)
            .chain(&f_low)
            .copied()
            .collect();
        let concat_norm = l2_norm(&concat);
        if concat_norm < DEGENERATE_NORM {
            return Err(Error::DegenerateFeature { norm: concat_norm });
        }
        let f_all = concat.iter().map(|v| v / concat_norm).collect();
        Ok(MultiScaleFeatures { f_g, f_up, f_low, f_all, concat_norm })
    }

    /// Chain rule from a loss gradient on `f_all` back to every weight.
    ///
    /// With `u` the pre-normalization concatenation and `n = |u|`, the
    /// normalization Jacobian gives `dL/du = (g - f_all (f_all . g)) / n`;
    /// each branch's weight gradient is the outer product of its slice of
    /// `dL/du` with the input slice that branch saw.
    pub fn backward(&self, x: &[f64], grad_f_all: &[f64]) -> Result<ModelGradients> {
        if grad_f_all.len() != self.feature_dim() {
            return Err(Error::ShapeError(format!(
                "gradient of length {} for feature dimension {}",
                grad_f_all.len(),
                self.feature_dim()
            )));
        }
        let feats = self.extract(x)?;
        let fg = dot(&feats.f_all, grad_f_all);
        let gu: Vec<f64> = feats
            .f_all
            .iter()
            .zip(grad_f_all)
            .map(|(f, g)| (g - f * fg) / feats.concat_norm)
            .collect();
        let d_b = self.branch_dim();
        let half = self.input_dim() / 2;
        Ok(ModelGradients {
            g_wg: outer(&gu[..d_b], x),
            g_wup: outer(&gu[d_b..2 * d_b], &x[..half]),
            g_wlow: outer(&gu[2 * d_b..], &x[half..]),
        })
    }
}

/// SGD with momentum and weight decay for the extractor.
///
/// Velocity buffers are shaped like the model and persist across steps.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    vel_g: Matrix,
    vel_up: Matrix,
    vel_low: Matrix,
}

impl SgdOptimizer {
    pub fn new(model: &ExtractorModel, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        validate_sgd_params(lr, momentum, weight_decay)?;
        let [w_g, w_up, w_low] = [&model.w_g, &model.w_up, &model.w_low];
        Ok(SgdOptimizer {
            lr,
            momentum,
            weight_decay,
            vel_g: Matrix::zeros(w_g.rows(), w_g.cols()),
            vel_up: Matrix::zeros(w_up.rows(), w_up.cols()),
            vel_low: Matrix::zeros(w_low.rows(), w_low.cols()),
        })
    }

    /// One update: `v <- momentum*v + grad + weight_decay*w`, then
    /// `w <- w - lr*v`, applied to all three weight matrices.
    pub fn step(&mut self, model: &mut ExtractorModel, grads: &ModelGradients) -> Result<()> {
        sgd_update(&mut model.w_g, &mut self.vel_g, &grads.g_wg, self.lr, self.momentum, self.weight_decay)?;
        sgd_update(&mut model.w_up, &mut self.vel_up, &grads.g_wup, self.lr, self.momentum, self.weight_decay)?;
        sgd_update(&mut model.w_low, &mut self.vel_low, &grads.g_wlow, self.lr, self.momentum, self.weight_decay)
    }

    pub(crate) fn velocities(&self) -> [(&'static str, &Matrix); 3] {
        [("vel_g", &self.vel_g), ("vel_up", &self.vel_up), ("vel_low", &self.vel_low)]
    }

    pub(crate) fn velocities_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.vel_g, &mut self.vel_up, &mut self.vel_low]
    }
}

pub(crate) fn validate_sgd_params(lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::ConfigError(format!("lr must be finite and > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::ConfigError(format!("momentum must be in [0,1), got {momentum}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::ConfigError(format!("weight_decay must be >= 0, got {weight_decay}")));
    }
    Ok(())
}

/// Momentum SGD on a single weight matrix; also used by the classifier head.
pub fn sgd_update(
    w: &mut Matrix,
    v: &mut Matrix,
    g: &Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if w.rows() != g.rows() || w.cols() != g.cols() || w.rows() != v.rows() || w.cols() != v.cols() {
        return Err(Error::ShapeError(format!(
            "sgd over weight {}x{}, velocity {}x{}, gradient {}x{}",
            w.rows(), w.cols(), v.rows(), v.cols(), g.rows(), g.cols()
        )));
    }
    for i in 0..w.rows() * w.cols() {
        let wd = weight_decay * w.data()[i];
        let vel = momentum * v.data()[i] + g.data()[i] + wd;
        v.data_mut()[i] = vel;
        w.data_mut()[i] -= lr * vel;
    }
    Ok(())
}

/// Step learning-rate schedule: divide by 10 every `decay_every` epochs,
/// with the boundary scaled proportionally when the run is shorter or longer
/// than the 60-epoch reference (floor, minimum period 1).
pub fn learning_rate(base_lr: f64, epoch: usize, total_epochs: usize, decay_every: usize) -> f64 {
    let period = (decay_every * total_epochs / 60).max(1);
    let drops = (epoch / period) as i32;
    base_lr * 0.1_f64.powi(drops)
}
