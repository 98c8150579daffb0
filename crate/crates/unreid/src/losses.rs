//! Pseudo-label classification losses: label-smoothed cross-entropy through
//! a linear classifier head, batch-hard triplet loss, and the combined
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// Scalar weights of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Multi-label loss weight.
    pub lambda1: f64,
    /// Pseudo-label (CE + triplet) loss weight.
    pub lambda2: f64,
    /// Label-smoothing constant.
    pub epsilon: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, epsilon: f64, margin: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::ConfigError(format!(
                "loss weights must be >= 0, got lambda1={lambda1}, lambda2={lambda2}"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::ConfigError(format!(
                "epsilon must be in [0,1), got {epsilon}"
            )));
        }
        if margin < 0.0 {
            return Err(Error::ConfigError(format!(
                "margin must be >= 0, got {margin}"
            )));
        }
        Ok(LossWeights { lambda1, lambda2, epsilon, margin })
    }
}

/// Linear map from features to per-cluster logits. Rebuilt whenever the
/// cluster count changes.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    w: Matrix,
}

impl ClassifierHead {
    /// Seeded init with i.i.d. uniform weights in `[-1/sqrt(d), +1/sqrt(d)]`.
    pub fn init(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::ConfigError(format!(
                "classifier needs >= 2 classes, got {num_classes}"
            )));
        }
        if feature_dim == 0 {
            return Err(Error::ConfigError("feature_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..num_classes * feature_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Ok(ClassifierHead {
            w: Matrix::from_vec(num_classes, feature_dim, data).expect("sized above"),
        })
    }

    pub fn from_weights(w: Matrix) -> Result<Self> {
        if w.rows() < 2 || w.cols() == 0 {
            return Err(Error::ShapeError(format!(
                "classifier weights must be >=2 x >=1, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        if !w.is_finite() {
            return Err(Error::DataError("non-finite classifier weights".into()));
        }
        Ok(ClassifierHead { w })
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    /// Logits `W f`.
    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.w.matvec(f)
    }

    /// Pulls a logit gradient back to weight and feature gradients:
    /// `dW = g f^T`, `df = W^T g`.
    pub fn backward(&self, f: &[f64], grad_logits: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        if f.len() != self.w.cols() || grad_logits.len() != self.w.rows() {
            return Err(Error::ShapeError(format!(
                "backward expects f[{}] and grad_logits[{}], got f[{}], grad_logits[{}]",
                self.w.cols(),
                self.w.rows(),
                f.len(),
                grad_logits.len()
            )));
        }
        let mut dw = Matrix::zeros(self.w.rows(), self.w.cols());
        let mut df = vec![0.0; self.w.cols()];
        for (c, &g) in grad_logits.iter().enumerate() {
            for (j, &x) in f.iter().enumerate() {
                dw.set(c, j, g * x);
                df[j] += g * self.w.get(c, j);
            }
        }
        Ok((dw, df))
    }
}

/// Cross-entropy value and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

/// Label-smoothed cross-entropy.
///
/// The target puts `1 - epsilon + epsilon/C` on the true class and
/// `epsilon/C` elsewhere; the loss is the cross-entropy of that target
/// against the softmax of the logits, and the logit gradient is
/// `softmax - target`.
pub fn ce_label_smoothing(logits: &[f64], label: usize, epsilon: f64) -> Result<CeOutput> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::ConfigError(format!(
            "cross-entropy needs >= 2 classes, got {c}"
        )));
    }
    if label >= c {
        return Err(Error::ShapeError(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::ConfigError(format!(
            "epsilon must be in [0,1), got {epsilon}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericError("non-finite logits".into()));
    }

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = exp_sum.ln();
    let off_target = epsilon / c as f64;
    let on_target = 1.0 - epsilon + off_target;

    let mut loss = 0.0;
    let mut grad_logits = Vec::with_capacity(c);
    for (j, &z) in logits.iter().enumerate() {
        let q = if j == label { on_target } else { off_target };
        let log_p = (z - max) - log_sum;
        loss -= q * log_p;
        grad_logits.push(log_p.exp() - q);
    }
    Ok(CeOutput { loss, grad_logits })
}

/// Triplet loss value and its gradient with respect to the batch features.
#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_f: Matrix,
}

/// Batch-hard triplet loss.
///
/// Per anchor the hardest positive is the farthest same-label sample and
/// the hardest negative the nearest other-label sample (ties to the
/// smallest index); the loss is the mean hinge
/// `max(0, d_pos + margin - d_neg)`. The subgradient at the hinge corner
/// and at zero distances is taken as 0.
pub fn triplet_hard(batch_f: &Matrix, labels: &[usize], margin: f64) -> Result<TripletOutput> {
    let b = batch_f.rows();
    if labels.len() != b {
        return Err(Error::ShapeError(format!(
            "batch has {b} rows but {} labels",
            labels.len()
        )));
    }
    for (i, &li) in labels.iter().enumerate() {
        let same = labels.iter().filter(|&&l| l == li).count();
        if same < 2 {
            return Err(Error::BatchCompositionError(format!(
                "label {li} of row {i} has no positive partner in the batch"
            )));
        }
        if same == b {
            return Err(Error::BatchCompositionError(format!(
                "label {li} fills the whole batch; no negatives exist"
            )));
        }
    }

    let mut dist = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            let d = euclidean(batch_f.row(i), batch_f.row(j));
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }

    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, batch_f.cols());
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let mut hardest_pos = (f64::NEG_INFINITY, usize::MAX);
        let mut hardest_neg = (f64::INFINITY, usize::MAX);
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = dist.get(i, j);
            if labels[j] == labels[i] {
                if d > hardest_pos.0 {
                    hardest_pos = (d, j);
                }
            } else if d < hardest_neg.0 {
                hardest_neg = (d, j);
            }
        }
        let (d_pos, p) = hardest_pos;
        let (d_neg, n) = hardest_neg;
        let hinge = d_pos + margin - d_neg;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge * inv_b;
        // d/df of ||f_i - f_j|| is (f_i - f_j)/d; zero distance gets
        // subgradient 0.
        if d_pos > 0.0 {
            for k in 0..batch_f.cols() {
                let g = (batch_f.get(i, k) - batch_f.get(p, k)) / d_pos * inv_b;
                *grad.row_mut(i).get_mut(k).unwrap() += g;
                *grad.row_mut(p).get_mut(k).unwrap() -= g;
            }
        }
        if d_neg > 0.0 {
            for k in 0..batch_f.cols() {
                let g = (batch_f.get(i, k) - batch_f.get(n, k)) / d_neg * inv_b;
                *grad.row_mut(i).get_mut(k).unwrap() -= g;
                *grad.row_mut(n).get_mut(k).unwrap() += g;
            }
        }
    }
    Ok(TripletOutput { loss, grad_f: grad })
}

/// Combined objective `lambda1 * L_ml + lambda2 * (L_ce + L_tri)`.
pub fn total_loss(l_mmcl: f64, l_ce: f64, l_tri: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * l_mmcl + lambda2 * (l_ce + l_tri)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn smoothing_targets_through_uniform_gradient() {
        // Uniform logits give softmax 0.1 per class, so the gradient reads
        // off the smoothed target: true class 0.1 - 0.91, others 0.1 - 0.01.
        let out = ce_label_smoothing(&[0.0; 10], 3, 0.1).unwrap();
        for (j, g) in out.grad_logits.iter().enumerate() {
            let expect = if j == 3 { 0.1 - 0.91 } else { 0.1 - 0.01 };
            assert!((g - expect).abs() < 1e-12, "class {j}: {g} vs {expect}");
        }
    }

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let out = ce_label_smoothing(&[0.0, 0.0], 0, 0.0).unwrap();
        assert!((out.loss - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_when_softmax_matches_target() {
        let eps = 0.1;
        let c = 10;
        let off = eps / c as f64;
        let on = 1.0 - eps + off;
        let logits: Vec<f64> = (0..c)
            .map(|j| if j == 4 { on.ln() } else { off.ln() })
            .collect();
        let out = ce_label_smoothing(&logits, 4, eps).unwrap();
        for g in &out.grad_logits {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_zero_matches_plain_ce() {
        for seed in 0..10 {
            let logits = random_vec(6, seed);
            let label = (seed % 6) as usize;
            let out = ce_label_smoothing(&logits, label, 0.0).unwrap();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let plain = -((logits[label] - max) - lse);
            assert!((out.loss - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_shift_invariant() {
        let logits = random_vec(5, 42);
        let shifted: Vec<f64> = logits.iter().map(|z| z + 123.456).collect();
        let a = ce_label_smoothing(&logits, 2, 0.1).unwrap();
        let b = ce_label_smoothing(&shifted, 2, 0.1).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9);
        for (ga, gb) in a.grad_logits.iter().zip(&b.grad_logits) {
            assert!((ga - gb).abs() < 1e-9);
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..5 {
            let logits = random_vec(7, 100 + seed);
            let label = (seed % 7) as usize;
            let out = ce_label_smoothing(&logits, label, 0.1).unwrap();
            for j in 0..7 {
                let mut plus = logits.clone();
                plus[j] += h;
                let mut minus = logits.clone();
                minus[j] -= h;
                let fd = (ce_label_smoothing(&plus, label, 0.1).unwrap().loss
                    - ce_label_smoothing(&minus, label, 0.1).unwrap().loss)
                    / (2.0 * h);
                let a = out.grad_logits[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-4, "logit {j}: analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn ce_validates_inputs() {
        assert!(matches!(
            ce_label_smoothing(&[0.0], 0, 0.0),
            Err(Error::ConfigError(_))
        ));
        assert!(matches!(
            ce_label_smoothing(&[0.0, 0.0], 2, 0.0),
            Err(Error::ShapeError(_))
        ));
        assert!(matches!(
            ce_label_smoothing(&[0.0, f64::NAN], 0, 0.0),
            Err(Error::NumericError(_))
        ));
        assert!(matches!(
            ce_label_smoothing(&[0.0, 0.0], 0, 1.0),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn triplet_identical_features_zero_loss() {
        let f = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let out = triplet_hard(&f, &[0, 0, 1, 1], 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_f.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn triplet_separated_pairs_zero_loss() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let out = triplet_hard(&f, &[0, 0, 1, 1], 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn triplet_matches_exhaustive_enumeration() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let b = 8;
            let labels: Vec<usize> = vec![0, 0, 1, 1, 2, 2, 0, 1];
            let rows: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let f = Matrix::from_rows(&rows).unwrap();
            let out = triplet_hard(&f, &labels, 0.3).unwrap();

            let mut expect = 0.0;
            for i in 0..b {
                let mut d_pos = f64::NEG_INFINITY;
                let mut d_neg = f64::INFINITY;
                for j in 0..b {
                    if j == i {
                        continue;
                    }
                    let d = euclidean(&rows[i], &rows[j]);
                    if labels[j] == labels[i] {
                        d_pos = d_pos.max(d);
                    } else {
                        d_neg = d_neg.min(d);
                    }
                }
                expect += (d_pos + 0.3 - d_neg).max(0.0);
            }
            expect /= b as f64;
            assert_eq!(out.loss, expect, "seed {seed}");
        }
    }

    #[test]
    fn triplet_permutation_invariant() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| random_vec(4, 300 + i as u64))
            .collect();
        let labels = [0_usize, 0, 1, 1, 2, 2];
        let f = Matrix::from_rows(&rows).unwrap();
        let base = triplet_hard(&f, &labels, 0.2).unwrap().loss;

        let perm = [3_usize, 0, 5, 2, 4, 1];
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pf = Matrix::from_rows(&prows).unwrap();
        let permuted = triplet_hard(&pf, &plabels, 0.2).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn triplet_rejects_bad_batches() {
        let f = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            triplet_hard(&f, &[0, 0, 1], 0.0),
            Err(Error::BatchCompositionError(_))
        ));
        let f2 = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            triplet_hard(&f2, &[0, 0], 0.0),
            Err(Error::BatchCompositionError(_))
        ));
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let labels = [0_usize, 0, 1, 1];
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let f = Matrix::from_rows(&rows).unwrap();
            let out = triplet_hard(&f, &labels, 0.5).unwrap();
            for i in 0..4 {
                for k in 0..3 {
                    let mut plus = f.clone();
                    *plus.row_mut(i).get_mut(k).unwrap() += h;
                    let mut minus = f.clone();
                    *minus.row_mut(i).get_mut(k).unwrap() -= h;
                    let fd = (triplet_hard(&plus, &labels, 0.5).unwrap().loss
                        - triplet_hard(&minus, &labels, 0.5).unwrap().loss)
                        / (2.0 * h);
                    let a = out.grad_f.get(i, k);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    assert!(rel <= 1e-4, "seed {seed} ({i},{k}): analytic {a}, fd {fd}");
                }
            }
        }
    }

    #[test]
    fn combined_objective_arithmetic() {
        assert!((total_loss(2.0, 1.0, 0.5, 0.3, 1.0) - 2.1).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 1.0, 0.5, 0.3, 0.0), 0.3 * 2.0);
        assert_eq!(total_loss(2.0, 1.0, 0.5, 0.0, 0.0), 0.0);
    }

    #[test]
    fn head_logits_and_backward() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let head = ClassifierHead::from_weights(w).unwrap();
        let logits = head.logits(&[3.0, 4.0]).unwrap();
        assert_eq!(logits, vec![3.0, 8.0, 7.0]);

        let (dw, df) = head.backward(&[3.0, 4.0], &[1.0, 0.0, -1.0]).unwrap();
        // dW = g f^T.
        assert_eq!(dw.row(0), &[3.0, 4.0]);
        assert_eq!(dw.row(1), &[0.0, 0.0]);
        assert_eq!(dw.row(2), &[-3.0, -4.0]);
        // df = W^T g = (1,0) - (1,1).
        assert_eq!(df, vec![0.0, -1.0]);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let h = 1e-6;
        let head = ClassifierHead::init(4, 3, 9).unwrap();
        let f = random_vec(3, 500);
        let label = 2;
        let eps = 0.1;
        let logits = head.logits(&f).unwrap();
        let ce = ce_label_smoothing(&logits, label, eps).unwrap();
        let (dw, df) = head.backward(&f, &ce.grad_logits).unwrap();

        let eval = |head: &ClassifierHead, f: &[f64]| {
            ce_label_smoothing(&head.logits(f).unwrap(), label, eps)
                .unwrap()
                .loss
        };
        for c in 0..4 {
            for j in 0..3 {
                let mut plus = head.clone();
                *plus.weights_mut().row_mut(c).get_mut(j).unwrap() += h;
                let mut minus = head.clone();
                *minus.weights_mut().row_mut(c).get_mut(j).unwrap() -= h;
                let fd = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
                let a = dw.get(c, j);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-4, "W[{c}][{j}]: analytic {a}, fd {fd}");
            }
        }
        for j in 0..3 {
            let mut plus = f.clone();
            plus[j] += h;
            let mut minus = f.clone();
            minus[j] -= h;
            let fd = (eval(&head, &plus) - eval(&head, &minus)) / (2.0 * h);
            let rel = (df[j] - fd).abs() / df[j].abs().max(fd.abs()).max(1e-4);
            assert!(rel <= 1e-4, "f[{j}]: analytic {}, fd {fd}", df[j]);
        }
    }

    #[test]
    fn head_init_bounds_and_determinism() {
        let a = ClassifierHead::init(5, 16, 3).unwrap();
        let b = ClassifierHead::init(5, 16, 3).unwrap();
        assert_eq!(a.weights(), b.weights());
        let bound = 1.0 / 4.0;
        assert!(a.weights().data().iter().all(|w| w.abs() <= bound));
        assert!(ClassifierHead::init(1, 16, 0).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::new(0.3, 1.0, 0.1, 0.0).is_ok());
        assert!(LossWeights::new(-0.1, 1.0, 0.1, 0.0).is_err());
        assert!(LossWeights::new(0.3, 1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(0.3, 1.0, 0.1, -0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ce_loss_nonnegative(seed in 0u64..1000, label in 0usize..5) {
            let logits = random_vec(5, seed);
            let out = ce_label_smoothing(&logits, label, 0.1).unwrap();
            prop_assert!(out.loss >= 0.0);
            // Softmax minus target sums to zero.
            let s: f64 = out.grad_logits.iter().sum();
            prop_assert!(s.abs() < 1e-9);
        }

        #[test]
        fn triplet_loss_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let f = Matrix::from_rows(&rows).unwrap();
            let out = triplet_hard(&f, &[0, 0, 1, 1, 2, 2], 0.1).unwrap();
            prop_assert!(out.loss >= 0.0);
        }
    }
}
