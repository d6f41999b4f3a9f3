//! Training objectives and their analytic gradients.
//!
//! The contrastive losses operate on a [`SimilarityMatrix`]; every `*_grad`
//! variant returns the loss value together with `dL/dS` (same shape as the
//! matrix). Hinge terms use subgradient 0 at their kinks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;

/// Probability clamp applied before taking logarithms in [`bce`].
pub const BCE_EPS: f64 = 1e-7;

pub fn validate_margin(m: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&m) {
        return Err(Error::InvalidMargin(m));
    }
    Ok(())
}

/// `-Σ_id S(n,n) + Σ_ood S(k,k)`. Ablation baseline only; never part of the
/// joint objective.
pub fn naive_contrastive_loss(s: &SimilarityMatrix) -> f64 {
    naive_contrastive_grad(s).0
}

pub fn naive_contrastive_grad(s: &SimilarityMatrix) -> (f64, Array2<f64>) {
    let n = s.n();
    let mut grad = Array2::zeros((n, n));
    let mut loss = 0.0;
    for &i in s.id_indices() {
        loss -= s.get(i, i);
        grad[[i, i]] = -1.0;
    }
    for &k in s.ood_indices() {
        loss += s.get(k, k);
        grad[[k, k]] = 1.0;
    }
    (loss, grad)
}

/// Hinge loss over ID rows: every other text in the row must trail the
/// aligned pair by at least `m`. Each row's sum is scaled by `1/N` even though
/// it has `N - 1` terms.
pub fn hinge_id_loss(s: &SimilarityMatrix, m: f64) -> Result<f64> {
    Ok(hinge_id_grad(s, m)?.0)
}

pub fn hinge_id_grad(s: &SimilarityMatrix, m: f64) -> Result<(f64, Array2<f64>)> {
    validate_margin(m)?;
    let n = s.n();
    let scale = 1.0 / n as f64;
    let mut grad = Array2::zeros((n, n));
    let mut loss = 0.0;
    for &row in s.id_indices() {
        let aligned = s.get(row, row);
        let mut row_sum = 0.0;
        for col in (0..n).filter(|&c| c != row) {
            let arg = m - aligned + s.get(row, col);
            if arg > 0.0 {
                row_sum += arg;
                grad[[row, row]] -= scale;
                grad[[row, col]] += scale;
            }
        }
        loss += scale * row_sum;
    }
    Ok((loss, grad))
}

/// Hinge loss over OOD rows: every text, the row's own included, must stay
/// at or below similarity `m`.
pub fn hinge_ood_loss(s: &SimilarityMatrix, m: f64) -> Result<f64> {
    Ok(hinge_ood_grad(s, m)?.0)
}

pub fn hinge_ood_grad(s: &SimilarityMatrix, m: f64) -> Result<(f64, Array2<f64>)> {
    validate_margin(m)?;
    let n = s.n();
    let scale = 1.0 / n as f64;
    let mut grad = Array2::zeros((n, n));
    let mut loss = 0.0;
    for &row in s.ood_indices() {
        let mut row_sum = 0.0;
        for col in 0..n {
            let arg = s.get(row, col) - m;
            if arg > 0.0 {
                row_sum += arg;
                grad[[row, col]] += scale;
            }
        }
        loss += scale * row_sum;
    }
    Ok((loss, grad))
}

/// `(L_id + L_ood) / N`.
pub fn contrastive_loss(s: &SimilarityMatrix, m: f64) -> Result<f64> {
    Ok(contrastive_grad(s, m)?.value)
}

#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub l_id: f64,
    pub l_ood: f64,
    pub value: f64,
    pub d_sim: Array2<f64>,
}

pub fn contrastive_grad(s: &SimilarityMatrix, m: f64) -> Result<ContrastiveGrad> {
    let (l_id, g_id) = hinge_id_grad(s, m)?;
    let (l_ood, g_ood) = hinge_ood_grad(s, m)?;
    let inv_n = 1.0 / s.n() as f64;
    let d_sim = (g_id + g_ood) * inv_n;
    Ok(ContrastiveGrad { l_id, l_ood, value: (l_id + l_ood) * inv_n, d_sim })
}

/// Binary cross-entropy with `y_hat` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
/// `y = 1` is ID, `y = 0` is OOD.
pub fn bce(y: f64, y_hat: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `d bce / d y_hat`; zero where the clamp is active.
pub fn bce_grad(y: f64, y_hat: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat) {
        return 0.0;
    }
    -y / y_hat + (1.0 - y) / (1.0 - y_hat)
}

/// Parts of the sparsity-regularized classifier loss.
#[derive(Debug, Clone)]
pub struct ClassifierLossGrad {
    /// Batch-mean BCE.
    pub bce: f64,
    /// Batch-mean L1 norm of the image gates plus that of the text gates,
    /// already multiplied by the penalty weight.
    pub gate_l1: f64,
    pub value: f64,
    pub d_pred: Array1<f64>,
    /// Gradient w.r.t. every gate activation entry (the same for all entries).
    pub d_gate: f64,
}

/// `(1/N) (Σ BCE(y_i, ŷ_i) + Σ ‖gate_img_i‖₁ + Σ ‖gate_txt_i‖₁)`.
///
/// Gates are sigmoid activations (rows = samples), hence positive, so their
/// L1 norm is a plain sum.
pub fn classifier_loss(
    pred: ArrayView1<'_, f64>,
    targets: ArrayView1<'_, f64>,
    gate_img: ArrayView2<'_, f64>,
    gate_txt: ArrayView2<'_, f64>,
) -> Result<f64> {
    Ok(classifier_loss_grad(pred, targets, gate_img, gate_txt, 1.0)?.value)
}

pub fn classifier_loss_grad(
    pred: ArrayView1<'_, f64>,
    targets: ArrayView1<'_, f64>,
    gate_img: ArrayView2<'_, f64>,
    gate_txt: ArrayView2<'_, f64>,
    l1_weight: f64,
) -> Result<ClassifierLossGrad> {
    let n = pred.len();
    for len in [targets.len(), gate_img.nrows(), gate_txt.nrows()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_n = 1.0 / n as f64;
    let bce_sum: f64 = pred.iter().zip(targets).map(|(&p, &y)| bce(y, p)).sum();
    let l1_sum = gate_img.sum() + gate_txt.sum();
    let d_pred = Array1::from_iter(pred.iter().zip(targets).map(|(&p, &y)| bce_grad(y, p) * inv_n));
    let bce_mean = bce_sum * inv_n;
    let gate_l1 = l1_weight * l1_sum * inv_n;
    Ok(ClassifierLossGrad {
        bce: bce_mean,
        gate_l1,
        value: bce_mean + gate_l1,
        d_pred,
        d_gate: l1_weight * inv_n,
    })
}

/// `L = L_cl + λ L_bc`. `λ = 0` leaves the contrastive loss alone.
pub fn joint_objective(l_cl: f64, l_bc: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    l_cl + lambda * l_bc
}

/// Every loss component of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_ood: f64,
    pub l_cl: f64,
    pub l_bce: f64,
    pub l_gate_l1: f64,
    pub l_bc: f64,
    pub total: f64,
    pub margin: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_id, self.l_ood, self.l_cl, self.l_bce, self.l_gate_l1, self.l_bc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sm(entries: Array2<f64>, ood: &[usize]) -> SimilarityMatrix {
        let n = entries.nrows();
        let flags: Vec<bool> = (0..n).map(|i| ood.contains(&i)).collect();
        SimilarityMatrix::with_flags(entries, &flags).unwrap()
    }

    fn random_sm(rng: &mut ChaCha8Rng, n: usize, ood: &[usize]) -> SimilarityMatrix {
        sm(Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0)), ood)
    }

    #[test]
    fn naive_examples() {
        let s = sm(Array2::eye(3), &[]);
        assert_eq!(naive_contrastive_loss(&s), -3.0);
        let s = sm(arr2(&[[0.5, 0.1], [0.2, 0.5]]), &[1]);
        assert_eq!(naive_contrastive_loss(&s), 0.0);
    }

    #[test]
    fn naive_matches_diagonal_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sm(&mut rng, 4, &[2]);
        let mut oracle = 0.0;
        for i in 0..4 {
            let d = s.entries()[[i, i]];
            oracle += if i == 2 { d } else { -d };
        }
        assert!((naive_contrastive_loss(&s) - oracle).abs() < 1e-15);
    }

    #[test]
    fn hinge_id_examples() {
        let s = sm(Array2::eye(4), &[]);
        assert_eq!(hinge_id_loss(&s, 0.2).unwrap(), 0.0);
        let s = sm(Array2::from_elem((2, 2), 0.5), &[]);
        assert!((hinge_id_loss(&s, 0.2).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hinge_ood_examples() {
        let s = sm(Array2::zeros((3, 3)), &[1]);
        assert_eq!(hinge_ood_loss(&s, 0.2).unwrap(), 0.0);
        let mut e = Array2::zeros((5, 5));
        e[[3, 1]] = 0.5;
        let s = sm(e, &[3]);
        assert!((hinge_ood_loss(&s, 0.2).unwrap() - 0.06).abs() < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let s = sm(Array2::eye(3), &[]);
        assert_eq!(contrastive_loss(&s, 0.2).unwrap(), 0.0);
        let s = sm(Array2::from_elem((2, 2), 0.5), &[]);
        assert!((contrastive_loss(&s, 0.2).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn contrastive_is_mean_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_sm(&mut rng, 6, &[0, 5]);
        let g = contrastive_grad(&s, 0.2).unwrap();
        let expected = (hinge_id_loss(&s, 0.2).unwrap() + hinge_ood_loss(&s, 0.2).unwrap()) / 6.0;
        assert!((g.value - expected).abs() < 1e-15);
    }

    #[test]
    fn negative_margin_rejected() {
        let s = sm(Array2::eye(2), &[]);
        assert!(matches!(hinge_id_loss(&s, -0.1), Err(Error::InvalidMargin(_))));
        assert!(matches!(hinge_ood_loss(&s, -0.1), Err(Error::InvalidMargin(_))));
        assert!(matches!(hinge_id_loss(&s, f64::NAN), Err(Error::InvalidMargin(_))));
    }

    #[test]
    fn zero_margin_is_unmargined_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_sm(&mut rng, 5, &[1, 3]);
        let e = s.entries();
        let mut id = 0.0;
        for n in [0, 2, 4] {
            for i in (0..5).filter(|&i| i != n) {
                id += (e[[n, i]] - e[[n, n]]).max(0.0) / 5.0;
            }
        }
        let mut ood = 0.0;
        for k in [1, 3] {
            for i in 0..5 {
                ood += e[[k, i]].max(0.0) / 5.0;
            }
        }
        assert!((hinge_id_loss(&s, 0.0).unwrap() - id).abs() < 1e-14);
        assert!((hinge_ood_loss(&s, 0.0).unwrap() - ood).abs() < 1e-14);
    }

    #[test]
    fn bce_examples() {
        assert!(bce(1.0, 1.0 - BCE_EPS) < 1e-6);
        assert!((bce(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.0, 0.9) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(bce(1.0, 0.0).is_finite());
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn classifier_loss_example() {
        let g = arr2(&[[0.5, 0.5]]);
        let v = classifier_loss(arr1(&[0.5]).view(), arr1(&[1.0]).view(), g.view(), g.view()).unwrap();
        assert!((v - (std::f64::consts::LN_2 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn classifier_loss_vanishes_for_perfect_predictions() {
        let g = Array2::from_elem((3, 4), 1e-12);
        let v = classifier_loss(
            arr1(&[1.0, 0.0, 1.0]).view(),
            arr1(&[1.0, 0.0, 1.0]).view(),
            g.view(),
            g.view(),
        )
        .unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn classifier_loss_length_mismatch() {
        let g = Array2::from_elem((2, 2), 0.5);
        assert!(matches!(
            classifier_loss(arr1(&[0.5]).view(), arr1(&[1.0]).view(), g.view(), g.view()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn classifier_loss_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let pred = Array1::from_shape_fn(n, |_| rng.random_range(0.01..0.99));
        let y = Array1::from_shape_fn(n, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let gi = Array2::from_shape_fn((n, 5), |_| rng.random_range(0.01..0.99));
        let gt = Array2::from_shape_fn((n, 5), |_| rng.random_range(0.01..0.99));
        let g = classifier_loss_grad(pred.view(), y.view(), gi.view(), gt.view(), 1.0).unwrap();
        let mean_bce = (0..n).map(|i| bce(y[i], pred[i])).sum::<f64>() / n as f64;
        let mean_i = gi.rows().into_iter().map(|r| r.sum()).sum::<f64>() / n as f64;
        let mean_t = gt.rows().into_iter().map(|r| r.sum()).sum::<f64>() / n as f64;
        assert!((g.value - (mean_bce + mean_i + mean_t)).abs() < 1e-12);
        assert!((g.bce - mean_bce).abs() < 1e-12);
    }

    #[test]
    fn joint_examples() {
        assert!((joint_objective(0.5, 1.0, 0.8) - 1.3).abs() < 1e-15);
        assert_eq!(joint_objective(0.37, 12.0, 0.0), 0.37);
    }

    #[test]
    fn hinge_monotone_in_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_sm(&mut rng, 7, &[2, 6]);
        let grid = [0.0, 0.1, 0.2, 0.3, 0.4];
        for w in grid.windows(2) {
            assert!(hinge_id_loss(&s, w[0]).unwrap() <= hinge_id_loss(&s, w[1]).unwrap());
            assert!(hinge_ood_loss(&s, w[0]).unwrap() >= hinge_ood_loss(&s, w[1]).unwrap());
        }
    }

    #[test]
    fn empty_ood_set_gives_zero_ood_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sm(&mut rng, 4, &[]);
        assert_eq!(hinge_ood_loss(&s, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn bce_grad_matches_finite_difference() {
        for (y, p) in [(1.0, 0.3), (0.0, 0.3), (1.0, 0.97), (0.0, 0.02)] {
            let h = 1e-7;
            let fd = (bce(y, p + h) - bce(y, p - h)) / (2.0 * h);
            assert!((fd - bce_grad(y, p)).abs() / fd.abs().max(1.0) < 1e-6);
        }
        assert_eq!(bce_grad(1.0, 0.0), 0.0);
    }
}
