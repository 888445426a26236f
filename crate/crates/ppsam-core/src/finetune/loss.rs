//! Combined training loss: weighted binary cross-entropy with logits
//! plus a soft-IoU term.
//!
//! ```text
//! loss = w_ce * BCE(logits, gt) + w_iou * (1 - soft_iou(sigmoid(logits), gt))
//! ```
//!
//! The task is binary, so BCE-with-logits on a single foreground channel
//! is used; it is mathematically equivalent to two-class cross-entropy
//! and numerically stabler.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::geometry::{BinaryMask, ProbabilityMap};
use crate::metrics;

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_iou: 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable per-pixel BCE with logits, averaged over pixels.
fn bce_mean(logits: &[f64], gt: &BinaryMask) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(gt.data())
        .map(|(&x, &y)| {
            let y = y as u8 as f64;
            x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln()
        })
        .sum::<f64>()
        / n
}

fn check_len(logits: &[f64], gt: &BinaryMask) -> Result<(), MetricsError> {
    if logits.len() != gt.data().len() {
        return Err(MetricsError::ShapeMismatch {
            expected_width: gt.width(),
            expected_height: gt.height(),
            got_width: logits.len() as u32,
            got_height: 1,
        });
    }
    Ok(())
}

fn probabilities(logits: &[f64], gt: &BinaryMask) -> ProbabilityMap {
    ProbabilityMap::new(
        gt.width(),
        gt.height(),
        logits.iter().map(|&x| sigmoid(x)).collect(),
    )
}

/// Scalar combined loss.
pub fn training_loss(
    logits: &[f64],
    gt: &BinaryMask,
    weights: LossWeights,
) -> Result<f64, MetricsError> {
    check_len(logits, gt)?;
    let probs = probabilities(logits, gt);
    let (_, soft_iou) = metrics::soft_dice_and_iou(&probs, gt)?;
    Ok(weights.w_ce * bce_mean(logits, gt) + weights.w_iou * (1.0 - soft_iou))
}

/// Loss value and its analytic gradient with respect to each logit.
pub fn training_loss_with_grad(
    logits: &[f64],
    gt: &BinaryMask,
    weights: LossWeights,
) -> Result<(f64, Vec<f64>), MetricsError> {
    check_len(logits, gt)?;
    let probs = probabilities(logits, gt);
    let soft = metrics::soft_overlap_with_grad(&probs, gt)?;
    let loss = weights.w_ce * bce_mean(logits, gt) + weights.w_iou * (1.0 - soft.soft_iou);
    let n = logits.len() as f64;
    let grad = probs
        .data()
        .iter()
        .zip(gt.data())
        .zip(&soft.iou_grad)
        .map(|((&p, &y), &g_iou)| {
            let y = y as u8 as f64;
            // d(BCE)/dx = (p - y)/n; d(1 - iou)/dx = -dIoU/dp * p(1-p).
            weights.w_ce * (p - y) / n - weights.w_iou * g_iou * p * (1.0 - p)
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn toy_mask() -> BinaryMask {
        let mut data = vec![false; 64];
        for i in [3usize, 4, 5, 11, 12, 13, 19, 20, 21, 30, 31, 40] {
            data[i] = true;
        }
        BinaryMask::new(8, 8, data)
    }

    #[test]
    fn saturated_correct_logits_give_vanishing_loss() {
        let gt = toy_mask();
        let logits: Vec<f64> = gt
            .data()
            .iter()
            .map(|&y| if y { 20.0 } else { -20.0 })
            .collect();
        let loss = training_loss(&logits, &gt, LossWeights::default()).unwrap();
        assert!(loss < 1e-6, "saturated loss should vanish, got {loss}");
    }

    /// With w_iou = 0 the loss equals plain BCE; the oracle is an
    /// independent per-pixel log-loss summation.
    #[test]
    fn ce_only_matches_scalar_bce_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let gt = toy_mask();
        let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        let weights = LossWeights {
            w_ce: 1.0,
            w_iou: 0.0,
        };
        let loss = training_loss(&logits, &gt, weights).unwrap();
        let oracle: f64 = logits
            .iter()
            .zip(gt.data())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 64.0;
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let gt = toy_mask();
        let weights = LossWeights::default();
        let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = training_loss_with_grad(&logits, &gt, weights).unwrap();
        let h = 1e-5;
        for i in 0..64 {
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let fd = (training_loss(&plus, &gt, weights).unwrap()
                - training_loss(&minus, &gt, weights).unwrap())
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "grad[{i}] = {} vs fd {}", grad[i], fd);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let gt = toy_mask();
        for _ in 0..20 {
            let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
            let loss = training_loss(&logits, &gt, LossWeights::default()).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let gt = toy_mask();
        assert!(matches!(
            training_loss(&[0.0; 10], &gt, LossWeights::default()),
            Err(MetricsError::ShapeMismatch { .. })
        ));
    }
}
