//! DICE / IoU overlap metrics, their soft (differentiable) relaxations,
//! and multi-run aggregation.
//!
//! Hard scores are percentages in [0, 100]; soft scores are fractions in
//! [0, 1]. Two empty masks score a DICE of 100: perfect agreement on
//! absence counts as success, which keeps aggregates well-defined.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::geometry::{BinaryMask, ProbabilityMap};

/// Smoothing constant for the soft losses. Small enough not to bias
/// scores at 1024x1024 resolution.
pub const SMOOTH_EPS: f64 = 1e-6;

/// Overlap score as a percentage.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DiceScore(f64);

impl DiceScore {
    /// # Panics
    /// If the value is outside [0, 100] or non-finite.
    pub fn new(value: f64) -> Self {
        assert!(
            value.is_finite() && (0.0..=100.0).contains(&value),
            "dice score must be a percentage, got {value}"
        );
        Self(value)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// One point of a robustness curve: score statistics across runs at a
/// single perturbation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub perturbation_level: u32,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub run_count: usize,
}

fn check_shapes(a_w: u32, a_h: u32, b_w: u32, b_h: u32) -> Result<(), MetricsError> {
    if a_w != b_w || a_h != b_h {
        return Err(MetricsError::ShapeMismatch {
            expected_width: a_w,
            expected_height: a_h,
            got_width: b_w,
            got_height: b_h,
        });
    }
    Ok(())
}

/// Hard DICE: `2|Y ∩ P| / (|Y| + |P|) * 100`.
pub fn dice(gt: &BinaryMask, pred: &BinaryMask) -> Result<DiceScore, MetricsError> {
    check_shapes(gt.width(), gt.height(), pred.width(), pred.height())?;
    let mut intersection = 0u64;
    let mut gt_count = 0u64;
    let mut pred_count = 0u64;
    for (&y, &p) in gt.data().iter().zip(pred.data()) {
        gt_count += y as u64;
        pred_count += p as u64;
        intersection += (y && p) as u64;
    }
    let denom = gt_count + pred_count;
    if denom == 0 {
        // Both masks empty: agreement on absence.
        return Ok(DiceScore::new(100.0));
    }
    Ok(DiceScore::new(
        2.0 * intersection as f64 / denom as f64 * 100.0,
    ))
}

/// Hard IoU: `|Y ∩ P| / |Y ∪ P| * 100`; 100 when both masks are empty.
pub fn iou(gt: &BinaryMask, pred: &BinaryMask) -> Result<DiceScore, MetricsError> {
    check_shapes(gt.width(), gt.height(), pred.width(), pred.height())?;
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&y, &p) in gt.data().iter().zip(pred.data()) {
        intersection += (y && p) as u64;
        union += (y || p) as u64;
    }
    if union == 0 {
        return Ok(DiceScore::new(100.0));
    }
    Ok(DiceScore::new(intersection as f64 / union as f64 * 100.0))
}

/// Soft relaxations of DICE and IoU over a probability map:
///
/// ```text
/// soft_dice = 2 Σ p·y / (Σp + Σy + ε)
/// soft_iou  =   Σ p·y / (Σp + Σy − Σp·y + ε)
/// ```
pub fn soft_dice_and_iou(
    probs: &ProbabilityMap,
    gt: &BinaryMask,
) -> Result<(f64, f64), MetricsError> {
    let overlap = soft_overlap(probs, gt)?;
    Ok((overlap.soft_dice(), overlap.soft_iou()))
}

/// Accumulated sums behind the soft metrics, kept separate so that both
/// values and analytic gradients derive from one pass.
#[derive(Debug, Clone, Copy)]
pub struct SoftOverlap {
    pub prod_sum: f64,
    pub prob_sum: f64,
    pub gt_sum: f64,
}

impl SoftOverlap {
    pub fn soft_dice(&self) -> f64 {
        2.0 * self.prod_sum / (self.prob_sum + self.gt_sum + SMOOTH_EPS)
    }

    pub fn soft_iou(&self) -> f64 {
        self.prod_sum / (self.prob_sum + self.gt_sum - self.prod_sum + SMOOTH_EPS)
    }
}

pub fn soft_overlap(probs: &ProbabilityMap, gt: &BinaryMask) -> Result<SoftOverlap, MetricsError> {
    check_shapes(probs.width(), probs.height(), gt.width(), gt.height())?;
    let mut prod_sum = 0.0;
    let mut prob_sum = 0.0;
    let mut gt_sum = 0.0;
    for (i, (&p, &y)) in probs.data().iter().zip(gt.data()).enumerate() {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(MetricsError::InvalidProbability { value: p, index: i });
        }
        let y = y as u8 as f64;
        prod_sum += p * y;
        prob_sum += p;
        gt_sum += y;
    }
    Ok(SoftOverlap {
        prod_sum,
        prob_sum,
        gt_sum,
    })
}

/// Analytic gradients of the soft metrics with respect to each
/// probability.
#[derive(Debug, Clone)]
pub struct SoftOverlapGrad {
    pub soft_dice: f64,
    pub soft_iou: f64,
    pub dice_grad: Vec<f64>,
    pub iou_grad: Vec<f64>,
}

pub fn soft_overlap_with_grad(
    probs: &ProbabilityMap,
    gt: &BinaryMask,
) -> Result<SoftOverlapGrad, MetricsError> {
    let o = soft_overlap(probs, gt)?;
    let dice_denom = o.prob_sum + o.gt_sum + SMOOTH_EPS;
    let iou_denom = o.prob_sum + o.gt_sum - o.prod_sum + SMOOTH_EPS;
    let soft_dice = 2.0 * o.prod_sum / dice_denom;
    let soft_iou = o.prod_sum / iou_denom;
    let mut dice_grad = Vec::with_capacity(gt.data().len());
    let mut iou_grad = Vec::with_capacity(gt.data().len());
    for &y in gt.data() {
        let y = y as u8 as f64;
        // d/dp_i [2I/D] where dI/dp_i = y_i and dD/dp_i = 1.
        dice_grad.push((2.0 * y * dice_denom - 2.0 * o.prod_sum) / (dice_denom * dice_denom));
        // d/dp_i [I/U] where dU/dp_i = 1 - y_i.
        iou_grad.push((y * iou_denom - o.prod_sum * (1.0 - y)) / (iou_denom * iou_denom));
    }
    Ok(SoftOverlapGrad {
        soft_dice,
        soft_iou,
        dice_grad,
        iou_grad,
    })
}

/// Population mean and standard deviation across runs at one level.
pub fn aggregate_runs(
    perturbation_level: u32,
    per_run: &[DiceScore],
) -> Result<CurvePoint, MetricsError> {
    if per_run.is_empty() {
        return Err(MetricsError::EmptyRuns);
    }
    let n = per_run.len() as f64;
    let mean = per_run.iter().map(|s| s.value()).sum::<f64>() / n;
    let var = per_run
        .iter()
        .map(|s| {
            let d = s.value() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(CurvePoint {
        perturbation_level,
        mean_dice: mean,
        std_dice: var.sqrt(),
        run_count: per_run.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn square_mask(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        let mut m = BinaryMask::filled(w, h, false);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn dice_perfect_overlap_is_100() {
        let m = square_mask(12, 12, 2, 3, 9, 10);
        assert_eq!(dice(&m, &m).unwrap().value(), 100.0);
    }

    #[test]
    fn dice_disjoint_is_0() {
        let a = square_mask(16, 16, 0, 0, 4, 4);
        let b = square_mask(16, 16, 8, 8, 12, 12);
        assert_eq!(dice(&a, &b).unwrap().value(), 0.0);
    }

    #[test]
    fn dice_shifted_square_is_50() {
        // 10x10 square against itself shifted 5 columns: overlap 50 of 200.
        let gt = square_mask(20, 20, 0, 0, 10, 10);
        let pred = square_mask(20, 20, 5, 0, 15, 10);
        // Verify the hand count with an exhaustive pixel scan.
        let mut inter = 0;
        let mut total = 0;
        for y in 0..20 {
            for x in 0..20 {
                inter += (gt.get(x, y) && pred.get(x, y)) as u32;
                total += gt.get(x, y) as u32 + pred.get(x, y) as u32;
            }
        }
        assert_eq!((inter, total), (50, 200));
        assert_eq!(dice(&gt, &pred).unwrap().value(), 50.0);
    }

    #[test]
    fn dice_empty_vs_empty_is_100() {
        let a = BinaryMask::filled(4, 4, false);
        assert_eq!(dice(&a, &a).unwrap().value(), 100.0);
    }

    #[test]
    fn dice_shape_mismatch_errors() {
        let a = BinaryMask::filled(4, 4, true);
        let b = BinaryMask::filled(4, 5, true);
        assert!(matches!(
            dice(&a, &b),
            Err(MetricsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn soft_metrics_on_hard_probabilities_match_gt() {
        let gt = square_mask(8, 8, 1, 1, 5, 6);
        let probs = ProbabilityMap::new(
            8,
            8,
            gt.data().iter().map(|&b| b as u8 as f64).collect(),
        );
        let (sd, si) = soft_dice_and_iou(&probs, &gt).unwrap();
        assert!((sd - 1.0).abs() < 2.0 * SMOOTH_EPS);
        assert!((si - 1.0).abs() < 2.0 * SMOOTH_EPS);
    }

    #[test]
    fn soft_metrics_all_zero_prediction() {
        let gt = square_mask(8, 8, 0, 0, 4, 4);
        let probs = ProbabilityMap::new(8, 8, vec![0.0; 64]);
        let (sd, si) = soft_dice_and_iou(&probs, &gt).unwrap();
        assert!(sd.abs() < 2.0 * SMOOTH_EPS);
        assert!(si.abs() < 2.0 * SMOOTH_EPS);
    }

    #[test]
    fn soft_iou_hand_case() {
        // p=[1,0.5,0,0], y=[1,1,0,0]: I=1.5, U=1.5+2-1.5=2 -> 0.75.
        let gt = BinaryMask::new(2, 2, vec![true, true, false, false]);
        let probs = ProbabilityMap::new(2, 2, vec![1.0, 0.5, 0.0, 0.0]);
        // Independent scalar computation.
        let i = 1.0 * 1.0 + 0.5 * 1.0;
        let u = (1.0 + 0.5) + 2.0 - i;
        assert_abs_diff_eq!(i / u, 0.75);
        let (_, si) = soft_dice_and_iou(&probs, &gt).unwrap();
        assert_abs_diff_eq!(si, 0.75, epsilon = 1e-5);
    }

    #[test]
    fn soft_grad_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..50 {
            let gt = BinaryMask::new(8, 8, (0..64).map(|_| rng.random_bool(0.4)).collect());
            let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
            let probs = ProbabilityMap::new(8, 8, p.clone());
            let g = soft_overlap_with_grad(&probs, &gt).unwrap();
            for i in (0..64).step_by(7) {
                let mut plus = p.clone();
                plus[i] += h;
                let mut minus = p.clone();
                minus[i] -= h;
                let (d_plus, i_plus) =
                    soft_dice_and_iou(&ProbabilityMap::new(8, 8, plus), &gt).unwrap();
                let (d_minus, i_minus) =
                    soft_dice_and_iou(&ProbabilityMap::new(8, 8, minus), &gt).unwrap();
                let fd_dice = (d_plus - d_minus) / (2.0 * h);
                let fd_iou = (i_plus - i_minus) / (2.0 * h);
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-8);
                assert!(
                    rel(g.dice_grad[i], fd_dice) < 1e-4,
                    "dice grad {} vs fd {}",
                    g.dice_grad[i],
                    fd_dice
                );
                assert!(
                    rel(g.iou_grad[i], fd_iou) < 1e-4,
                    "iou grad {} vs fd {}",
                    g.iou_grad[i],
                    fd_iou
                );
            }
        }
    }

    #[test]
    fn aggregate_single_run() {
        let point = aggregate_runs(10, &[DiceScore::new(80.0)]).unwrap();
        assert_eq!(point.mean_dice, 80.0);
        assert_eq!(point.std_dice, 0.0);
        assert_eq!(point.run_count, 1);
    }

    #[test]
    fn aggregate_two_point_symmetric() {
        let point = aggregate_runs(0, &[DiceScore::new(70.0), DiceScore::new(90.0)]).unwrap();
        assert_eq!(point.mean_dice, 80.0);
        assert_eq!(point.std_dice, 10.0);
    }

    #[test]
    fn aggregate_empty_errors() {
        assert!(matches!(aggregate_runs(0, &[]), Err(MetricsError::EmptyRuns)));
    }

    /// Streaming (Welford) oracle for mean and population variance.
    #[test]
    fn aggregate_matches_streaming_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..5 {
            let scores: Vec<DiceScore> = (0..rng.random_range(2..40))
                .map(|_| DiceScore::new(rng.random_range(0.0..100.0)))
                .collect();
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for (i, s) in scores.iter().enumerate() {
                let delta = s.value() - mean;
                mean += delta / (i as f64 + 1.0);
                m2 += delta * (s.value() - mean);
            }
            let std = (m2 / scores.len() as f64).sqrt();
            let point = aggregate_runs(5, &scores).unwrap();
            assert_abs_diff_eq!(point.mean_dice, mean, epsilon = 1e-9);
            assert_abs_diff_eq!(point.std_dice, std, epsilon = 1e-9);
        }
    }

    prop_compose! {
        fn arb_mask(side: u32)(bits in prop::collection::vec(any::<bool>(), (side * side) as usize)) -> BinaryMask {
            BinaryMask::new(side, side, bits)
        }
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in arb_mask(9), b in arb_mask(9)) {
            let ab = dice(&a, &b).unwrap().value();
            let ba = dice(&b, &a).unwrap().value();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn dice_self_is_100(a in arb_mask(9)) {
            prop_assert_eq!(dice(&a, &a).unwrap().value(), 100.0);
        }

        /// Applying one permutation of pixel positions to both masks
        /// leaves the score unchanged.
        #[test]
        fn dice_invariant_under_shared_permutation(
            a in arb_mask(8), b in arb_mask(8), seed in any::<u64>(),
        ) {
            let mut indices: Vec<usize> = (0..64).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            // Fisher-Yates.
            for i in (1..indices.len()).rev() {
                let j = rng.random_range(0..=i);
                indices.swap(i, j);
            }
            let permute = |m: &BinaryMask| {
                BinaryMask::new(8, 8, indices.iter().map(|&i| m.data()[i]).collect())
            };
            let before = dice(&a, &b).unwrap().value();
            let after = dice(&permute(&a), &permute(&b)).unwrap().value();
            prop_assert_eq!(before, after);
        }
    }
}
