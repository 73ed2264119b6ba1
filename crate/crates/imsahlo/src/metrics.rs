//! Pixel-counting evaluation metrics for binary segmentation.
//!
//! Two explicit conventions are always reported so no score ever hides its
//! counting rule:
//!
//! * `pooled` — confusion counts are summed over all images first, then
//!   scores are computed once from the pooled counts. Micro F1 is the pooled
//!   foreground F1; macro F1 averages the pooled foreground and background
//!   F1 (background = labels inverted).
//! * `per_image_mean` — every score is computed per image and then averaged.
//!
//! Undefined 0/0 ratios score 1 when the corresponding prediction and
//! ground-truth sets are both empty, else 0.

use crate::losses::soft_skeleton;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch {
        pred: [usize; 4],
        gt: [usize; 4],
    },
    #[error("masks must be binary (0/1)")]
    NotBinary,
    #[error("cannot evaluate an empty pair list")]
    EmptyInput,
}

/// Exact pixel counts with foreground = 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Counts with the foreground/background roles swapped.
    pub fn inverted(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(MetricsError::NotBinary);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Counting convention under which a [`MetricsReport`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Pooled,
    PerImageMean,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub dsc: f64,
    pub iou: f64,
    pub convention: Convention,
}

/// 0/0 ratios score 1 when both underlying sets are empty, else 0.
fn ratio(num: f64, den: f64, both_empty: bool) -> f64 {
    if den > 0.0 {
        num / den
    } else if both_empty {
        1.0
    } else {
        0.0
    }
}

/// All scores derived from one set of counts.
fn scores_from_counts(c: &ConfusionCounts) -> [f64; 9] {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let gt_empty = c.tp + c.fn_ == 0;
    let pred_empty = c.tp + c.fp == 0;
    let both_empty = gt_empty && pred_empty;

    let precision = ratio(tp, tp + fp, both_empty);
    let recall = ratio(tp, tp + fn_, both_empty);
    let dsc = ratio(2.0 * tp, 2.0 * tp + fp + fn_, both_empty);
    let iou = ratio(tp, tp + fp + fn_, both_empty);
    // foreground F1 computed from counts directly: identical to DSC in every
    // case, including the degenerate ones
    let f1 = dsc;

    let inv = c.inverted();
    let bg_both_empty = inv.tp + inv.fn_ == 0 && inv.tp + inv.fp == 0;
    let f1_bg = ratio(
        2.0 * inv.tp as f64,
        2.0 * inv.tp as f64 + inv.fp as f64 + inv.fn_ as f64,
        bg_both_empty,
    );
    let macro_f1 = 0.5 * (f1 + f1_bg);
    let micro_f1 = f1;

    let accuracy = ratio(tp + tn, tp + fp + fn_ + tn, true);
    let specificity = ratio(tn, tn + fp, bg_both_empty);
    let balanced_accuracy = 0.5 * (recall + specificity);

    debug_assert!(iou <= dsc + 1e-15, "Jaccard must not exceed Dice");
    if c.fp == 0 && c.fn_ == 0 {
        debug_assert!((iou - dsc).abs() < 1e-15);
        debug_assert!((accuracy - 1.0).abs() < 1e-15);
    }

    [
        accuracy,
        balanced_accuracy,
        precision,
        recall,
        f1,
        macro_f1,
        micro_f1,
        dsc,
        iou,
    ]
}

fn report_from_scores(s: [f64; 9], convention: Convention) -> MetricsReport {
    MetricsReport {
        accuracy: s[0],
        balanced_accuracy: s[1],
        precision: s[2],
        recall: s[3],
        f1: s[4],
        macro_f1: s[5],
        micro_f1: s[6],
        dsc: s[7],
        iou: s[8],
        convention,
    }
}

/// Evaluates `(pred, gt)` pairs under the requested convention.
pub fn report(
    pairs: &[(Tensor, Tensor)],
    convention: Convention,
) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    match convention {
        Convention::Pooled => {
            let mut pooled = ConfusionCounts::default();
            for (pred, gt) in pairs {
                pooled.add(&confusion(pred, gt)?);
            }
            Ok(report_from_scores(scores_from_counts(&pooled), convention))
        }
        Convention::PerImageMean => {
            let mut acc = [0.0; 9];
            for (pred, gt) in pairs {
                let s = scores_from_counts(&confusion(pred, gt)?);
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= pairs.len() as f64;
            }
            Ok(report_from_scores(acc, convention))
        }
    }
}

/// Convenience: pooled report from already-accumulated counts.
pub fn report_from_confusion(c: &ConfusionCounts) -> MetricsReport {
    report_from_scores(scores_from_counts(c), Convention::Pooled)
}

/// Centerline Dice *score* on hard masks: 2 Tprec Trecall / (Tprec + Trecall)
/// with skeletons from the soft-skeleton operator applied to {0,1} inputs.
pub fn cldice_metric(pred: &Tensor, gt: &Tensor, iters: usize) -> Result<f64, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(MetricsError::NotBinary);
    }
    let eps = 1e-6;
    let skel_gt = soft_skeleton(gt, iters);
    let skel_pred = soft_skeleton(pred, iters);
    let tprec = (skel_gt.data().iter().zip(pred.data()).map(|(s, p)| s * p).sum::<f64>() + eps)
        / (skel_gt.sum() + eps);
    let trecall = (skel_pred.data().iter().zip(gt.data()).map(|(s, g)| s * g).sum::<f64>() + eps)
        / (skel_pred.sum() + eps);
    Ok(2.0 * tprec * trecall / (tprec + trecall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(shape: [usize; 4], seed: u64, p: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len)
                .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    #[test]
    fn confusion_counts_match_exhaustive_loop() {
        for seed in 0..20u64 {
            let pred = random_mask([1, 1, 8, 8], seed, 0.4);
            let gt = random_mask([1, 1, 8, 8], seed + 1000, 0.4);
            let c = confusion(&pred, &gt).unwrap();
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..8 {
                for x in 0..8 {
                    let p = pred.at(0, 0, y, x) == 1.0;
                    let g = gt.at(0, 0, y, x) == 1.0;
                    if p && g {
                        tp += 1
                    } else if p {
                        fp += 1
                    } else if g {
                        fn_ += 1
                    } else {
                        tn += 1
                    }
                }
            }
            assert_eq!(c, ConfusionCounts { tp, fp, fn_, tn });
            assert_eq!(c.total(), 64);
        }
    }

    #[test]
    fn perfect_and_complement_predictions() {
        let gt = random_mask([1, 1, 8, 8], 3, 0.5);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let comp = gt.map(|v| 1.0 - v);
        let c = confusion(&comp, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn hand_computed_counts_example() {
        // tp=4, fp=2, fn=1, tn=9 on a 4x4 grid
        let gt = Tensor::from_vec(
            [1, 1, 4, 4],
            vec![1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        );
        let pred = Tensor::from_vec(
            [1, 1, 4, 4],
            vec![1., 1., 1., 1., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
        );
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 4,
                fp: 2,
                fn_: 1,
                tn: 9
            }
        );
        let r = report(&[(pred, gt)], Convention::Pooled).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.8).abs() < 1e-12);
        assert!((r.f1 - 8.0 / 11.0).abs() < 1e-12);
        assert!((r.iou - 4.0 / 7.0).abs() < 1e-12);
        assert!((r.accuracy - 13.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = random_mask([1, 1, 6, 6], 9, 0.3);
        let r = report(&[(gt.clone(), gt)], Convention::Pooled).unwrap();
        for v in [
            r.accuracy,
            r.balanced_accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.macro_f1,
            r.micro_f1,
            r.dsc,
            r.iou,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn pooled_dsc_equals_pooled_f1() {
        let pairs: Vec<_> = (0..100)
            .map(|s| {
                (
                    random_mask([1, 1, 8, 8], s, 0.35),
                    random_mask([1, 1, 8, 8], s + 500, 0.35),
                )
            })
            .collect();
        let r = report(&pairs, Convention::Pooled).unwrap();
        assert_eq!(r.dsc, r.f1);
        assert!(r.iou <= r.dsc);
    }

    #[test]
    fn swapping_pred_and_gt_swaps_precision_recall() {
        for seed in 0..10u64 {
            let a = random_mask([1, 1, 8, 8], seed, 0.4);
            let b = random_mask([1, 1, 8, 8], seed + 77, 0.4);
            let r1 = report(&[(a.clone(), b.clone())], Convention::Pooled).unwrap();
            let r2 = report(&[(b, a)], Convention::Pooled).unwrap();
            assert_eq!(r1.dsc, r2.dsc);
            assert_eq!(r1.iou, r2.iou);
            assert_eq!(r1.accuracy, r2.accuracy);
            assert_eq!(r1.precision, r2.recall);
            assert_eq!(r1.recall, r2.precision);
        }
    }

    #[test]
    fn degenerate_empty_masks_follow_zero_over_zero_rule() {
        let empty = Tensor::zeros([1, 1, 4, 4]);
        let some = random_mask([1, 1, 4, 4], 1, 0.5);
        let r = report(&[(empty.clone(), empty.clone())], Convention::Pooled).unwrap();
        assert_eq!((r.precision, r.recall, r.dsc, r.iou), (1.0, 1.0, 1.0, 1.0));
        let r = report(&[(empty.clone(), some.clone())], Convention::Pooled).unwrap();
        assert_eq!((r.precision, r.recall, r.dsc), (0.0, 0.0, 0.0));
        let r = report(&[(some, empty)], Convention::Pooled).unwrap();
        assert_eq!((r.precision, r.recall, r.dsc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn cldice_metric_perfect_and_broken() {
        let mut line = Tensor::zeros([1, 1, 6, 10]);
        for x in 0..10 {
            line.set(0, 0, 2, x, 1.0);
        }
        let score = cldice_metric(&line, &line, 5).unwrap();
        assert!((score - 1.0).abs() < 1e-6);

        let mut broken = line.clone();
        for x in 4..7 {
            broken.set(0, 0, 2, x, 0.0);
        }
        let broken_score = cldice_metric(&broken, &line, 5).unwrap();
        assert!(broken_score < score);
    }

    #[test]
    fn cldice_metric_both_empty_is_one() {
        let z = Tensor::zeros([1, 1, 5, 5]);
        let score = cldice_metric(&z, &z, 5).unwrap();
        assert!((score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors_on_bad_input() {
        let a = Tensor::zeros([1, 1, 4, 4]);
        let b = Tensor::zeros([1, 1, 4, 5]);
        assert!(matches!(
            confusion(&a, &b),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        let soft = Tensor::full([1, 1, 4, 4], 0.5);
        assert!(matches!(confusion(&soft, &a), Err(MetricsError::NotBinary)));
        assert!(matches!(
            report(&[], Convention::Pooled),
            Err(MetricsError::EmptyInput)
        ));
    }
}
