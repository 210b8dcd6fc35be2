//! Pixel-level segmentation metrics: confusion matrix, F1 and IoU.

use serde::Serialize;

use crate::error::{Result, RunError};

/// Confusion-matrix-derived metrics. `val_f1` is the model-selection
/// score: positive-class F1 for binary problems, macro F1 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub num_classes: usize,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<u64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub macro_f1: f64,
    pub macro_iou: f64,
    pub val_f1: f64,
    pub val_iou: f64,
}

#[derive(Debug, Default, Clone)]
pub struct ConfusionAccumulator {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(k: usize) -> Self {
        ConfusionAccumulator {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(RunError::Invalid(format!(
                "class pair ({truth}, {pred}) out of range for K = {}",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn finish(self) -> Metrics {
        let k = self.k;
        let mut per_class_f1 = Vec::with_capacity(k);
        let mut per_class_iou = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let fp: u64 = (0..k).filter(|&r| r != c).map(|r| self.counts[r * k + c]).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
            // Degenerate guard: no positives anywhere for this class -> 0.
            let f1 = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            let iou = if tp + fp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp + fn_) as f64
            };
            per_class_f1.push(f1);
            per_class_iou.push(iou);
        }
        let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;
        let macro_iou = per_class_iou.iter().sum::<f64>() / k as f64;
        // Binary tasks score the positive class (index 1); larger K uses
        // the macro average.
        let (val_f1, val_iou) = if k == 2 {
            (per_class_f1[1], per_class_iou[1])
        } else {
            (macro_f1, macro_iou)
        };
        Metrics {
            num_classes: k,
            confusion: self.counts,
            per_class_f1,
            per_class_iou,
            macro_f1,
            macro_iou,
            val_f1,
            val_iou,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let mut acc = ConfusionAccumulator::new(3);
        for c in 0..3 {
            for _ in 0..10 {
                acc.add(c, c).unwrap();
            }
        }
        assert_eq!(acc.total(), 30);
        let m = acc.finish();
        assert!(m.per_class_f1.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(m.per_class_iou.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(m.val_f1, 1.0);
    }

    #[test]
    fn closed_form_example() {
        // Positive class: TP = 8, FP = 2, FN = 2 -> F1 = 0.8, IoU = 8/12.
        let mut acc = ConfusionAccumulator::new(2);
        for _ in 0..8 {
            acc.add(1, 1).unwrap();
        }
        for _ in 0..2 {
            acc.add(0, 1).unwrap();
        }
        for _ in 0..2 {
            acc.add(1, 0).unwrap();
        }
        for _ in 0..20 {
            acc.add(0, 0).unwrap();
        }
        let m = acc.finish();
        assert!((m.per_class_f1[1] - 0.8).abs() < 1e-12);
        assert!((m.per_class_iou[1] - 8.0 / 12.0).abs() < 1e-12);
        assert_eq!(m.confusion.iter().sum::<u64>(), 32);
    }

    #[test]
    fn all_background_prediction_scores_zero_positive_f1() {
        // 16% positive pixels, model predicts background everywhere.
        let mut acc = ConfusionAccumulator::new(2);
        for _ in 0..84 {
            acc.add(0, 0).unwrap();
        }
        for _ in 0..16 {
            acc.add(1, 0).unwrap();
        }
        let m = acc.finish();
        assert_eq!(m.val_f1, 0.0);
        assert_eq!(m.per_class_iou[1], 0.0);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut acc = ConfusionAccumulator::new(2);
        assert!(acc.add(2, 0).is_err());
        assert!(acc.add(0, 5).is_err());
    }
}
