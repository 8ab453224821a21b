//! Metrics and experiment orchestration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts where "positive" means a correctly reported statistic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
}

impl ConfusionMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
        Self {
            tp,
            fp,
            tn,
            fn_,
            tpr: ratio(tp, tp + fn_),
            tnr: ratio(tn, tn + fp),
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        }
    }
}

/// `is_correct[i]` is the ground truth, `classified_correct[i]` the verdict.
pub fn confusion_metrics(is_correct: &[bool], classified_correct: &[bool]) -> Result<ConfusionMetrics> {
    if is_correct.len() != classified_correct.len() {
        return Err(Error::LengthMismatch {
            expected: is_correct.len(),
            got: classified_correct.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&truth, &said) in is_correct.iter().zip(classified_correct) {
        match (truth, said) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ConfusionMetrics::from_counts(tp, fp, tn, fn_))
}

/// Mean of `|reported - correct| / z_norm`.
pub fn utility_loss(reported: &[f64], correct: &[f64], z_norm: f64) -> Result<f64> {
    if reported.len() != correct.len() {
        return Err(Error::LengthMismatch {
            expected: correct.len(),
            got: reported.len(),
        });
    }
    if reported.is_empty() {
        return Ok(0.0);
    }
    if !(z_norm > 0.0) {
        return Err(Error::OutOfRange(format!("normalizer must be positive, got {z_norm}")));
    }
    let total: f64 = reported.iter().zip(correct).map(|(r, c)| (r - c).abs()).sum();
    Ok(total / (z_norm * reported.len() as f64))
}
