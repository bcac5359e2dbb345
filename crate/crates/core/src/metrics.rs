//! Instance segmentation scores: Dice, per-side best-Dice means and their minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// `(2|a∩b| + smooth) / (|a| + |b| + smooth)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask, smooth: f64) -> Result<f64> {
    if !a.same_extent(b) {
        return Err(Error::InvalidArgument(format!(
            "cannot compare a {}x{} mask with a {}x{} mask",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let tp = a.intersection_count(b) as f64;
    let total = (a.count() + b.count()) as f64;
    let denom = total + smooth;
    if denom == 0.0 {
        // both empty without smoothing
        return Ok(1.0);
    }
    Ok((2.0 * tp + smooth) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub specificity: f64,
    pub sensitivity: f64,
    pub sbd: f64,
    pub dic: usize,
}

/// Mean over `from` of the best Dice against any mask in `against`.
///
/// An empty `from` side scores 1 when `against` is empty too and 0 otherwise.
fn mean_best_dice(from: &[BinaryMask], against: &[BinaryMask], smooth: f64) -> Result<f64> {
    if from.is_empty() {
        return Ok(if against.is_empty() { 1.0 } else { 0.0 });
    }
    let mut sum = 0.0;
    for a in from {
        let mut best: f64 = 0.0;
        for b in against {
            best = best.max(dice(a, b, smooth)?);
        }
        sum += best;
    }
    Ok(sum / from.len() as f64)
}

pub fn evaluate_instances(prediction: &[BinaryMask], truth: &[BinaryMask], smooth: f64) -> Result<EvalReport> {
    let specificity = mean_best_dice(prediction, truth, smooth)?;
    let sensitivity = mean_best_dice(truth, prediction, smooth)?;
    Ok(EvalReport {
        specificity,
        sensitivity,
        sbd: specificity.min(sensitivity),
        dic: prediction.len().abs_diff(truth.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(x0: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(20, 1, |x, _| (x0..x1).contains(&x))
    }

    #[test]
    fn dice_examples() {
        let a = strip(0, 10);
        assert_eq!(dice(&a, &a, 1.0).unwrap(), 1.0);
        assert!((dice(&a, &strip(10, 20), 1.0).unwrap() - 1.0 / 21.0).abs() < 1e-15);
        let empty = BinaryMask::new(20, 1);
        assert_eq!(dice(&empty, &empty, 1.0).unwrap(), 1.0);
        assert!(dice(&a, &BinaryMask::new(3, 3), 1.0).is_err());
    }

    #[test]
    fn merged_prediction_worked_example() {
        let (a, b) = (strip(0, 10), strip(10, 20));
        let merged = a.union(&b);
        let r = evaluate_instances(&[merged], &[a, b], 1.0).unwrap();
        assert!((r.specificity - 21.0 / 31.0).abs() < 1e-12);
        assert!((r.sensitivity - 21.0 / 31.0).abs() < 1e-12);
        assert!((r.sbd - 21.0 / 31.0).abs() < 1e-12);
        assert_eq!(r.dic, 1);
    }

    #[test]
    fn identical_partitions_score_one() {
        let parts = [strip(0, 4), strip(4, 9), strip(12, 20)];
        let r = evaluate_instances(&parts, &parts, 1.0).unwrap();
        assert_eq!((r.specificity, r.sensitivity, r.sbd, r.dic), (1.0, 1.0, 1.0, 0));
    }

    #[test]
    fn swapping_sides_exchanges_scores() {
        let p = [strip(0, 7), strip(7, 20)];
        let t = [strip(0, 10)];
        let a = evaluate_instances(&p, &t, 1.0).unwrap();
        let b = evaluate_instances(&t, &p, 1.0).unwrap();
        assert_eq!(a.specificity, b.sensitivity);
        assert_eq!(a.sensitivity, b.specificity);
        assert_eq!(a.sbd, b.sbd);
    }

    #[test]
    fn empty_sides() {
        let t = [strip(0, 5)];
        let r = evaluate_instances(&[], &t, 1.0).unwrap();
        assert_eq!((r.specificity, r.sensitivity, r.sbd, r.dic), (0.0, 0.0, 0.0, 1));
        let r = evaluate_instances(&[], &[], 1.0).unwrap();
        assert_eq!(r.sbd, 1.0);
    }
}
