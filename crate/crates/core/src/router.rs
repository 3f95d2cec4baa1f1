//! Hard-sample routing.
//!
//! Classification targets are easy when at least `tau * M` models agree on
//! one label. Regression targets are hard when more than a quarter of the
//! model predictions are IQR outliers.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Label, Split, TaskKind};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessVerdict {
    pub is_hard: bool,
    /// Modal-label count (classification) or outlier count (regression).
    pub agreement: usize,
    pub tau: f64,
}

/// Linear-interpolation quantile of an ascending slice, `pos = q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_values(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Inclusive `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`.
pub fn iqr_bounds(values: &[f64]) -> (f64, f64) {
    let s = sorted_values(values);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

/// Per-value outlier flags; values on the bounds are not outliers.
pub fn iqr_outliers(values: &[f64]) -> Vec<bool> {
    let (lo, hi) = iqr_bounds(values);
    values.iter().map(|&v| v < lo || v > hi).collect()
}

fn label_counts(predictions: &[Label], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for p in predictions {
        match p.class() {
            Some(c) if c < classes => counts[c] += 1,
            Some(c) => return Err(Error::LabelOutOfRange { label: c, classes }),
            None => return Err(Error::Invalid("real prediction in a classification task".into())),
        }
    }
    Ok(counts)
}

fn reals(predictions: &[Label]) -> Vec<f64> {
    predictions.iter().map(|p| p.as_f64()).collect()
}

pub fn classify_hardness(predictions: &[Label], task: &TaskKind, tau: f64) -> Result<HardnessVerdict> {
    if predictions.len() < 2 {
        return Err(Error::TooFewRows {
            need: 2,
            got: predictions.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    let m = predictions.len();
    let (is_hard, agreement) = match task.class_count() {
        Some(classes) => {
            let modal = *label_counts(predictions, classes)?.iter().max().expect("M >= 2");
            ((modal as f64) < tau * m as f64, modal)
        }
        None => {
            let outliers = iqr_outliers(&reals(predictions)).into_iter().filter(|&o| o).count();
            (4 * outliers > m, outliers)
        }
    };
    Ok(HardnessVerdict {
        is_hard,
        agreement,
        tau,
    })
}

/// Consensus prediction for an easy target.
///
/// Classification ties between modal labels go to the higher mean
/// probability (when `probabilities` is given), then the lower class.
/// Regression returns the median of the non-outlier predictions.
pub fn easy_fallback(predictions: &[Label], probabilities: Option<&[&[f64]]>, task: &TaskKind) -> Result<Label> {
    if predictions.is_empty() {
        return Err(Error::TooFewRows { need: 1, got: 0 });
    }
    match task.class_count() {
        Some(classes) => {
            let counts = label_counts(predictions, classes)?;
            let modal = *counts.iter().max().expect("nonempty");
            let mut mean = vec![0.0; classes];
            if let Some(rows) = probabilities {
                for row in rows {
                    for (acc, p) in mean.iter_mut().zip(row.iter()) {
                        *acc += p / rows.len() as f64;
                    }
                }
            }
            let best = (0..classes)
                .filter(|&c| counts[c] == modal)
                .fold(None::<usize>, |best, c| match best {
                    Some(b) if mean[b] >= mean[c] => Some(b),
                    _ => Some(c),
                })
                .expect("a modal label exists");
            Ok(Label::Class(best))
        }
        None => {
            let values = reals(predictions);
            let flags = iqr_outliers(&values);
            let kept: Vec<f64> = values
                .iter()
                .zip(&flags)
                .filter(|(_, &o)| !o)
                .map(|(&v, _)| v)
                .collect();
            let kept = if kept.is_empty() { values } else { kept };
            Ok(Label::Value(quantile_sorted(&sorted_values(&kept), 0.5)))
        }
    }
}

/// Fraction of targets classified hard.
pub fn hard_ratio(predictions: &[Vec<Label>], task: &TaskKind, tau: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::TooFewRows { need: 1, got: 0 });
    }
    let mut hard = 0usize;
    for row in predictions {
        hard += usize::from(classify_hardness(row, task, tau)?.is_hard);
    }
    Ok(hard as f64 / predictions.len() as f64)
}

/// Target predictions of every model for one row, as hard labels.
pub fn target_predictions(bundle: &DatasetBundle, split: Split, row: usize) -> Vec<Label> {
    (0..bundle.model_count())
        .map(|m| {
            bundle
                .predictions(m, split)
                .expect("val/test predictions are mandatory")
                .label(row)
        })
        .collect()
}

/// Probability rows of every model for one row (classification only).
pub fn target_probabilities(bundle: &DatasetBundle, split: Split, row: usize) -> Option<Vec<&[f64]>> {
    (0..bundle.model_count())
        .map(|m| bundle.predictions(m, split).and_then(|p| p.probabilities(row)))
        .collect()
}

/// Verdicts for every row of a split.
pub fn route_split(bundle: &DatasetBundle, split: Split, tau: f64) -> Result<Vec<HardnessVerdict>> {
    let task = bundle.task();
    (0..bundle.rows(split))
        .map(|row| classify_hardness(&target_predictions(bundle, split, row), &task, tau))
        .collect()
}

/// Consensus for one bundle row.
pub fn bundle_fallback(bundle: &DatasetBundle, split: Split, row: usize) -> Result<Label> {
    let probs = target_probabilities(bundle, split, row);
    easy_fallback(
        &target_predictions(bundle, split, row),
        probs.as_deref(),
        &bundle.task(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(v: &[usize]) -> Vec<Label> {
        v.iter().map(|&c| Label::Class(c)).collect()
    }

    fn values(v: &[f64]) -> Vec<Label> {
        v.iter().map(|&x| Label::Value(x)).collect()
    }

    fn reg() -> TaskKind {
        TaskKind::regression(-100.0, 100.0).unwrap()
    }

    #[test]
    fn agreement_boundary_at_eight_models() {
        let task = TaskKind::multiclass(3).unwrap();
        let easy = classify_hardness(&classes(&[1, 1, 1, 1, 1, 1, 0, 0]), &task, 0.75).unwrap();
        assert!(!easy.is_hard);
        assert_eq!(easy.agreement, 6);
        let hard = classify_hardness(&classes(&[1, 1, 1, 1, 1, 0, 0, 2]), &task, 0.75).unwrap();
        assert!(hard.is_hard);
        let hard = classify_hardness(&classes(&[1, 1, 1, 1, 0, 0, 0, 2]), &task, 0.75).unwrap();
        assert!(hard.is_hard);
        assert_eq!(hard.agreement, 4);
    }

    #[test]
    fn interpolated_quartiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.75), 3.25);
    }

    #[test]
    fn regression_outlier_counts() {
        // Q1 = 1, Q3 = 9, fences [-11, 21]: nothing is outside
        let v = classify_hardness(&values(&[1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0, 9.5]), &reg(), 0.75).unwrap();
        assert_eq!(v.agreement, 0);
        assert!(!v.is_hard);
        // Q1 = 1, Q3 = 3, fences [-2, 6]
        let v = classify_hardness(&values(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0]), &reg(), 0.75).unwrap();
        assert_eq!(v.agreement, 2);
        assert!(!v.is_hard);
        let v = classify_hardness(&values(&[-9.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0]), &reg(), 0.75).unwrap();
        assert_eq!(v.agreement, 3);
        assert!(v.is_hard);
    }

    #[test]
    fn fallbacks() {
        let bin = TaskKind::BinClass;
        assert_eq!(
            easy_fallback(&classes(&[1, 1, 1, 1, 1, 1, 0, 0]), None, &bin).unwrap(),
            Label::Class(1)
        );
        let probs: [&[f64]; 4] = [&[0.6, 0.4], &[0.55, 0.45], &[0.1, 0.9], &[0.2, 0.8]];
        assert_eq!(
            easy_fallback(&classes(&[0, 0, 1, 1]), Some(&probs), &bin).unwrap(),
            Label::Class(1)
        );
        assert_eq!(
            easy_fallback(&classes(&[0, 0, 1, 1]), None, &bin).unwrap(),
            Label::Class(0)
        );
        // Q1 = 1.075, Q3 = 3.15, upper fence 6.2625 flags 9.0
        assert_eq!(
            easy_fallback(&values(&[1.0, 1.1, 1.2, 9.0]), None, &reg()).unwrap(),
            Label::Value(1.1)
        );
    }

    #[test]
    fn ratio_limits() {
        let task = TaskKind::multiclass(4).unwrap();
        let unanimous = vec![classes(&[2, 2, 2, 2]); 5];
        assert_eq!(hard_ratio(&unanimous, &task, 0.75).unwrap(), 0.0);
        let split = vec![classes(&[0, 1, 2, 3]); 5];
        assert_eq!(hard_ratio(&split, &task, 0.75).unwrap(), 1.0);
        assert!(classify_hardness(&classes(&[1]), &task, 0.75).is_err());
        assert!(classify_hardness(&classes(&[1, 1]), &task, 0.0).is_err());
    }
}
