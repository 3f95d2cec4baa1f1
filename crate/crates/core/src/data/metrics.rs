use super::{model_alias, DatasetBundle, Label, Labels, ModelRecord, PredictionMatrix, Split};
use crate::error::{Error, Result};

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let sse: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    (sse / labels.len() as f64).sqrt()
}

/// Accuracy or RMSE of a list of predictions, depending on the label kind.
pub fn score(predictions: &[Label], labels: &Labels) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    match labels {
        Labels::Classes(y) => {
            let p: Vec<usize> = predictions
                .iter()
                .map(|l| {
                    l.class()
                        .ok_or_else(|| Error::Invalid("expected class predictions".into()))
                })
                .collect::<Result<_>>()?;
            Ok(accuracy(&p, y))
        }
        Labels::Values(y) => {
            let p: Vec<f64> = predictions.iter().map(|l| l.as_f64()).collect();
            Ok(rmse(&p, y))
        }
    }
}

pub(crate) fn matrix_metric(preds: &PredictionMatrix, labels: &Labels) -> Result<f64> {
    score(&preds.labels(), labels)
}

/// Train/val metric per model, in bundle model order.
pub fn compute_model_metrics(bundle: &DatasetBundle) -> Result<Vec<ModelRecord>> {
    bundle
        .model_ids()
        .iter()
        .enumerate()
        .map(|(m, id)| {
            let train_metric = match bundle.predictions(m, Split::Train) {
                Some(p) => Some(matrix_metric(p, bundle.labels(Split::Train))?),
                None => None,
            };
            let val = bundle.predictions(m, Split::Val).ok_or(Error::MissingPredictions {
                model: id.clone(),
                split: "val",
            })?;
            Ok(ModelRecord {
                model_id: id.clone(),
                alias: model_alias(m),
                train_metric,
                val_metric: matrix_metric(val, bundle.labels(Split::Val))?,
            })
        })
        .collect()
}
