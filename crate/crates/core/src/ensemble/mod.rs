//! Baseline ensembles and the context meta learner.

mod gbdt;

pub use gbdt::{predict_meta, train_meta, GbdtParams, MetaModel, Node, Tree, MIN_META_ROWS};

use serde::{Deserialize, Serialize};

use crate::context::{ContextBuilder, TabularContext};
use crate::data::{argmax, compute_model_metrics, DatasetBundle, Label, Matrix, ModelRecord, PredictionMatrix, Split};
use crate::error::{Error, Result};
use crate::retrieval::FeatureWeights;

const RMSE_WEIGHT_EPS: f64 = 1e-12;

/// Per-model outputs for one target.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutputs {
    Probabilities(Vec<Vec<f64>>),
    Values(Vec<f64>),
}

impl ModelOutputs {
    pub fn for_row(bundle: &DatasetBundle, split: Split, row: usize) -> Self {
        let mats: Vec<&PredictionMatrix> = (0..bundle.model_count())
            .map(|m| {
                bundle
                    .predictions(m, split)
                    .expect("val/test predictions are mandatory")
            })
            .collect();
        if bundle.task().is_classification() {
            Self::Probabilities(
                mats.iter()
                    .map(|p| p.probabilities(row).expect("classification rows").to_vec())
                    .collect(),
            )
        } else {
            Self::Values(mats.iter().map(|p| p.label(row).as_f64()).collect())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Probabilities(p) => p.len(),
            Self::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<Label> {
        match self {
            Self::Probabilities(p) => p.iter().map(|r| Label::Class(argmax(r))).collect(),
            Self::Values(v) => v.iter().map(|&x| Label::Value(x)).collect(),
        }
    }
}

/// Target prediction of the model with the best validation metric (lowest
/// index on ties).
pub fn best_model(records: &[ModelRecord], targets: &[Label], classification: bool) -> Label {
    let mut best = 0;
    for m in 1..records.len() {
        let (v, b) = (records[m].val_metric, records[best].val_metric);
        if (classification && v > b) || (!classification && v < b) {
            best = m;
        }
    }
    targets[best]
}

fn weighted_mean(outputs: &ModelOutputs, weights: &[f64]) -> Label {
    match outputs {
        ModelOutputs::Probabilities(rows) => {
            let mut mean = vec![0.0; rows[0].len()];
            for (row, w) in rows.iter().zip(weights) {
                for (acc, p) in mean.iter_mut().zip(row) {
                    *acc += w * p;
                }
            }
            Label::Class(argmax(&mean))
        }
        ModelOutputs::Values(values) => Label::Value(values.iter().zip(weights).map(|(v, w)| v * w).sum()),
    }
}

/// Unweighted mean of probability rows (then argmax) or of values.
pub fn average_vote(outputs: &ModelOutputs) -> Label {
    let m = outputs.len();
    weighted_mean(outputs, &vec![1.0 / m as f64; m])
}

/// Mean weighted by training accuracy, or by inverse training RMSE for
/// regression. All-zero weights fall back to the plain average.
pub fn weighted_vote(outputs: &ModelOutputs, train_metrics: &[f64]) -> Label {
    let raw: Vec<f64> = match outputs {
        ModelOutputs::Probabilities(_) => train_metrics.to_vec(),
        ModelOutputs::Values(_) => train_metrics.iter().map(|r| 1.0 / (r + RMSE_WEIGHT_EPS)).collect(),
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return average_vote(outputs);
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    weighted_mean(outputs, &weights)
}

pub fn train_metrics(records: &[ModelRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.train_metric
                .ok_or_else(|| Error::MissingTrainMetric(r.model_id.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMethod {
    Best,
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "wavg")]
    Weighted,
}

impl VoteMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Best => "best",
            Self::Average => "avg",
            Self::Weighted => "wavg",
        }
    }
}

/// Runs a voting baseline over every row of `split`.
pub fn vote_split(bundle: &DatasetBundle, split: Split, method: VoteMethod) -> Result<Vec<Label>> {
    let records = compute_model_metrics(bundle)?;
    let classification = bundle.task().is_classification();
    let metrics = match method {
        VoteMethod::Weighted => train_metrics(&records)?,
        _ => Vec::new(),
    };
    Ok((0..bundle.rows(split))
        .map(|row| {
            let outputs = ModelOutputs::for_row(bundle, split, row);
            match method {
                VoteMethod::Best => best_model(&records, &outputs.labels(), classification),
                VoteMethod::Average => average_vote(&outputs),
                VoteMethod::Weighted => weighted_vote(&outputs, &metrics),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureVector {
    pub values: Vec<f64>,
}

/// `[target predictions (M) | neighbor labels (K) | neighbor predictions
/// (K*M, neighbor-major)]`; classes are encoded as their index.
pub fn build_meta_features(ctx: &TabularContext) -> MetaFeatureVector {
    let mut values = Vec::with_capacity(ctx.m() + ctx.k() * (ctx.m() + 1));
    values.extend(ctx.target_predictions.iter().map(|l| l.as_f64()));
    values.extend(ctx.neighbor_labels.iter().map(|l| l.as_f64()));
    for row in &ctx.neighbor_predictions {
        values.extend(row.iter().map(|l| l.as_f64()));
    }
    MetaFeatureVector { values }
}

/// Stacks meta features; every context must share one layout.
pub fn meta_matrix(contexts: &[TabularContext]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = contexts.iter().map(|c| build_meta_features(c).values).collect();
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    Matrix::from_rows(&rows)
}

fn split_contexts(builder: &ContextBuilder<'_>, bundle: &DatasetBundle, split: Split) -> Result<Vec<TabularContext>> {
    (0..bundle.rows(split)).map(|row| builder.build(split, row)).collect()
}

/// Trains the meta learner on validation contexts and predicts the test
/// split.
pub fn meta_predictions(
    bundle: &DatasetBundle,
    weights: &FeatureWeights,
    k: usize,
    params: &GbdtParams,
) -> Result<(Vec<Label>, MetaModel)> {
    let builder = ContextBuilder::new(bundle, weights, k)?;
    let z_val = meta_matrix(&split_contexts(&builder, bundle, Split::Val)?)?;
    let model = train_meta(&z_val, bundle.labels(Split::Val), &bundle.task(), params)?;
    let z_test = meta_matrix(&split_contexts(&builder, bundle, Split::Test)?)?;
    let predictions = z_test
        .iter_rows()
        .map(|z| predict_meta(&model, z))
        .collect::<Result<Vec<_>>>()?;
    Ok((predictions, model))
}
