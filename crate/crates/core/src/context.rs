//! Tabular context: everything the ensembler sees about one target row.
//!
//! The context carries label statistics, per-model train/val metrics,
//! the true labels and model predictions of the target's nearest train
//! neighbors, and the models' predictions for the target itself. It has
//! no field for raw feature values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{compute_model_metrics, DatasetBundle, Label, Labels, ModelRecord, Split, TaskKind};
use crate::error::{Error, Result};
use crate::retrieval::{k_nearest, FeatureWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularContext {
    pub task: TaskKind,
    /// Train label frequencies (classification only).
    pub label_frequencies: Option<Vec<f64>>,
    /// Train label min/max (regression only).
    pub label_range: Option<(f64, f64)>,
    pub model_records: Vec<ModelRecord>,
    /// Nearest first.
    pub neighbor_labels: Vec<Label>,
    /// `neighbor_predictions[j][m]`: model m on neighbor j.
    pub neighbor_predictions: Vec<Vec<Label>>,
    pub target_predictions: Vec<Label>,
}

impl TabularContext {
    pub fn k(&self) -> usize {
        self.neighbor_labels.len()
    }

    pub fn m(&self) -> usize {
        self.model_records.len()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.task.class_count()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `q_c = #{y = c} / N`.
pub fn label_frequencies(labels: &[usize], class_count: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; class_count];
    for &y in labels {
        if y >= class_count {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: class_count,
            });
        }
        counts[y] += 1;
    }
    let n = labels.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Renders a real with exactly four decimals (ties to even on the exact
/// binary value).
pub fn format_real(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".to_string()
    } else {
        s
    }
}

/// Reusable context builder for one bundle: caches model records and
/// label statistics across targets.
#[derive(Debug, Clone)]
pub struct ContextBuilder<'a> {
    bundle: &'a DatasetBundle,
    weights: &'a FeatureWeights,
    records: Vec<ModelRecord>,
    frequencies: Option<Vec<f64>>,
    range: Option<(f64, f64)>,
    k: usize,
}

impl<'a> ContextBuilder<'a> {
    pub fn new(bundle: &'a DatasetBundle, weights: &'a FeatureWeights, k: usize) -> Result<Self> {
        let train_rows = bundle.rows(Split::Train);
        if k == 0 || k > train_rows {
            return Err(Error::InvalidK {
                k,
                available: train_rows,
            });
        }
        if let Some(m) = (0..bundle.model_count()).find(|&m| bundle.predictions(m, Split::Train).is_none()) {
            return Err(Error::MissingPredictions {
                model: bundle.model_ids()[m].clone(),
                split: "train",
            });
        }
        let (frequencies, range) = match bundle.labels(Split::Train) {
            Labels::Classes(y) => {
                let c = bundle.task().class_count().expect("classification task");
                (Some(label_frequencies(y, c)?), None)
            }
            Labels::Values(y) => {
                let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (None, Some((lo, hi)))
            }
        };
        Ok(Self {
            bundle,
            weights,
            records: compute_model_metrics(bundle)?,
            frequencies,
            range,
            k,
        })
    }

    pub fn records(&self) -> &[ModelRecord] {
        &self.records
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Neighbor train rows of `(split, row)`, ascending distance.
    pub fn neighbors(&self, split: Split, row: usize) -> Result<Vec<usize>> {
        let target = self.bundle.features(split).row(row);
        Ok(k_nearest(target, self.bundle.features(Split::Train), self.weights, self.k)?.indices)
    }

    pub fn build(&self, split: Split, row: usize) -> Result<TabularContext> {
        if split == Split::Train {
            return Err(Error::Invalid("targets must come from the val or test split".into()));
        }
        if row >= self.bundle.rows(split) {
            return Err(Error::Invalid(format!("row {row} out of range for {split}")));
        }
        let neighbors = self.neighbors(split, row)?;
        let m = self.bundle.model_count();
        let train_labels = self.bundle.labels(Split::Train);
        let neighbor_labels = neighbors.iter().map(|&j| train_labels.get(j)).collect();
        let neighbor_predictions = neighbors
            .iter()
            .map(|&j| {
                (0..m)
                    .map(|model| {
                        self.bundle
                            .predictions(model, Split::Train)
                            .expect("checked in new")
                            .label(j)
                    })
                    .collect()
            })
            .collect();
        let target_predictions = (0..m)
            .map(|model| {
                self.bundle
                    .predictions(model, split)
                    .expect("val/test predictions are mandatory")
                    .label(row)
            })
            .collect();
        Ok(TabularContext {
            task: self.bundle.task(),
            label_frequencies: self.frequencies.clone(),
            label_range: self.range,
            model_records: self.records.clone(),
            neighbor_labels,
            neighbor_predictions,
            target_predictions,
        })
    }
}

/// One-shot context construction for a single target.
pub fn build_context(
    bundle: &DatasetBundle,
    weights: &FeatureWeights,
    split: Split,
    row: usize,
    k: usize,
) -> Result<TabularContext> {
    ContextBuilder::new(bundle, weights, k)?.build(split, row)
}
