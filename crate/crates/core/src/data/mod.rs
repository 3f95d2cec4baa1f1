//! Dataset bundle: features, labels and the external models' prediction
//! matrices for the train/val/test splits.
//!
//! A bundle is immutable once constructed. Every constructor path goes
//! through [`DatasetBundle::new`], which encodes the raw features with
//! train-split statistics and validates all shape and probability
//! invariants.

mod bundle;
mod encode;
mod metrics;
mod split;

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{load_bundle, write_bundle, DatasetBundle, ModelPredictions};
pub use encode::{encode_features, ColumnEncoder, FeatureEncoder, RawColumn, RawTable};
pub use metrics::{accuracy, compute_model_metrics, rmse, score};
pub use split::{split_dataset, split_indices, split_sizes, SplitIndices, TEST_FRACTION, TRAIN_FRACTION, VAL_FRACTION};

/// Tolerance on the row sums of stored class probabilities.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

/// Task type of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    #[serde(rename = "binclass")]
    BinClass,
    #[serde(rename = "multiclass")]
    MultiClass { class_count: usize },
    #[serde(rename = "regression")]
    Regression { label_min: f64, label_max: f64 },
}

impl TaskKind {
    pub fn multiclass(class_count: usize) -> Result<Self> {
        let task = TaskKind::MultiClass { class_count };
        task.validate()?;
        Ok(task)
    }

    pub fn regression(label_min: f64, label_max: f64) -> Result<Self> {
        let task = TaskKind::Regression { label_min, label_max };
        task.validate()?;
        Ok(task)
    }

    /// Classification task with `class_count` classes (binary when 2).
    pub fn classification(class_count: usize) -> Result<Self> {
        match class_count {
            2 => Ok(TaskKind::BinClass),
            _ => Self::multiclass(class_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::BinClass => Ok(()),
            TaskKind::MultiClass { class_count } if class_count >= 3 => Ok(()),
            TaskKind::MultiClass { class_count } => Err(Error::InvalidTask(format!(
                "multiclass needs at least 3 classes, got {class_count}"
            ))),
            TaskKind::Regression { label_min, label_max } => {
                if label_min.is_finite() && label_max.is_finite() && label_min <= label_max {
                    Ok(())
                } else {
                    Err(Error::InvalidTask(format!(
                        "regression label range [{label_min}, {label_max}] is invalid"
                    )))
                }
            }
        }
    }

    pub fn class_count(&self) -> Option<usize> {
        match *self {
            TaskKind::BinClass => Some(2),
            TaskKind::MultiClass { class_count } => Some(class_count),
            TaskKind::Regression { .. } => None,
        }
    }

    pub fn label_range(&self) -> Option<(f64, f64)> {
        match *self {
            TaskKind::Regression { label_min, label_max } => Some((label_min, label_max)),
            _ => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::Regression { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::BinClass => "binclass",
            TaskKind::MultiClass { .. } => "multiclass",
            TaskKind::Regression { .. } => "regression",
        }
    }
}

/// A label or a prediction: a class index or a real value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    /// Numeric view: class index as a real, or the value itself.
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One value per split.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSplit<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

impl<T> PerSplit<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> PerSplit<U> {
        PerSplit {
            train: f(self.train),
            val: f(self.val),
            test: f(self.test),
        }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(Split, T) -> Result<U>) -> Result<PerSplit<U>> {
        Ok(PerSplit {
            train: f(Split::Train, self.train)?,
            val: f(Split::Val, self.val)?,
            test: f(Split::Test, self.test)?,
        })
    }
}

impl<T> Index<Split> for PerSplit<T> {
    type Output = T;

    fn index(&self, split: Split) -> &T {
        self.get(split)
    }
}

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Ground-truth labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Label {
        match self {
            Labels::Classes(v) => Label::Class(v[i]),
            Labels::Values(v) => Label::Value(v[i]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Labels::Classes(v) => Labels::Classes(indices.iter().map(|&i| v[i]).collect()),
            Labels::Values(v) => Labels::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn as_classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Classes(v) => Some(v),
            Labels::Values(_) => None,
        }
    }

    pub fn as_values(&self) -> Option<&[f64]> {
        match self {
            Labels::Values(v) => Some(v),
            Labels::Classes(_) => None,
        }
    }
}

/// Stored outputs of one model on one split.
///
/// Classification outputs are class-probability rows; hard labels come
/// from [`argmax`] with the lowest index winning ties.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionMatrix {
    Probabilities(Matrix),
    Values(Vec<f64>),
}

impl PredictionMatrix {
    pub fn rows(&self) -> usize {
        match self {
            PredictionMatrix::Probabilities(m) => m.rows(),
            PredictionMatrix::Values(v) => v.len(),
        }
    }

    pub fn label(&self, i: usize) -> Label {
        match self {
            PredictionMatrix::Probabilities(m) => Label::Class(argmax(m.row(i))),
            PredictionMatrix::Values(v) => Label::Value(v[i]),
        }
    }

    pub fn probabilities(&self, i: usize) -> Option<&[f64]> {
        match self {
            PredictionMatrix::Probabilities(m) => Some(m.row(i)),
            PredictionMatrix::Values(_) => None,
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        (0..self.rows()).map(|i| self.label(i)).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            PredictionMatrix::Probabilities(m) => PredictionMatrix::Probabilities(m.select_rows(indices)),
            PredictionMatrix::Values(v) => PredictionMatrix::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Checks finiteness and, for probabilities, row normalization.
    pub fn validate(&self, what: &str) -> Result<()> {
        match self {
            PredictionMatrix::Probabilities(m) => {
                for (row, values) in m.iter_rows().enumerate() {
                    if values.iter().any(|p| !p.is_finite()) {
                        return Err(Error::NonFinite {
                            what: what.to_string(),
                            row,
                        });
                    }
                    let sum: f64 = values.iter().sum();
                    if values.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                        return Err(Error::RowNotNormalized {
                            what: what.to_string(),
                            row,
                            sum,
                        });
                    }
                }
            }
            PredictionMatrix::Values(v) => {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: what.to_string(),
                        row,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-model summary shown to the ensembler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    /// Positional anonymized name: "Model A", "Model B", ...
    pub alias: String,
    /// Accuracy (classification) or RMSE (regression); `None` when the
    /// bundle carries no train-split predictions.
    pub train_metric: Option<f64>,
    pub val_metric: f64,
}

/// Anonymized name for the model at `index`: A..Z, then AA, AB, ...
pub fn model_alias(index: usize) -> String {
    let mut letters = Vec::new();
    let mut n = index + 1;
    while n > 0 {
        let rem = (n - 1) % 26;
        letters.push(b'A' + rem as u8);
        n = (n - 1) / 26;
    }
    letters.reverse();
    format!("Model {}", String::from_utf8(letters).expect("ascii"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}
