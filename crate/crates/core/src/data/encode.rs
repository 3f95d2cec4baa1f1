use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{FeatureKind, Matrix, PerSplit};
use crate::error::{Error, Result};

/// Standard deviations below this are treated as this value.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Numerical(Vec<f64>),
    Categorical(Vec<String>),
}

impl RawColumn {
    pub fn len(&self) -> usize {
        match self {
            RawColumn::Numerical(v) => v.len(),
            RawColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            RawColumn::Numerical(_) => FeatureKind::Numerical,
            RawColumn::Categorical(_) => FeatureKind::Categorical,
        }
    }

    fn select(&self, indices: &[usize]) -> Self {
        match self {
            RawColumn::Numerical(v) => RawColumn::Numerical(indices.iter().map(|&i| v[i]).collect()),
            RawColumn::Categorical(v) => RawColumn::Categorical(indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Raw feature table, column-major, before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    rows: usize,
    columns: Vec<RawColumn>,
}

impl RawTable {
    pub fn new(columns: Vec<RawColumn>) -> Result<Self> {
        let rows = columns.first().map_or(0, RawColumn::len);
        if let Some((j, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != rows) {
            return Err(Error::Shape(format!(
                "column {j} has {} rows, expected {rows}",
                c.len()
            )));
        }
        for (j, c) in columns.iter().enumerate() {
            if let RawColumn::Numerical(v) = c {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("feature column {j}"),
                        row,
                    });
                }
            }
        }
        Ok(Self { rows, columns })
    }

    /// All-numerical table from a row-major matrix.
    pub fn numerical(matrix: &Matrix) -> Result<Self> {
        Self::new(
            (0..matrix.cols())
                .map(|j| RawColumn::Numerical(matrix.column(j)))
                .collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[RawColumn] {
        &self.columns
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.columns.iter().map(RawColumn::kind).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.len(),
            columns: self.columns.iter().map(|c| c.select(indices)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnEncoder {
    Standardize { mean: f64, std: f64 },
    OneHot { vocabulary: Vec<String> },
}

impl ColumnEncoder {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoder::Standardize { .. } => 1,
            ColumnEncoder::OneHot { vocabulary } => vocabulary.len(),
        }
    }
}

/// Encoder state fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub columns: Vec<ColumnEncoder>,
}

impl FeatureEncoder {
    pub fn fit(train: &RawTable) -> Self {
        let columns = train
            .columns()
            .iter()
            .map(|column| match column {
                RawColumn::Numerical(values) => {
                    let n = values.len().max(1) as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    ColumnEncoder::Standardize { mean, std: var.sqrt() }
                }
                RawColumn::Categorical(values) => {
                    let vocabulary: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                    ColumnEncoder::OneHot {
                        vocabulary: vocabulary.into_iter().map(str::to_owned).collect(),
                    }
                }
            })
            .collect();
        Self { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnEncoder::width).sum()
    }

    pub fn transform(&self, table: &RawTable) -> Result<Matrix> {
        if table.columns().len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "table has {} columns, encoder expects {}",
                table.columns().len(),
                self.columns.len()
            )));
        }
        let width = self.width();
        let mut out = Matrix::zeros(table.rows(), width);
        let mut offset = 0;
        for (j, (encoder, column)) in self.columns.iter().zip(table.columns()).enumerate() {
            match (encoder, column) {
                (ColumnEncoder::Standardize { mean, std }, RawColumn::Numerical(values)) => {
                    let scale = std.max(STD_FLOOR);
                    for (i, x) in values.iter().enumerate() {
                        out.row_mut(i)[offset] = (x - mean) / scale;
                    }
                }
                (ColumnEncoder::OneHot { vocabulary }, RawColumn::Categorical(values)) => {
                    for (i, v) in values.iter().enumerate() {
                        // unseen categories stay all-zero
                        if let Ok(pos) = vocabulary.binary_search(v) {
                            out.row_mut(i)[offset + pos] = 1.0;
                        }
                    }
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "column {j} kind does not match the fitted encoder"
                    )))
                }
            }
            offset += encoder.width();
        }
        Ok(out)
    }
}

/// Fits the encoder on the train split and encodes all three splits.
pub fn encode_features(raw: &PerSplit<RawTable>) -> Result<(PerSplit<Matrix>, FeatureEncoder)> {
    let encoder = FeatureEncoder::fit(&raw.train);
    let encoded = PerSplit {
        train: encoder.transform(&raw.train)?,
        val: encoder.transform(&raw.val)?,
        test: encoder.transform(&raw.test)?,
    };
    Ok((encoded, encoder))
}
