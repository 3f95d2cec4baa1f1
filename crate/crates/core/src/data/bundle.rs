use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encode::{encode_features, FeatureEncoder, RawColumn, RawTable};
use super::{FeatureKind, Labels, Matrix, PerSplit, PredictionMatrix, Split, TaskKind};
use crate::error::{Error, Result};

/// Stored outputs of one external model. Train-split outputs are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictions {
    pub train: Option<PredictionMatrix>,
    pub val: PredictionMatrix,
    pub test: PredictionMatrix,
}

impl ModelPredictions {
    pub fn get(&self, split: Split) -> Option<&PredictionMatrix> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Val => Some(&self.val),
            Split::Test => Some(&self.test),
        }
    }
}

/// The engine's sole input: encoded features, labels and per-model
/// prediction matrices for the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    task: TaskKind,
    model_ids: Vec<String>,
    raw: PerSplit<RawTable>,
    features: PerSplit<Matrix>,
    encoder: FeatureEncoder,
    labels: PerSplit<Labels>,
    predictions: Vec<ModelPredictions>,
}

impl DatasetBundle {
    pub fn new(
        task: TaskKind,
        model_ids: Vec<String>,
        raw: PerSplit<RawTable>,
        labels: PerSplit<Labels>,
        predictions: Vec<ModelPredictions>,
    ) -> Result<Self> {
        task.validate()?;
        if model_ids.len() < 2 {
            return Err(Error::Invalid(format!(
                "a bundle needs at least 2 models, got {}",
                model_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = model_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Invalid(format!("duplicate model id `{dup}`")));
        }
        if predictions.len() != model_ids.len() {
            return Err(Error::Shape(format!(
                "{} prediction sets for {} models",
                predictions.len(),
                model_ids.len()
            )));
        }
        let kinds = raw.train.kinds();
        for split in [Split::Val, Split::Test] {
            if raw[split].kinds() != kinds {
                return Err(Error::Shape(format!(
                    "{split} features do not share the train column layout"
                )));
            }
        }
        for split in Split::ALL {
            let rows = raw[split].rows();
            if labels[split].len() != rows {
                return Err(Error::Shape(format!(
                    "{split} has {rows} feature rows but {} labels",
                    labels[split].len()
                )));
            }
            validate_labels(&task, &labels[split])?;
            for (m, preds) in predictions.iter().enumerate() {
                let Some(p) = preds.get(split) else { continue };
                let what = format!("preds/{}/{split}.csv", model_ids[m]);
                if p.rows() != rows {
                    return Err(Error::Shape(format!("{what} has {} rows, expected {rows}", p.rows())));
                }
                match (task.class_count(), p) {
                    (Some(c), PredictionMatrix::Probabilities(mat)) if mat.cols() != c => {
                        return Err(Error::Shape(format!("{what} has {} columns, expected {c}", mat.cols())))
                    }
                    (Some(_), PredictionMatrix::Values(_)) | (None, PredictionMatrix::Probabilities(_)) => {
                        return Err(Error::Shape(format!("{what} does not match the task kind")))
                    }
                    _ => {}
                }
                p.validate(&what)?;
            }
        }
        let (features, encoder) = encode_features(&raw)?;
        Ok(Self {
            task,
            model_ids,
            raw,
            features,
            encoder,
            labels,
            predictions,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn model_count(&self) -> usize {
        self.model_ids.len()
    }

    pub fn feature_kinds(&self) -> Vec<FeatureKind> {
        self.raw.train.kinds()
    }

    pub fn raw(&self, split: Split) -> &RawTable {
        &self.raw[split]
    }

    /// Encoded (standardized / one-hot) features.
    pub fn features(&self, split: Split) -> &Matrix {
        &self.features[split]
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn labels(&self, split: Split) -> &Labels {
        &self.labels[split]
    }

    pub fn rows(&self, split: Split) -> usize {
        self.labels[split].len()
    }

    pub fn predictions(&self, model: usize, split: Split) -> Option<&PredictionMatrix> {
        self.predictions[model].get(split)
    }

    pub fn model_predictions(&self) -> &[ModelPredictions] {
        &self.predictions
    }

    pub fn has_train_predictions(&self) -> bool {
        self.predictions.iter().all(|p| p.train.is_some())
    }

    /// Same data with only the models at `keep` (in that order).
    pub fn with_models(&self, keep: &[usize]) -> Result<Self> {
        Self::new(
            self.task,
            keep.iter().map(|&m| self.model_ids[m].clone()).collect(),
            self.raw.clone(),
            self.labels.clone(),
            keep.iter().map(|&m| self.predictions[m].clone()).collect(),
        )
    }
}

fn validate_labels(task: &TaskKind, labels: &Labels) -> Result<()> {
    match (task.class_count(), labels) {
        (Some(c), Labels::Classes(y)) => {
            if let Some(&bad) = y.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange { label: bad, classes: c });
            }
            Ok(())
        }
        (None, Labels::Values(y)) => match y.iter().position(|v| !v.is_finite()) {
            Some(row) => Err(Error::NonFinite {
                what: "labels".into(),
                row,
            }),
            None => Ok(()),
        },
        _ => Err(Error::Shape("label kind does not match the task".into())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_max: Option<f64>,
    model_ids: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
}

impl BundleMeta {
    fn task(&self) -> Result<TaskKind> {
        match self.task.as_str() {
            "binclass" => match self.class_count {
                None | Some(2) => Ok(TaskKind::BinClass),
                Some(c) => Err(Error::InvalidTask(format!("binclass with class_count {c}"))),
            },
            "multiclass" => {
                let c = self
                    .class_count
                    .ok_or_else(|| Error::InvalidTask("multiclass without class_count".into()))?;
                TaskKind::multiclass(c)
            }
            "regression" => match (self.label_min, self.label_max) {
                (Some(lo), Some(hi)) => TaskKind::regression(lo, hi),
                _ => Err(Error::InvalidTask("regression needs label_min and label_max".into())),
            },
            other => Err(Error::InvalidTask(format!("unknown task `{other}`"))),
        }
    }
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))?;
    Ok((header, records))
}

fn parse_real(cell: &str, what: &str, row: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        what: what.to_string(),
        row,
        value: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
            row,
        });
    }
    Ok(v)
}

fn read_features(path: &Path, kinds: &[FeatureKind]) -> Result<RawTable> {
    let (header, records) = read_records(path)?;
    if header.len() != kinds.len() {
        return Err(Error::Shape(format!(
            "{} has {} columns but meta.json declares {} feature kinds",
            path.display(),
            header.len(),
            kinds.len()
        )));
    }
    let what = path.display().to_string();
    let columns = kinds
        .iter()
        .enumerate()
        .map(|(j, kind)| match kind {
            FeatureKind::Numerical => records
                .iter()
                .enumerate()
                .map(|(i, r)| parse_real(&r[j], &what, i))
                .collect::<Result<Vec<_>>>()
                .map(RawColumn::Numerical),
            FeatureKind::Categorical => Ok(RawColumn::Categorical(
                records.iter().map(|r| r[j].to_string()).collect(),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    RawTable::new(columns)
}

fn read_labels(path: &Path, task: &TaskKind) -> Result<Labels> {
    let (header, records) = read_records(path)?;
    if header.len() != 1 {
        return Err(Error::Shape(format!("{} must have exactly one column", path.display())));
    }
    let what = path.display().to_string();
    let values = records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_real(&r[0], &what, i))
        .collect::<Result<Vec<_>>>()?;
    if task.is_classification() {
        values
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Parse {
                        what: what.clone(),
                        row,
                        value: v.to_string(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels::Classes)
    } else {
        Ok(Labels::Values(values))
    }
}

fn read_predictions(path: &Path, task: &TaskKind) -> Result<PredictionMatrix> {
    let (header, records) = read_records(path)?;
    let what = path.display().to_string();
    let expected: Vec<String> = match task.class_count() {
        Some(c) => (0..c).map(|i| format!("p{i}")).collect(),
        None => vec!["y_hat".to_string()],
    };
    if header != expected {
        return Err(Error::Shape(format!("{what} header {header:?}, expected {expected:?}")));
    }
    let mut data = Vec::with_capacity(records.len() * expected.len());
    for (i, r) in records.iter().enumerate() {
        if r.len() != expected.len() {
            return Err(Error::Shape(format!("{what} row {i} has {} cells", r.len())));
        }
        for cell in r.iter() {
            data.push(parse_real(cell, &what, i)?);
        }
    }
    let preds = if task.is_classification() {
        PredictionMatrix::Probabilities(Matrix::new(records.len(), expected.len(), data)?)
    } else {
        PredictionMatrix::Values(data)
    };
    preds.validate(&what)?;
    Ok(preds)
}

/// Loads and validates a bundle directory.
///
/// Layout: `meta.json`, `X_{train,val,test}.csv`, `y_{train,val,test}.csv`
/// and `preds/<model_id>/{train,val,test}.csv` (train optional).
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingFile(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    let task = meta.task()?;

    let preds_dir = dir.join("preds");
    if preds_dir.is_dir() {
        let entries = fs::read_dir(&preds_dir).map_err(|e| Error::io(&preds_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&preds_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && !meta.model_ids.contains(&name) {
                return Err(Error::UnknownModel(name));
            }
        }
    }

    let raw = PerSplit {
        train: read_features(&dir.join("X_train.csv"), &meta.feature_kinds)?,
        val: read_features(&dir.join("X_val.csv"), &meta.feature_kinds)?,
        test: read_features(&dir.join("X_test.csv"), &meta.feature_kinds)?,
    };
    let labels = PerSplit {
        train: read_labels(&dir.join("y_train.csv"), &task)?,
        val: read_labels(&dir.join("y_val.csv"), &task)?,
        test: read_labels(&dir.join("y_test.csv"), &task)?,
    };
    let mut predictions = Vec::with_capacity(meta.model_ids.len());
    for id in &meta.model_ids {
        let model_dir = preds_dir.join(id);
        let required = |split: &'static str| -> Result<PredictionMatrix> {
            let path = model_dir.join(format!("{split}.csv"));
            if !path.is_file() {
                return Err(Error::MissingPredictions {
                    model: id.clone(),
                    split,
                });
            }
            read_predictions(&path, &task)
        };
        let train_path = model_dir.join("train.csv");
        let train = if train_path.is_file() {
            Some(read_predictions(&train_path, &task)?)
        } else {
            None
        };
        predictions.push(ModelPredictions {
            train,
            val: required("val")?,
            test: required("test")?,
        });
    }
    DatasetBundle::new(task, meta.model_ids, raw, labels, predictions)
}

struct CsvOut {
    path: std::path::PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(path: std::path::PathBuf) -> Result<Self> {
        let writer = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row<I, T>(&mut self, cells: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(cells).map_err(|e| Error::csv(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_features(path: std::path::PathBuf, table: &RawTable) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row((0..table.columns().len()).map(|j| format!("f{j}")))?;
    for i in 0..table.rows() {
        out.row(table.columns().iter().map(|c| match c {
            RawColumn::Numerical(v) => v[i].to_string(),
            RawColumn::Categorical(v) => v[i].clone(),
        }))?;
    }
    out.finish()
}

fn write_labels(path: std::path::PathBuf, labels: &Labels) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(["y"])?;
    for l in labels.iter() {
        out.row([l.to_string()])?;
    }
    out.finish()
}

fn write_predictions(path: std::path::PathBuf, preds: &PredictionMatrix) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    match preds {
        PredictionMatrix::Probabilities(m) => {
            out.row((0..m.cols()).map(|c| format!("p{c}")))?;
            for r in m.iter_rows() {
                out.row(r.iter().map(f64::to_string))?;
            }
        }
        PredictionMatrix::Values(v) => {
            out.row(["y_hat"])?;
            for x in v {
                out.row([x.to_string()])?;
            }
        }
    }
    out.finish()
}

/// Writes `bundle` in the directory layout read by [`load_bundle`].
/// Reals are written in shortest round-trip form, so loading the result
/// reproduces every stored matrix exactly.
pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let task = bundle.task();
    let meta = BundleMeta {
        task: task.name().to_string(),
        class_count: task.class_count(),
        label_min: task.label_range().map(|r| r.0),
        label_max: task.label_range().map(|r| r.1),
        model_ids: bundle.model_ids().to_vec(),
        feature_kinds: bundle.feature_kinds(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    for split in Split::ALL {
        write_features(dir.join(format!("X_{split}.csv")), bundle.raw(split))?;
        write_labels(dir.join(format!("y_{split}.csv")), bundle.labels(split))?;
    }
    for (m, id) in bundle.model_ids().iter().enumerate() {
        let model_dir = dir.join("preds").join(id);
        fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
        for split in Split::ALL {
            if let Some(p) = bundle.predictions(m, split) {
                write_predictions(model_dir.join(format!("{split}.csv")), p)?;
            }
        }
    }
    Ok(())
}
