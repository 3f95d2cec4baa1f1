#![allow(dead_code)]

use std::path::PathBuf;

use tabctx::context::TabularContext;
use tabctx::data::{model_alias, Label, ModelRecord, TaskKind};

fn record(i: usize, id: &str, train: f64, val: f64) -> ModelRecord {
    ModelRecord {
        model_id: id.to_string(),
        alias: model_alias(i),
        train_metric: Some(train),
        val_metric: val,
    }
}

fn classes(v: &[usize]) -> Vec<Label> {
    v.iter().map(|&c| Label::Class(c)).collect()
}

fn values(v: &[f64]) -> Vec<Label> {
    v.iter().map(|&x| Label::Value(x)).collect()
}

/// Frozen three-class context with three models and four neighbors.
pub fn classification_fixture() -> TabularContext {
    TabularContext {
        task: TaskKind::multiclass(3).unwrap(),
        label_frequencies: Some(vec![0.5, 0.3125, 0.1875]),
        label_range: None,
        model_records: vec![
            record(0, "xgboost", 0.9875, 0.90625),
            record(1, "catboost", 0.93, 0.91),
            record(2, "mlp", 0.88, 0.8125),
        ],
        neighbor_labels: classes(&[2, 2, 0, 1]),
        neighbor_predictions: vec![
            classes(&[2, 2, 1]),
            classes(&[2, 0, 2]),
            classes(&[0, 0, 0]),
            classes(&[1, 2, 1]),
        ],
        target_predictions: classes(&[2, 0, 1]),
    }
}

/// Frozen regression context with two models and three neighbors.
pub fn regression_fixture() -> TabularContext {
    TabularContext {
        task: TaskKind::regression(-3.5, 12.25).unwrap(),
        label_frequencies: None,
        label_range: Some((-3.5, 12.25)),
        model_records: vec![record(0, "lightgbm", 0.731, 0.8842), record(1, "resnet", 0.5, 1.03125)],
        neighbor_labels: values(&[1.5, -0.25, 2.0]),
        neighbor_predictions: vec![
            values(&[1.4375, 1.75]),
            values(&[-0.125, 0.5]),
            values(&[2.0625, 1.8125]),
        ],
        target_predictions: values(&[1.28125, 0.90625]),
    }
}

pub fn snapshot_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/prompt_snapshots")
}

/// Compares `text` with the stored snapshot, or rewrites it when
/// `UPDATE_SNAPSHOTS` is set.
pub fn check_snapshot(name: &str, text: &str) -> Result<(), String> {
    let path = snapshot_dir().join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let stored = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if stored == text.as_bytes() {
        Ok(())
    } else {
        Err(format!("{name} differs from {}", path.display()))
    }
}

/// Name and rendering settings of every stored snapshot.
pub fn snapshot_cases() -> Vec<(&'static str, TabularContext, tabctx::prompt::PromptMode, bool)> {
    use tabctx::prompt::PromptMode::{WithCot, WithoutCot};
    vec![
        ("classification_cot", classification_fixture(), WithCot, true),
        ("classification_plain", classification_fixture(), WithoutCot, true),
        ("classification_named", classification_fixture(), WithCot, false),
        ("regression_cot", regression_fixture(), WithCot, true),
        ("regression_plain", regression_fixture(), WithoutCot, true),
    ]
}
