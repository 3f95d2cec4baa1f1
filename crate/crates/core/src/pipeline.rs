//! Router-then-backend prediction over one split of a bundle.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{ContextBuilder, TabularContext};
use crate::data::{DatasetBundle, Label, Split};
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::llm::{predict_batch, CompletionBackend, Job, LlmConfig, LlmError, Usage};
use crate::prompt::{render_prompt, PromptDoc, PromptMode};
use crate::retrieval::{mutual_information_weights, DistanceMetric, FeatureWeights, DEFAULT_BINS, DEFAULT_K};
use crate::router::{bundle_fallback, classify_hardness, target_predictions, HardnessVerdict, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub tau: f64,
    pub metric: DistanceMetric,
    pub bins: usize,
    pub mode: PromptMode,
    pub anonymize: bool,
    /// When false every target goes to the backend.
    pub route: bool,
    pub expert: ExpertConfig,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            metric: DistanceMetric::default(),
            bins: DEFAULT_BINS,
            mode: PromptMode::WithCot,
            anonymize: true,
            route: true,
            expert: ExpertConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Easy,
    Llm,
    Expert,
    Baseline,
    /// Backend never produced an extractable answer; consensus used.
    Exhausted,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Llm => "llm",
            Self::Expert => "expert",
            Self::Baseline => "baseline",
            Self::Exhausted => "exhausted",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub row: usize,
    pub prediction: Label,
    pub provenance: Provenance,
    pub is_hard: bool,
    pub agreement: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub records: Vec<PredictionRecord>,
    pub usage: Usage,
    /// Contexts of the targets sent to the backend, by row.
    pub backend_contexts: Vec<(usize, TabularContext)>,
}

impl PipelineOutput {
    pub fn predictions(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.prediction).collect()
    }
}

pub fn feature_weights(bundle: &DatasetBundle, metric: DistanceMetric, bins: usize) -> Result<FeatureWeights> {
    mutual_information_weights(bundle.features(Split::Train), bundle.labels(Split::Train), bins, metric)
}

fn check_target_split(split: Split) -> Result<()> {
    if split == Split::Train {
        return Err(Error::Invalid("targets must come from the val or test split".into()));
    }
    Ok(())
}

fn verdicts(bundle: &DatasetBundle, split: Split, cfg: &PipelineConfig) -> Result<Vec<HardnessVerdict>> {
    let task = bundle.task();
    (0..bundle.rows(split))
        .map(|row| {
            let mut v = classify_hardness(&target_predictions(bundle, split, row), &task, cfg.tau)?;
            if !cfg.route {
                v.is_hard = true;
            }
            Ok(v)
        })
        .collect()
}

/// Predicts every row of `split`: easy rows take the consensus, the rest
/// go through the backend with the extraction retry loop.
pub fn predict_split(
    bundle: &DatasetBundle,
    split: Split,
    cfg: &PipelineConfig,
    backend: &dyn CompletionBackend,
) -> Result<PipelineOutput> {
    check_target_split(split)?;
    cfg.llm.validate().map_err(|e| Error::Invalid(e.to_string()))?;
    let verdicts = verdicts(bundle, split, cfg)?;
    let weights = feature_weights(bundle, cfg.metric, cfg.bins)?;
    let hard_rows: Vec<usize> = (0..verdicts.len()).filter(|&r| verdicts[r].is_hard).collect();

    let mut jobs = Vec::with_capacity(hard_rows.len());
    if !hard_rows.is_empty() {
        let builder = ContextBuilder::new(bundle, &weights, cfg.k)?;
        for &row in &hard_rows {
            let context = builder.build(split, row)?;
            let prompt = render_prompt(&context, cfg.mode, cfg.anonymize);
            jobs.push(Job { prompt, context });
        }
    }
    let answers = predict_batch(&jobs, &cfg.llm, backend);
    let answered_by = if backend.name() == "expert" {
        Provenance::Expert
    } else {
        Provenance::Llm
    };

    let mut usage = Usage::default();
    let mut records: Vec<PredictionRecord> = Vec::with_capacity(verdicts.len());
    let mut answers = hard_rows.iter().copied().zip(answers).peekable();
    for (row, v) in verdicts.iter().enumerate() {
        let (prediction, provenance) = match answers.next_if(|(r, _)| *r == row) {
            Some((_, Ok((label, u)))) => {
                usage.add(&u);
                (label, answered_by)
            }
            Some((_, Err(LlmError::ExtractionExhausted { usage: u, .. }))) => {
                usage.add(&u);
                (bundle_fallback(bundle, split, row)?, Provenance::Exhausted)
            }
            Some((_, Err(e))) => return Err(Error::Invalid(e.to_string())),
            None => (bundle_fallback(bundle, split, row)?, Provenance::Easy),
        };
        records.push(PredictionRecord {
            row,
            prediction,
            provenance,
            is_hard: v.is_hard,
            agreement: v.agreement,
        });
    }
    Ok(PipelineOutput {
        records,
        usage,
        backend_contexts: hard_rows.into_iter().zip(jobs.into_iter().map(|j| j.context)).collect(),
    })
}

/// Prompts the pipeline would send, without calling any backend.
pub fn render_split_prompts(
    bundle: &DatasetBundle,
    split: Split,
    cfg: &PipelineConfig,
) -> Result<Vec<(usize, PromptDoc)>> {
    check_target_split(split)?;
    let verdicts = verdicts(bundle, split, cfg)?;
    let weights = feature_weights(bundle, cfg.metric, cfg.bins)?;
    let builder = ContextBuilder::new(bundle, &weights, cfg.k)?;
    (0..verdicts.len())
        .filter(|&r| verdicts[r].is_hard)
        .map(|row| Ok((row, render_prompt(&builder.build(split, row)?, cfg.mode, cfg.anonymize))))
        .collect()
}

pub fn format_label(label: Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Value(v) => v.to_string(),
    }
}

/// `row,prediction,provenance,is_hard,agreement`.
pub fn write_predictions_csv(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["row", "prediction", "provenance", "is_hard", "agreement"])
        .map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.write_record([
            r.row.to_string(),
            format_label(r.prediction),
            r.provenance.to_string(),
            r.is_hard.to_string(),
            r.agreement.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `row,is_hard,agreement`.
pub fn write_hardness_csv(path: impl AsRef<Path>, verdicts: &[HardnessVerdict]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["row", "is_hard", "agreement"])
        .map_err(|e| Error::csv(path, e))?;
    for (row, v) in verdicts.iter().enumerate() {
        w.write_record([row.to_string(), v.is_hard.to_string(), v.agreement.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
