//! Prompt rendering and answer extraction.
//!
//! The wording below is frozen and covered by snapshot tests; any change
//! to it shows up as a diff against `tests/prompt_snapshots/`.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{format_real, TabularContext};
use crate::data::{Label, TaskKind};

pub const CLASSIFICATION_PATTERN: &str = r"I predict the label of the target instance as (\d+)";
pub const REGRESSION_PATTERN: &str = r"(-?\d+\.\d+)";

/// Reasoning step headings, in order.
pub const STEP_HEADINGS: [&str; 4] = [
    "Well-performing Model Selection",
    "Outlier Identification",
    "Suitable Model Selection",
    "Final Prediction",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    WithCot,
    WithoutCot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDoc {
    pub text: String,
    pub task: TaskKind,
    pub mode: PromptMode,
    pub anonymized: bool,
    pub extraction_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no prediction matched `{pattern}`")]
    NoMatch { pattern: &'static str },
}

fn classification_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(CLASSIFICATION_PATTERN).expect("valid pattern"))
}

fn regression_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(REGRESSION_PATTERN).expect("valid pattern"))
}

pub fn extraction_pattern(task: &TaskKind) -> &'static str {
    if task.is_classification() {
        CLASSIFICATION_PATTERN
    } else {
        REGRESSION_PATTERN
    }
}

/// Pulls the prediction out of a response using the first pattern match.
///
/// A class index outside `[0, C)` counts as no match; later matches are
/// not consulted.
pub fn extract_prediction(response: &str, task: &TaskKind) -> Result<Label, ExtractError> {
    match task.class_count() {
        Some(classes) => {
            let no_match = ExtractError::NoMatch {
                pattern: CLASSIFICATION_PATTERN,
            };
            let caps = classification_regex().captures(response).ok_or(no_match.clone())?;
            match caps[1].parse::<usize>() {
                Ok(c) if c < classes => Ok(Label::Class(c)),
                _ => Err(no_match),
            }
        }
        None => {
            let no_match = ExtractError::NoMatch {
                pattern: REGRESSION_PATTERN,
            };
            let caps = regression_regex().captures(response).ok_or(no_match.clone())?;
            caps[1]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Label::Value)
                .ok_or(no_match)
        }
    }
}

fn render_label(label: Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Value(v) => format_real(v),
    }
}

fn task_description(task: &TaskKind) -> &'static str {
    match task {
        TaskKind::BinClass => "binary classification",
        TaskKind::MultiClass { .. } => "multiclass classification",
        TaskKind::Regression { .. } => "regression",
    }
}

/// Renders a context into prompt text.
pub fn render_prompt(ctx: &TabularContext, mode: PromptMode, anonymize: bool) -> PromptDoc {
    let classification = ctx.task.is_classification();
    let metric = if classification { "accuracy" } else { "RMSE" };
    let names: Vec<&str> = ctx
        .model_records
        .iter()
        .map(|r| {
            if anonymize {
                r.alias.as_str()
            } else {
                r.model_id.as_str()
            }
        })
        .collect();
    let mut t = String::new();

    t.push_str(
        "You are an expert in machine learning competitions. Several tabular models have \
         already been trained on a dataset. Your job is to combine their predictions for one \
         target instance. Feature values and feature names are not available; use only the \
         information below.\n\n",
    );

    t.push_str("## Dataset\n");
    let _ = writeln!(t, "Task: {}.", task_description(&ctx.task));
    if let Some(c) = ctx.class_count() {
        let set: Vec<String> = (0..c).map(|i| i.to_string()).collect();
        let _ = writeln!(t, "Label set: {{{}}}.", set.join(", "));
        if let Some(freqs) = &ctx.label_frequencies {
            let parts: Vec<String> = freqs
                .iter()
                .enumerate()
                .map(|(i, q)| format!("{i}: {}", format_real(*q)))
                .collect();
            let _ = writeln!(t, "Label frequencies in the training data: {}.", parts.join(", "));
        }
    }
    if let Some((lo, hi)) = ctx.label_range {
        let _ = writeln!(
            t,
            "Label range in the training data: [{}, {}].",
            format_real(lo),
            format_real(hi)
        );
        t.push_str("All labels and predictions are shown with four decimal places.\n");
    }
    t.push('\n');

    t.push_str("## External models\n");
    let _ = writeln!(
        t,
        "There are {} external models. Their {metric} on the training and validation data:",
        ctx.m()
    );
    for (name, r) in names.iter().zip(&ctx.model_records) {
        let train = r.train_metric.map_or("n/a".to_string(), format_real);
        let _ = writeln!(
            t,
            "- {name}: training {metric} {train}, validation {metric} {}",
            format_real(r.val_metric)
        );
    }
    t.push('\n');

    let header = {
        let mut h = String::from("| Instance | True label |");
        for name in &names {
            let _ = write!(h, " {name} |");
        }
        h
    };
    let rule = format!("|{}", "---|".repeat(names.len() + 2));

    t.push_str("## Nearest neighbors\n");
    let _ = writeln!(
        t,
        "The {} training instances closest to the target instance, nearest first. Each row \
         gives the true label and the label predicted by each model.",
        ctx.k()
    );
    let _ = writeln!(t, "{header}");
    let _ = writeln!(t, "{rule}");
    for (j, (y, preds)) in ctx.neighbor_labels.iter().zip(&ctx.neighbor_predictions).enumerate() {
        let _ = write!(t, "| Neighbor {} | {} |", j + 1, render_label(*y));
        for p in preds {
            let _ = write!(t, " {} |", render_label(*p));
        }
        t.push('\n');
    }
    t.push('\n');

    t.push_str("## Target instance\n");
    t.push_str("The label predicted by each model for the target instance:\n");
    let _ = writeln!(t, "{header}");
    let _ = writeln!(t, "{rule}");
    t.push_str("| Target | ? |");
    for p in &ctx.target_predictions {
        let _ = write!(t, " {} |", render_label(*p));
    }
    t.push_str("\n\n");

    if mode == PromptMode::WithCot {
        let freq_clause = if classification {
            " and the label frequencies"
        } else {
            ""
        };
        let what = if classification { "label" } else { "value" };
        t.push_str("## Reasoning steps\nThink through the following steps in order.\n");
        let _ = writeln!(
            t,
            "Step 1. {}: based on the training and validation {metric} of each model, judge \
             which models overfit or underfit and select the models that perform well on this \
             dataset overall.",
            STEP_HEADINGS[0]
        );
        let _ = writeln!(
            t,
            "Step 2. {}: based on the true labels of the neighbors, the predictions of the \
             well-performing models for them{freq_clause}, find the neighbors that most \
             well-performing models predict incorrectly. Treat them as outliers and set them \
             aside.",
            STEP_HEADINGS[1]
        );
        let _ = writeln!(
            t,
            "Step 3. {}: based on the true labels of the remaining neighbors, the \
             predictions of all models for them{freq_clause}, select the models best suited \
             to the neighborhood of the target instance.",
            STEP_HEADINGS[2]
        );
        let _ = writeln!(
            t,
            "Step 4. {}: based on the true labels of the remaining neighbors, the target \
             predictions of the suitable and well-performing models{freq_clause}, decide the \
             {what} of the target instance.",
            STEP_HEADINGS[3]
        );
        t.push('\n');
    }

    t.push_str("## Answer format\n");
    if classification {
        t.push_str("Your label will be extracted with this Python code:\n");
        let _ = writeln!(
            t,
            "label = re.search(r'{CLASSIFICATION_PATTERN}', your_response_text).group(1)"
        );
        t.push_str(
            "End your response with the sentence \"I predict the label of the target instance \
             as X\", where X is one label from the label set.\n",
        );
    } else {
        t.push_str("Your value will be extracted with this Python code:\n");
        let _ = writeln!(
            t,
            "value = re.search(r'{REGRESSION_PATTERN}', your_response_text).group(1)"
        );
        t.push_str(
            "Only the first decimal number in your response is used. Write your predicted \
             value with four decimal places and write no other decimal number.\n",
        );
    }

    PromptDoc {
        text: t,
        task: ctx.task,
        mode,
        anonymized: anonymize,
        extraction_pattern: extraction_pattern(&ctx.task).to_string(),
    }
}

/// Canonical stub response carrying `prediction`.
pub fn answer_sentence(prediction: Label) -> String {
    match prediction {
        Label::Class(c) => format!("I predict the label of the target instance as {c}"),
        Label::Value(v) => format!("I predict the value of the target instance as {}", format_real(v)),
    }
}
