//! Deterministic four-step ensembler over a tabular context.
//!
//! The steps mirror the prompt's reasoning protocol: pick globally strong
//! models, drop neighbors those models cannot explain, pick the models that
//! fit the remaining neighborhood, then vote.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::TabularContext;
use crate::data::{Label, ModelRecord};
use crate::error::{Error, Result};

/// Slack for comparisons against threshold bands.
const BAND_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Accuracy band below the best validation accuracy.
    pub delta: f64,
    /// Relative RMSE band above the best validation RMSE.
    pub relative_delta: f64,
    /// Largest tolerated train minus validation accuracy.
    pub overfit_gap: f64,
    pub suitable_count: usize,
    pub suitable_weight: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            delta: 0.02,
            relative_delta: 0.05,
            overfit_gap: 0.10,
            suitable_count: 3,
            suitable_weight: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrace {
    pub well_performing: Vec<String>,
    /// Neighbor positions (0 = nearest) set aside as outliers.
    pub outlier_neighbors: Vec<usize>,
    pub suitable: Vec<String>,
    pub final_prediction: Label,
    pub rationale: Vec<StepRecord>,
}

impl ExpertTrace {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn better_val(a: &ModelRecord, b: &ModelRecord, classification: bool) -> Ordering {
    if classification {
        b.val_metric.total_cmp(&a.val_metric)
    } else {
        a.val_metric.total_cmp(&b.val_metric)
    }
}

fn best_val_index(records: &[ModelRecord], candidates: &[usize], classification: bool) -> usize {
    *candidates
        .iter()
        .min_by(|&&a, &&b| better_val(&records[a], &records[b], classification).then(a.cmp(&b)))
        .expect("nonempty candidates")
}

/// Step a: models whose validation metric sits in a band around the best,
/// after an overfitting screen (classification only).
pub fn step_a_select_well_performing(records: &[ModelRecord], classification: bool, cfg: &ExpertConfig) -> Vec<usize> {
    let all: Vec<usize> = (0..records.len()).collect();
    if all.is_empty() {
        return all;
    }
    let screened: Vec<usize> = if classification {
        all.iter()
            .copied()
            .filter(|&m| {
                records[m]
                    .train_metric
                    .is_none_or(|t| t - records[m].val_metric <= cfg.overfit_gap + BAND_EPS)
            })
            .collect()
    } else {
        all.clone()
    };
    if screened.is_empty() {
        return vec![best_val_index(records, &all, classification)];
    }
    let best = records[best_val_index(records, &screened, classification)].val_metric;
    screened
        .into_iter()
        .filter(|&m| {
            let v = records[m].val_metric;
            if classification {
                v >= best - cfg.delta - BAND_EPS
            } else {
                v <= best * (1.0 + cfg.relative_delta) + BAND_EPS
            }
        })
        .collect()
}

/// Whether model `m` gets neighbor `j` right. Regression counts a
/// prediction within the model's validation RMSE as correct.
fn is_correct(ctx: &TabularContext, j: usize, m: usize) -> bool {
    match (ctx.neighbor_labels[j], ctx.neighbor_predictions[j][m]) {
        (Label::Class(y), Label::Class(p)) => y == p,
        (y, p) => (p.as_f64() - y.as_f64()).abs() <= ctx.model_records[m].val_metric,
    }
}

/// Step b: neighbor positions kept (K*). A neighbor is an outlier when
/// strictly fewer than half of the well-performing models predict it
/// correctly; if that would drop every neighbor, all are kept.
pub fn step_b_identify_outliers(ctx: &TabularContext, well: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..ctx.k())
        .filter(|&j| {
            let correct = well.iter().filter(|&&m| is_correct(ctx, j, m)).count();
            2 * correct >= well.len()
        })
        .collect();
    if kept.is_empty() {
        (0..ctx.k()).collect()
    } else {
        kept
    }
}

/// Local score of model `m` on the kept neighbors (higher is better).
fn local_score(ctx: &TabularContext, kept: &[usize], m: usize) -> f64 {
    let n = kept.len() as f64;
    if ctx.task.is_classification() {
        kept.iter().filter(|&&j| is_correct(ctx, j, m)).count() as f64 / n
    } else {
        let sse: f64 = kept
            .iter()
            .map(|&j| (ctx.neighbor_predictions[j][m].as_f64() - ctx.neighbor_labels[j].as_f64()).powi(2))
            .sum();
        -(sse / n).sqrt()
    }
}

/// Step c: the top models by local accuracy (negative RMSE) on K*.
pub fn step_c_select_suitable(ctx: &TabularContext, kept: &[usize], cfg: &ExpertConfig) -> Vec<usize> {
    let classification = ctx.task.is_classification();
    let scores: Vec<f64> = (0..ctx.m()).map(|m| local_score(ctx, kept, m)).collect();
    let mut order: Vec<usize> = (0..ctx.m()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| better_val(&ctx.model_records[a], &ctx.model_records[b], classification))
            .then(a.cmp(&b))
    });
    order.truncate(cfg.suitable_count.min(ctx.m()));
    order
}

/// Step d: weighted vote over the union of suitable and well-performing
/// models, or the clipped mean of the suitable models for regression.
pub fn step_d_final(
    ctx: &TabularContext,
    kept: &[usize],
    well: &[usize],
    suitable: &[usize],
    cfg: &ExpertConfig,
) -> Label {
    match ctx.class_count() {
        Some(classes) => {
            let mut votes = vec![0.0; classes];
            for m in 0..ctx.m() {
                let weight = if suitable.contains(&m) {
                    cfg.suitable_weight
                } else if well.contains(&m) {
                    1.0
                } else {
                    continue;
                };
                if let Label::Class(c) = ctx.target_predictions[m] {
                    votes[c] += weight;
                }
            }
            let mut local = vec![0usize; classes];
            for &j in kept {
                if let Label::Class(c) = ctx.neighbor_labels[j] {
                    local[c] += 1;
                }
            }
            let freq = |c: usize| ctx.label_frequencies.as_ref().map_or(0.0, |f| f[c]);
            let best = (0..classes)
                .min_by(|&a, &b| {
                    votes[b]
                        .total_cmp(&votes[a])
                        .then(local[b].cmp(&local[a]))
                        .then(freq(b).total_cmp(&freq(a)))
                        .then(a.cmp(&b))
                })
                .expect("at least two classes");
            Label::Class(best)
        }
        None => {
            let mean = suitable
                .iter()
                .map(|&m| ctx.target_predictions[m].as_f64())
                .sum::<f64>()
                / suitable.len() as f64;
            let clipped = match ctx.label_range {
                Some((lo, hi)) => mean.clamp(lo, hi),
                None => mean,
            };
            Label::Value(clipped)
        }
    }
}

fn aliases(ctx: &TabularContext, models: &[usize]) -> Vec<String> {
    models.iter().map(|&m| ctx.model_records[m].alias.clone()).collect()
}

pub fn run_expert(ctx: &TabularContext, cfg: &ExpertConfig) -> ExpertTrace {
    let classification = ctx.task.is_classification();
    let well = step_a_select_well_performing(&ctx.model_records, classification, cfg);
    let kept = step_b_identify_outliers(ctx, &well);
    let suitable = step_c_select_suitable(ctx, &kept, cfg);
    let final_prediction = step_d_final(ctx, &kept, &well, &suitable, cfg);
    let outlier_neighbors: Vec<usize> = (0..ctx.k()).filter(|j| !kept.contains(j)).collect();

    let rationale = vec![
        StepRecord {
            step: "well_performing".into(),
            detail: format!("kept {} of {} models", well.len(), ctx.m()),
        },
        StepRecord {
            step: "outliers".into(),
            detail: format!("set aside {} of {} neighbors", outlier_neighbors.len(), ctx.k()),
        },
        StepRecord {
            step: "suitable".into(),
            detail: format!("top {} models on {} kept neighbors", suitable.len(), kept.len()),
        },
        StepRecord {
            step: "final".into(),
            detail: format!("predicted {final_prediction}"),
        },
    ];
    ExpertTrace {
        well_performing: aliases(ctx, &well),
        outlier_neighbors,
        suitable: aliases(ctx, &suitable),
        final_prediction,
        rationale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{model_alias, TaskKind};

    fn record(i: usize, train: f64, val: f64) -> ModelRecord {
        ModelRecord {
            model_id: format!("m{i}"),
            alias: model_alias(i),
            train_metric: Some(train),
            val_metric: val,
        }
    }

    fn ctx(records: Vec<ModelRecord>, neighbors: Vec<(usize, Vec<usize>)>, target: Vec<usize>) -> TabularContext {
        TabularContext {
            task: TaskKind::BinClass,
            label_frequencies: Some(vec![0.5, 0.5]),
            label_range: None,
            model_records: records,
            neighbor_labels: neighbors.iter().map(|(y, _)| Label::Class(*y)).collect(),
            neighbor_predictions: neighbors
                .iter()
                .map(|(_, p)| p.iter().map(|&c| Label::Class(c)).collect())
                .collect(),
            target_predictions: target.into_iter().map(Label::Class).collect(),
        }
    }

    #[test]
    fn step_a_band_and_screen() {
        let cfg = ExpertConfig::default();
        let r = vec![record(0, 0.96, 0.95), record(1, 0.95, 0.94), record(2, 0.82, 0.80)];
        assert_eq!(step_a_select_well_performing(&r, true, &cfg), vec![0, 1]);
        let r = vec![record(0, 1.00, 0.70), record(1, 0.66, 0.65)];
        assert_eq!(step_a_select_well_performing(&r, true, &cfg), vec![1]);
        let r = vec![record(0, 1.00, 0.70), record(1, 1.00, 0.75)];
        assert_eq!(step_a_select_well_performing(&r, true, &cfg), vec![1]);
        let r = vec![record(0, 2.0, 1.0), record(1, 2.0, 1.04), record(2, 2.0, 1.06)];
        assert_eq!(step_a_select_well_performing(&r, false, &cfg), vec![0, 1]);
    }

    #[test]
    fn step_b_half_rule_and_guard() {
        let r: Vec<_> = (0..4).map(|i| record(i, 0.9, 0.9)).collect();
        let c = ctx(
            r.clone(),
            vec![(1, vec![0, 0, 0, 0]), (1, vec![1, 1, 0, 0]), (0, vec![0, 1, 1, 1])],
            vec![0, 0, 0, 0],
        );
        assert_eq!(step_b_identify_outliers(&c, &[0, 1, 2, 3]), vec![1]);
        let c = ctx(r, vec![(1, vec![0, 0, 0, 0]), (0, vec![1, 1, 1, 1])], vec![0, 0, 0, 0]);
        assert_eq!(step_b_identify_outliers(&c, &[0, 1, 2, 3]), vec![0, 1]);
    }

    #[test]
    fn step_c_orders_by_local_then_val() {
        let r = vec![record(0, 0.9, 0.8), record(1, 0.9, 0.9), record(2, 0.9, 0.7)];
        let c = ctx(r, vec![(1, vec![1, 1, 0]), (0, vec![0, 0, 0])], vec![0, 0, 0]);
        let cfg = ExpertConfig {
            suitable_count: 2,
            ..Default::default()
        };
        assert_eq!(step_c_select_suitable(&c, &[0, 1], &cfg), vec![1, 0]);
        let two = ctx(
            vec![record(0, 0.9, 0.9), record(1, 0.9, 0.8)],
            vec![(0, vec![0, 0])],
            vec![0, 0],
        );
        assert_eq!(step_c_select_suitable(&two, &[0], &ExpertConfig::default()).len(), 2);
    }

    #[test]
    fn step_d_weighted_vote() {
        let cfg = ExpertConfig::default();
        let r: Vec<_> = (0..5).map(|i| record(i, 0.9, 0.9)).collect();
        // suitable {0, 1} vote 1 twice each (4), extras {2, 3, 4} vote 0 (3)
        let c = ctx(r.clone(), vec![(0, vec![0; 5])], vec![1, 1, 0, 0, 0]);
        assert_eq!(step_d_final(&c, &[0], &[0, 1, 2, 3, 4], &[0, 1], &cfg), Label::Class(1));
        // 2 vs 2 tie, kept neighbors favor 0
        let c = ctx(
            r,
            vec![(0, vec![0; 5]), (0, vec![0; 5]), (1, vec![0; 5])],
            vec![1, 0, 0, 0, 0],
        );
        assert_eq!(step_d_final(&c, &[0, 1, 2], &[], &[0, 1], &cfg), Label::Class(0));
    }

    #[test]
    fn step_d_regression_clips() {
        let mut c = ctx(
            vec![record(0, 0.5, 0.5), record(1, 0.5, 0.5)],
            vec![(0, vec![0, 0])],
            vec![0, 0],
        );
        c.task = TaskKind::regression(0.0, 2.0).unwrap();
        c.label_frequencies = None;
        c.label_range = Some((0.0, 2.0));
        c.target_predictions = vec![Label::Value(1.0), Label::Value(3.0)];
        assert_eq!(
            step_d_final(&c, &[0], &[0, 1], &[0, 1], &ExpertConfig::default()),
            Label::Value(2.0)
        );
    }

    #[test]
    fn trace_is_deterministic() {
        let r = vec![record(0, 0.95, 0.94), record(1, 0.9, 0.9), record(2, 0.8, 0.6)];
        let c = ctx(
            r,
            vec![(1, vec![1, 1, 0]), (0, vec![0, 1, 0]), (1, vec![1, 0, 1])],
            vec![1, 0, 0],
        );
        let a = run_expert(&c, &ExpertConfig::default());
        assert_eq!(a, run_expert(&c, &ExpertConfig::default()));
        assert_eq!(a.well_performing, vec!["Model A".to_string()]);
        assert_eq!(a.suitable.len(), 3);
        // all three models are suitable: 1 gets 2 votes, 0 gets 4
        assert_eq!(a.final_prediction, Label::Class(0));
    }
}
