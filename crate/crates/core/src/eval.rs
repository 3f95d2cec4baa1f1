//! Seed-repeated scoring, rank aggregation, Wilcoxon-Holm significance and
//! cost reports.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    score, split_indices, DatasetBundle, Labels, Matrix, ModelPredictions, PerSplit, PredictionMatrix, RawColumn,
    RawTable, Split, TaskKind,
};
use crate::ensemble::{meta_predictions, vote_split, GbdtParams, VoteMethod};
use crate::error::{Error, Result};
use crate::llm::{CompletionBackend, Usage};
use crate::pipeline::{feature_weights, predict_split, PipelineConfig};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const EXACT_WILCOXON_MAX_N: usize = 25;

/// Supplies the bundle evaluated under each seed.
pub trait BundleSource {
    fn name(&self) -> &str;
    fn bundle(&self, seed: u64) -> Result<Cow<'_, DatasetBundle>>;
}

/// An externally split bundle, identical for every seed.
#[derive(Debug, Clone)]
pub struct FixedBundle {
    pub name: String,
    pub bundle: DatasetBundle,
}

impl BundleSource for FixedBundle {
    fn name(&self) -> &str {
        &self.name
    }

    fn bundle(&self, _seed: u64) -> Result<Cow<'_, DatasetBundle>> {
        Ok(Cow::Borrowed(&self.bundle))
    }
}

/// Unsplit rows with model outputs for every row; redrawn per seed.
#[derive(Debug, Clone)]
pub struct ResplitSource {
    pub name: String,
    pub task: TaskKind,
    pub model_ids: Vec<String>,
    pub raw: RawTable,
    pub labels: Labels,
    pub predictions: Vec<PredictionMatrix>,
}

impl ResplitSource {
    /// Pools the train, val and test rows of a bundle so that every seed
    /// draws fresh splits. Needs train-split predictions for every model.
    pub fn from_bundle(name: &str, bundle: &DatasetBundle) -> Result<Self> {
        let order = Split::ALL;
        let mut columns = Vec::new();
        for (j, first) in bundle.raw(Split::Train).columns().iter().enumerate() {
            let parts = order.iter().map(|&s| &bundle.raw(s).columns()[j]);
            columns.push(match first {
                RawColumn::Numerical(_) => RawColumn::Numerical(
                    parts
                        .flat_map(|c| match c {
                            RawColumn::Numerical(v) => v.clone(),
                            RawColumn::Categorical(_) => unreachable!("layout checked by the bundle"),
                        })
                        .collect(),
                ),
                RawColumn::Categorical(_) => RawColumn::Categorical(
                    parts
                        .flat_map(|c| match c {
                            RawColumn::Categorical(v) => v.clone(),
                            RawColumn::Numerical(_) => unreachable!("layout checked by the bundle"),
                        })
                        .collect(),
                ),
            });
        }
        let labels = match bundle.labels(Split::Train) {
            Labels::Classes(_) => Labels::Classes(
                order
                    .iter()
                    .flat_map(|&s| bundle.labels(s).as_classes().expect("one label kind").to_vec())
                    .collect(),
            ),
            Labels::Values(_) => Labels::Values(
                order
                    .iter()
                    .flat_map(|&s| bundle.labels(s).as_values().expect("one label kind").to_vec())
                    .collect(),
            ),
        };
        let mut predictions = Vec::with_capacity(bundle.model_count());
        for m in 0..bundle.model_count() {
            let parts = order
                .iter()
                .map(|&s| {
                    bundle.predictions(m, s).ok_or_else(|| Error::MissingPredictions {
                        model: bundle.model_ids()[m].clone(),
                        split: s.name(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            predictions.push(match parts[0] {
                PredictionMatrix::Probabilities(_) => {
                    let rows: Vec<Vec<f64>> = parts
                        .iter()
                        .flat_map(|p| (0..p.rows()).map(|i| p.probabilities(i).expect("one kind").to_vec()))
                        .collect();
                    PredictionMatrix::Probabilities(Matrix::from_rows(&rows)?)
                }
                PredictionMatrix::Values(_) => {
                    PredictionMatrix::Values(parts.iter().flat_map(|p| p.labels()).map(|l| l.as_f64()).collect())
                }
            });
        }
        Ok(Self {
            name: name.to_string(),
            task: bundle.task(),
            model_ids: bundle.model_ids().to_vec(),
            raw: RawTable::new(columns)?,
            labels,
            predictions,
        })
    }
}

impl BundleSource for ResplitSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn bundle(&self, seed: u64) -> Result<Cow<'_, DatasetBundle>> {
        let idx = split_indices(&self.labels, seed)?;
        let raw = PerSplit {
            train: self.raw.select_rows(&idx.train),
            val: self.raw.select_rows(&idx.val),
            test: self.raw.select_rows(&idx.test),
        };
        let labels = PerSplit {
            train: self.labels.select(&idx.train),
            val: self.labels.select(&idx.val),
            test: self.labels.select(&idx.test),
        };
        let predictions = self
            .predictions
            .iter()
            .map(|p| ModelPredictions {
                train: Some(p.select(&idx.train)),
                val: p.select(&idx.val),
                test: p.select(&idx.test),
            })
            .collect();
        Ok(Cow::Owned(DatasetBundle::new(
            self.task,
            self.model_ids.clone(),
            raw,
            labels,
            predictions,
        )?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vote(VoteMethod),
    Meta,
    /// The backend on every target, or only on hard ones when routed.
    Backend {
        routed: bool,
    },
}

impl Method {
    pub fn name(self, backend: Option<&dyn CompletionBackend>) -> String {
        match self {
            Self::Vote(v) => v.name().to_string(),
            Self::Meta => "meta".to_string(),
            Self::Backend { routed } => {
                let base = match backend.map(|b| b.name()) {
                    Some("expert") => "expert",
                    _ => "llm",
                };
                if routed {
                    format!("router+{base}")
                } else {
                    base.to_string()
                }
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "best" => Self::Vote(VoteMethod::Best),
            "avg" => Self::Vote(VoteMethod::Average),
            "wavg" => Self::Vote(VoteMethod::Weighted),
            "meta" => Self::Meta,
            "expert" | "llm" => Self::Backend { routed: false },
            "router+expert" | "router+llm" => Self::Backend { routed: true },
            other => return Err(Error::Invalid(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalSettings {
    pub pipeline: PipelineConfig,
    pub gbdt: GbdtParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub usage: Usage,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Test-split metric of `method` for every seed.
pub fn evaluate_method(
    source: &dyn BundleSource,
    method: Method,
    seeds: &[u64],
    settings: &EvalSettings,
    backend: Option<&dyn CompletionBackend>,
) -> Result<MethodScore> {
    if seeds.is_empty() {
        return Err(Error::Invalid("at least one seed is required".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut usage = Usage::default();
    for &seed in seeds {
        let bundle = source.bundle(seed)?;
        let predictions = match method {
            Method::Vote(v) => vote_split(&bundle, Split::Test, v)?,
            Method::Meta => {
                let p = &settings.pipeline;
                let weights = feature_weights(&bundle, p.metric, p.bins)?;
                let gbdt = GbdtParams { seed, ..settings.gbdt };
                meta_predictions(&bundle, &weights, p.k, &gbdt)?.0
            }
            Method::Backend { routed } => {
                let backend = backend.ok_or_else(|| Error::Invalid("method needs a completion backend".into()))?;
                let cfg = PipelineConfig {
                    route: routed,
                    ..settings.pipeline.clone()
                };
                let out = predict_split(&bundle, Split::Test, &cfg, backend)?;
                usage.add(&out.usage);
                out.predictions()
            }
        };
        per_seed.push(score(&predictions, bundle.labels(Split::Test))?);
    }
    let (mean, std) = mean_std(&per_seed);
    Ok(MethodScore {
        method: method.name(backend),
        per_seed,
        mean,
        std,
        usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub higher_is_better: bool,
    pub scores: Vec<MethodScore>,
    #[serde(default)]
    pub cost: Vec<CostRow>,
}

/// Methods by datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    /// `values[method][dataset]`.
    pub values: Vec<Vec<f64>>,
    pub higher_is_better: Vec<bool>,
}

impl MetricTable {
    pub fn new(
        methods: Vec<String>,
        datasets: Vec<String>,
        values: Vec<Vec<f64>>,
        higher_is_better: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != methods.len() {
            return Err(Error::LengthMismatch {
                expected: methods.len(),
                got: values.len(),
            });
        }
        if higher_is_better.len() != datasets.len() {
            return Err(Error::LengthMismatch {
                expected: datasets.len(),
                got: higher_is_better.len(),
            });
        }
        for row in &values {
            if row.len() != datasets.len() {
                return Err(Error::LengthMismatch {
                    expected: datasets.len(),
                    got: row.len(),
                });
            }
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::Invalid("metric table contains NaN".into()));
            }
        }
        Ok(Self {
            methods,
            datasets,
            values,
            higher_is_better,
        })
    }

    /// Table of seed means; every dataset must report the same methods.
    pub fn from_results(results: &[DatasetResult]) -> Result<Self> {
        let first = results.first().ok_or_else(|| Error::Invalid("no datasets".into()))?;
        let methods: Vec<String> = first.scores.iter().map(|s| s.method.clone()).collect();
        let mut values = vec![Vec::with_capacity(results.len()); methods.len()];
        for r in results {
            for (i, m) in methods.iter().enumerate() {
                let s = r
                    .scores
                    .iter()
                    .find(|s| &s.method == m)
                    .ok_or_else(|| Error::Invalid(format!("dataset `{}` lacks method `{m}`", r.dataset)))?;
                values[i].push(s.mean);
            }
        }
        Self::new(
            methods,
            results.iter().map(|r| r.dataset.clone()).collect(),
            values,
            results.iter().map(|r| r.higher_is_better).collect(),
        )
    }

    fn column(&self, d: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[d]).collect()
    }
}

/// Ranks with 1 = best and ties sharing the average of their positions.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher_is_better {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Mean over datasets of each method's per-dataset average rank.
pub fn mean_ranks(table: &MetricTable) -> Vec<f64> {
    let mut sums = vec![0.0; table.methods.len()];
    for d in 0..table.datasets.len() {
        for (s, r) in sums
            .iter_mut()
            .zip(average_ranks(&table.column(d), table.higher_is_better[d]))
        {
            *s += r;
        }
    }
    let n = table.datasets.len() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences.
    pub n: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided signed-rank test on paired samples. Zero differences are
/// dropped; tied magnitudes share average ranks. Up to
/// [`EXACT_WILCOXON_MAX_N`] pairs the null distribution is enumerated
/// exactly, above that a normal approximation with continuity and tie
/// corrections is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n: 0,
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let magnitudes: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&magnitudes, false);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    let p_value = if n <= EXACT_WILCOXON_MAX_N {
        // doubled ranks are integers even with ties
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let t = (2.0 * statistic).round() as usize;
        let tail: f64 = counts[..=t].iter().sum();
        (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
    } else {
        let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
        let mut sorted = magnitudes.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        let z = ((w_plus - total / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult { n, statistic, p_value })
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (i, &o) in order.iter().enumerate() {
        running = running.max(((m - i) as f64 * p_values[o]).min(1.0));
        adjusted[o] = running;
    }
    adjusted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSignificance {
    pub method_a: String,
    pub method_b: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub p_holm: f64,
    pub significant: bool,
}

/// Pairwise signed-rank tests over datasets with Holm correction across
/// all pairs. Lower-is-better columns are negated first.
pub fn wilcoxon_holm(table: &MetricTable, alpha: f64) -> Result<Vec<PairSignificance>> {
    let oriented: Vec<Vec<f64>> = table
        .values
        .iter()
        .map(|row| {
            row.iter()
                .zip(&table.higher_is_better)
                .map(|(v, &h)| if h { *v } else { -v })
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..table.methods.len() {
        for b in a + 1..table.methods.len() {
            pairs.push((a, b, wilcoxon_signed_rank(&oriented[a], &oriented[b])?));
        }
    }
    let adjusted = holm_adjust(&pairs.iter().map(|p| p.2.p_value).collect::<Vec<_>>());
    Ok(pairs
        .into_iter()
        .zip(adjusted)
        .map(|((a, b, w), p_holm)| PairSignificance {
            method_a: table.methods[a].clone(),
            method_b: table.methods[b].clone(),
            n: w.n,
            statistic: w.statistic,
            p_value: w.p_value,
            p_holm,
            significant: p_holm <= alpha,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub dataset: String,
    pub method: String,
    pub tau: f64,
    pub metric: f64,
    pub wall_time_s: f64,
    pub calls: u64,
    pub retries: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub price: f64,
}

pub fn cost_row(dataset: &str, method: &str, tau: f64, metric: f64, usage: &Usage) -> CostRow {
    CostRow {
        dataset: dataset.to_string(),
        method: method.to_string(),
        tau,
        metric,
        wall_time_s: usage.latency_ms as f64 / 1000.0,
        calls: usage.calls,
        retries: usage.retries,
        input_tokens: usage.input_tokens,
        output_tokens: usage.output_tokens,
        price: usage.cost,
    }
}

/// One cost row per threshold: routed backend on the test split of one
/// seed's bundle.
pub fn tau_sweep(
    source: &dyn BundleSource,
    taus: &[f64],
    seed: u64,
    settings: &EvalSettings,
    backend: &dyn CompletionBackend,
) -> Result<Vec<CostRow>> {
    let bundle = source.bundle(seed)?;
    taus.iter()
        .map(|&tau| {
            let cfg = PipelineConfig {
                tau,
                route: true,
                ..settings.pipeline.clone()
            };
            let out = predict_split(&bundle, Split::Test, &cfg, backend)?;
            let metric = score(&out.predictions(), bundle.labels(Split::Test))?;
            Ok(cost_row(
                source.name(),
                &Method::Backend { routed: true }.name(Some(backend)),
                tau,
                metric,
                &out.usage,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub table: MetricTable,
    pub results: Vec<DatasetResult>,
    pub ranks: Vec<f64>,
    pub significance: Vec<PairSignificance>,
}

impl RunReport {
    pub fn from_results(results: Vec<DatasetResult>, alpha: f64) -> Result<Self> {
        let table = MetricTable::from_results(&results)?;
        let ranks = mean_ranks(&table);
        let significance = wilcoxon_holm(&table, alpha)?;
        Ok(Self {
            table,
            results,
            ranks,
            significance,
        })
    }

    /// Writes `metrics.csv`, `ranks.csv`, `significance.csv`, `cost.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut metrics = CsvText::new(&["dataset", "method", "mean", "std", "seeds"]);
        for r in &self.results {
            for s in &r.scores {
                let seeds: Vec<String> = s.per_seed.iter().map(f64::to_string).collect();
                metrics.row(&[
                    &r.dataset,
                    &s.method,
                    &s.mean.to_string(),
                    &s.std.to_string(),
                    &seeds.join(";"),
                ]);
            }
        }
        metrics.save(dir.join("metrics.csv"))?;

        let mut ranks = CsvText::new(&["method", "average_rank"]);
        for (m, r) in self.table.methods.iter().zip(&self.ranks) {
            ranks.row(&[m, &r.to_string()]);
        }
        ranks.save(dir.join("ranks.csv"))?;

        let mut sig = CsvText::new(&[
            "method_a",
            "method_b",
            "n",
            "statistic",
            "p_value",
            "p_holm",
            "significant",
        ]);
        for p in &self.significance {
            sig.row(&[
                &p.method_a,
                &p.method_b,
                &p.n.to_string(),
                &p.statistic.to_string(),
                &p.p_value.to_string(),
                &p.p_holm.to_string(),
                &p.significant.to_string(),
            ]);
        }
        sig.save(dir.join("significance.csv"))?;

        let mut cost = CsvText::new(&[
            "dataset",
            "method",
            "tau",
            "metric",
            "wall_time_s",
            "calls",
            "retries",
            "input_tokens",
            "output_tokens",
            "price",
        ]);
        for c in self.results.iter().flat_map(|r| &r.cost) {
            cost.row(&[
                &c.dataset,
                &c.method,
                &c.tau.to_string(),
                &c.metric.to_string(),
                &c.wall_time_s.to_string(),
                &c.calls.to_string(),
                &c.retries.to_string(),
                &c.input_tokens.to_string(),
                &c.output_tokens.to_string(),
                &c.price.to_string(),
            ]);
        }
        cost.save(dir.join("cost.csv"))
    }
}

struct CsvText {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvText {
    fn new(header: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        Self { writer }
    }

    fn row(&mut self, fields: &[&str]) {
        self.writer.write_record(fields).expect("in-memory write");
    }

    fn save(self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.writer.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
