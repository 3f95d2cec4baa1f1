use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use tabctx::data::{compute_model_metrics, load_bundle, score, write_bundle, DatasetBundle, Label, Split};
use tabctx::ensemble::{meta_predictions, vote_split, VoteMethod};
use tabctx::eval::{
    evaluate_method, tau_sweep, BundleSource, DatasetResult, EvalSettings, FixedBundle, Method, ResplitSource,
    RunReport,
};
use tabctx::expert::run_expert;
use tabctx::llm::{CompletionBackend, ExpertBackend, RemoteBackend, ScriptStep, ScriptedBackend};
use tabctx::pipeline::{
    feature_weights, format_label, predict_split, render_split_prompts, write_hardness_csv, write_predictions_csv,
};
use tabctx::router::route_split;
use tabctx::synthetic::{
    classification_source, planted_meta_source, regional_source, regression_source, ClassificationSpec,
};

use crate::config::{BackendKind, RunConfig};
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RouteArgs {
    /// Splits to route.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "val,test")]
    pub splits: Vec<SplitArg>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Render prompts for hard rows; no backend is built or called.
    #[arg(long)]
    pub dry_run: bool,
    /// Send every row to the backend.
    #[arg(long)]
    pub no_route: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnsembleArgs {
    #[arg(long, value_delimiter = ',', default_value = "best,avg,wavg,meta")]
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Defaults to best,avg,wavg,meta and the routed backend.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Pool the bundle's rows and redraw splits for every seed.
    #[arg(long)]
    pub resplit: bool,
    /// Dataset name in the report; defaults to the bundle directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Thresholds for the cost sweep; defaults to the configured tau.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// eval.json files, or directories containing one.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Classification,
    Regression,
    Regional,
    Planted,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "classification")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 400)]
    pub rows: usize,
    /// Seed of the generated rows; the split uses the first run seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn write_manifest(cfg: &RunConfig, dir: &Path, command: &str, options: &impl Serialize) -> Result<(), Failure> {
    write_json(
        &dir.join("run_manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "options": options,
        }),
    )
}

fn summary(value: Value) {
    println!("{value}");
}

fn open_bundle(cfg: &RunConfig) -> Result<DatasetBundle, Failure> {
    Ok(load_bundle(cfg.bundle_path()?)?)
}

fn build_backend(cfg: &RunConfig) -> Result<Box<dyn CompletionBackend>, Failure> {
    Ok(match cfg.backend {
        BackendKind::Expert => Box::new(ExpertBackend { config: cfg.expert }),
        BackendKind::Remote => Box::new(RemoteBackend::from_env(&cfg.llm).map_err(|e| Failure::config(e.to_string()))?),
        BackendKind::Stub => {
            let path = cfg
                .script
                .as_deref()
                .ok_or_else(|| Failure::config("the stub backend needs --script"))?;
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let steps: Vec<ScriptStep> =
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            Box::new(ScriptedBackend::new(steps))
        }
    })
}

pub fn ingest(cfg: &RunConfig) -> Result<(), Failure> {
    let bundle = open_bundle(cfg)?;
    create_dir(&cfg.out)?;
    let weights = feature_weights(&bundle, cfg.metric, cfg.bins)?;
    weights.write_csv(cfg.out.join("feature_weights.csv"))?;
    write_json(&cfg.out.join("encoder.json"), bundle.encoder())?;
    let info = json!({
        "task": bundle.task(),
        "model_ids": bundle.model_ids(),
        "rows": { "train": bundle.rows(Split::Train), "val": bundle.rows(Split::Val), "test": bundle.rows(Split::Test) },
        "encoded_width": bundle.encoder().width(),
        "train_predictions": bundle.has_train_predictions(),
        "models": compute_model_metrics(&bundle)?,
    });
    write_json(&cfg.out.join("bundle_summary.json"), &info)?;
    write_manifest(cfg, &cfg.out, "ingest", &json!({}))?;
    summary(json!({ "command": "ingest", "models": bundle.model_count(), "encoded_width": bundle.encoder().width() }));
    Ok(())
}

pub fn route(cfg: &RunConfig, args: &RouteArgs) -> Result<(), Failure> {
    let bundle = open_bundle(cfg)?;
    create_dir(&cfg.out)?;
    let mut ratios = serde_json::Map::new();
    for &s in &args.splits {
        let split = Split::from(s);
        let verdicts = route_split(&bundle, split, cfg.tau)?;
        write_hardness_csv(cfg.out.join(format!("hardness_{split}.csv")), &verdicts)?;
        let hard = verdicts.iter().filter(|v| v.is_hard).count();
        ratios.insert(split.to_string(), json!(hard as f64 / verdicts.len().max(1) as f64));
    }
    write_manifest(cfg, &cfg.out, "route", args)?;
    summary(json!({ "command": "route", "tau": cfg.tau, "hard_ratio": ratios }));
    Ok(())
}

pub fn predict(cfg: &RunConfig, args: &PredictArgs) -> Result<(), Failure> {
    let bundle = open_bundle(cfg)?;
    let split = Split::from(args.split);
    let mut pipeline = cfg.pipeline();
    pipeline.route = !args.no_route;
    create_dir(&cfg.out)?;

    if args.dry_run {
        let prompts = render_split_prompts(&bundle, split, &pipeline)?;
        let dir = cfg.out.join("prompts");
        create_dir(&dir)?;
        for (row, doc) in &prompts {
            let path = dir.join(format!("prompt_{split}_{row}.txt"));
            fs::write(&path, &doc.text).map_err(|e| io_failure(&path, e))?;
        }
        write_manifest(cfg, &cfg.out, "predict", args)?;
        summary(json!({ "command": "predict", "dry_run": true, "split": split, "prompts": prompts.len() }));
        return Ok(());
    }

    let backend = build_backend(cfg)?;
    let out = predict_split(&bundle, split, &pipeline, backend.as_ref())?;
    write_predictions_csv(cfg.out.join(format!("predictions_{split}.csv")), &out.records)?;
    if cfg.backend == BackendKind::Expert {
        let dir = cfg.out.join("traces");
        create_dir(&dir)?;
        for (row, ctx) in &out.backend_contexts {
            run_expert(ctx, &cfg.expert).write_json(dir.join(format!("expert_trace_{row}.json")))?;
        }
    }
    let metric = score(&out.predictions(), bundle.labels(split))?;
    write_json(&cfg.out.join(format!("usage_{split}.json")), &out.usage)?;
    write_manifest(cfg, &cfg.out, "predict", args)?;
    let count = |p: &str| out.records.iter().filter(|r| r.provenance.name() == p).count();
    summary(json!({
        "command": "predict",
        "split": split,
        "metric": metric,
        "rows": out.records.len(),
        "easy": count("easy"),
        "backend": out.records.len() - count("easy") - count("exhausted"),
        "exhausted": count("exhausted"),
        "calls": out.usage.calls,
    }));
    Ok(())
}

fn vote_method(name: &str) -> Option<VoteMethod> {
    match name {
        "best" => Some(VoteMethod::Best),
        "avg" => Some(VoteMethod::Average),
        "wavg" => Some(VoteMethod::Weighted),
        _ => None,
    }
}

pub fn ensemble(cfg: &RunConfig, args: &EnsembleArgs) -> Result<(), Failure> {
    let bundle = open_bundle(cfg)?;
    create_dir(&cfg.out)?;
    let mut columns: Vec<(String, Vec<Label>)> = Vec::new();
    for name in &args.methods {
        let predictions = match (name.as_str(), vote_method(name)) {
            (_, Some(v)) => vote_split(&bundle, Split::Test, v)?,
            ("meta", None) => {
                let weights = feature_weights(&bundle, cfg.metric, cfg.bins)?;
                let (p, model) = meta_predictions(&bundle, &weights, cfg.k, &cfg.gbdt)?;
                model.write_json(cfg.out.join("meta_model.json"))?;
                p
            }
            _ => {
                return Err(Failure::config(format!(
                    "unknown ensemble method `{name}` (expected best, avg, wavg or meta)"
                )))
            }
        };
        columns.push((name.clone(), predictions));
    }

    let path = cfg.out.join("ensemble_test.csv");
    let mut text = String::from("row");
    for (name, _) in &columns {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for row in 0..bundle.rows(Split::Test) {
        text.push_str(&row.to_string());
        for (_, p) in &columns {
            text.push(',');
            text.push_str(&format_label(p[row]));
        }
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| io_failure(&path, e))?;

    let mut metrics = serde_json::Map::new();
    for (name, p) in &columns {
        metrics.insert(name.clone(), json!(score(p, bundle.labels(Split::Test))?));
    }
    write_json(&cfg.out.join("ensemble_metrics.json"), &metrics)?;
    write_manifest(cfg, &cfg.out, "ensemble", args)?;
    summary(json!({ "command": "ensemble", "metrics": metrics }));
    Ok(())
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), Failure> {
    let path = cfg.bundle_path()?;
    let bundle = load_bundle(path)?;
    let name = args.name.clone().unwrap_or_else(|| {
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let source: Box<dyn BundleSource> = if args.resplit {
        Box::new(ResplitSource::from_bundle(&name, &bundle)?)
    } else {
        Box::new(FixedBundle {
            name: name.clone(),
            bundle,
        })
    };
    let routed = match cfg.backend {
        BackendKind::Expert => "router+expert",
        _ => "router+llm",
    };
    let methods: Vec<String> = args.methods.clone().unwrap_or_else(|| {
        ["best", "avg", "wavg", "meta", routed]
            .iter()
            .map(|s| s.to_string())
            .collect()
    });
    let parsed = methods
        .iter()
        .map(|m| Method::parse(m).map_err(|e| Failure::config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let needs_backend = parsed.iter().any(|m| matches!(m, Method::Backend { .. }));
    let backend = if needs_backend { Some(build_backend(cfg)?) } else { None };

    let settings = EvalSettings {
        pipeline: cfg.pipeline(),
        gbdt: cfg.gbdt,
    };
    let mut scores = Vec::with_capacity(parsed.len());
    for m in parsed {
        scores.push(evaluate_method(
            source.as_ref(),
            m,
            &cfg.seeds,
            &settings,
            backend.as_deref(),
        )?);
    }
    let cost = match &backend {
        Some(b) => {
            let taus = args.taus.clone().unwrap_or_else(|| vec![cfg.tau]);
            if let Some(bad) = taus.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
                return Err(Failure::config(format!("tau must be in (0, 1], got {bad}")));
            }
            tau_sweep(source.as_ref(), &taus, cfg.seeds[0], &settings, b.as_ref())?
        }
        None => Vec::new(),
    };
    let result = DatasetResult {
        dataset: name,
        higher_is_better: source.bundle(cfg.seeds[0])?.task().is_classification(),
        scores,
        cost,
    };
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("eval.json"), &result)?;
    write_manifest(cfg, &cfg.out, "eval", args)?;
    let means: serde_json::Map<String, Value> = result
        .scores
        .iter()
        .map(|s| (s.method.clone(), json!({ "mean": s.mean, "std": s.std })))
        .collect();
    summary(json!({ "command": "eval", "dataset": result.dataset, "scores": means }));
    Ok(())
}

pub fn report(cfg: &RunConfig, args: &ReportArgs) -> Result<(), Failure> {
    let mut results = Vec::with_capacity(args.inputs.len());
    for input in &args.inputs {
        let path = if input.is_dir() {
            input.join("eval.json")
        } else {
            input.clone()
        };
        let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
        let r: DatasetResult = serde_json::from_str(&text).map_err(|e| Failure {
            kind: "json",
            message: format!("{}: {e}", path.display()),
        })?;
        results.push(r);
    }
    let report = RunReport::from_results(results, cfg.alpha)?;
    let dir = cfg.out.join("report");
    report.write(&dir)?;
    write_manifest(cfg, &cfg.out, "report", args)?;
    let ranks: serde_json::Map<String, Value> = report
        .table
        .methods
        .iter()
        .zip(&report.ranks)
        .map(|(m, r)| (m.clone(), json!(r)))
        .collect();
    summary(json!({ "command": "report", "datasets": report.table.datasets.len(), "average_rank": ranks }));
    Ok(())
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), Failure> {
    let source = match args.kind {
        SynthKind::Classification => classification_source(
            "classification",
            &ClassificationSpec {
                rows: args.rows,
                ..Default::default()
            },
            args.data_seed,
        )?,
        SynthKind::Regression => {
            regression_source("regression", args.rows, &[0.2, 0.3, 0.5, 0.8, 1.2], args.data_seed)?
        }
        SynthKind::Regional => regional_source("regional", args.rows, args.data_seed)?,
        SynthKind::Planted => planted_meta_source("planted", args.rows, 8, 3, args.data_seed)?,
    };
    let bundle = source.bundle(cfg.seeds[0])?;
    write_bundle(&bundle, &cfg.out)?;
    write_manifest(cfg, &cfg.out, "synth", args)?;
    summary(json!({ "command": "synth", "kind": args.kind, "rows": args.rows, "bundle": cfg.out }));
    Ok(())
}
