//! Run configuration: defaults, then the TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use tabctx::ensemble::GbdtParams;
use tabctx::eval::DEFAULT_SEEDS;
use tabctx::expert::ExpertConfig;
use tabctx::llm::LlmConfig;
use tabctx::pipeline::PipelineConfig;
use tabctx::prompt::PromptMode;
use tabctx::retrieval::{DistanceMetric, DEFAULT_BINS, DEFAULT_K};
use tabctx::router::DEFAULT_TAU;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Expert,
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum MetricArg {
    #[value(name = "man-rw")]
    #[serde(rename = "man-rw")]
    ManRw,
    #[value(name = "euc-rw")]
    #[serde(rename = "euc-rw")]
    EucRw,
    #[value(name = "cos")]
    #[serde(rename = "cos")]
    Cos,
}

impl From<MetricArg> for DistanceMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::ManRw => DistanceMetric::ManhattanRw,
            MetricArg::EucRw => DistanceMetric::EuclideanRw,
            MetricArg::Cos => DistanceMetric::Cosine,
        }
    }
}

/// Flags shared by every subcommand. Unset flags defer to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Bundle directory.
    #[arg(long, global = true)]
    pub bundle: Option<PathBuf>,
    /// TOML file with run settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Agreement threshold in (0, 1].
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub metric: Option<MetricArg>,
    /// Render prompts without the reasoning steps.
    #[arg(long, global = true)]
    pub no_cot: bool,
    /// Show real model ids instead of "Model A", "Model B", ...
    #[arg(long, global = true)]
    pub no_anonymize: bool,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// JSON script for the stub backend.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
}

/// Keys accepted in the TOML file; all optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    bundle: Option<PathBuf>,
    out: Option<PathBuf>,
    k: Option<usize>,
    tau: Option<f64>,
    metric: Option<MetricArg>,
    bins: Option<usize>,
    mode: Option<PromptMode>,
    anonymize: Option<bool>,
    backend: Option<BackendKind>,
    seeds: Option<Vec<u64>>,
    alpha: Option<f64>,
    script: Option<PathBuf>,
    llm: Option<LlmConfig>,
    expert: Option<ExpertConfig>,
    gbdt: Option<GbdtParams>,
}

/// Fully resolved settings, echoed into `run_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub out: PathBuf,
    pub k: usize,
    pub tau: f64,
    pub metric: DistanceMetric,
    pub bins: usize,
    pub mode: PromptMode,
    pub anonymize: bool,
    pub backend: BackendKind,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub script: Option<PathBuf>,
    pub llm: LlmConfig,
    pub expert: ExpertConfig,
    pub gbdt: GbdtParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            out: PathBuf::from("out"),
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            metric: DistanceMetric::ManhattanRw,
            bins: DEFAULT_BINS,
            mode: PromptMode::WithCot,
            anonymize: true,
            backend: BackendKind::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            alpha: 0.05,
            script: None,
            llm: LlmConfig::default(),
            expert: ExpertConfig::default(),
            gbdt: GbdtParams::default(),
        }
    }
}

fn read_file(path: &Path) -> Result<FileConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {}", path.display(), e.message())))
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        if let Some(path) = &args.config {
            let file = read_file(path)?;
            // relative paths in the file are relative to the file
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.bundle = file.bundle.map(|p| base.join(p)).or(cfg.bundle);
            cfg.out = file.out.map(|p| base.join(p)).unwrap_or(cfg.out);
            cfg.script = file.script.map(|p| base.join(p)).or(cfg.script);
            cfg.k = file.k.unwrap_or(cfg.k);
            cfg.tau = file.tau.unwrap_or(cfg.tau);
            cfg.metric = file.metric.map(Into::into).unwrap_or(cfg.metric);
            cfg.bins = file.bins.unwrap_or(cfg.bins);
            cfg.mode = file.mode.unwrap_or(cfg.mode);
            cfg.anonymize = file.anonymize.unwrap_or(cfg.anonymize);
            cfg.backend = file.backend.unwrap_or(cfg.backend);
            cfg.seeds = file.seeds.unwrap_or(cfg.seeds);
            cfg.alpha = file.alpha.unwrap_or(cfg.alpha);
            cfg.llm = file.llm.unwrap_or(cfg.llm);
            cfg.expert = file.expert.unwrap_or(cfg.expert);
            cfg.gbdt = file.gbdt.unwrap_or(cfg.gbdt);
        }
        if let Some(p) = &args.bundle {
            cfg.bundle = Some(p.clone());
        }
        if let Some(p) = &args.out {
            cfg.out = p.clone();
        }
        if let Some(p) = &args.script {
            cfg.script = Some(p.clone());
        }
        cfg.k = args.k.unwrap_or(cfg.k);
        cfg.tau = args.tau.unwrap_or(cfg.tau);
        cfg.metric = args.metric.map(Into::into).unwrap_or(cfg.metric);
        if args.no_cot {
            cfg.mode = PromptMode::WithoutCot;
        }
        if args.no_anonymize {
            cfg.anonymize = false;
        }
        cfg.backend = args.backend.unwrap_or(cfg.backend);
        if let Some(seeds) = &args.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.llm.temperature = args.temperature.unwrap_or(cfg.llm.temperature);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Failure::config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Failure::config("k must be at least 1"));
        }
        if self.bins < 2 {
            return Err(Failure::config("bins must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Failure::config("at least one seed is required"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Failure::config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        self.llm.validate().map_err(|e| Failure::config(e.to_string()))
    }

    pub fn bundle_path(&self) -> Result<&Path, Failure> {
        self.bundle
            .as_deref()
            .ok_or_else(|| Failure::config("--bundle is required"))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            tau: self.tau,
            metric: self.metric,
            bins: self.bins,
            mode: self.mode,
            anonymize: self.anonymize,
            route: true,
            expert: self.expert,
            llm: self.llm.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::resolve(&CommonArgs::default()).unwrap();
        assert_eq!((cfg.k, cfg.tau, cfg.metric), (10, 0.75, DistanceMetric::ManhattanRw));
        assert_eq!(cfg.mode, PromptMode::WithCot);
        assert!(cfg.anonymize);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = write("k = 5\ntau = 0.5\nmetric = \"cos\"\n[llm]\ntemperature = 0.7\nmodel = \"m\"\n");
        let args = CommonArgs {
            config: Some(file.path().to_path_buf()),
            tau: Some(0.875),
            no_cot: true,
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.tau, 0.875);
        assert_eq!(cfg.metric, DistanceMetric::Cosine);
        assert_eq!(cfg.mode, PromptMode::WithoutCot);
        assert_eq!(cfg.llm.temperature, 0.7);
        assert_eq!(cfg.llm.model, "m");
        assert_eq!(cfg.llm.max_consecutive_failures, 10);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for args in [
            CommonArgs {
                tau: Some(1.1),
                ..Default::default()
            },
            CommonArgs {
                tau: Some(0.0),
                ..Default::default()
            },
            CommonArgs {
                k: Some(0),
                ..Default::default()
            },
            CommonArgs {
                seeds: Some(vec![]),
                ..Default::default()
            },
            CommonArgs {
                temperature: Some(-1.0),
                ..Default::default()
            },
        ] {
            assert_eq!(RunConfig::resolve(&args).unwrap_err().kind, "config");
        }
        let file = write("colour = \"blue\"\n");
        let args = CommonArgs {
            config: Some(file.path().to_path_buf()),
            ..Default::default()
        };
        assert_eq!(RunConfig::resolve(&args).unwrap_err().kind, "config");
    }
}
