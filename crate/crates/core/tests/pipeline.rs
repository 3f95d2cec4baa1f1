use tabctx::data::{Label, Split};
use tabctx::eval::BundleSource;
use tabctx::llm::{ExpertBackend, ScriptedBackend};
use tabctx::pipeline::{
    predict_split, render_split_prompts, write_hardness_csv, write_predictions_csv, PipelineConfig, Provenance,
};
use tabctx::router::{bundle_fallback, route_split};
use tabctx::synthetic::{classification_source, regression_source, ClassificationSpec};

fn bundle() -> tabctx::data::DatasetBundle {
    classification_source("c", &ClassificationSpec::default(), 41)
        .unwrap()
        .bundle(0)
        .unwrap()
        .into_owned()
}

#[test]
fn runs_are_deterministic() {
    let b = bundle();
    let cfg = PipelineConfig::default();
    let first = predict_split(&b, Split::Test, &cfg, &ExpertBackend::default()).unwrap();
    let second = predict_split(&b, Split::Test, &cfg, &ExpertBackend::default()).unwrap();
    assert_eq!(first.records, second.records);
    assert_eq!(first.usage, second.usage);
}

#[test]
fn easy_rows_take_the_consensus_and_hard_rows_the_backend() {
    let b = bundle();
    let cfg = PipelineConfig::default();
    let out = predict_split(&b, Split::Test, &cfg, &ExpertBackend::default()).unwrap();
    let verdicts = route_split(&b, Split::Test, cfg.tau).unwrap();
    assert_eq!(out.records.len(), b.rows(Split::Test));
    let mut hard = 0;
    for (r, v) in out.records.iter().zip(&verdicts) {
        assert_eq!(r.is_hard, v.is_hard);
        if v.is_hard {
            hard += 1;
            assert_eq!(r.provenance, Provenance::Expert);
        } else {
            assert_eq!(r.provenance, Provenance::Easy);
            assert_eq!(r.prediction, bundle_fallback(&b, Split::Test, r.row).unwrap());
        }
    }
    assert!(hard > 0);
    assert_eq!(out.usage.calls, hard as u64);
    assert_eq!(out.usage.retries, 0);
    assert_eq!(out.backend_contexts.len(), hard);
}

#[test]
fn exhausted_rows_fall_back_to_consensus() {
    let b = bundle();
    let cfg = PipelineConfig::default();
    let out = predict_split(&b, Split::Test, &cfg, &ScriptedBackend::default()).unwrap();
    let hard: Vec<_> = out.records.iter().filter(|r| r.is_hard).collect();
    assert!(!hard.is_empty());
    for r in &hard {
        assert_eq!(r.provenance, Provenance::Exhausted);
        assert_eq!(r.prediction, bundle_fallback(&b, Split::Test, r.row).unwrap());
    }
    let per_row = cfg.llm.max_consecutive_failures as u64;
    assert_eq!(out.usage.calls, per_row * hard.len() as u64);
    assert_eq!(out.usage.retries, (per_row - 1) * hard.len() as u64);
}

#[test]
fn stub_replies_are_extracted() {
    let b = bundle();
    let cfg = PipelineConfig {
        route: false,
        ..Default::default()
    };
    let n = b.rows(Split::Val);
    let stub = ScriptedBackend::replies(vec!["I predict the label of the target instance as 2"; n]);
    let out = predict_split(&b, Split::Val, &cfg, &stub).unwrap();
    assert_eq!(stub.calls(), n);
    assert!(out
        .records
        .iter()
        .all(|r| r.provenance == Provenance::Llm && r.prediction == Label::Class(2)));
}

#[test]
fn dry_run_renders_one_prompt_per_hard_row() {
    let b = bundle();
    let cfg = PipelineConfig::default();
    let prompts = render_split_prompts(&b, Split::Test, &cfg).unwrap();
    let hard: Vec<usize> = route_split(&b, Split::Test, cfg.tau)
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_hard)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(prompts.iter().map(|p| p.0).collect::<Vec<_>>(), hard);
    assert!(prompts.iter().all(|(_, p)| p.text.contains("## Reasoning steps")));
}

#[test]
fn lowering_tau_never_adds_backend_rows() {
    let b = bundle();
    let mut last = usize::MAX;
    for tau in [1.0, 0.9, 0.75, 0.6, 0.5, 0.3, 0.1] {
        let hard = route_split(&b, Split::Test, tau)
            .unwrap()
            .iter()
            .filter(|v| v.is_hard)
            .count();
        assert!(hard <= last, "tau {tau}: {hard} > {last}");
        last = hard;
    }
}

#[test]
fn train_split_targets_are_rejected() {
    let b = bundle();
    assert!(predict_split(&b, Split::Train, &PipelineConfig::default(), &ExpertBackend::default()).is_err());
}

#[test]
fn missing_train_predictions_only_matter_for_hard_rows() {
    let b = bundle();
    let mut preds = b.model_predictions().to_vec();
    preds[0].train = None;
    let stripped = tabctx::data::DatasetBundle::new(
        b.task(),
        b.model_ids().to_vec(),
        tabctx::data::PerSplit {
            train: b.raw(Split::Train).clone(),
            val: b.raw(Split::Val).clone(),
            test: b.raw(Split::Test).clone(),
        },
        tabctx::data::PerSplit {
            train: b.labels(Split::Train).clone(),
            val: b.labels(Split::Val).clone(),
            test: b.labels(Split::Test).clone(),
        },
        preds,
    )
    .unwrap();
    let err = predict_split(
        &stripped,
        Split::Test,
        &PipelineConfig::default(),
        &ExpertBackend::default(),
    )
    .unwrap_err();
    assert_eq!(err.kind(), "missing_prediction_matrix");
    let all_easy = PipelineConfig {
        tau: 1e-6,
        ..Default::default()
    };
    let out = predict_split(&stripped, Split::Test, &all_easy, &ExpertBackend::default()).unwrap();
    assert!(out.records.iter().all(|r| r.provenance == Provenance::Easy));
}

#[test]
fn regression_predictions_stay_in_label_range() {
    let b = regression_source("r", 300, &[0.1, 0.2, 2.0, 3.0], 8)
        .unwrap()
        .bundle(0)
        .unwrap()
        .into_owned();
    let cfg = PipelineConfig::default();
    let out = predict_split(&b, Split::Test, &cfg, &ExpertBackend::default()).unwrap();
    let (lo, hi) = b.task().label_range().unwrap();
    for r in &out.records {
        let v = r.prediction.as_f64();
        if r.provenance == Provenance::Expert {
            assert!((lo..=hi).contains(&v), "{v} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn csv_outputs_have_headers_and_one_line_per_row() {
    let b = bundle();
    let cfg = PipelineConfig::default();
    let out = predict_split(&b, Split::Test, &cfg, &ExpertBackend::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("predictions_test.csv");
    write_predictions_csv(&preds, &out.records).unwrap();
    let text = std::fs::read_to_string(&preds).unwrap();
    assert!(text.starts_with("row,prediction,provenance,is_hard,agreement\n"));
    assert_eq!(text.lines().count(), out.records.len() + 1);

    let hardness = dir.path().join("hardness_test.csv");
    write_hardness_csv(&hardness, &route_split(&b, Split::Test, cfg.tau).unwrap()).unwrap();
    let text = std::fs::read_to_string(&hardness).unwrap();
    assert!(text.starts_with("row,is_hard,agreement\n"));
    assert_eq!(text.lines().count(), b.rows(Split::Test) + 1);
}
