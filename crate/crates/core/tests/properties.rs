mod common;

use proptest::prelude::*;

use tabctx::context::ContextBuilder;
use tabctx::data::{
    model_alias, split_indices, split_sizes, FeatureEncoder, Label, Labels, Matrix, RawColumn, RawTable, Split,
    TaskKind,
};
use tabctx::ensemble::{average_vote, build_meta_features, weighted_vote, ModelOutputs};
use tabctx::eval::{average_ranks, holm_adjust, BundleSource};
use tabctx::expert::{run_expert, ExpertConfig};
use tabctx::pipeline::feature_weights;
use tabctx::retrieval::{k_nearest, DistanceMetric, FeatureWeights};
use tabctx::router::classify_hardness;
use tabctx::synthetic::{classification_source, ClassificationSpec};

fn probability_rows(m: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, c), m).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_rows(n in 10usize..400, classes in 1usize..5, seed in any::<u64>()) {
        let labels = Labels::Classes((0..n).map(|i| i % classes).collect());
        let idx = split_indices(&labels, seed).unwrap();
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes = split_sizes(n);
        prop_assert_eq!([idx.train.len(), idx.val.len(), idx.test.len()], sizes);
        prop_assert_eq!(split_indices(&labels, seed).unwrap(), idx);
    }

    #[test]
    fn encoded_train_columns_are_standardized(values in prop::collection::vec(-1e3f64..1e3, 2..60), cats in prop::collection::vec(0usize..4, 2..60)) {
        let n = values.len().min(cats.len());
        let table = RawTable::new(vec![
            RawColumn::Numerical(values[..n].to_vec()),
            RawColumn::Categorical(cats[..n].iter().map(|c| format!("k{c}")).collect()),
        ]).unwrap();
        let encoder = FeatureEncoder::fit(&table);
        let x = encoder.transform(&table).unwrap();
        prop_assert_eq!(x.cols(), encoder.width());
        let col = x.column(0);
        let mean = col.iter().sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        for i in 0..n {
            let hot: f64 = x.row(i)[1..].iter().sum();
            prop_assert_eq!(hot, 1.0);
        }
    }

    #[test]
    fn knn_is_sorted_distinct_and_sized(
        n in 1usize..80,
        d in 1usize..6,
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
        metric in prop_oneof![Just(DistanceMetric::ManhattanRw), Just(DistanceMetric::EuclideanRw), Just(DistanceMetric::Cosine)],
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let train = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2i32..3) as f64).collect()).unwrap();
        let target: Vec<f64> = (0..d).map(|_| rng.random_range(-2i32..3) as f64).collect();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let w = FeatureWeights::uniform(d, metric);
        let got = k_nearest(&target, &train, &w, k).unwrap();
        prop_assert_eq!(got.len(), k);
        let mut seen = got.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        for pair in got.distances.windows(2) {
            prop_assert!(pair[0] <= pair[1]);
        }
        for (j, pair) in got.indices.windows(2).enumerate() {
            if got.distances[j] == got.distances[j + 1] {
                prop_assert!(pair[0] < pair[1]);
            }
        }
    }

    #[test]
    fn classification_hardness_matches_modal_count(
        preds in prop::collection::vec(0usize..4, 2..12),
        tau in 0.05f64..1.0,
    ) {
        let task = TaskKind::multiclass(4).unwrap();
        let labels: Vec<Label> = preds.iter().map(|&c| Label::Class(c)).collect();
        let mut counts = [0usize; 4];
        for &c in &preds {
            counts[c] += 1;
        }
        let modal = *counts.iter().max().unwrap();
        let v = classify_hardness(&labels, &task, tau).unwrap();
        prop_assert_eq!(v.is_hard, (modal as f64) < tau * preds.len() as f64);
        prop_assert_eq!(v.agreement, modal);
    }

    #[test]
    fn average_vote_picks_a_maximal_mean(rows in (1usize..8, 2usize..5).prop_flat_map(|(m, c)| probability_rows(m, c))) {
        let m = rows.len();
        let c = rows[0].len();
        let mean: Vec<f64> = (0..c).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / m as f64).collect();
        let best = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let Label::Class(got) = average_vote(&ModelOutputs::Probabilities(rows.clone())) else { unreachable!() };
        prop_assert!(mean[got] >= best - 1e-12);
        let equal = vec![0.37; m];
        let Label::Class(w) = weighted_vote(&ModelOutputs::Probabilities(rows), &equal) else { unreachable!() };
        prop_assert!(mean[w] >= best - 1e-12);
    }

    #[test]
    fn ranks_survive_monotone_transforms(values in prop::collection::vec(-50i32..50, 1..15), higher in any::<bool>()) {
        let x: Vec<f64> = values.iter().map(|&v| v as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v + 7.0).collect();
        prop_assert_eq!(average_ranks(&x, higher), average_ranks(&y, higher));
        let sum: f64 = average_ranks(&x, higher).iter().sum();
        let n = x.len() as f64;
        prop_assert_eq!(sum, n * (n + 1.0) / 2.0);
    }

    #[test]
    fn holm_never_rejects_more_than_raw(p in prop::collection::vec(0.0f64..1.0, 1..20), alpha in 0.001f64..0.2) {
        let adjusted = holm_adjust(&p);
        for (a, r) in adjusted.iter().zip(&p) {
            prop_assert!(a >= r && *a <= 1.0);
        }
        let raw = p.iter().filter(|&&v| v <= alpha).count();
        let holm = adjusted.iter().filter(|&&v| v <= alpha).count();
        prop_assert!(holm <= raw);
    }

    #[test]
    fn meta_features_follow_neighbor_order(perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
        let ctx = common::classification_fixture();
        let m = ctx.m();
        let mut shuffled = ctx.clone();
        shuffled.neighbor_labels = perm.iter().map(|&j| ctx.neighbor_labels[j]).collect();
        shuffled.neighbor_predictions = perm.iter().map(|&j| ctx.neighbor_predictions[j].clone()).collect();
        let z = build_meta_features(&ctx).values;
        let zs = build_meta_features(&shuffled).values;
        prop_assert_eq!(&zs[..m], &z[..m]);
        let k = ctx.k();
        for (slot, &j) in perm.iter().enumerate() {
            prop_assert_eq!(zs[m + slot], z[m + j]);
            prop_assert_eq!(&zs[m + k + slot * m..m + k + (slot + 1) * m], &z[m + k + j * m..m + k + (j + 1) * m]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn expert_ignores_model_names(seed in 0u64..1000, row in 0usize..80, offset in 1usize..30) {
        let source = classification_source("c", &ClassificationSpec::default(), seed).unwrap();
        let bundle = source.bundle(0).unwrap();
        let weights = feature_weights(&bundle, DistanceMetric::ManhattanRw, 20).unwrap();
        let builder = ContextBuilder::new(&bundle, &weights, 10).unwrap();
        let ctx = builder.build(Split::Test, row).unwrap();
        let mut renamed = ctx.clone();
        for (i, r) in renamed.model_records.iter_mut().enumerate() {
            r.model_id = format!("zz_{}", 100 - i);
            r.alias = model_alias(i + offset);
        }
        let a = run_expert(&ctx, &ExpertConfig::default());
        let b = run_expert(&renamed, &ExpertConfig::default());
        prop_assert_eq!(a.final_prediction, b.final_prediction);
        prop_assert_eq!(a.outlier_neighbors, b.outlier_neighbors);
        prop_assert_eq!(a.well_performing.len(), b.well_performing.len());

        let json = serde_json::to_value(&ctx).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        prop_assert!(keys.iter().all(|k| !k.contains("feature")), "{:?}", keys);
    }
}
