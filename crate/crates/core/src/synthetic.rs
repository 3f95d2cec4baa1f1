//! Seeded synthetic datasets with planted model pools, for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Labels, Matrix, PredictionMatrix, RawColumn, RawTable, TaskKind};
use crate::error::Result;
use crate::eval::ResplitSource;

fn probability_row(rng: &mut ChaCha8Rng, classes: usize, predicted: usize, confidence: f64) -> Vec<f64> {
    let mut row = vec![0.0; classes];
    let rest = (1.0 - confidence) / (classes - 1) as f64;
    for (c, p) in row.iter_mut().enumerate() {
        *p = if c == predicted { confidence } else { rest };
    }
    // tiny jitter keeps rows distinct without moving the argmax
    let shift = rng.random_range(0.0..(confidence - rest).min(0.05) / 4.0);
    let other = (predicted + 1) % classes;
    row[predicted] -= shift;
    row[other] += shift;
    row
}

fn other_class(rng: &mut ChaCha8Rng, classes: usize, y: usize) -> usize {
    (y + rng.random_range(1..classes)) % classes
}

fn model_ids(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("model_{i}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSpec {
    pub rows: usize,
    pub classes: usize,
    /// Per-model probability of predicting the true label.
    pub accuracies: Vec<f64>,
    pub confidence: f64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            rows: 400,
            classes: 3,
            accuracies: vec![0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55],
            confidence: 0.7,
        }
    }
}

/// Two numerical features and one categorical feature; the label is a
/// band of the first feature, and each model is right with its planted
/// probability.
pub fn classification_source(name: &str, spec: &ClassificationSpec, seed: u64) -> Result<ResplitSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.rows;
    let c = spec.classes;
    let mut x0 = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n);
    let mut tone = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(0.0..1.0);
        let label = ((a * c as f64) as usize).min(c - 1);
        x0.push(a);
        x1.push(rng.random_range(-1.0..1.0));
        let t = if rng.random_bool(0.7) {
            label % 3
        } else {
            rng.random_range(0..3)
        };
        tone.push(["red", "green", "blue"][t].to_string());
        y.push(label);
    }
    let predictions = spec
        .accuracies
        .iter()
        .map(|&acc| {
            let rows: Vec<Vec<f64>> = y
                .iter()
                .map(|&label| {
                    let p = if rng.random_bool(acc) {
                        label
                    } else {
                        other_class(&mut rng, c, label)
                    };
                    probability_row(&mut rng, c, p, spec.confidence)
                })
                .collect();
            Matrix::from_rows(&rows).map(PredictionMatrix::Probabilities)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResplitSource {
        name: name.to_string(),
        task: TaskKind::classification(c)?,
        model_ids: model_ids(spec.accuracies.len()),
        raw: RawTable::new(vec![
            RawColumn::Numerical(x0),
            RawColumn::Numerical(x1),
            RawColumn::Categorical(tone),
        ])?,
        labels: Labels::Classes(y),
        predictions,
    })
}

/// `y = 3 x0 + sin(3 x1) + noise`; model `m` adds Gaussian-like noise of
/// scale `noise[m]`.
pub fn regression_source(name: &str, rows: usize, noise: &[f64], seed: u64) -> Result<ResplitSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0 = Vec::with_capacity(rows);
    let mut x1 = Vec::with_capacity(rows);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        x0.push(a);
        x1.push(b);
        y.push(3.0 * a + (3.0 * b).sin() + 0.1 * centered(&mut rng));
    }
    let predictions = noise
        .iter()
        .map(|&s| PredictionMatrix::Values(y.iter().map(|v| v + s * centered(&mut rng)).collect()))
        .collect();
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    Ok(ResplitSource {
        name: name.to_string(),
        task: TaskKind::regression(lo, hi)?,
        model_ids: model_ids(noise.len()),
        raw: RawTable::new(vec![RawColumn::Numerical(x0), RawColumn::Numerical(x1)])?,
        labels: Labels::Values(y),
        predictions,
    })
}

/// Sum of four uniforms, rescaled to unit variance.
fn centered(rng: &mut ChaCha8Rng) -> f64 {
    let s: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
    s * (3.0f64 / 4.0).sqrt()
}

/// Region of each noise model's competence in [`regional_source`].
pub const REGIONAL_COMPETENCE: [&[usize]; 4] = [&[1, 2, 3, 4, 5, 6], &[3, 7], &[1, 5, 7], &[2, 4, 6, 7]];

/// Binary data in four well-separated clusters of the first feature.
///
/// Model 0 is always right but unconfident (0.6). Models 1..=7 are right
/// with confidence 0.9 inside the clusters listed for them in
/// [`REGIONAL_COMPETENCE`] and confidently wrong elsewhere.
pub fn regional_source(name: &str, rows: usize, seed: u64) -> Result<ResplitSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [0usize, 1, 0, 1];
    let mut x = [Vec::new(), Vec::new(), Vec::new()];
    let mut y = Vec::with_capacity(rows);
    let mut region = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = i % 4;
        let flip: f64 = rng.random_range(-1.0..1.0);
        x[0].push(100.0 * r as f64 + rng.random_range(-1.0..1.0));
        x[1].push(flip);
        x[2].push(rng.random_range(-1.0..1.0));
        y.push(base[r] ^ usize::from(flip > 0.8));
        region.push(r);
    }
    let mut predictions = Vec::with_capacity(8);
    for m in 0..8 {
        let rows: Vec<Vec<f64>> = (0..rows)
            .map(|i| {
                let right = m == 0 || REGIONAL_COMPETENCE[region[i]].contains(&m);
                let p = if right { y[i] } else { 1 - y[i] };
                let confidence = if m == 0 { 0.6 } else { 0.9 };
                probability_row(&mut rng, 2, p, confidence)
            })
            .collect();
        predictions.push(PredictionMatrix::Probabilities(Matrix::from_rows(&rows)?));
    }
    let [x0, x1, x2] = x;
    Ok(ResplitSource {
        name: name.to_string(),
        task: TaskKind::BinClass,
        model_ids: model_ids(8),
        raw: RawTable::new(vec![
            RawColumn::Numerical(x0),
            RawColumn::Numerical(x1),
            RawColumn::Numerical(x2),
        ])?,
        labels: Labels::Classes(y),
        predictions,
    })
}

/// The label is whatever model 0 predicts; the other models are random.
pub fn planted_meta_source(name: &str, rows: usize, models: usize, classes: usize, seed: u64) -> Result<ResplitSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let mut predictions = Vec::with_capacity(models);
    for m in 0..models {
        let rows_m: Vec<Vec<f64>> = y
            .iter()
            .map(|&label| {
                let p = if m == 0 { label } else { rng.random_range(0..classes) };
                let confidence = rng.random_range(0.55..0.95);
                probability_row(&mut rng, classes, p, confidence)
            })
            .collect();
        predictions.push(PredictionMatrix::Probabilities(Matrix::from_rows(&rows_m)?));
    }
    let x0: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x1: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(ResplitSource {
        name: name.to_string(),
        task: TaskKind::classification(classes)?,
        model_ids: model_ids(models),
        raw: RawTable::new(vec![RawColumn::Numerical(x0), RawColumn::Numerical(x1)])?,
        labels: Labels::Classes(y),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{argmax, Split};
    use crate::eval::BundleSource;

    #[test]
    fn rows_are_normalized_and_keep_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 2..6 {
            for p in 0..c {
                let row = probability_row(&mut rng, c, p, 0.6);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(argmax(&row), p);
            }
        }
    }

    #[test]
    fn sources_build_valid_bundles() {
        let s = classification_source("c", &ClassificationSpec::default(), 1).unwrap();
        let b = s.bundle(0).unwrap();
        assert_eq!(b.model_count(), 8);
        assert_eq!(b.rows(Split::Train) + b.rows(Split::Val) + b.rows(Split::Test), 400);
        regression_source("r", 200, &[0.1, 0.5, 1.0], 2)
            .unwrap()
            .bundle(0)
            .unwrap();
        regional_source("g", 200, 3).unwrap().bundle(1).unwrap();
        planted_meta_source("p", 200, 4, 3, 4).unwrap().bundle(2).unwrap();
    }
}
