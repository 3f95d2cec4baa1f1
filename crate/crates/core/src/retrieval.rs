//! Mutual-information feature weights and exact weighted k-NN retrieval.
//!
//! Distances follow a re-weighted Minkowski form,
//! `dist(a, b) = (sum_l w_l * |a_l - b_l|^d)^(1/d)`, with `d = 1`
//! (MAN-RW) or `d = 2` (EUC-RW); the weights are min-max scaled mutual
//! information between each encoded dimension and the train labels. An
//! unweighted cosine distance is available for ablations.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Labels, Matrix};
use crate::error::{Error, Result};

/// Lower clamp applied to min-max scaled weights.
pub const WEIGHT_FLOOR: f64 = 1e-3;
pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// Weighted Manhattan (d = 1).
    #[default]
    #[serde(rename = "man-rw")]
    ManhattanRw,
    /// Weighted Euclidean (d = 2).
    #[serde(rename = "euc-rw")]
    EuclideanRw,
    /// Unweighted cosine distance.
    #[serde(rename = "cos")]
    Cosine,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::ManhattanRw => "man-rw",
            DistanceMetric::EuclideanRw => "euc-rw",
            DistanceMetric::Cosine => "cos",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "man-rw" => Ok(DistanceMetric::ManhattanRw),
            "euc-rw" => Ok(DistanceMetric::EuclideanRw),
            "cos" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Invalid(format!(
                "unknown metric `{other}` (expected man-rw, euc-rw or cos)"
            ))),
        }
    }
}

/// Per-dimension weights plus the metric that consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub weights: Vec<f64>,
    /// Unscaled mutual information per dimension (nats); empty when the
    /// weights were set by hand.
    pub raw_mi: Vec<f64>,
    pub metric: DistanceMetric,
}

impl FeatureWeights {
    pub fn uniform(dims: usize, metric: DistanceMetric) -> Self {
        Self {
            weights: vec![1.0; dims],
            raw_mi: Vec::new(),
            metric,
        }
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Dumps `dimension,raw_mi,weight` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let rows = std::iter::once(["dimension".to_string(), "raw_mi".into(), "weight".into()]).chain(
            self.weights.iter().enumerate().map(|(d, wt)| {
                let mi = self.raw_mi.get(d).map_or(String::new(), f64::to_string);
                [d.to_string(), mi, wt.to_string()]
            }),
        );
        for row in rows {
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Discretizes a continuous variable into at most `bins` codes.
///
/// Variables with at most `bins` distinct values keep one code per value.
/// Otherwise codes are equal-frequency rank buckets, with tied values
/// always sharing the bucket of their first sorted occurrence.
pub fn discretize(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    let mut distinct = 0usize;
    for w in order.windows(2) {
        if values[w[0]] != values[w[1]] {
            distinct += 1;
        }
    }
    if n > 0 {
        distinct += 1;
    }

    let mut codes = vec![0usize; n];
    if distinct <= bins {
        let mut code = 0;
        for (rank, &i) in order.iter().enumerate() {
            if rank > 0 && values[i] != values[order[rank - 1]] {
                code += 1;
            }
            codes[i] = code;
        }
    } else {
        let mut current = 0;
        for (rank, &i) in order.iter().enumerate() {
            if rank == 0 || values[i] != values[order[rank - 1]] {
                current = rank * bins / n;
            }
            codes[i] = current;
        }
    }
    codes
}

/// Plug-in mutual information (nats) between two discrete code vectors.
pub fn plugin_mutual_information(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut px: HashMap<usize, usize> = HashMap::new();
    let mut py: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1;
        *px.entry(a).or_default() += 1;
        *py.entry(b).or_default() += 1;
    }
    let nf = n as f64;
    // sum in a fixed order so the result is reproducible
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .into_iter()
        .map(|((a, b), c)| {
            let pxy = c as f64 / nf;
            let pa = px[&a] as f64 / nf;
            let pb = py[&b] as f64 / nf;
            pxy * (pxy / (pa * pb)).ln()
        })
        .sum();
    mi.max(0.0)
}

/// Min-max scales raw MI to `[WEIGHT_FLOOR, 1]`; all-equal MI gives
/// uniform weights of 1.
pub fn scale_weights(raw_mi: &[f64]) -> Vec<f64> {
    let lo = raw_mi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw_mi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw_mi.is_empty() || hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return vec![1.0; raw_mi.len()];
    }
    raw_mi
        .iter()
        .map(|&v| ((v - lo) / (hi - lo)).max(WEIGHT_FLOOR))
        .collect()
}

/// Feature weights from the mutual information between each encoded
/// train dimension and the train labels.
pub fn mutual_information_weights(
    features: &Matrix,
    labels: &Labels,
    bins: usize,
    metric: DistanceMetric,
) -> Result<FeatureWeights> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    if features.rows() < 2 {
        return Err(Error::TooFewRows {
            need: 2,
            got: features.rows(),
        });
    }
    let bins = bins.max(2);
    let y = match labels {
        Labels::Classes(c) => c.clone(),
        Labels::Values(v) => discretize(v, bins),
    };
    let raw_mi: Vec<f64> = (0..features.cols())
        .map(|j| plugin_mutual_information(&discretize(&features.column(j), bins), &y))
        .collect();
    Ok(FeatureWeights {
        weights: scale_weights(&raw_mi),
        raw_mi,
        metric,
    })
}

/// Distance between two encoded rows under `w`.
pub fn weighted_distance(a: &[f64], b: &[f64], w: &FeatureWeights) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if w.metric != DistanceMetric::Cosine && w.weights.len() != a.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: w.weights.len(),
        });
    }
    Ok(distance_unchecked(a, b, w))
}

fn distance_unchecked(a: &[f64], b: &[f64], w: &FeatureWeights) -> f64 {
    match w.metric {
        DistanceMetric::ManhattanRw => a
            .iter()
            .zip(b)
            .zip(&w.weights)
            .map(|((x, y), wt)| wt * (x - y).abs())
            .sum(),
        DistanceMetric::EuclideanRw => a
            .iter()
            .zip(b)
            .zip(&w.weights)
            .map(|((x, y), wt)| wt * (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistanceMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum();
            let nb: f64 = b.iter().map(|x| x * x).sum();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
            }
        }
    }
}

/// Train rows nearest to a target, ascending distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k nearest train rows; ties go to the lower row index.
pub fn k_nearest(target: &[f64], train: &Matrix, w: &FeatureWeights, k: usize) -> Result<NeighborSet> {
    if k == 0 || k > train.rows() {
        return Err(Error::InvalidK {
            k,
            available: train.rows(),
        });
    }
    if target.len() != train.cols() {
        return Err(Error::LengthMismatch {
            expected: train.cols(),
            got: target.len(),
        });
    }
    if w.metric != DistanceMetric::Cosine && w.weights.len() != train.cols() {
        return Err(Error::LengthMismatch {
            expected: train.cols(),
            got: w.weights.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = train
        .iter_rows()
        .enumerate()
        .map(|(i, row)| (distance_unchecked(target, row, w), i))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);
    Ok(NeighborSet {
        indices: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
    })
}
