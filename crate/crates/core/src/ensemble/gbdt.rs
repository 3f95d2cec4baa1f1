//! Small exact-greedy gradient-boosted trees for the meta learner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, Label, Labels, Matrix, TaskKind};
use crate::error::{Error, Result};

pub const MIN_META_ROWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian mass per child.
    pub min_child_weight: f64,
    /// Recorded for provenance; training uses no randomness.
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[dim] < threshold` go left.
    Split {
        dim: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Score slot this tree adds to.
    pub output: usize,
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    dim,
                    threshold,
                    left,
                    right,
                } => i = if x[dim] < threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub task: TaskKind,
    pub feature_count: usize,
    pub params: GbdtParams,
    /// Set when the training labels were constant.
    pub constant: Option<Label>,
    pub base_score: Vec<f64>,
    pub trees: Vec<Tree>,
}

impl MetaModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.base_score.clone();
        for tree in &self.trees {
            s[tree.output] += tree.predict(x);
        }
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct TreeBuilder<'a> {
    x: &'a Matrix,
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    dim: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn find_split(&self, member: &[bool], g_total: f64, h_total: f64) -> Option<BestSplit> {
        let parent = self.score(g_total, h_total);
        let mut best: Option<BestSplit> = None;
        for (dim, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<f64> = None;
            for &r in order.iter().filter(|&&r| member[r]) {
                let v = self.x.row(r)[dim];
                if let Some(p) = prev {
                    if v > p {
                        let hr = h_total - hl;
                        if hl >= self.params.min_child_weight && hr >= self.params.min_child_weight {
                            let gain = self.score(gl, hl) + self.score(g_total - gl, hr) - parent;
                            if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                                let mid = p + (v - p) / 2.0;
                                best = Some(BestSplit {
                                    gain,
                                    dim,
                                    threshold: if mid > p { mid } else { v },
                                });
                            }
                        }
                    }
                }
                gl += self.grad[r];
                hl += self.hess[r];
                prev = Some(v);
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let id = self.nodes.len();
        let leaf = Node::Leaf {
            value: -self.params.learning_rate * g / (h + self.params.lambda),
        };
        self.nodes.push(leaf.clone());
        if depth >= self.params.max_depth || rows.len() < 2 {
            return id;
        }
        let mut member = vec![false; self.x.rows()];
        for &r in &rows {
            member[r] = true;
        }
        let Some(split) = self.find_split(&member, g, h) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.x.row(r)[split.dim] < split.threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            dim: split.dim,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

fn fit_tree(x: &Matrix, sorted: &[Vec<usize>], grad: &[f64], hess: &[f64], params: &GbdtParams, output: usize) -> Tree {
    let mut builder = TreeBuilder {
        x,
        sorted,
        grad,
        hess,
        params,
        nodes: Vec::new(),
    };
    builder.grow((0..x.rows()).collect(), 0);
    Tree {
        output,
        nodes: builder.nodes,
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Fits the boosted meta learner on `(z, y)`.
///
/// Binary tasks use logistic loss, multiclass tasks softmax loss with one
/// tree per class per round, regression squared error. Constant labels give
/// a constant model.
pub fn train_meta(z: &Matrix, y: &Labels, task: &TaskKind, params: &GbdtParams) -> Result<MetaModel> {
    let n = z.rows();
    if n != y.len() {
        return Err(Error::LengthMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n < MIN_META_ROWS {
        return Err(Error::TooFewRows {
            need: MIN_META_ROWS,
            got: n,
        });
    }
    let mut model = MetaModel {
        task: *task,
        feature_count: z.cols(),
        params: *params,
        constant: None,
        base_score: Vec::new(),
        trees: Vec::new(),
    };
    let first = y.get(0);
    if y.iter().all(|v| v == first) {
        model.constant = Some(first);
        return Ok(model);
    }
    let sorted: Vec<Vec<usize>> = (0..z.cols())
        .map(|d| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| z.row(a)[d].total_cmp(&z.row(b)[d]).then(a.cmp(&b)));
            idx
        })
        .collect();

    match (task.class_count(), y) {
        (Some(2), Labels::Classes(y)) => {
            let pos = y.iter().filter(|&&c| c == 1).count() as f64;
            model.base_score = vec![((pos + 0.5) / (n as f64 - pos + 0.5)).ln()];
            let mut score = vec![model.base_score[0]; n];
            for _ in 0..params.rounds {
                let p: Vec<f64> = score.iter().map(|&s| sigmoid(s)).collect();
                let grad: Vec<f64> = (0..n).map(|i| p[i] - y[i] as f64).collect();
                let hess: Vec<f64> = p.iter().map(|&q| (q * (1.0 - q)).max(1e-16)).collect();
                let tree = fit_tree(z, &sorted, &grad, &hess, params, 0);
                for (i, s) in score.iter_mut().enumerate() {
                    *s += tree.predict(z.row(i));
                }
                model.trees.push(tree);
            }
        }
        (Some(classes), Labels::Classes(y)) => {
            let mut counts = vec![0.0; classes];
            for &c in y {
                counts[c] += 1.0;
            }
            model.base_score = counts
                .iter()
                .map(|c| ((c + 0.5) / (n as f64 + 0.5 * classes as f64)).ln())
                .collect();
            let mut scores = vec![model.base_score.clone(); n];
            for _ in 0..params.rounds {
                let probs: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
                for c in 0..classes {
                    let grad: Vec<f64> = (0..n).map(|i| probs[i][c] - f64::from(u8::from(y[i] == c))).collect();
                    let hess: Vec<f64> = (0..n).map(|i| (probs[i][c] * (1.0 - probs[i][c])).max(1e-16)).collect();
                    let tree = fit_tree(z, &sorted, &grad, &hess, params, c);
                    for (i, s) in scores.iter_mut().enumerate() {
                        s[c] += tree.predict(z.row(i));
                    }
                    model.trees.push(tree);
                }
            }
        }
        (None, Labels::Values(y)) => {
            let mean = y.iter().sum::<f64>() / n as f64;
            model.base_score = vec![mean];
            let mut score = vec![mean; n];
            let hess = vec![1.0; n];
            for _ in 0..params.rounds {
                let grad: Vec<f64> = (0..n).map(|i| score[i] - y[i]).collect();
                let tree = fit_tree(z, &sorted, &grad, &hess, params, 0);
                for (i, s) in score.iter_mut().enumerate() {
                    *s += tree.predict(z.row(i));
                }
                model.trees.push(tree);
            }
        }
        _ => return Err(Error::InvalidTask("labels do not match the task kind".into())),
    }
    Ok(model)
}

pub fn predict_meta(model: &MetaModel, z: &[f64]) -> Result<Label> {
    if z.len() != model.feature_count {
        return Err(Error::LengthMismatch {
            expected: model.feature_count,
            got: z.len(),
        });
    }
    if let Some(label) = model.constant {
        return Ok(label);
    }
    let s = model.scores(z);
    Ok(match model.task.class_count() {
        Some(2) => Label::Class(usize::from(s[0] > 0.0)),
        Some(_) => Label::Class(argmax(&s)),
        None => Label::Value(s[0]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, d: usize) -> Matrix {
        let data = (0..n * d).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        Matrix::new(n, d, data).unwrap()
    }

    #[test]
    fn separable_on_one_coordinate() {
        let z = grid(200, 4);
        let y: Vec<usize> = (0..200).map(|i| usize::from(z.row(i)[2] > 5.0)).collect();
        let model = train_meta(
            &z,
            &Labels::Classes(y.clone()),
            &TaskKind::BinClass,
            &GbdtParams::default(),
        )
        .unwrap();
        let hits = (0..200)
            .filter(|&i| predict_meta(&model, z.row(i)).unwrap() == Label::Class(y[i]))
            .count();
        assert!(hits as f64 / 200.0 >= 0.95);
    }

    #[test]
    fn constant_labels_give_constant_model() {
        let z = grid(30, 3);
        let model = train_meta(
            &z,
            &Labels::Classes(vec![2; 30]),
            &TaskKind::multiclass(3).unwrap(),
            &GbdtParams::default(),
        )
        .unwrap();
        assert!(model.trees.is_empty());
        assert_eq!(predict_meta(&model, &[9.0, 9.0, 9.0]).unwrap(), Label::Class(2));
    }

    #[test]
    fn multiclass_and_length_check() {
        let z = grid(150, 3);
        let y: Vec<usize> = (0..150).map(|i| (z.row(i)[0] / 3.5) as usize).collect();
        let task = TaskKind::multiclass(3).unwrap();
        let model = train_meta(&z, &Labels::Classes(y.clone()), &task, &GbdtParams::default()).unwrap();
        let hits = (0..150)
            .filter(|&i| predict_meta(&model, z.row(i)).unwrap() == Label::Class(y[i]))
            .count();
        assert!(hits >= 145, "{hits}");
        assert!(predict_meta(&model, &[1.0]).is_err());
        assert!(train_meta(
            &grid(10, 3),
            &Labels::Classes(vec![0; 10]),
            &task,
            &GbdtParams::default()
        )
        .is_err());
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let z = grid(60, 3);
        let y: Vec<f64> = (0..60).map(|i| z.row(i)[1] * 2.0).collect();
        let task = TaskKind::regression(0.0, 20.0).unwrap();
        let a = train_meta(&z, &Labels::Values(y.clone()), &task, &GbdtParams::default()).unwrap();
        let b = train_meta(&z, &Labels::Values(y), &task, &GbdtParams::default()).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta_model.json");
        a.write_json(&path).unwrap();
        assert_eq!(MetaModel::read_json(&path).unwrap(), a);
    }
}
