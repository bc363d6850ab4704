//! Least-squares gradient boosting of depth-limited regression trees.
//!
//! Splits are found by exact search over each feature's sorted values, with
//! thresholds at midpoints between consecutive distinct values. Rows with
//! `x <= threshold` go left. Ties in gain keep the lowest feature index, then
//! the smallest threshold.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbrtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 1.0,
            min_samples_leaf: 20,
            seed: 0,
        }
    }
}

impl GbrtParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Fit("n_trees must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Fit("max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Fit(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Fit(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Fit("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Reduction of the squared error on the rows reaching this node.
        gain: f64,
    },
}

/// Flat binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if row(*feature) <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    fn splits(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, gain, .. } => Some((*feature, *gain)),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    /// Mean training label.
    pub init: f64,
    pub params: GbrtParams,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
    /// Training mean squared error after each tree.
    pub loss_trace: Vec<f64>,
}

impl TreeEnsemble {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// The first `k` trees. Identical to fitting with `n_trees = k`.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.trees.len());
        Self {
            init: self.init,
            params: GbrtParams {
                n_trees: k,
                ..self.params
            },
            n_features: self.n_features,
            trees: self.trees[..k].to_vec(),
            loss_trace: self.loss_trace[..k].to_vec(),
        }
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::Schema(format!(
                "ensemble trained on {} features, input has {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self
            .staged_predict(x, &[self.trees.len()])?
            .pop()
            .expect("one stage requested"))
    }

    /// Predictions after each tree count in `stages`.
    pub fn staged_predict(&self, x: &DMatrix<f64>, stages: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_width(x)?;
        let n = x.nrows();
        let mut f = vec![self.init; n];
        let mut out = vec![Vec::new(); stages.len()];
        let lr = self.params.learning_rate;
        let mut record = |done: usize, f: &[f64]| {
            for (s, o) in stages.iter().zip(out.iter_mut()) {
                if *s == done || (done == self.trees.len() && *s > done) {
                    *o = f.to_vec();
                }
            }
        };
        record(0, &f);
        for (t, tree) in self.trees.iter().enumerate() {
            for (i, fi) in f.iter_mut().enumerate() {
                *fi += lr * tree.predict_row(|j| x[(i, j)]);
            }
            record(t + 1, &f);
        }
        Ok(out)
    }

    /// Summed split gains per feature, normalized to one; all zeros when no
    /// tree has a split.
    pub fn importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for tree in &self.trees {
            for (j, g) in tree.splits() {
                imp[j] += g;
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            for v in &mut imp {
                *v /= total;
            }
        }
        imp
    }
}

struct Grower<'a> {
    cols: Vec<&'a [f64]>,
    resid: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    go_left: Vec<bool>,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[u32]) -> f64 {
        rows.iter().map(|&i| self.resid[i as usize]).sum::<f64>() / rows.len() as f64
    }

    fn best_split(&self, lists: &[Vec<u32>]) -> Option<BestSplit> {
        let m = lists[0].len();
        if m < 2 * self.min_leaf {
            return None;
        }
        let total: f64 = lists[0].iter().map(|&i| self.resid[i as usize]).sum();
        let ss: f64 = lists[0].iter().map(|&i| self.resid[i as usize].powi(2)).sum();
        let base = total * total / m as f64;
        let mut best: Option<BestSplit> = None;
        let mut best_gain = 1e-14 * ss;
        for (j, list) in lists.iter().enumerate() {
            let col = self.cols[j];
            let mut left = 0.0;
            for k in 0..m - 1 {
                let i = list[k] as usize;
                left += self.resid[i];
                let n_left = k + 1;
                if n_left < self.min_leaf {
                    continue;
                }
                if m - n_left < self.min_leaf {
                    break;
                }
                let a = col[i];
                let b = col[list[k + 1] as usize];
                if a == b {
                    continue;
                }
                let right = total - left;
                let gain = left * left / n_left as f64 + right * right / (m - n_left) as f64 - base;
                if gain > best_gain {
                    best_gain = gain;
                    let mid = 0.5 * (a + b);
                    best = Some(BestSplit {
                        feature: j,
                        threshold: if mid < b { mid } else { a },
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(&lists[0]),
        });
        if depth >= self.max_depth {
            return id;
        }
        let Some(split) = self.best_split(&lists) else {
            return id;
        };
        let col = self.cols[split.feature];
        for &i in &lists[0] {
            self.go_left[i as usize] = col[i as usize] <= split.threshold;
        }
        let mut left_lists = Vec::with_capacity(lists.len());
        let mut right_lists = Vec::with_capacity(lists.len());
        for list in lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&i| self.go_left[i as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        let left = self.grow(left_lists, depth + 1);
        let right = self.grow(right_lists, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            gain: split.gain,
        };
        id
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Fit("no training rows".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Fit(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite value in training data".into()));
    }
    if x.ncols() == 0 {
        return Err(Error::Fit("no feature columns".into()));
    }
    Ok(())
}

pub fn fit_gbrt(x: &DMatrix<f64>, y: &[f64], params: &GbrtParams) -> Result<TreeEnsemble> {
    params.validate()?;
    check_inputs(x, y)?;
    let n = x.nrows();
    let p = x.ncols();
    let cols: Vec<&[f64]> = (0..p).map(|j| &x.as_slice()[j * n..(j + 1) * n]).collect();
    let presorted: Vec<Vec<u32>> = cols
        .iter()
        .map(|c| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let init = y.iter().sum::<f64>() / n as f64;
    let mut f = vec![init; n];
    let mut resid: Vec<f64> = y.iter().map(|v| v - init).collect();
    let n_sample = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let mut in_sample = vec![true; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut loss_trace = Vec::with_capacity(params.n_trees);

    for round in 0..params.n_trees {
        let lists: Vec<Vec<u32>> = if n_sample == n {
            presorted.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[round as u64]));
            in_sample.iter_mut().for_each(|v| *v = false);
            for i in index::sample(&mut rng, n, n_sample) {
                in_sample[i] = true;
            }
            presorted
                .iter()
                .map(|l| l.iter().copied().filter(|&i| in_sample[i as usize]).collect())
                .collect()
        };
        let mut grower = Grower {
            cols: cols.clone(),
            resid: &resid,
            max_depth: params.max_depth,
            min_leaf: params.min_samples_leaf,
            go_left: vec![false; n],
            nodes: Vec::new(),
        };
        grower.grow(lists, 0);
        let tree = RegressionTree {
            nodes: grower.nodes,
        };
        let mut sse = 0.0;
        for i in 0..n {
            f[i] += params.learning_rate * tree.predict_row(|j| cols[j][i]);
            resid[i] = y[i] - f[i];
            sse += resid[i] * resid[i];
        }
        loss_trace.push(sse / n as f64);
        trees.push(tree);
    }
    Ok(TreeEnsemble {
        init,
        params: *params,
        n_features: p,
        trees,
        loss_trace,
    })
}
