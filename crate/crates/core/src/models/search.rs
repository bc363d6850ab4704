use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gbrt::{fit_gbrt, GbrtParams};
use super::linear::{fit_ridge, lambda_max, lasso_path, LassoOptions};
use super::{ModelConfig, ModelFamily, ModelParams, TrainedModel};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, RowKey, Scaler, Scaling};

/// Penalty values, either absolute or as multiples of the training λ_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `n` log-spaced values from λ_max down to `min_ratio·λ_max`.
    Relative { n: usize, min_ratio: f64 },
    Absolute { values: Vec<f64> },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Relative {
            n: 20,
            min_ratio: 1e-4,
        }
    }
}

impl LambdaGrid {
    fn len(&self) -> usize {
        match self {
            LambdaGrid::Relative { n, .. } => *n,
            LambdaGrid::Absolute { values } => values.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LambdaGrid::Relative { n, min_ratio } => {
                if *n == 0 || !(*min_ratio > 0.0 && *min_ratio <= 1.0) {
                    return Err(Error::Config("relative lambda grid needs n ≥ 1 and 0 < min_ratio ≤ 1".into()));
                }
            }
            LambdaGrid::Absolute { values } => {
                if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Config("absolute lambda grid needs non-negative values".into()));
                }
            }
        }
        Ok(())
    }

    /// Values in descending order.
    pub fn values(&self, lambda_max: f64) -> Vec<f64> {
        let mut v = match self {
            LambdaGrid::Relative { n, min_ratio } => (0..*n)
                .map(|k| {
                    let t = if *n == 1 { 0.0 } else { k as f64 / (*n - 1) as f64 };
                    lambda_max * min_ratio.powf(t)
                })
                .collect(),
            LambdaGrid::Absolute { values } => values.clone(),
        };
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub subsample: Vec<f64>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbrtGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![100, 300, 500],
            max_depth: vec![2, 3, 4],
            learning_rate: vec![0.05, 0.1],
            subsample: vec![0.8, 1.0],
            min_samples_leaf: 20,
            seed: 0,
        }
    }
}

impl GbrtGrid {
    fn len(&self) -> usize {
        self.n_trees.len() * self.max_depth.len() * self.learning_rate.len() * self.subsample.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub families: Vec<ModelFamily>,
    pub scalings: Vec<Scaling>,
    pub lasso: LambdaGrid,
    pub ridge: LambdaGrid,
    pub lasso_options: LassoOptions,
    pub gbrt: GbrtGrid,
    pub random_seed: u64,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            families: ModelFamily::ALL.to_vec(),
            scalings: Scaling::ALL.to_vec(),
            lasso: LambdaGrid::default(),
            ridge: LambdaGrid::default(),
            lasso_options: LassoOptions::default(),
            gbrt: GbrtGrid::default(),
            random_seed: 0,
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("no model families requested".into()));
        }
        let trainable = self.families.iter().any(|f| !f.is_baseline());
        if trainable && self.scalings.is_empty() {
            return Err(Error::Config("empty scaling grid".into()));
        }
        for f in &self.families {
            match f {
                ModelFamily::Lasso => self.lasso.validate()?,
                ModelFamily::Ridge => self.ridge.validate()?,
                ModelFamily::Gbrt => {
                    let g = &self.gbrt;
                    if g.len() == 0 {
                        return Err(Error::Config("empty gbrt grid".into()));
                    }
                    for &n_trees in &g.n_trees {
                        for &max_depth in &g.max_depth {
                            for &learning_rate in &g.learning_rate {
                                for &subsample in &g.subsample {
                                    GbrtParams {
                                        n_trees,
                                        max_depth,
                                        learning_rate,
                                        subsample,
                                        min_samples_leaf: g.min_samples_leaf,
                                        seed: g.seed,
                                    }
                                    .validate()
                                    .map_err(|e| Error::Config(e.to_string()))?;
                                }
                            }
                        }
                    }
                }
                ModelFamily::Uniform | ModelFamily::Random => {}
            }
        }
        Ok(())
    }

    /// Leaderboard rows for `family`: grid size times scalings.
    pub fn n_candidates(&self, family: ModelFamily) -> usize {
        match family {
            ModelFamily::Lasso => self.lasso.len() * self.scalings.len(),
            ModelFamily::Ridge => self.ridge.len() * self.scalings.len(),
            ModelFamily::Gbrt => self.gbrt.len() * self.scalings.len(),
            ModelFamily::Uniform | ModelFamily::Random => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub family: ModelFamily,
    /// Position in the family's grid enumeration.
    pub grid_index: usize,
    pub config: ModelConfig,
    pub val_rmse: f64,
    /// False only for Lasso fits that hit the iteration cap.
    pub converged: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub leaderboard: Vec<LeaderboardRow>,
    /// Winning configuration of each requested family, in request order.
    pub best: Vec<ModelConfig>,
}

impl SearchResult {
    pub fn best_for(&self, family: ModelFamily) -> Option<&ModelConfig> {
        self.best.iter().find(|c| c.family() == family)
    }
}

fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    (sse / y.len() as f64).sqrt()
}

struct Candidate {
    config: ModelConfig,
    val_rmse: f64,
    converged: bool,
}

fn scaled_pair(
    scaling: Scaling,
    train: &FeatureMatrix,
    val: &FeatureMatrix,
) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
    let scaler = Scaler::fitted(scaling, &train.values, &train.schema)?;
    Ok((scaler.transform(&train.values)?, scaler.transform(&val.values)?))
}

fn linear_candidates(
    family: ModelFamily,
    grid: &HyperGrid,
    scaling: Scaling,
    train: &FeatureMatrix,
    val: &FeatureMatrix,
) -> Result<Vec<Candidate>> {
    let (xt, xv) = scaled_pair(scaling, train, val)?;
    let lmax = lambda_max(&xt, &train.labels)?;
    let lambdas = match family {
        ModelFamily::Lasso => grid.lasso.values(lmax),
        _ => grid.ridge.values(lmax),
    };
    let models = match family {
        ModelFamily::Lasso => lasso_path(&xt, &train.labels, &lambdas, &grid.lasso_options)?,
        _ => lambdas
            .iter()
            .map(|l| fit_ridge(&xt, &train.labels, *l))
            .collect::<Result<Vec<_>>>()?,
    };
    models
        .into_iter()
        .map(|m| {
            let params = match family {
                ModelFamily::Lasso => ModelParams::Lasso {
                    lambda: m.lambda,
                    options: grid.lasso_options,
                },
                _ => ModelParams::Ridge { lambda: m.lambda },
            };
            Ok(Candidate {
                config: ModelConfig { params, scaling },
                val_rmse: rmse(&m.predict(&xv)?, &val.labels),
                converged: m.diagnostics.converged,
            })
        })
        .collect()
}

fn gbrt_candidates(
    g: &GbrtGrid,
    scaling: Scaling,
    train: &FeatureMatrix,
    val: &FeatureMatrix,
) -> Result<Vec<Candidate>> {
    let (xt, xv) = scaled_pair(scaling, train, val)?;
    let mut stages = g.n_trees.clone();
    stages.sort_unstable();
    stages.dedup();
    let max_trees = *stages.last().expect("validated non-empty");
    let mut combos = Vec::new();
    for &max_depth in &g.max_depth {
        for &learning_rate in &g.learning_rate {
            for &subsample in &g.subsample {
                combos.push(GbrtParams {
                    n_trees: max_trees,
                    max_depth,
                    learning_rate,
                    subsample,
                    min_samples_leaf: g.min_samples_leaf,
                    seed: g.seed,
                });
            }
        }
    }
    let per_combo: Vec<Vec<Candidate>> = combos
        .par_iter()
        .map(|params| {
            // Boosting is prefix-stable, so one long fit scores every tree count.
            let model = fit_gbrt(&xt, &train.labels, params)?;
            let staged = model.staged_predict(&xv, &stages)?;
            Ok(g.n_trees
                .iter()
                .map(|&n| {
                    let k = stages.iter().position(|s| *s == n).expect("stage present");
                    Candidate {
                        config: ModelConfig {
                            params: ModelParams::Gbrt(GbrtParams { n_trees: n, ..*params }),
                            scaling,
                        },
                        val_rmse: rmse(&staged[k], &val.labels),
                        converged: true,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_combo.into_iter().flatten().collect())
}

/// Smaller score = simpler model, used to break validation ties.
fn complexity(params: &ModelParams) -> f64 {
    match params {
        ModelParams::Lasso { lambda, .. } | ModelParams::Ridge { lambda } => -lambda,
        ModelParams::Gbrt(p) => p.n_trees as f64,
        ModelParams::Uniform | ModelParams::Random { .. } => 0.0,
    }
}

/// Exhaustive search of every requested family on `train`, scored on `val`.
pub fn grid_search(train: &FeatureMatrix, val: &FeatureMatrix, grid: &HyperGrid) -> Result<SearchResult> {
    grid.validate()?;
    if train.schema != val.schema {
        return Err(Error::Schema("train and validation schemas differ".into()));
    }
    if train.n_rows() == 0 || val.n_rows() == 0 {
        return Err(Error::Data("grid search needs training and validation rows".into()));
    }
    let train_keys: HashSet<RowKey> = train.keys.iter().copied().collect();
    if let Some(k) = val.keys.iter().find(|k| train_keys.contains(k)) {
        return Err(Error::Data(format!(
            "row (contest {}, driver {}) is in both train and validation sets",
            k.contest_id, k.driver_id
        )));
    }

    let mut leaderboard = Vec::new();
    let mut best = Vec::new();
    for &family in &grid.families {
        let candidates: Vec<Candidate> = match family {
            ModelFamily::Lasso | ModelFamily::Ridge => grid
                .scalings
                .par_iter()
                .map(|s| linear_candidates(family, grid, *s, train, val))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect(),
            ModelFamily::Gbrt => grid
                .scalings
                .iter()
                .map(|s| gbrt_candidates(&grid.gbrt, *s, train, val))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect(),
            ModelFamily::Uniform | ModelFamily::Random => {
                let params = if family == ModelFamily::Uniform {
                    ModelParams::Uniform
                } else {
                    ModelParams::Random {
                        seed: grid.random_seed,
                    }
                };
                let config = ModelConfig {
                    params,
                    scaling: Scaling::None,
                };
                let model = TrainedModel::fit(&config, train)?;
                vec![Candidate {
                    val_rmse: rmse(&model.predict(val)?, &val.labels),
                    config,
                    converged: true,
                }]
            }
        };
        let any_converged = candidates.iter().any(|c| c.converged);
        let winner = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.converged || !any_converged)
            .min_by(|(i, a), (j, b)| {
                a.val_rmse
                    .total_cmp(&b.val_rmse)
                    .then(complexity(&a.config.params).total_cmp(&complexity(&b.config.params)))
                    .then(i.cmp(j))
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Config(format!("empty grid for {family}")))?;
        if !any_converged {
            tracing::warn!(%family, "no candidate converged; keeping the best unconverged fit");
        }
        best.push(candidates[winner].config.clone());
        leaderboard.extend(candidates.into_iter().enumerate().map(|(i, c)| LeaderboardRow {
            family,
            grid_index: i,
            config: c.config,
            val_rmse: c.val_rmse,
            converged: c.converged,
            selected: i == winner,
        }));
    }
    Ok(SearchResult { leaderboard, best })
}

/// Fits `config` on the union of `train` and `val`, refitting its scaler.
pub fn refit_on_train_plus_val(
    config: &ModelConfig,
    train: &FeatureMatrix,
    val: &FeatureMatrix,
) -> Result<TrainedModel> {
    let combined = train.concat(val)?;
    TrainedModel::fit(config, &combined)
}
