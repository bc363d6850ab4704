//! Regressors for ITE prediction: Lasso, Ridge, gradient-boosted trees and
//! two baselines, wrapped with their feature scaler and schema.

mod baseline;
mod gbrt;
mod linear;
mod search;

pub use baseline::{BaselineKind, BaselinePredictor};
pub use gbrt::{fit_gbrt, GbrtParams, Node, RegressionTree, TreeEnsemble};
pub use linear::{
    fit_lasso, fit_ridge, kkt_residual, lambda_max, lasso_path, FitDiagnostics, LassoOptions,
    LinearModel, Penalty,
};
pub use search::{
    grid_search, refit_on_train_plus_val, GbrtGrid, HyperGrid, LambdaGrid, LeaderboardRow,
    SearchResult,
};

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema, Scaler, Scaling};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Gbrt,
    Lasso,
    Ridge,
    Uniform,
    Random,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 5] = [
        ModelFamily::Gbrt,
        ModelFamily::Lasso,
        ModelFamily::Ridge,
        ModelFamily::Uniform,
        ModelFamily::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Gbrt => "gbrt",
            ModelFamily::Lasso => "lasso",
            ModelFamily::Ridge => "ridge",
            ModelFamily::Uniform => "uniform",
            ModelFamily::Random => "random",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, ModelFamily::Uniform | ModelFamily::Random)
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

/// Hyperparameters of one candidate, with absolute (frozen) λ values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelParams {
    Lasso { lambda: f64, options: LassoOptions },
    Ridge { lambda: f64 },
    Gbrt(GbrtParams),
    Uniform,
    Random { seed: u64 },
}

impl ModelParams {
    pub fn family(&self) -> ModelFamily {
        match self {
            ModelParams::Lasso { .. } => ModelFamily::Lasso,
            ModelParams::Ridge { .. } => ModelFamily::Ridge,
            ModelParams::Gbrt(_) => ModelFamily::Gbrt,
            ModelParams::Uniform => ModelFamily::Uniform,
            ModelParams::Random { .. } => ModelFamily::Random,
        }
    }

    /// Compact `key=value` description.
    pub fn describe(&self) -> String {
        match self {
            ModelParams::Lasso { lambda, .. } | ModelParams::Ridge { lambda } => format!("lambda={lambda:e}"),
            ModelParams::Gbrt(p) => format!(
                "n_trees={} max_depth={} learning_rate={} subsample={} min_samples_leaf={}",
                p.n_trees, p.max_depth, p.learning_rate, p.subsample, p.min_samples_leaf
            ),
            ModelParams::Uniform => String::new(),
            ModelParams::Random { seed } => format!("seed={seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub params: ModelParams,
    pub scaling: Scaling,
}

impl ModelConfig {
    pub fn family(&self) -> ModelFamily {
        self.params.family()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regressor {
    Linear(LinearModel),
    Trees(TreeEnsemble),
    Baseline(BaselinePredictor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub score: f64,
    /// Coefficient sign for linear models, 0 otherwise.
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    /// Every feature, highest score first (schema order among ties).
    pub ranked: Vec<FeatureScore>,
    /// Nonzero coefficients or positive tree importances.
    pub n_selected: usize,
}

impl Importance {
    pub fn selected(&self) -> impl Iterator<Item = &FeatureScore> {
        self.ranked.iter().filter(|f| f.score > 0.0)
    }
}

/// A fitted regressor with the scaler and schema it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub scaler: Scaler,
    pub regressor: Regressor,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: ModelFamily,
    schema_hash: String,
    #[serde(flatten)]
    model: TrainedModel,
}

impl TrainedModel {
    pub fn fit(config: &ModelConfig, train: &FeatureMatrix) -> Result<Self> {
        let scaler = Scaler::fitted(config.scaling, &train.values, &train.schema)?;
        let x = scaler.transform(&train.values)?;
        let regressor = fit_regressor(&config.params, &x, &train.labels)?;
        Ok(Self {
            config: config.clone(),
            schema: train.schema.clone(),
            scaler,
            regressor,
        })
    }

    pub fn family(&self) -> ModelFamily {
        self.config.family()
    }

    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        m.ensure_schema(&self.schema.hash())?;
        self.predict_values(&m.values)
    }

    /// Predictions for unscaled rows laid out in the model's schema.
    pub fn predict_values(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.schema.len() {
            return Err(Error::Schema(format!(
                "model expects {} columns, got {}",
                self.schema.len(),
                x.ncols()
            )));
        }
        let xs = self.scaler.transform(x)?;
        predict_regressor(&self.regressor, &xs)
    }

    pub fn importance(&self) -> Result<Importance> {
        if !self.scaler.is_fitted() {
            return Err(Error::Fit("model has not been fitted".into()));
        }
        let p = self.schema.len();
        let (scores, signs): (Vec<f64>, Vec<i8>) = match &self.regressor {
            Regressor::Linear(m) => m
                .coefficients
                .iter()
                .zip(&m.column_sd)
                .map(|(b, sd)| ((b * sd).abs(), if *b > 0.0 { 1 } else if *b < 0.0 { -1 } else { 0 }))
                .unzip(),
            Regressor::Trees(t) => (t.importance(), vec![0; p]),
            Regressor::Baseline(_) => (vec![0.0; p], vec![0; p]),
        };
        let n_selected = match &self.regressor {
            Regressor::Linear(m) => m.coefficients.iter().filter(|b| **b != 0.0).count(),
            _ => scores.iter().filter(|s| **s > 0.0).count(),
        };
        let mut ranked: Vec<FeatureScore> = self
            .schema
            .features
            .iter()
            .zip(scores.into_iter().zip(signs))
            .map(|(f, (score, sign))| FeatureScore {
                name: f.name.clone(),
                score,
                sign,
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(Importance { ranked, n_selected })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: self.family(),
            schema_hash: self.schema.hash(),
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format version {} is not supported",
                file.format_version
            )));
        }
        if file.schema_hash != file.model.schema.hash() {
            return Err(Error::Schema("stored schema hash does not match the stored schema".into()));
        }
        if file.kind != file.model.family() {
            return Err(Error::Schema("stored model kind does not match its parameters".into()));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn fit_regressor(params: &ModelParams, x: &DMatrix<f64>, y: &[f64]) -> Result<Regressor> {
    Ok(match params {
        ModelParams::Lasso { lambda, options } => Regressor::Linear(fit_lasso(x, y, *lambda, options, None)?),
        ModelParams::Ridge { lambda } => Regressor::Linear(fit_ridge(x, y, *lambda)?),
        ModelParams::Gbrt(p) => Regressor::Trees(fit_gbrt(x, y, p)?),
        ModelParams::Uniform => Regressor::Baseline(BaselinePredictor::fit(BaselineKind::Uniform, y, 0)?),
        ModelParams::Random { seed } => {
            Regressor::Baseline(BaselinePredictor::fit(BaselineKind::Random, y, *seed)?)
        }
    })
}

pub(crate) fn predict_regressor(r: &Regressor, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    match r {
        Regressor::Linear(m) => m.predict(x),
        Regressor::Trees(t) => t.predict(x),
        Regressor::Baseline(b) => b.predict(x.nrows()),
    }
}
