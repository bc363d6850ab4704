//! Run configuration: everything a pipeline run depends on, in one TOML file.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::did::TreatmentGroup;
use crate::error::{Error, Result};
use crate::eval::{CompareOptions, SplitSpec};
use crate::features::SCHEMA_VERSION;
use crate::models::{GbrtGrid, HyperGrid, LambdaGrid};
use crate::simulate::{Dimension, NoiseLevel, SimOptions};
use crate::synthgen::{IntRange, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub treatment_group: TreatmentGroup,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            treatment_group: TreatmentGroup::AllTeams,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub schema_version: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
        }
    }
}

/// Which residuals feed the period-level noise correction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePeriod {
    Train,
    #[default]
    Test,
}

/// Contests the pipeline simulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContestSelection {
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub commission_rate: f64,
    pub captain_bonus_amount: f64,
    pub noise_levels: Vec<NoiseLevel>,
    pub noise_period: NoisePeriod,
    pub dimensions: Vec<Dimension>,
    pub contests: ContestSelection,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let o = SimOptions::default();
        Self {
            n_boot: o.n_boot,
            seed: o.seed,
            commission_rate: o.commission_rate,
            captain_bonus_amount: o.captain_bonus_amount,
            noise_levels: NoiseLevel::ALL.to_vec(),
            noise_period: NoisePeriod::Test,
            dimensions: Dimension::STANDARD.to_vec(),
            contests: ContestSelection::Test,
        }
    }
}

impl SimulateConfig {
    pub fn options(&self, n_boot: usize, seed: u64) -> SimOptions {
        SimOptions {
            n_boot,
            seed,
            commission_rate: self.commission_rate,
            captain_bonus_amount: self.captain_bonus_amount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub address: String,
    /// Largest accepted `n_boot`.
    pub max_n_boot: usize,
    /// Largest accepted `n_boot × treated drivers` per request.
    pub max_work: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:8080".into(),
            max_n_boot: 20_000,
            max_work: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub estimate: EstimateConfig,
    pub features: FeatureConfig,
    pub split: SplitSpec,
    pub models: HyperGrid,
    pub evaluate: CompareOptions,
    pub simulate: SimulateConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            estimate: EstimateConfig::default(),
            features: FeatureConfig::default(),
            split: SplitSpec::default(),
            models: HyperGrid::default(),
            evaluate: CompareOptions::default(),
            simulate: SimulateConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    /// A few hundred drivers in three contests with a small model grid.
    /// Runs end to end in seconds.
    pub fn tiny() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2018, m, day).unwrap();
        let mut cfg = Self::default();
        cfg.synth.n_cities = 1;
        cfg.synth.contests_per_city = 3;
        cfg.synth.drivers_per_city = 300;
        cfg.synth.signups = IntRange::new(70, 90);
        cfg.synth.calendar_start = d(5, 1);
        cfg.synth.calendar_end = d(8, 31);
        // Contest k lies inside calendar slot k; split on slot boundaries.
        cfg.split = SplitSpec {
            train_end: cfg.synth.slot(0).end,
            val_start: cfg.synth.slot(1).start,
            val_end: cfg.synth.slot(1).end,
            test_start: cfg.synth.slot(2).start,
        };
        cfg.models.lasso = LambdaGrid::Relative {
            n: 5,
            min_ratio: 1e-2,
        };
        cfg.models.ridge = LambdaGrid::Relative {
            n: 3,
            min_ratio: 1e-3,
        };
        cfg.models.gbrt = GbrtGrid {
            n_trees: vec![20, 40],
            max_depth: vec![2],
            learning_rate: vec![0.1],
            subsample: vec![1.0],
            min_samples_leaf: 10,
            seed: 0,
        };
        cfg.models.scalings = vec![crate::features::Scaling::Standardize];
        cfg.evaluate.n_permutations = 499;
        cfg.simulate.n_boot = 200;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.split.validate()?;
        self.models.validate()?;
        if self.features.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported feature schema version {:?}; this build emits {SCHEMA_VERSION:?}",
                self.features.schema_version
            )));
        }
        self.simulate.options(self.simulate.n_boot, self.simulate.seed).validate()?;
        if self.simulate.noise_levels.is_empty() {
            return Err(Error::Config("simulate.noise_levels is empty".into()));
        }
        if self.serve.max_n_boot == 0 || self.serve.max_work == 0 {
            return Err(Error::Config("serve budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::tiny()] {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 11\n[simulate]\nn_boot = 50\n").unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.simulate.n_boot, 50);
        assert_eq!(cfg.synth, SynthConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_toml("sede = 1\n").is_err());
        assert!(RunConfig::from_toml("[features]\nschema_version = \"v9\"\n").is_err());
        assert!(RunConfig::from_toml("[simulate]\nn_boot = 0\n").is_err());
        assert!(RunConfig::from_toml("[split]\ntrain_end = 2018-07-15\n").is_err());
    }

    #[test]
    fn tiny_contests_fall_in_distinct_splits() {
        let cfg = RunConfig::tiny();
        cfg.validate().unwrap();
        assert!(cfg.split.train_end < cfg.split.val_start);
    }

    #[test]
    fn dimensions_in_toml() {
        let cfg = RunConfig::from_toml(
            "[simulate]\ndimensions = [\"captain_bonus\", { column = \"metric_rides\" }]\n",
        )
        .unwrap();
        assert_eq!(cfg.simulate.dimensions[1], Dimension::Column("metric_rides".into()));
    }
}
