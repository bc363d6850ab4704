//! Stage-by-stage orchestration over a run directory.
//!
//! ```text
//! <out>/run_config.toml
//! <out>/dataset/        generated contests
//! <out>/estimate/       ite.csv, contests.csv
//! <out>/features/       matrix.csv, schema.csv, split.csv, contests.json
//! <out>/train/          leaderboard.csv, selected.json, models/<family>.json
//! <out>/evaluate/       comparison.csv, error_analysis.csv, residuals.csv,
//!                       model_card.json, noise_period.json
//! <out>/simulate/       designs.csv, summary.csv, results.json
//! <out>/stages/*.done   completion markers
//! <out>/summary.json
//! ```
//!
//! Every artifact is a pure function of the run config, so repeated runs
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ContestSelection, NoisePeriod, RunConfig};
use crate::did::{estimate_ite, IteRecord};
use crate::error::{Error, Result};
use crate::eval::{compare_models, error_analysis, time_split, ComparisonRow, DataSplit, SplitRole};
use crate::features::{
    assemble_matrix, read_matrix, read_schema, write_matrix, write_schema, FeatureMatrix,
    FeatureSchema,
};
use crate::models::{grid_search, refit_on_train_plus_val, Importance, ModelConfig, ModelFamily, TrainedModel};
use crate::simulate::{
    enumerate_designs, residual_distribution, simulate_ate, summarize, ContestRows, Dimension,
    DesignOverride, NoiseCorrection, NoiseLevel, RankedDesign, SimulationResult, ROI_DEFINITION,
};
use crate::synthgen::{generate_world, read_dataset_dir, write_dataset_dir, ContestDataset, PerformanceMetric};
use crate::types::{ContestId, CityId, DriverId, Period, TeamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Estimate,
    Featurize,
    Train,
    Evaluate,
    Simulate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Estimate,
        Stage::Featurize,
        Stage::Train,
        Stage::Evaluate,
        Stage::Simulate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Estimate => "estimate",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Simulate => "simulate",
        }
    }

    /// Output sub-directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Generate => "dataset",
            Stage::Estimate => "estimate",
            Stage::Featurize => "features",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Simulate => "simulate",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Overwrite existing outputs.
    pub force: bool,
    /// Skip stages already completed under the same config.
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io(path, fs::write(path, text))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    io(path, w.flush())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn is_non_empty_dir(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    Ok(io(path, fs::read_dir(path))?.next().is_some())
}

fn clear_dir(path: &Path) -> Result<()> {
    if path.exists() {
        io(path, fs::remove_dir_all(path))?;
    }
    io(path, fs::create_dir_all(path))
}

impl RunDir {
    /// Opens `root` for `cfg`, writing `run_config.toml`. A directory holding
    /// a different config is refused unless `force`, which also clears every
    /// completion marker.
    pub fn prepare(root: &Path, cfg: &RunConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        io(root, fs::create_dir_all(root))?;
        let dir = Self {
            root: root.to_path_buf(),
        };
        let path = dir.config_path();
        let text = cfg.to_toml()?;
        if path.exists() {
            let existing = io(&path, fs::read_to_string(&path))?;
            if existing != text {
                if !opts.force {
                    return Err(Error::Config(format!(
                        "{} holds a run with a different config; pass --force to replace it",
                        root.display()
                    )));
                }
                clear_dir(&dir.root.join("stages"))?;
            }
        } else if !opts.force && is_non_empty_dir(root)? {
            return Err(Error::Config(format!(
                "{} is not empty and is not a run directory; pass --force to use it anyway",
                root.display()
            )));
        }
        io(&path, fs::write(&path, text))?;
        Ok(dir)
    }

    /// Opens an existing run directory and its config.
    pub fn open(root: &Path) -> Result<(Self, RunConfig)> {
        let dir = Self {
            root: root.to_path_buf(),
        };
        let cfg = RunConfig::load(&dir.config_path())?;
        Ok((dir, cfg))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("run_config.toml")
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.done", stage.name()))
    }

    pub fn is_done(&self, stage: Stage, fingerprint: &str) -> Result<bool> {
        let m = self.marker(stage);
        if !m.exists() {
            return Ok(false);
        }
        Ok(io(&m, fs::read_to_string(&m))?.trim() == fingerprint)
    }

    pub fn completed(&self, fingerprint: &str) -> Result<Vec<Stage>> {
        let mut done = Vec::new();
        for s in Stage::ALL {
            if self.is_done(s, fingerprint)? {
                done.push(s);
            }
        }
        Ok(done)
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }
}

/// Runs one stage, checking that its inputs exist and that it will not
/// clobber outputs without `force`.
pub fn run_stage(dir: &RunDir, cfg: &RunConfig, stage: Stage, opts: RunOptions) -> Result<StageOutcome> {
    let fp = cfg.fingerprint()?;
    if opts.resume && dir.is_done(stage, &fp)? {
        tracing::info!(stage = stage.name(), "already complete; skipped");
        return Ok(StageOutcome::Skipped);
    }
    let mut missing = Vec::new();
    for up in &Stage::ALL[..stage.index()] {
        if !dir.is_done(*up, &fp)? {
            missing.push(up.name());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "stage {} needs the output of {}; run {} first",
            stage.name(),
            missing.join(", "),
            if missing.len() == 1 { "it" } else { "them" }
        )));
    }
    let out = dir.stage_dir(stage);
    if is_non_empty_dir(&out)? && !opts.force && !opts.resume {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite or --resume to skip finished stages",
            out.display()
        )));
    }
    clear_dir(&out)?;
    for down in &Stage::ALL[stage.index()..] {
        let m = dir.marker(*down);
        if m.exists() {
            io(&m, fs::remove_file(&m))?;
        }
    }
    tracing::info!(stage = stage.name(), "running");
    let report = match stage {
        Stage::Generate => generate(dir, cfg),
        Stage::Estimate => estimate(dir, cfg),
        Stage::Featurize => featurize(dir, cfg),
        Stage::Train => train(dir, cfg),
        Stage::Evaluate => evaluate(dir, cfg),
        Stage::Simulate => simulate(dir, cfg),
    }
    .map_err(|e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    })?;
    write_json(&dir.path(stage, "stage.json"), &report)?;
    let stages = dir.root.join("stages");
    io(&stages, fs::create_dir_all(&stages))?;
    let m = dir.marker(stage);
    io(&m, fs::write(&m, format!("{fp}\n")))?;
    write_summary(dir, cfg)?;
    Ok(StageOutcome::Ran)
}

/// Every stage in order.
pub fn run_pipeline(root: &Path, cfg: &RunConfig, opts: RunOptions) -> Result<RunSummary> {
    let dir = RunDir::prepare(root, cfg, opts)?;
    for stage in Stage::ALL {
        run_stage(&dir, cfg, stage, opts)?;
    }
    read_json(&dir.root.join("summary.json"))
}

// ---- generate --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub n_cities: usize,
    pub n_contests: usize,
    pub n_unique_drivers: usize,
    pub n_participations: usize,
}

fn generate(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let world = generate_world(&cfg.synth, cfg.seed)?;
    let m = write_dataset_dir(&dir.stage_dir(Stage::Generate), &world)?;
    Ok(serde_json::to_value(GenerateReport {
        n_cities: m.summary.n_cities,
        n_contests: m.summary.n_contests,
        n_unique_drivers: m.summary.n_unique_drivers,
        n_participations: m.summary.n_participations,
    })?)
}

fn load_datasets(dir: &RunDir) -> Result<Vec<(ContestDataset, Option<crate::synthgen::GroundTruth>)>> {
    Ok(read_dataset_dir(&dir.stage_dir(Stage::Generate))?.1)
}

// ---- estimate --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IteRow {
    contest_id: ContestId,
    driver_id: DriverId,
    team_id: TeamId,
    delta_r: f64,
    ite: f64,
    baseline_start: NaiveDate,
    baseline_end: NaiveDate,
    contest_start: NaiveDate,
    contest_end: NaiveDate,
}

impl From<&IteRecord> for IteRow {
    fn from(r: &IteRecord) -> Self {
        Self {
            contest_id: r.contest_id,
            driver_id: r.driver_id,
            team_id: r.team_id,
            delta_r: r.delta_r,
            ite: r.ite,
            baseline_start: r.baseline_period.start,
            baseline_end: r.baseline_period.end,
            contest_start: r.contest_period.start,
            contest_end: r.contest_period.end,
        }
    }
}

impl IteRow {
    fn record(&self) -> Result<IteRecord> {
        Ok(IteRecord {
            contest_id: self.contest_id,
            driver_id: self.driver_id,
            team_id: self.team_id,
            delta_r: self.delta_r,
            ite: self.ite,
            baseline_period: Period::new(self.baseline_start, self.baseline_end)?,
            contest_period: Period::new(self.contest_start, self.contest_end)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestEstimateRow {
    pub contest_id: ContestId,
    pub n_treated: usize,
    pub n_control: usize,
    pub control_trend: f64,
    pub atet: f64,
    pub atet_se: f64,
    /// Known only for synthetic data.
    pub true_atet: Option<f64>,
}

fn estimate(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let data = load_datasets(dir)?;
    let mut ite_rows = Vec::new();
    let mut contest_rows = Vec::new();
    for (ds, truth) in &data {
        let est = estimate_ite(ds, cfg.estimate.treatment_group)?;
        let atet = est.atet()?;
        ite_rows.extend(est.records.iter().map(IteRow::from));
        contest_rows.push(ContestEstimateRow {
            contest_id: ds.id,
            n_treated: atet.n,
            n_control: est.trend.n_control,
            control_trend: est.trend.value,
            atet: atet.atet,
            atet_se: atet.se,
            true_atet: truth.as_ref().map(|t| t.true_atet),
        });
    }
    write_csv(&dir.path(Stage::Estimate, "ite.csv"), &ite_rows)?;
    write_csv(&dir.path(Stage::Estimate, "contests.csv"), &contest_rows)?;
    let within_2se = contest_rows
        .iter()
        .filter(|r| r.true_atet.is_some_and(|t| (r.atet - t).abs() <= 2.0 * r.atet_se))
        .count();
    Ok(serde_json::json!({
        "n_contests": contest_rows.len(),
        "n_ite_records": ite_rows.len(),
        "n_contests_true_atet_within_2se": within_2se,
    }))
}

fn load_estimates(dir: &RunDir) -> Result<Vec<ContestEstimateRow>> {
    read_csv(&dir.path(Stage::Estimate, "contests.csv"))
}

// ---- featurize -------------------------------------------------------------

/// Listing entry for one contest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestInfo {
    pub contest_id: ContestId,
    pub city_id: CityId,
    pub province: u8,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub contest_days: u32,
    pub split: SplitRole,
    pub n_signups: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub n_teams: usize,
    pub n_groups: usize,
    pub team_size: usize,
    pub group_size: usize,
    pub prize_schedule: [f64; 5],
    pub captain_bonus: bool,
    pub fifth_team_bonus: bool,
    pub worst_member_included: bool,
    pub performance_metric: PerformanceMetric,
    pub atet: f64,
    pub atet_se: f64,
    pub true_atet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitRow {
    contest_id: ContestId,
    role: SplitRole,
}

fn featurize(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let data = load_datasets(dir)?;
    let datasets: Vec<ContestDataset> = data.into_iter().map(|(d, _)| d).collect();
    let records: Vec<IteRecord> = read_csv::<IteRow>(&dir.path(Stage::Estimate, "ite.csv"))?
        .iter()
        .map(IteRow::record)
        .collect::<Result<_>>()?;
    let schema = FeatureSchema::standard();
    let matrix = assemble_matrix(&datasets, &records, &schema)?;
    let periods: Vec<(ContestId, Period)> = datasets
        .iter()
        .map(|d| Ok((d.id, d.contest_period()?)))
        .collect::<Result<_>>()?;
    let split = time_split(&periods, &cfg.split)?;

    let estimates: BTreeMap<ContestId, ContestEstimateRow> =
        load_estimates(dir)?.into_iter().map(|r| (r.contest_id, r)).collect();
    let mut infos = Vec::with_capacity(datasets.len());
    for ds in &datasets {
        let est = estimates
            .get(&ds.id)
            .ok_or_else(|| Error::Data(format!("no estimate for contest {}", ds.id)))?;
        let period = ds.contest_period()?;
        infos.push(ContestInfo {
            contest_id: ds.id,
            city_id: ds.city.id,
            province: ds.city.province,
            start_date: period.start,
            end_date: period.end,
            contest_days: ds.design.contest_days,
            split: split.role(ds.id),
            n_signups: ds.drivers.len(),
            n_treated: est.n_treated,
            n_control: est.n_control,
            n_teams: ds.teams.len(),
            n_groups: ds.contest_groups.len(),
            team_size: ds.design.team_size,
            group_size: ds.design.group_size,
            prize_schedule: ds.design.prize_schedule,
            captain_bonus: ds.design.captain_bonus,
            fifth_team_bonus: ds.design.prize_schedule[4] > 0.0,
            worst_member_included: !ds.design.exclude_worst_member,
            performance_metric: ds.design.performance_metric,
            atet: est.atet,
            atet_se: est.atet_se,
            true_atet: est.true_atet,
        });
    }
    let split_rows: Vec<SplitRow> = infos
        .iter()
        .map(|i| SplitRow {
            contest_id: i.contest_id,
            role: i.split,
        })
        .collect();
    write_matrix(&dir.path(Stage::Featurize, "matrix.csv"), &matrix)?;
    write_schema(&dir.path(Stage::Featurize, "schema.csv"), &schema)?;
    write_csv(&dir.path(Stage::Featurize, "split.csv"), &split_rows)?;
    write_json(&dir.path(Stage::Featurize, "contests.json"), &infos)?;
    let (tr, va, te) = split.apply(&matrix);
    Ok(serde_json::json!({
        "schema_version": schema.version,
        "schema_hash": schema.hash(),
        "n_features": schema.len(),
        "n_rows": matrix.n_rows(),
        "contests": {
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "excluded": split.excluded.len(),
        },
        "rows": { "train": tr.n_rows(), "val": va.n_rows(), "test": te.n_rows() },
    }))
}

fn load_features(dir: &RunDir) -> Result<(FeatureMatrix, DataSplit)> {
    let schema = read_schema(&dir.path(Stage::Featurize, "schema.csv"))?;
    let matrix = read_matrix(&dir.path(Stage::Featurize, "matrix.csv"), &schema)?;
    let mut split = DataSplit::default();
    for row in read_csv::<SplitRow>(&dir.path(Stage::Featurize, "split.csv"))? {
        let set = match row.role {
            SplitRole::Train => &mut split.train,
            SplitRole::Val => &mut split.val,
            SplitRole::Test => &mut split.test,
            SplitRole::Excluded => &mut split.excluded,
        };
        set.insert(row.contest_id);
    }
    Ok((matrix, split))
}

fn load_contests(dir: &RunDir) -> Result<Vec<ContestInfo>> {
    read_json(&dir.path(Stage::Featurize, "contests.json"))
}

// ---- train -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LeaderboardCsvRow {
    family: ModelFamily,
    grid_index: usize,
    scaling: String,
    params: String,
    val_rmse: f64,
    converged: bool,
    selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub family: ModelFamily,
    pub config: ModelConfig,
    pub val_rmse: f64,
    pub file: String,
}

fn model_file(family: ModelFamily) -> String {
    format!("models/{}.json", family.name())
}

fn train(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let (matrix, split) = load_features(dir)?;
    let (tr, va, _) = split.apply(&matrix);
    let result = grid_search(&tr, &va, &cfg.models)?;
    let rows: Vec<LeaderboardCsvRow> = result
        .leaderboard
        .iter()
        .map(|r| LeaderboardCsvRow {
            family: r.family,
            grid_index: r.grid_index,
            scaling: r.config.scaling.name().to_string(),
            params: r.config.params.describe(),
            val_rmse: r.val_rmse,
            converged: r.converged,
            selected: r.selected,
        })
        .collect();
    write_csv(&dir.path(Stage::Train, "leaderboard.csv"), &rows)?;
    let models_dir = dir.path(Stage::Train, "models");
    io(&models_dir, fs::create_dir_all(&models_dir))?;
    let mut selected = Vec::new();
    for config in &result.best {
        let family = config.family();
        let val_rmse = result
            .leaderboard
            .iter()
            .find(|r| r.selected && r.family == family)
            .map(|r| r.val_rmse)
            .ok_or_else(|| Error::Fit(format!("no selected {family} row")))?;
        let model = refit_on_train_plus_val(config, &tr, &va)?;
        let file = model_file(family);
        model.save(&dir.path(Stage::Train, &file))?;
        selected.push(SelectedModel {
            family,
            config: config.clone(),
            val_rmse,
            file,
        });
    }
    write_json(&dir.path(Stage::Train, "selected.json"), &selected)?;
    Ok(serde_json::json!({
        "n_candidates": rows.len(),
        "selected": selected.iter().map(|s| serde_json::json!({
            "family": s.family,
            "params": s.config.params.describe(),
            "scaling": s.config.scaling.name(),
            "val_rmse": s.val_rmse,
        })).collect::<Vec<_>>(),
    }))
}

fn load_selected(dir: &RunDir) -> Result<Vec<SelectedModel>> {
    read_json(&dir.path(Stage::Train, "selected.json"))
}

/// The non-baseline family with the lowest validation RMSE.
fn primary_of(selected: &[SelectedModel]) -> Result<&SelectedModel> {
    selected
        .iter()
        .filter(|s| !s.family.is_baseline())
        .min_by(|a, b| a.val_rmse.total_cmp(&b.val_rmse))
        .ok_or_else(|| Error::Config("no learned model family was trained".into()))
}

// ---- evaluate --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub family: ModelFamily,
    pub config: ModelConfig,
    pub schema_version: String,
    pub schema_hash: String,
    pub val_rmse: f64,
    pub test_rmse: f64,
    pub uniform_test_rmse: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub importance: Importance,
    pub comparison: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComparisonCsvRow {
    model: String,
    family: ModelFamily,
    test_rmse: f64,
    reduction_pct: Option<f64>,
    n_selected: usize,
    p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AssociationCsvRow {
    target: &'static str,
    feature: String,
    kind: &'static str,
    statistic: Option<f64>,
    p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResidualRow {
    contest_id: ContestId,
    driver_id: DriverId,
    label: f64,
    prediction: f64,
    signed_error: f64,
    absolute_error: f64,
}

fn evaluate(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let (matrix, split) = load_features(dir)?;
    let (tr, _, te) = split.apply(&matrix);
    let selected = load_selected(dir)?;
    let models: Vec<(String, TrainedModel)> = selected
        .iter()
        .map(|s| Ok((s.family.name().to_string(), TrainedModel::load(&dir.path(Stage::Train, &s.file))?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(String, &TrainedModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let comparison = compare_models(&refs, &te, &cfg.evaluate)?;
    let csv_rows: Vec<ComparisonCsvRow> = comparison
        .iter()
        .map(|r| ComparisonCsvRow {
            model: r.name.clone(),
            family: r.family,
            test_rmse: r.rmse,
            reduction_pct: r.reduction_pct,
            n_selected: r.n_selected,
            p_value: r.p_value,
        })
        .collect();
    write_csv(&dir.path(Stage::Evaluate, "comparison.csv"), &csv_rows)?;

    let primary = primary_of(&selected)?;
    let model = &models
        .iter()
        .find(|(n, _)| n == primary.family.name())
        .expect("primary model loaded")
        .1;
    let report = error_analysis(model, &te)?;
    let assoc: Vec<AssociationCsvRow> = report
        .signed_associations
        .iter()
        .chain(&report.absolute_associations)
        .map(|a| AssociationCsvRow {
            target: a.target.name(),
            feature: a.feature.clone(),
            kind: a.kind.name(),
            statistic: a.statistic,
            p_value: a.p_value,
        })
        .collect();
    write_csv(&dir.path(Stage::Evaluate, "error_analysis.csv"), &assoc)?;
    let residuals: Vec<ResidualRow> = (0..te.n_rows())
        .map(|i| ResidualRow {
            contest_id: te.keys[i].contest_id,
            driver_id: te.keys[i].driver_id,
            label: te.labels[i],
            prediction: te.labels[i] + report.signed[i],
            signed_error: report.signed[i],
            absolute_error: report.absolute[i],
        })
        .collect();
    write_csv(&dir.path(Stage::Evaluate, "residuals.csv"), &residuals)?;

    let period_rows = match cfg.simulate.noise_period {
        NoisePeriod::Train => &tr,
        NoisePeriod::Test => &te,
    };
    let noise = residual_distribution(model, period_rows, NoiseLevel::Period)?;
    write_json(&dir.path(Stage::Evaluate, "noise_period.json"), &noise)?;

    let row = comparison
        .iter()
        .find(|r| r.family == primary.family)
        .expect("primary compared");
    let card = ModelCard {
        family: primary.family,
        config: primary.config.clone(),
        schema_version: model.schema.version.clone(),
        schema_hash: model.schema.hash(),
        val_rmse: primary.val_rmse,
        test_rmse: row.rmse,
        uniform_test_rmse: comparison
            .iter()
            .find(|r| r.family == ModelFamily::Uniform)
            .map(|r| r.rmse),
        reduction_pct: row.reduction_pct,
        importance: model.importance()?,
        comparison: comparison.clone(),
    };
    write_json(&dir.path(Stage::Evaluate, "model_card.json"), &card)?;
    Ok(serde_json::json!({
        "primary_model": primary.family,
        "test_rows": te.n_rows(),
        "comparison": comparison,
        "noise_period": noise,
    }))
}

// ---- simulate --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DesignCsvRow {
    contest_id: ContestId,
    noise_level: NoiseLevel,
    rank: usize,
    design_id: String,
    is_best: bool,
    is_worst: bool,
    is_original: bool,
    ate: f64,
    ate_lo: f64,
    ate_hi: f64,
    roi: f64,
    roi_lo: f64,
    roi_hi: f64,
    prize_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryCsvRow {
    contest_id: ContestId,
    noise_level: NoiseLevel,
    role: crate::simulate::SummaryRole,
    design_id: String,
    ate: f64,
    ate_lo: f64,
    ate_hi: f64,
    roi: f64,
    roi_lo: f64,
    roi_hi: f64,
}

fn settings_label(settings: &[(Dimension, bool)]) -> String {
    settings
        .iter()
        .map(|(d, on)| format!("{d}={}", if *on { "on" } else { "off" }))
        .collect::<Vec<_>>()
        .join(",")
}

fn simulate(dir: &RunDir, cfg: &RunConfig) -> Result<serde_json::Value> {
    let art = Artifacts::load(dir.root())?;
    let chosen: Vec<&ContestInfo> = art
        .contests
        .iter()
        .filter(|c| match cfg.simulate.contests {
            ContestSelection::Test => c.split == SplitRole::Test,
            ContestSelection::All => true,
        })
        .collect();
    let opts = cfg.simulate.options(cfg.simulate.n_boot, cfg.simulate.seed);
    let mut designs = Vec::new();
    let mut summary = Vec::new();
    let mut rankings: Vec<Vec<RankedDesign>> = Vec::new();
    for info in chosen {
        let contest = art.contest_rows(info.contest_id)?;
        for level in &cfg.simulate.noise_levels {
            let noise = art.noise(&contest, *level)?;
            let ranked = enumerate_designs(&art.model, &contest, &cfg.simulate.dimensions, &noise, &opts)?;
            for d in &ranked {
                let r = &d.result;
                designs.push(DesignCsvRow {
                    contest_id: r.contest_id,
                    noise_level: *level,
                    rank: d.rank,
                    design_id: settings_label(&d.settings),
                    is_best: d.is_best,
                    is_worst: d.is_worst,
                    is_original: d.is_original,
                    ate: r.ate,
                    ate_lo: r.ate_ci[0],
                    ate_hi: r.ate_ci[1],
                    roi: r.roi,
                    roi_lo: r.roi_ci[0],
                    roi_hi: r.roi_ci[1],
                    prize_cost: r.prize_cost,
                });
            }
            for s in summarize(&ranked) {
                summary.push(SummaryCsvRow {
                    contest_id: s.contest_id,
                    noise_level: s.noise_level,
                    role: s.role,
                    design_id: s.design_id,
                    ate: s.ate,
                    ate_lo: s.ate_ci[0],
                    ate_hi: s.ate_ci[1],
                    roi: s.roi,
                    roi_lo: s.roi_ci[0],
                    roi_hi: s.roi_ci[1],
                });
            }
            rankings.push(ranked);
        }
    }
    write_csv(&dir.path(Stage::Simulate, "designs.csv"), &designs)?;
    write_csv(&dir.path(Stage::Simulate, "summary.csv"), &summary)?;
    write_json(
        &dir.path(Stage::Simulate, "results.json"),
        &serde_json::json!({
            "roi_definition": ROI_DEFINITION,
            "commission_rate": opts.commission_rate,
            "captain_bonus_amount": opts.captain_bonus_amount,
            "rankings": rankings,
        }),
    )?;
    Ok(serde_json::json!({
        "roi_definition": ROI_DEFINITION,
        "n_contests": rankings.len() / cfg.simulate.noise_levels.len().max(1),
        "n_simulations": designs.len(),
    }))
}

// ---- summary ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_fingerprint: String,
    pub completed_stages: Vec<Stage>,
    pub reports: BTreeMap<String, serde_json::Value>,
    pub artifacts: Vec<ArtifactEntry>,
}

fn list_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = root.join(rel);
    let mut entries: Vec<_> = io(&here, fs::read_dir(&here))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(&here, e))?;
    entries.sort();
    for name in entries {
        let r = rel.join(&name);
        if root.join(&r).is_dir() {
            list_files(root, &r, out)?;
        } else {
            out.push(r);
        }
    }
    Ok(())
}

fn write_summary(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let fp = cfg.fingerprint()?;
    let completed = dir.completed(&fp)?;
    let mut reports = BTreeMap::new();
    for s in &completed {
        reports.insert(s.name().to_string(), read_json(&dir.path(*s, "stage.json"))?);
    }
    let mut files = Vec::new();
    list_files(&dir.root, Path::new(""), &mut files)?;
    let mut artifacts = Vec::new();
    for rel in files {
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if name == "summary.json" {
            continue;
        }
        let path = dir.root.join(&rel);
        let bytes = io(&path, fs::read(&path))?;
        artifacts.push(ArtifactEntry {
            path: name,
            bytes: bytes.len() as u64,
            sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
        });
    }
    let summary = RunSummary {
        seed: cfg.seed,
        config_fingerprint: fp,
        completed_stages: completed,
        reports,
        artifacts,
    };
    write_json(&dir.root.join("summary.json"), &summary)
}

// ---- serving ---------------------------------------------------------------

/// What-if request for one contest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    pub contest_id: ContestId,
    #[serde(default)]
    pub overrides: DesignOverride,
    #[serde(default)]
    pub noise_level: NoiseLevel,
    pub n_boot: Option<usize>,
    pub seed: Option<u64>,
}

/// All on/off combinations of `dimensions` (default C1/C2/C3) for one contest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateRequest {
    pub contest_id: ContestId,
    pub dimensions: Option<Vec<Dimension>>,
    #[serde(default)]
    pub noise_level: NoiseLevel,
    pub n_boot: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestErrorKind {
    BadRequest,
    NotFound,
    OverBudget,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestError {
    pub kind: RequestErrorKind,
    pub message: String,
}

impl RequestError {
    fn new(kind: RequestErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for RequestError {}

impl From<Error> for RequestError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::InvalidDesign(_) | Error::Schema(_) | Error::Config(_) | Error::Data(_) => {
                RequestErrorKind::BadRequest
            }
            _ => RequestErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

/// Read-only artifacts needed to answer simulation requests.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub config: RunConfig,
    pub contests: Vec<ContestInfo>,
    pub matrix: FeatureMatrix,
    pub model: TrainedModel,
    pub card: ModelCard,
    pub period_noise: NoiseCorrection,
}

impl Artifacts {
    /// Loads a run directory whose `evaluate` stage has completed.
    pub fn load(root: &Path) -> Result<Self> {
        let (dir, config) = RunDir::open(root)?;
        let fp = config.fingerprint()?;
        for s in [Stage::Featurize, Stage::Train, Stage::Evaluate] {
            if !dir.is_done(s, &fp)? {
                return Err(Error::Config(format!(
                    "{} has no completed {} stage",
                    root.display(),
                    s.name()
                )));
            }
        }
        let (matrix, _) = load_features(&dir)?;
        let contests = load_contests(&dir)?;
        let card: ModelCard = read_json(&dir.path(Stage::Evaluate, "model_card.json"))?;
        let model = TrainedModel::load(&dir.path(Stage::Train, &model_file(card.family)))?;
        let period_noise = read_json(&dir.path(Stage::Evaluate, "noise_period.json"))?;
        Ok(Self {
            config,
            contests,
            matrix,
            model,
            card,
            period_noise,
        })
    }

    pub fn contest(&self, id: ContestId) -> Option<&ContestInfo> {
        self.contests.iter().find(|c| c.contest_id == id)
    }

    pub fn contest_rows(&self, id: ContestId) -> Result<ContestRows> {
        let info = self
            .contest(id)
            .ok_or_else(|| Error::Data(format!("unknown contest {id}")))?;
        ContestRows::new(self.matrix.for_contest(id), info.n_groups)
    }

    pub fn noise(&self, contest: &ContestRows, level: NoiseLevel) -> Result<NoiseCorrection> {
        match level {
            NoiseLevel::None => Ok(NoiseCorrection::none()),
            NoiseLevel::Period => Ok(self.period_noise.clone()),
            NoiseLevel::Contest => residual_distribution(&self.model, &contest.rows, NoiseLevel::Contest),
        }
    }

    fn checked(
        &self,
        contest_id: ContestId,
        n_boot: Option<usize>,
        n_designs: usize,
    ) -> std::result::Result<(ContestRows, usize), RequestError> {
        if self.contest(contest_id).is_none() {
            return Err(RequestError::new(
                RequestErrorKind::NotFound,
                format!("unknown contest {contest_id}"),
            ));
        }
        let contest = self.contest_rows(contest_id)?;
        let n_boot = n_boot.unwrap_or(self.config.simulate.n_boot);
        if n_boot == 0 {
            return Err(RequestError::new(RequestErrorKind::BadRequest, "n_boot must be at least 1"));
        }
        let budget = &self.config.serve;
        let work = n_boot
            .saturating_mul(contest.rows.n_rows())
            .saturating_mul(n_designs);
        if n_boot > budget.max_n_boot || work > budget.max_work {
            return Err(RequestError::new(
                RequestErrorKind::OverBudget,
                format!(
                    "request needs {work} resampled rows (n_boot {n_boot}); the limits are n_boot ≤ {} and {} rows; lower n_boot",
                    budget.max_n_boot, budget.max_work
                ),
            ));
        }
        Ok((contest, n_boot))
    }

    pub fn simulate(&self, req: &SimulateRequest) -> std::result::Result<SimulationResult, RequestError> {
        let (contest, n_boot) = self.checked(req.contest_id, req.n_boot, 1)?;
        let noise = self.noise(&contest, req.noise_level)?;
        let opts = self
            .config
            .simulate
            .options(n_boot, req.seed.unwrap_or(self.config.simulate.seed));
        Ok(simulate_ate(&self.model, &contest, &req.overrides, &noise, &opts)?)
    }

    pub fn enumerate(&self, req: &EnumerateRequest) -> std::result::Result<Vec<RankedDesign>, RequestError> {
        let dims = req
            .dimensions
            .clone()
            .unwrap_or_else(|| self.config.simulate.dimensions.clone());
        if dims.len() > crate::simulate::MAX_DIMENSIONS {
            return Err(RequestError::new(
                RequestErrorKind::BadRequest,
                format!("at most {} dimensions", crate::simulate::MAX_DIMENSIONS),
            ));
        }
        let (contest, n_boot) = self.checked(req.contest_id, req.n_boot, 1 << dims.len())?;
        let noise = self.noise(&contest, req.noise_level)?;
        let opts = self
            .config
            .simulate
            .options(n_boot, req.seed.unwrap_or(self.config.simulate.seed));
        Ok(enumerate_designs(&self.model, &contest, &dims, &noise, &opts)?)
    }
}

/// Canonical JSON text of a response body, shared by the CLI and the server.
pub fn to_response_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
