//! Counterfactual contest designs: rewrite design columns, predict ITEs,
//! add residual noise, bootstrap the ATE and ROI.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSchema};
use crate::models::TrainedModel;
use crate::stats::{self, Welford};
use crate::types::{derive_seed, ContestId};

pub const MAX_DIMENSIONS: usize = 20;

const PRIZE_COLUMNS: [&str; 5] = [
    "prize_rank1",
    "prize_rank2",
    "prize_rank3",
    "prize_rank4",
    "prize_rank5",
];

/// Changes to a contest's design. Unset fields keep the original value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignOverride {
    /// C1: captain of the top team earns a bonus.
    pub captain_bonus: Option<bool>,
    /// C2: the 5th team in each group is paid. Enabling it on a contest
    /// without a 5th prize sets that prize to half the 4th.
    pub fifth_team_bonus: Option<bool>,
    /// C3: the worst member's score counts toward team performance.
    pub worst_member_included: Option<bool>,
    pub prize_schedule: Option<[f64; 5]>,
    /// Raw values for other design-derived columns.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub columns: BTreeMap<String, f64>,
}

impl DesignOverride {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Stable text label, `original` for the identity override.
    pub fn label(&self) -> String {
        if self.is_identity() {
            return "original".into();
        }
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut parts = Vec::new();
        if let Some(b) = self.captain_bonus {
            parts.push(format!("captain_bonus={}", onoff(b)));
        }
        if let Some(b) = self.fifth_team_bonus {
            parts.push(format!("fifth_team_bonus={}", onoff(b)));
        }
        if let Some(b) = self.worst_member_included {
            parts.push(format!("worst_member_included={}", onoff(b)));
        }
        if let Some(p) = self.prize_schedule {
            let p: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            parts.push(format!("prize_schedule={}", p.join("/")));
        }
        for (k, v) in &self.columns {
            parts.push(format!("{k}={v}"));
        }
        parts.join(",")
    }

    fn set(&mut self, dim: &Dimension, on: bool) {
        match dim {
            Dimension::CaptainBonus => self.captain_bonus = Some(on),
            Dimension::FifthTeamBonus => self.fifth_team_bonus = Some(on),
            Dimension::WorstMemberIncluded => self.worst_member_included = Some(on),
            Dimension::Column(name) => {
                self.columns.insert(name.clone(), if on { 1.0 } else { 0.0 });
            }
        }
    }
}

/// A binary design choice enumerated by [`enumerate_designs`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    CaptainBonus,
    FifthTeamBonus,
    WorstMemberIncluded,
    /// A design-derived dummy column toggled between 0 and 1.
    Column(String),
}

impl Dimension {
    pub const STANDARD: [Dimension; 3] = [
        Dimension::CaptainBonus,
        Dimension::FifthTeamBonus,
        Dimension::WorstMemberIncluded,
    ];
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dimension::CaptainBonus => f.write_str("captain_bonus"),
            Dimension::FifthTeamBonus => f.write_str("fifth_team_bonus"),
            Dimension::WorstMemberIncluded => f.write_str("worst_member_included"),
            Dimension::Column(c) => f.write_str(c),
        }
    }
}

fn column(schema: &FeatureSchema, name: &str) -> Result<usize> {
    let j = schema
        .index_of(name)
        .ok_or_else(|| Error::Schema(format!("schema has no column {name}")))?;
    if !schema.features[j].design_derived {
        return Err(Error::InvalidDesign(format!(
            "{name} is not a design-derived column and cannot be overridden"
        )));
    }
    Ok(j)
}

fn single_contest(rows: &FeatureMatrix) -> Result<ContestId> {
    let ids = rows.contest_ids();
    match ids.as_slice() {
        [] => Err(Error::Data("no rows for the contest".into())),
        [id] if rows.keys.iter().all(|k| k.contest_id == *id) => Ok(*id),
        _ => Err(Error::Data(format!(
            "rows span {} contests; expected one",
            ids.len()
        ))),
    }
}

/// `rows` with design columns rewritten per `ov`. Everything else is
/// untouched; the model applies its own frozen scaling at prediction time.
pub fn counterfactual_matrix(rows: &FeatureMatrix, ov: &DesignOverride) -> Result<FeatureMatrix> {
    single_contest(rows)?;
    let mut out = rows.clone();
    if ov.is_identity() {
        return Ok(out);
    }
    let schema = &rows.schema;
    let n = rows.n_rows();

    let mut raw = Vec::with_capacity(ov.columns.len());
    for (name, v) in &ov.columns {
        if !v.is_finite() {
            return Err(Error::InvalidDesign(format!("{name} override is not finite")));
        }
        raw.push((column(schema, name)?, *v));
    }
    for (j, v) in raw {
        out.values.column_mut(j).fill(v);
    }

    let needs_prizes = ov.prize_schedule.is_some() || ov.fifth_team_bonus.is_some();
    if needs_prizes {
        let prize: Vec<usize> = PRIZE_COLUMNS
            .iter()
            .map(|c| column(schema, c))
            .collect::<Result<_>>()?;
        let total = column(schema, "prize_total")?;
        let fifth = column(schema, "rewards_5th")?;
        if let Some(p) = ov.prize_schedule {
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidDesign(
                    "prizes must be finite and non-negative".into(),
                ));
            }
            for i in 0..n {
                for (k, &j) in prize.iter().enumerate() {
                    out.values[(i, j)] = p[k];
                }
            }
        }
        for i in 0..n {
            match ov.fifth_team_bonus {
                Some(true) if out.values[(i, prize[4])] <= 0.0 => {
                    let fourth = out.values[(i, prize[3])];
                    if fourth <= 0.0 {
                        return Err(Error::InvalidDesign(
                            "cannot pay a 5th team when the 4th team is unpaid".into(),
                        ));
                    }
                    out.values[(i, prize[4])] = fourth / 2.0;
                }
                Some(false) => out.values[(i, prize[4])] = 0.0,
                _ => {}
            }
            let sum: f64 = prize.iter().map(|&j| out.values[(i, j)]).sum();
            out.values[(i, total)] = sum;
            out.values[(i, fifth)] = if out.values[(i, prize[4])] > 0.0 { 1.0 } else { 0.0 };
        }
    }
    let dummy = |b: bool| if b { 1.0 } else { 0.0 };
    if let Some(b) = ov.captain_bonus {
        out.values.column_mut(column(schema, "captain_bonus")?).fill(dummy(b));
    }
    if let Some(b) = ov.worst_member_included {
        out.values
            .column_mut(column(schema, "exclude_worst_member")?)
            .fill(dummy(!b));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    #[default]
    None,
    /// Residuals over a whole evaluation period.
    Period,
    /// Residuals of the contest being simulated.
    Contest,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 3] = [NoiseLevel::None, NoiseLevel::Period, NoiseLevel::Contest];

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::None => "none",
            NoiseLevel::Period => "period",
            NoiseLevel::Contest => "contest",
        }
    }
}

impl std::str::FromStr for NoiseLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseLevel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise level {s:?}")))
    }
}

/// Gaussian fitted to `ŷ − y` residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCorrection {
    pub level: NoiseLevel,
    pub mean: f64,
    pub sd: f64,
    pub n_rows: usize,
    /// Contests whose residuals were used.
    pub source: Vec<ContestId>,
}

impl NoiseCorrection {
    pub fn none() -> Self {
        Self {
            level: NoiseLevel::None,
            mean: 0.0,
            sd: 0.0,
            n_rows: 0,
            source: Vec::new(),
        }
    }
}

/// Residual distribution of `model` over `rows`. For `Contest`, `rows` must
/// be a single contest; for `Period`, all rows are used.
pub fn residual_distribution(
    model: &TrainedModel,
    rows: &FeatureMatrix,
    level: NoiseLevel,
) -> Result<NoiseCorrection> {
    if level == NoiseLevel::None {
        return Ok(NoiseCorrection::none());
    }
    if rows.n_rows() < 2 {
        return Err(Error::Data(format!(
            "noise fit needs at least 2 rows, got {}",
            rows.n_rows()
        )));
    }
    if level == NoiseLevel::Contest {
        single_contest(rows)?;
    }
    let pred = model.predict(rows)?;
    let mut w = Welford::default();
    for (p, y) in pred.iter().zip(&rows.labels) {
        w.push(p - y);
    }
    let source: BTreeSet<ContestId> = rows.keys.iter().map(|k| k.contest_id).collect();
    Ok(NoiseCorrection {
        level,
        mean: w.mean(),
        sd: w.sample_sd(),
        n_rows: w.count(),
        source: source.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub n_boot: usize,
    pub seed: u64,
    /// Share of incremental driver revenue kept by the platform.
    pub commission_rate: f64,
    /// Paid once per contest group when the captain bonus is on.
    pub captain_bonus_amount: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            seed: 0,
            commission_rate: 1.0,
            captain_bonus_amount: 100.0,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be at least 1".into()));
        }
        if !(self.commission_rate.is_finite() && self.commission_rate >= 0.0) {
            return Err(Error::Config("commission rate must be non-negative".into()));
        }
        if !(self.captain_bonus_amount.is_finite() && self.captain_bonus_amount >= 0.0) {
            return Err(Error::Config("captain bonus amount must be non-negative".into()));
        }
        Ok(())
    }
}

/// One contest's treated rows plus what the cost model needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContestRows {
    pub contest_id: ContestId,
    pub rows: FeatureMatrix,
    pub n_groups: usize,
}

impl ContestRows {
    pub fn new(rows: FeatureMatrix, n_groups: usize) -> Result<Self> {
        let contest_id = single_contest(&rows)?;
        if n_groups == 0 {
            return Err(Error::Data(format!("contest {contest_id} has no groups")));
        }
        Ok(Self {
            contest_id,
            rows,
            n_groups,
        })
    }
}

/// Total bonus outlay of a contest.
pub fn prize_cost(prizes: &[f64; 5], captain_bonus: bool, n_groups: usize, captain_bonus_amount: f64) -> f64 {
    let per_group: f64 = prizes.iter().sum::<f64>() + if captain_bonus { captain_bonus_amount } else { 0.0 };
    per_group * n_groups as f64
}

/// `Σ ITE × contest_days × commission / cost`.
pub fn roi(ite_predictions: &[f64], contest_days: f64, commission_rate: f64, cost: f64) -> Result<f64> {
    if cost <= 0.0 || !cost.is_finite() {
        return Err(Error::InvalidDesign(format!("ROI undefined for bonus cost {cost}")));
    }
    Ok(ite_predictions.iter().sum::<f64>() * contest_days * commission_rate / cost)
}

pub const ROI_DEFINITION: &str =
    "ROI = sum of predicted per-driver daily ITE x contest days x commission rate / total prize cost";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub contest_id: ContestId,
    pub design_id: String,
    #[serde(rename = "override")]
    pub design: DesignOverride,
    pub n_boot: usize,
    pub n_treated: usize,
    pub seed: u64,
    pub noise: NoiseCorrection,
    /// Mean of the replicate ATEs.
    pub ate: f64,
    pub ate_ci: [f64; 2],
    pub prize_cost: f64,
    pub commission_rate: f64,
    pub roi: f64,
    pub roi_ci: [f64; 2],
}

struct DesignCost {
    cost: f64,
    contest_days: f64,
}

fn design_cost(cf: &FeatureMatrix, n_groups: usize, opts: &SimOptions) -> Result<DesignCost> {
    let schema = &cf.schema;
    let mut prizes = [0.0; 5];
    for (k, c) in PRIZE_COLUMNS.iter().enumerate() {
        prizes[k] = cf.values[(0, column(schema, c)?)];
    }
    let captain = cf.values[(0, column(schema, "captain_bonus")?)] == 1.0;
    let contest_days = cf.values[(0, column(schema, "contest_days")?)];
    let cost = prize_cost(&prizes, captain, n_groups, opts.captain_bonus_amount);
    if cost <= 0.0 {
        return Err(Error::InvalidDesign("design has zero bonus cost; ROI undefined".into()));
    }
    Ok(DesignCost { cost, contest_days })
}

/// Replicate ATEs. Stream `b` depends only on `(seed, b)`, so designs and
/// noise levels simulated with the same seed share draws.
pub fn bootstrap_replicates(predictions: &[f64], noise: &NoiseCorrection, n_boot: usize, seed: u64) -> Vec<f64> {
    let n = predictions.len();
    (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut sum = 0.0;
            for i in idx {
                let z: f64 = rng.sample(StandardNormal);
                sum += predictions[i] + noise.mean + noise.sd * z;
            }
            sum / n as f64
        })
        .collect()
}

fn percentile_ci(values: &[f64]) -> [f64; 2] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    [
        stats::quantile_sorted(&sorted, 0.025),
        stats::quantile_sorted(&sorted, 0.975),
    ]
}

pub fn simulate_ate(
    model: &TrainedModel,
    contest: &ContestRows,
    ov: &DesignOverride,
    noise: &NoiseCorrection,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    opts.validate()?;
    if !(noise.sd.is_finite() && noise.sd >= 0.0 && noise.mean.is_finite()) {
        return Err(Error::Config(format!(
            "invalid noise correction mean {} sd {}",
            noise.mean, noise.sd
        )));
    }
    let cf = counterfactual_matrix(&contest.rows, ov)?;
    let cost = design_cost(&cf, contest.n_groups, opts)?;
    let pred = model.predict(&cf)?;
    let ates = bootstrap_replicates(&pred, noise, opts.n_boot, opts.seed);
    let n = pred.len() as f64;
    let scale = n * cost.contest_days * opts.commission_rate / cost.cost;
    let ate_ci = percentile_ci(&ates);
    // Rounding in the replicate mean can land a few ulps outside the interval.
    let ate = stats::mean(&ates).clamp(ate_ci[0], ate_ci[1]);
    Ok(SimulationResult {
        contest_id: contest.contest_id,
        design_id: ov.label(),
        design: ov.clone(),
        n_boot: opts.n_boot,
        n_treated: pred.len(),
        seed: opts.seed,
        noise: noise.clone(),
        ate,
        ate_ci,
        prize_cost: cost.cost,
        commission_rate: opts.commission_rate,
        roi: ate * scale,
        roi_ci: [ate_ci[0] * scale, ate_ci[1] * scale],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDesign {
    pub rank: usize,
    pub settings: Vec<(Dimension, bool)>,
    pub is_best: bool,
    pub is_worst: bool,
    pub is_original: bool,
    pub result: SimulationResult,
}

fn original_setting(rows: &FeatureMatrix, dim: &Dimension) -> Result<bool> {
    let s = &rows.schema;
    let v = |name: &str| -> Result<f64> { Ok(rows.values[(0, column(s, name)?)]) };
    Ok(match dim {
        Dimension::CaptainBonus => v("captain_bonus")? == 1.0,
        Dimension::FifthTeamBonus => v("rewards_5th")? == 1.0,
        Dimension::WorstMemberIncluded => v("exclude_worst_member")? != 1.0,
        Dimension::Column(name) => v(name)? == 1.0,
    })
}

/// Every on/off combination of `dims`, best ATE first, all simulated with
/// the same bootstrap indices and noise draws.
pub fn enumerate_designs(
    model: &TrainedModel,
    contest: &ContestRows,
    dims: &[Dimension],
    noise: &NoiseCorrection,
    opts: &SimOptions,
) -> Result<Vec<RankedDesign>> {
    if dims.is_empty() {
        return Err(Error::Config("no design dimensions to enumerate".into()));
    }
    if dims.len() > MAX_DIMENSIONS {
        return Err(Error::Config(format!(
            "{} dimensions would give 2^{} designs; at most {MAX_DIMENSIONS} allowed",
            dims.len(),
            dims.len()
        )));
    }
    let unique: BTreeSet<&Dimension> = dims.iter().collect();
    if unique.len() != dims.len() {
        return Err(Error::Config("duplicate design dimension".into()));
    }
    if let Some(Dimension::Column(name)) = dims.iter().find(|d| matches!(d, Dimension::Column(_))) {
        column(&contest.rows.schema, name)?;
    }
    single_contest(&contest.rows)?;
    let original: Vec<bool> = dims
        .iter()
        .map(|d| original_setting(&contest.rows, d))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(1 << dims.len());
    for mask in 0u32..(1u32 << dims.len()) {
        let settings: Vec<(Dimension, bool)> = dims
            .iter()
            .enumerate()
            .map(|(k, d)| (d.clone(), mask & (1 << k) != 0))
            .collect();
        let mut ov = DesignOverride::default();
        for (d, on) in &settings {
            ov.set(d, *on);
        }
        let is_original = settings.iter().map(|s| s.1).eq(original.iter().copied());
        let result = simulate_ate(model, contest, &ov, noise, opts)?;
        out.push(RankedDesign {
            rank: 0,
            settings,
            is_best: false,
            is_worst: false,
            is_original,
            result,
        });
    }
    // Stable sort keeps enumeration order among ties.
    out.sort_by(|a, b| b.result.ate.total_cmp(&a.result.ate));
    let last = out.len() - 1;
    for (r, d) in out.iter_mut().enumerate() {
        d.rank = r + 1;
        d.is_best = r == 0;
        d.is_worst = r == last;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryRole {
    Best,
    Worst,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub contest_id: ContestId,
    pub noise_level: NoiseLevel,
    pub role: SummaryRole,
    pub design_id: String,
    pub ate: f64,
    pub ate_ci: [f64; 2],
    pub roi: f64,
    pub roi_ci: [f64; 2],
}

/// Best, worst and original rows of a ranking.
pub fn summarize(ranking: &[RankedDesign]) -> Vec<SummaryRow> {
    let pick = |role: SummaryRole, d: &RankedDesign| SummaryRow {
        contest_id: d.result.contest_id,
        noise_level: d.result.noise.level,
        role,
        design_id: d.result.design_id.clone(),
        ate: d.result.ate,
        ate_ci: d.result.ate_ci,
        roi: d.result.roi,
        roi_ci: d.result.roi_ci,
    };
    let mut rows = Vec::new();
    if let Some(d) = ranking.iter().find(|d| d.is_best) {
        rows.push(pick(SummaryRole::Best, d));
    }
    if let Some(d) = ranking.iter().find(|d| d.is_worst) {
        rows.push(pick(SummaryRole::Worst, d));
    }
    if let Some(d) = ranking.iter().find(|d| d.is_original) {
        rows.push(pick(SummaryRole::Original, d));
    }
    rows
}
