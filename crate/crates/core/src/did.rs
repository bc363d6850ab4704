//! Two-period difference-in-differences estimation of individual and
//! average treatment effects on the treated.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::stats;
use crate::synthgen::{ContestDataset, Formation};
use crate::types::{ContestId, DriverId, Period, TeamId};

/// One day of platform activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub revenue: f64,
    pub rides: f64,
    pub hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Revenue,
    Rides,
    Hours,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Revenue, Metric::Rides, Metric::Hours];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Revenue => "revenue",
            Metric::Rides => "rides",
            Metric::Hours => "hours",
        }
    }

    fn of(self, r: &DayRecord) -> f64 {
        match self {
            Metric::Revenue => r.revenue,
            Metric::Rides => r.rides,
            Metric::Hours => r.hours,
        }
    }
}

/// Daily activity series of one driver. Days without a row are offline days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenuePanel {
    pub driver_id: DriverId,
    rows: Vec<DayRecord>,
}

impl RevenuePanel {
    pub fn new(driver_id: DriverId, rows: Vec<DayRecord>) -> Result<Self> {
        for w in rows.windows(2) {
            if w[0].date >= w[1].date {
                return Err(Error::Data(format!(
                    "panel for driver {driver_id}: dates not strictly increasing at {}",
                    w[1].date
                )));
            }
        }
        if let Some(bad) = rows
            .iter()
            .find(|r| !(r.revenue >= 0.0 && r.rides >= 0.0 && r.hours >= 0.0))
        {
            return Err(Error::Data(format!(
                "panel for driver {driver_id}: negative or non-finite activity on {}",
                bad.date
            )));
        }
        Ok(Self { driver_id, rows })
    }

    pub fn rows(&self) -> &[DayRecord] {
        &self.rows
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.rows.first().map(|r| r.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.rows.last().map(|r| r.date)
    }

    /// Rows falling inside `period`.
    pub fn slice(&self, period: &Period) -> &[DayRecord] {
        let lo = self.rows.partition_point(|r| r.date < period.start);
        let hi = self.rows.partition_point(|r| r.date <= period.end);
        &self.rows[lo..hi]
    }

    /// Daily values of `metric` over every day of `period`, zero-filled.
    pub fn daily_values(&self, period: &Period, metric: Metric) -> Vec<f64> {
        let mut out = vec![0.0; period.len_days()];
        for r in self.slice(period) {
            out[(r.date - period.start).num_days() as usize] = metric.of(r);
        }
        out
    }

    pub fn mean_over(&self, period: &Period, metric: Metric) -> f64 {
        let total: f64 = self.slice(period).iter().map(|r| metric.of(r)).sum();
        total / period.len_days() as f64
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [DayRecord] {
        &mut self.rows
    }
}

/// Latest period strictly before `signup_start` with the same length and
/// weekday sequence as `contest`, i.e. `contest` shifted back whole weeks.
pub fn baseline_period(contest: &Period, signup_start: NaiveDate) -> Period {
    let gap = (contest.end - signup_start).num_days();
    let weeks = if gap < 0 { 0 } else { gap / 7 + 1 };
    contest.shift_days(-7 * weeks)
}

/// Mean daily revenue over `period`, counting days without records as zero.
pub fn avg_daily_revenue(panel: &RevenuePanel, period: &Period) -> Result<f64> {
    if period.len_days() == 0 {
        return Err(Error::Data("empty period".into()));
    }
    Ok(panel.mean_over(period, Metric::Revenue))
}

/// Within-driver change in mean daily revenue from `t0` to `t1`.
pub fn driver_delta(panel: &RevenuePanel, t0: &Period, t1: &Period) -> Result<f64> {
    Ok(avg_daily_revenue(panel, t1)? - avg_daily_revenue(panel, t0)?)
}

/// Common trend estimated from the contest's solo drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlTrend {
    pub contest_id: ContestId,
    pub value: f64,
    /// Standard error of `value`.
    pub se: f64,
    pub n_control: usize,
}

pub fn control_trend<'a>(
    contest_id: ContestId,
    control_panels: impl IntoIterator<Item = &'a RevenuePanel>,
    t0: &Period,
    t1: &Period,
) -> Result<ControlTrend> {
    let deltas = control_panels
        .into_iter()
        .map(|p| driver_delta(p, t0, t1))
        .collect::<Result<Vec<_>>>()?;
    if deltas.is_empty() {
        return Err(Error::Data(format!(
            "contest {contest_id} has no solo control drivers"
        )));
    }
    Ok(ControlTrend {
        contest_id,
        value: stats::mean(&deltas),
        se: stats::sample_sd(&deltas) / (deltas.len() as f64).sqrt(),
        n_control: deltas.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteRecord {
    pub contest_id: ContestId,
    pub driver_id: DriverId,
    pub team_id: TeamId,
    pub delta_r: f64,
    pub ite: f64,
    pub baseline_period: Period,
    pub contest_period: Period,
}

/// Which teamed drivers count as treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentGroup {
    #[default]
    AllTeams,
    SystemFormedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestEstimate {
    pub trend: ControlTrend,
    pub records: Vec<IteRecord>,
}

impl ContestEstimate {
    /// ATET whose standard error also carries the sampling error of the
    /// control trend, which every ITE of the contest shares.
    pub fn atet(&self) -> Result<AtetEstimate> {
        let treated = estimate_atet(&self.records)?;
        Ok(AtetEstimate {
            se: treated.se.hypot(self.trend.se),
            ..treated
        })
    }
}

/// Per-driver ITEs for one contest against its own solo control group.
pub fn estimate_ite(dataset: &ContestDataset, group: TreatmentGroup) -> Result<ContestEstimate> {
    let t1 = dataset.contest_period()?;
    let t0 = baseline_period(&t1, dataset.design.start_date - Duration::days(i64::from(dataset.design.signup_days)));
    let controls: Vec<&RevenuePanel> = dataset
        .solo_ids
        .iter()
        .filter_map(|id| {
            let p = dataset.panels.get(id);
            if p.is_none() {
                warn!(contest = %dataset.id, driver = %id, "solo driver without panel skipped");
            }
            p
        })
        .collect();
    let trend = control_trend(dataset.id, controls, &t0, &t1)?;

    let mut records = Vec::new();
    for team in &dataset.teams {
        if group == TreatmentGroup::SystemFormedOnly && team.formation != Formation::SystemFormed {
            continue;
        }
        for driver_id in team.all_members() {
            let Some(panel) = dataset.panels.get(&driver_id) else {
                warn!(contest = %dataset.id, driver = %driver_id, "treated driver without panel skipped");
                continue;
            };
            let delta_r = driver_delta(panel, &t0, &t1)?;
            records.push(IteRecord {
                contest_id: dataset.id,
                driver_id,
                team_id: team.id,
                delta_r,
                ite: delta_r - trend.value,
                baseline_period: t0,
                contest_period: t1,
            });
        }
    }
    records.sort_by_key(|r| r.driver_id);
    Ok(ContestEstimate { trend, records })
}

/// Mean of `records` with the standard error sd/√n of the ITEs alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtetEstimate {
    pub atet: f64,
    pub se: f64,
    pub n: usize,
}

pub fn estimate_atet(records: &[IteRecord]) -> Result<AtetEstimate> {
    if records.is_empty() {
        return Err(Error::Data("no ITE records to average".into()));
    }
    let ites: Vec<f64> = records.iter().map(|r| r.ite).collect();
    Ok(AtetEstimate {
        atet: stats::mean(&ites),
        se: stats::sample_sd(&ites) / (ites.len() as f64).sqrt(),
        n: ites.len(),
    })
}
