//! Synthetic cities, drivers, contests and daily activity panels with a
//! recorded ground-truth treatment-effect function.

mod config;
mod dgp;
mod generate;
mod io;
mod teams;

pub use config::{
    BaselineProcess, CityRanges, DesignRanges, DgpConfig, DriverRanges, HomophilyWeights,
    IntRange, Range, SynthConfig,
};
pub use dgp::{CompiledEffect, EffectFunction, InteractionTerm, LinearTerm};
pub use generate::{
    draw_design, generate_city, generate_contest, generate_world, ContestOutcome, DriverPool,
    FormationOptions, PoolDriver, World,
};
pub use io::{
    read_contest_dir, read_dataset_dir, write_contest_dir, write_dataset_dir, DatasetManifest,
    DatasetSummary, LoadedDataset,
};
pub use teams::{assign_system_teams, partition_contest_groups, SystemAssignment};

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::did::RevenuePanel;
use crate::error::{Error, Result};
use crate::types::{CityId, ContestId, DriverId, Period, TeamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Rain,
    Snowstorm,
}

impl Weather {
    pub fn name(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Rain => "rain",
            Weather::Snowstorm => "snowstorm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clear" => Ok(Weather::Clear),
            "rain" => Ok(Weather::Rain),
            "snowstorm" => Ok(Weather::Snowstorm),
            other => Err(Error::Data(format!("unknown weather {other:?}"))),
        }
    }
}

/// Daily weather starting at `start`, one entry per consecutive day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub start: NaiveDate,
    pub days: Vec<Weather>,
}

impl WeatherSeries {
    pub fn on(&self, date: NaiveDate) -> Option<Weather> {
        let offset = (date - self.start).num_days();
        if offset < 0 {
            return None;
        }
        self.days.get(offset as usize).copied()
    }

    pub fn over(&self, period: &Period) -> Result<Vec<Weather>> {
        period
            .days()
            .map(|d| {
                self.on(d)
                    .ok_or_else(|| Error::Data(format!("no weather recorded for {d}")))
            })
            .collect()
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.days.len() as i64 - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub id: CityId,
    pub province: u8,
    /// Development level, 1 (lowest) to 5.
    pub population_tier: u8,
    /// Drivers available per ride requested.
    pub supply_demand_ratio: f64,
    pub avg_hourly_pay: f64,
    pub n_prior_contests: u32,
    pub n_drivers: u32,
    pub weather: WeatherSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

/// Analyst-visible driver attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub id: DriverId,
    pub age: u8,
    pub gender: Gender,
    pub platform_age_months: u16,
    pub hometown: u16,
    pub activity_region: u16,
    pub rental_car: bool,
    pub city_id: CityId,
}

/// Hidden per-driver parameters of the data-generating process. Only ever
/// written to the ground-truth sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverLatent {
    pub effort_response: f64,
    pub base_revenue: f64,
    pub volatility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceMetric {
    Revenue,
    Rides,
    Blend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestDesign {
    /// Captain plus regular members.
    pub team_size: usize,
    /// Teams per contest group.
    pub group_size: usize,
    pub contest_days: u32,
    pub start_date: NaiveDate,
    pub signup_days: u32,
    /// Team prize for group ranks 1..=5.
    pub prize_schedule: [f64; 5],
    pub captain_bonus: bool,
    pub exclude_worst_member: bool,
    pub performance_metric: PerformanceMetric,
}

impl ContestDesign {
    pub fn validate(&self) -> Result<()> {
        if !(3..=8).contains(&self.team_size) {
            return Err(Error::InvalidDesign(format!(
                "team size {} outside 3..=8",
                self.team_size
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidDesign("group size must be positive".into()));
        }
        if self.contest_days == 0 {
            return Err(Error::InvalidDesign("contest must last at least one day".into()));
        }
        if !(3..=7).contains(&self.signup_days) {
            return Err(Error::InvalidDesign(format!(
                "signup period of {} days outside 3..=7",
                self.signup_days
            )));
        }
        let p = &self.prize_schedule;
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidDesign("prizes must be non-negative".into()));
        }
        if p.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidDesign(format!(
                "prize schedule {p:?} increases with rank"
            )));
        }
        Ok(())
    }

    pub fn contest_period(&self) -> Result<Period> {
        Period::starting_at(self.start_date, self.contest_days)
    }

    pub fn signup_start(&self) -> NaiveDate {
        self.start_date - Duration::days(i64::from(self.signup_days))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formation {
    SelfFormed,
    SystemFormed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub id: TeamId,
    pub contest_id: ContestId,
    pub captain_id: DriverId,
    /// Regular members, captain excluded.
    pub member_ids: Vec<DriverId>,
    pub formation: Formation,
}

impl Team {
    /// Captain first, then regular members.
    pub fn all_members(&self) -> impl Iterator<Item = DriverId> + '_ {
        std::iter::once(self.captain_id).chain(self.member_ids.iter().copied())
    }

    pub fn size(&self) -> usize {
        1 + self.member_ids.len()
    }
}

/// Teams of comparable pre-contest productivity competing for one prize schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContestGroup {
    pub team_ids: Vec<TeamId>,
    /// Summed member pre-contest productivity, aligned to `team_ids`.
    pub productivity: Vec<f64>,
    /// Max over min team productivity within the group.
    pub productivity_ratio: f64,
    /// Fewer than `group_size` teams (only the last group can be short).
    pub short: bool,
}

/// Two drivers who shared a team in `contest_id`; `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoteamRecord {
    pub a: DriverId,
    pub b: DriverId,
    pub contest_id: ContestId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContestDataset {
    pub id: ContestId,
    pub design: ContestDesign,
    pub city: City,
    /// Every sign-up of the contest.
    pub drivers: BTreeMap<DriverId, DriverProfile>,
    pub teams: Vec<Team>,
    pub contest_groups: Vec<ContestGroup>,
    /// Randomized hold-out controls.
    pub solo_ids: Vec<DriverId>,
    /// Leftover unteamed drivers; not used as controls.
    pub overflow_ids: Vec<DriverId>,
    pub panels: BTreeMap<DriverId, RevenuePanel>,
    pub coteam_history: Vec<CoteamRecord>,
    /// Mean daily revenue during each sign-up's most recent earlier contest.
    pub prior_contest_revenue: BTreeMap<DriverId, f64>,
}

impl ContestDataset {
    pub fn contest_period(&self) -> Result<Period> {
        self.design.contest_period()
    }

    pub fn signup_start(&self) -> NaiveDate {
        self.design.signup_start()
    }

    pub fn treated_ids(&self) -> impl Iterator<Item = DriverId> + '_ {
        self.teams.iter().flat_map(|t| t.all_members())
    }

    pub fn n_treated(&self) -> usize {
        self.teams.iter().map(Team::size).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub contest_id: ContestId,
    /// Realized per-day effect on each treated driver.
    pub true_ite: BTreeMap<DriverId, f64>,
    pub true_atet: f64,
    pub latent: BTreeMap<DriverId, DriverLatent>,
    pub dgp_seed: u64,
    pub dgp: DgpConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    pub(crate) fn sample_design() -> ContestDesign {
        ContestDesign {
            team_size: 5,
            group_size: 5,
            contest_days: 3,
            start_date: d(2018, 8, 10),
            signup_days: 7,
            prize_schedule: [500.0, 300.0, 200.0, 100.0, 0.0],
            captain_bonus: false,
            exclude_worst_member: false,
            performance_metric: PerformanceMetric::Revenue,
        }
    }

    #[test]
    fn design_validation() {
        assert!(sample_design().validate().is_ok());
        let mut bad = sample_design();
        bad.prize_schedule = [100.0, 200.0, 0.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
        let mut bad = sample_design();
        bad.team_size = 2;
        assert!(matches!(bad.validate(), Err(Error::InvalidDesign(_))));
        let mut bad = sample_design();
        bad.team_size = 9;
        assert!(bad.validate().is_err());
        let mut bad = sample_design();
        bad.signup_days = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn signup_and_contest_period() {
        let des = sample_design();
        assert_eq!(des.signup_start(), d(2018, 8, 3));
        assert_eq!(des.contest_period().unwrap().end, d(2018, 8, 12));
    }

    #[test]
    fn weather_lookup() {
        let w = WeatherSeries {
            start: d(2018, 1, 1),
            days: vec![Weather::Clear, Weather::Rain, Weather::Snowstorm],
        };
        assert_eq!(w.on(d(2018, 1, 2)), Some(Weather::Rain));
        assert_eq!(w.on(d(2017, 12, 31)), None);
        assert_eq!(w.end(), d(2018, 1, 3));
        assert!(w.over(&Period::new(d(2018, 1, 2), d(2018, 1, 4)).unwrap()).is_err());
    }
}
