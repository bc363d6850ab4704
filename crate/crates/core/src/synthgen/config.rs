use chrono::{Duration, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dgp::{EffectFunction, InteractionTerm, LinearTerm};
use crate::error::{Error, Result};
use crate::types::Period;

/// Closed real interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::Config(format!(
                "{what}: invalid range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Closed integer interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

impl IntRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!(
                "{what}: invalid range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityRanges {
    pub supply_demand_ratio: Range,
    pub avg_hourly_pay: Range,
    pub population_tier: IntRange,
    pub n_prior_contests: IntRange,
    pub n_drivers: IntRange,
    pub rain_prob: f64,
    pub snow_prob: f64,
}

impl Default for CityRanges {
    fn default() -> Self {
        Self {
            supply_demand_ratio: Range::new(0.6, 1.6),
            avg_hourly_pay: Range::new(25.0, 45.0),
            population_tier: IntRange::new(1, 5),
            n_prior_contests: IntRange::new(0, 30),
            n_drivers: IntRange::new(2_000, 60_000),
            rain_prob: 0.2,
            snow_prob: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverRanges {
    pub age: IntRange,
    pub female_frac: f64,
    pub platform_age_months: IntRange,
    pub n_hometowns: u16,
    pub n_regions: u16,
    pub rental_frac: f64,
    /// Median of the log-normal distribution of driver mean daily revenue.
    pub base_revenue_median: f64,
    pub base_revenue_log_sd: f64,
    /// Log-scale sd of multiplicative daily revenue noise.
    pub volatility: Range,
    pub off_day_prob: f64,
    pub latent_sd: f64,
}

impl Default for DriverRanges {
    fn default() -> Self {
        Self {
            age: IntRange::new(21, 60),
            female_frac: 0.15,
            platform_age_months: IntRange::new(0, 72),
            n_hometowns: 8,
            n_regions: 6,
            rental_frac: 0.3,
            base_revenue_median: 200.0,
            base_revenue_log_sd: 0.35,
            volatility: Range::new(0.03, 0.12),
            off_day_prob: 0.01,
            latent_sd: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignRanges {
    pub team_sizes: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub contest_days: IntRange,
    pub signup_days: IntRange,
    pub top_prize: Range,
    /// Multipliers of the top prize for ranks 1..=4.
    pub prize_decay: [f64; 4],
    pub fifth_prize_prob: f64,
    pub captain_bonus_prob: f64,
    pub exclude_worst_prob: f64,
}

impl Default for DesignRanges {
    fn default() -> Self {
        Self {
            team_sizes: vec![4, 5, 6],
            group_sizes: vec![3, 4, 5],
            contest_days: IntRange::new(3, 7),
            signup_days: IntRange::new(3, 7),
            top_prize: Range::new(300.0, 800.0),
            prize_decay: [1.0, 0.6, 0.4, 0.2],
            fifth_prize_prob: 0.5,
            captain_bonus_prob: 0.5,
            exclude_worst_prob: 0.5,
        }
    }
}

/// Counterfactual daily revenue: driver mean × weekday multiplier, plus a
/// city-wide daily shock and trend, minus a weather penalty, times log-normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineProcess {
    /// Monday through Sunday.
    pub weekday_multipliers: [f64; 7],
    pub rain_penalty: f64,
    pub snow_penalty: f64,
    pub daily_shock_sd: f64,
    pub trend_per_day: f64,
    pub fare: f64,
}

impl Default for BaselineProcess {
    fn default() -> Self {
        Self {
            weekday_multipliers: [0.95, 0.95, 1.0, 1.0, 1.1, 1.15, 0.85],
            rain_penalty: 15.0,
            snow_penalty: 60.0,
            daily_shock_sd: 6.0,
            trend_per_day: 0.05,
            fare: 22.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub baseline: BaselineProcess,
    pub effect: EffectFunction,
}

/// Homophily weights for self-formed team matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomophilyWeights {
    pub hometown: f64,
    pub region: f64,
    pub history: f64,
}

impl Default for HomophilyWeights {
    fn default() -> Self {
        Self {
            hometown: 2.0,
            region: 1.5,
            history: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cities: usize,
    pub contests_per_city: usize,
    pub drivers_per_city: usize,
    /// Contests start on or after this date and end on or before `calendar_end`.
    pub calendar_start: NaiveDate,
    pub calendar_end: NaiveDate,
    /// Days of history recorded before each contest start.
    pub pre_days: u32,
    pub signups: IntRange,
    pub self_formed_frac: f64,
    pub holdout_frac: f64,
    pub homophily: HomophilyWeights,
    pub city: CityRanges,
    pub driver: DriverRanges,
    pub design: DesignRanges,
    pub dgp: DgpConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cities: 4,
            contests_per_city: 8,
            drivers_per_city: 2500,
            calendar_start: NaiveDate::from_ymd_opt(2018, 1, 8).unwrap(),
            calendar_end: NaiveDate::from_ymd_opt(2018, 8, 31).unwrap(),
            pre_days: 45,
            signups: IntRange::new(350, 550),
            self_formed_frac: 0.5,
            holdout_frac: 0.10,
            homophily: HomophilyWeights::default(),
            city: CityRanges::default(),
            driver: DriverRanges::default(),
            design: DesignRanges::default(),
            dgp: DgpConfig::default(),
        }
    }
}

/// Days between the start of a city's contest slot and the earliest contest
/// start, so that a contest's baseline weeks never overlap the previous contest.
pub(crate) const MIN_LEAD_DAYS: u32 = 15;

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

impl SynthConfig {
    /// Days for which weather and counterfactual revenue are generated.
    pub fn generation_window(&self) -> Period {
        Period {
            start: self.calendar_start - Duration::days(i64::from(self.pre_days) + 7),
            end: self.calendar_end + Duration::days(1),
        }
    }

    /// The `k`-th of `contests_per_city` equal calendar slots.
    pub fn slot(&self, k: usize) -> Period {
        let span = (self.calendar_end - self.calendar_start).num_days() + 1;
        let len = span / self.contests_per_city as i64;
        let start = self.calendar_start + Duration::days(len * k as i64);
        Period {
            start,
            end: start + Duration::days(len - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cities == 0 || self.contests_per_city == 0 {
            return Err(Error::Config("need at least one city and one contest".into()));
        }
        if self.contests_per_city >= 1000 {
            return Err(Error::Config("at most 999 contests per city".into()));
        }
        let c = &self.city;
        c.supply_demand_ratio.validate("city.supply_demand_ratio")?;
        if c.supply_demand_ratio.min <= 0.0 {
            return Err(Error::Config("supply_demand_ratio must be positive".into()));
        }
        c.avg_hourly_pay.validate("city.avg_hourly_pay")?;
        if c.avg_hourly_pay.min <= 0.0 {
            return Err(Error::Config("avg_hourly_pay must be positive".into()));
        }
        c.population_tier.validate("city.population_tier")?;
        if c.population_tier.min < 1 || c.population_tier.max > 5 {
            return Err(Error::Config("population tier must lie in 1..=5".into()));
        }
        c.n_prior_contests.validate("city.n_prior_contests")?;
        c.n_drivers.validate("city.n_drivers")?;
        check_prob(c.rain_prob, "city.rain_prob")?;
        check_prob(c.snow_prob, "city.snow_prob")?;
        check_prob(c.rain_prob + c.snow_prob, "city.rain_prob + city.snow_prob")?;

        let d = &self.driver;
        d.age.validate("driver.age")?;
        if d.age.min < 18 || d.age.max > 75 {
            return Err(Error::Config("driver ages must lie in 18..=75".into()));
        }
        d.platform_age_months.validate("driver.platform_age_months")?;
        d.volatility.validate("driver.volatility")?;
        check_prob(d.female_frac, "driver.female_frac")?;
        check_prob(d.rental_frac, "driver.rental_frac")?;
        check_prob(d.off_day_prob, "driver.off_day_prob")?;
        if d.n_hometowns == 0 || d.n_regions == 0 {
            return Err(Error::Config("need at least one hometown and region".into()));
        }
        if d.base_revenue_median.is_nan() || d.base_revenue_median <= 0.0 || d.base_revenue_log_sd < 0.0 || d.latent_sd < 0.0 {
            return Err(Error::Config("invalid driver revenue parameters".into()));
        }

        let g = &self.design;
        if g.team_sizes.is_empty() || g.team_sizes.iter().any(|s| !(3..=8).contains(s)) {
            return Err(Error::Config("team sizes must be non-empty and within 3..=8".into()));
        }
        if g.group_sizes.is_empty() || g.group_sizes.contains(&0) {
            return Err(Error::Config("group sizes must be non-empty and positive".into()));
        }
        g.contest_days.validate("design.contest_days")?;
        g.signup_days.validate("design.signup_days")?;
        if g.contest_days.min == 0 {
            return Err(Error::Config("contests last at least one day".into()));
        }
        if g.signup_days.min < 3 || g.signup_days.max > 7 {
            return Err(Error::Config("signup days must lie in 3..=7".into()));
        }
        g.top_prize.validate("design.top_prize")?;
        if g.prize_decay.windows(2).any(|w| w[1] > w[0]) || g.prize_decay.iter().any(|x| *x <= 0.0) {
            return Err(Error::Config("prize decay must be positive and non-increasing".into()));
        }
        check_prob(g.fifth_prize_prob, "design.fifth_prize_prob")?;
        check_prob(g.captain_bonus_prob, "design.captain_bonus_prob")?;
        check_prob(g.exclude_worst_prob, "design.exclude_worst_prob")?;

        self.signups.validate("signups")?;
        if self.signups.max as usize > self.drivers_per_city {
            return Err(Error::Config(format!(
                "up to {} sign-ups requested but only {} drivers per city",
                self.signups.max, self.drivers_per_city
            )));
        }
        if !(0.0..1.0).contains(&self.self_formed_frac) {
            return Err(Error::Config("self_formed_frac must lie in [0, 1)".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config("holdout_frac must lie in (0, 1)".into()));
        }
        let span = (self.calendar_end - self.calendar_start).num_days() + 1;
        let need = i64::from(MIN_LEAD_DAYS + g.contest_days.max);
        if span < 1 || span / (self.contests_per_city as i64) < need {
            return Err(Error::Config(format!(
                "calendar of {span} days cannot host {} contest slots of {need} days per city",
                self.contests_per_city
            )));
        }
        if self.pre_days < 45 {
            return Err(Error::Config("pre_days must cover at least 45 days".into()));
        }
        Ok(())
    }
}

impl EffectFunction {
    /// Heterogeneous effect with signs in line with observed contest findings.
    pub fn plausible_default() -> Self {
        let lin = |f: &str, c: f64| LinearTerm {
            feature: f.to_string(),
            coef: c,
        };
        let inter = |a: &str, b: &str, c: f64| InteractionTerm {
            a: a.to_string(),
            b: b.to_string(),
            coef: c,
        };
        Self {
            intercept: 50.0,
            linear: vec![
                lin("revenue_baseline_mean", 0.15),
                lin("diff_from_team_max", 0.25),
                lin("captain_bonus", -10.0),
                lin("rewards_5th", -8.0),
                lin("exclude_worst_member", -8.0),
                lin("weather_snow_frac", -40.0),
                lin("team_history", 30.0),
                lin("system_formed", -8.0),
                lin("is_captain", 12.0),
                lin("age_diversity", -0.8),
                lin("city_supply_demand_ratio", -12.0),
                lin("revenue_last30_sd", -0.1),
                lin("rental_car", -6.0),
                lin("no_prior_contest", -6.0),
            ],
            interactions: vec![
                inter("team_history", "team_history", -15.0),
                inter("is_captain", "captain_bonus", 10.0),
            ],
            latent_weight: 1.0,
            noise_sd: 4.0,
        }
    }
}
