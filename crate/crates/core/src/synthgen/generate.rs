use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Datelike, Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;

use super::config::{DesignRanges, DgpConfig, HomophilyWeights, SynthConfig, MIN_LEAD_DAYS};
use super::teams::{assign_system_teams, partition_contest_groups};
use super::{
    City, ContestDataset, ContestDesign, CoteamRecord, DriverLatent, DriverProfile, Formation,
    Gender, GroundTruth, PerformanceMetric, Team, Weather, WeatherSeries,
};
use crate::did::{baseline_period, DayRecord, Metric, RevenuePanel};
use crate::error::{Error, Result};
use crate::features::{extract_treated_rows, FeatureSchema, N_PROVINCES};
use crate::types::{derive_seed, CityId, ContestId, DriverId, Period, TeamId};

fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn generate_city(config: &SynthConfig, id: CityId, seed: u64) -> Result<City> {
    config.validate()?;
    let c = &config.city;
    let mut rng = rng_for(seed, &[0]);
    let province = rng.random_range(0..N_PROVINCES) as u8;
    let population_tier = c.population_tier.sample(&mut rng) as u8;
    let supply_demand_ratio = c.supply_demand_ratio.sample(&mut rng);
    let avg_hourly_pay = c.avg_hourly_pay.sample(&mut rng);
    let n_prior_contests = c.n_prior_contests.sample(&mut rng);
    let n_drivers = c.n_drivers.sample(&mut rng);

    let window = config.generation_window();
    let mut wrng = rng_for(seed, &[1]);
    let days = window
        .days()
        .map(|_| {
            let u: f64 = wrng.random();
            if u < c.snow_prob {
                Weather::Snowstorm
            } else if u < c.snow_prob + c.rain_prob {
                Weather::Rain
            } else {
                Weather::Clear
            }
        })
        .collect();
    Ok(City {
        id,
        province,
        population_tier,
        supply_demand_ratio,
        avg_hourly_pay,
        n_prior_contests,
        n_drivers,
        weather: WeatherSeries {
            start: window.start,
            days,
        },
    })
}

/// A driver of the city pool with the full daily ledger of realized activity.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolDriver {
    pub profile: DriverProfile,
    pub latent: DriverLatent,
    pub ledger: RevenuePanel,
}

/// Drivers of one city together with their contest history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriverPool {
    drivers: BTreeMap<DriverId, PoolDriver>,
    coteam_history: Vec<CoteamRecord>,
    last_contest: BTreeMap<DriverId, Period>,
}

impl DriverPool {
    /// `n` drivers with ids `id_base + 1 ..= id_base + n` whose ledgers span the
    /// city's weather series.
    pub fn generate(
        city: &City,
        config: &SynthConfig,
        n: usize,
        id_base: u64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if city.weather.days.is_empty() {
            return Err(Error::Generation("city has no weather series".into()));
        }
        let bp = &config.dgp.baseline;
        let mut shock_rng = rng_for(seed, &[0]);
        let shock = Normal::new(0.0, bp.daily_shock_sd).map_err(|e| Error::Config(e.to_string()))?;
        let city_day: Vec<f64> = city
            .weather
            .days
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let penalty = match w {
                    Weather::Clear => 0.0,
                    Weather::Rain => bp.rain_penalty,
                    Weather::Snowstorm => bp.snow_penalty,
                };
                shock.sample(&mut shock_rng) + bp.trend_per_day * i as f64 - penalty
            })
            .collect();

        let drivers: Vec<PoolDriver> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_for(seed, &[1, i as u64]);
                generate_driver(city, config, &city_day, DriverId(id_base + i as u64 + 1), &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_drivers(drivers))
    }

    pub fn from_drivers(drivers: Vec<PoolDriver>) -> Self {
        Self {
            drivers: drivers.into_iter().map(|d| (d.profile.id, d)).collect(),
            coteam_history: Vec::new(),
            last_contest: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.drivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drivers.is_empty()
    }

    pub fn ids(&self) -> Vec<DriverId> {
        self.drivers.keys().copied().collect()
    }

    pub fn get(&self, id: DriverId) -> Option<&PoolDriver> {
        self.drivers.get(&id)
    }

    pub fn coteam_history(&self) -> &[CoteamRecord] {
        &self.coteam_history
    }

    /// Sub-pool restricted to `ids`, keeping history among them.
    pub fn subset(&self, ids: &[DriverId]) -> Result<Self> {
        let keep: BTreeSet<DriverId> = ids.iter().copied().collect();
        let mut drivers = BTreeMap::new();
        for id in &keep {
            let d = self
                .drivers
                .get(id)
                .ok_or_else(|| Error::Generation(format!("driver {id} is not in the pool")))?;
            drivers.insert(*id, d.clone());
        }
        Ok(Self {
            drivers,
            coteam_history: self
                .coteam_history
                .iter()
                .filter(|r| keep.contains(&r.a) && keep.contains(&r.b))
                .copied()
                .collect(),
            last_contest: self
                .last_contest
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (*k, *v))
                .collect(),
        })
    }

    /// Writes a finished contest back: realized contest-day activity, new
    /// co-team pairs and each participant's latest contest.
    pub fn record(&mut self, dataset: &ContestDataset) -> Result<()> {
        let period = dataset.contest_period()?;
        for team in &dataset.teams {
            let ids: Vec<DriverId> = team.all_members().collect();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    let (a, b) = if a < b { (*a, *b) } else { (*b, *a) };
                    self.coteam_history.push(CoteamRecord {
                        a,
                        b,
                        contest_id: dataset.id,
                    });
                }
            }
        }
        for id in dataset.treated_ids() {
            let realized = dataset
                .panels
                .get(&id)
                .ok_or_else(|| Error::Data(format!("driver {id} has no panel")))?
                .slice(&period)
                .to_vec();
            let driver = self
                .drivers
                .get_mut(&id)
                .ok_or_else(|| Error::Generation(format!("driver {id} is not in the pool")))?;
            let start = driver
                .ledger
                .first_date()
                .ok_or_else(|| Error::Generation(format!("driver {id} has an empty ledger")))?;
            let rows = driver.ledger.rows_mut();
            for rec in realized {
                let i = (rec.date - start).num_days() as usize;
                rows[i] = rec;
            }
        }
        for id in dataset.drivers.keys() {
            self.last_contest.insert(*id, period);
        }
        Ok(())
    }
}

fn generate_driver(
    city: &City,
    config: &SynthConfig,
    city_day: &[f64],
    id: DriverId,
    rng: &mut ChaCha8Rng,
) -> Result<PoolDriver> {
    let dr = &config.driver;
    let bp = &config.dgp.baseline;
    let profile = DriverProfile {
        id,
        age: dr.age.sample(rng) as u8,
        gender: if rng.random_bool(dr.female_frac) {
            Gender::Female
        } else {
            Gender::Male
        },
        platform_age_months: dr.platform_age_months.sample(rng) as u16,
        hometown: rng.random_range(0..dr.n_hometowns),
        activity_region: rng.random_range(0..dr.n_regions),
        rental_car: rng.random_bool(dr.rental_frac),
        city_id: city.id,
    };
    let z: f64 = rng.sample(StandardNormal);
    let base_revenue = dr.base_revenue_median * (dr.base_revenue_log_sd * z).exp();
    let volatility = dr.volatility.sample(rng);
    let zl: f64 = rng.sample(StandardNormal);
    let latent = DriverLatent {
        effort_response: dr.latent_sd * zl,
        base_revenue,
        volatility,
    };

    let mut rows = Vec::with_capacity(city_day.len());
    for (i, shift) in city_day.iter().enumerate() {
        let date = city.weather.start + Duration::days(i as i64);
        let zr: f64 = rng.sample(StandardNormal);
        let zq: f64 = rng.sample(StandardNormal);
        let zh: f64 = rng.sample(StandardNormal);
        if rng.random_bool(dr.off_day_prob) {
            rows.push(DayRecord {
                date,
                revenue: 0.0,
                rides: 0.0,
                hours: 0.0,
            });
            continue;
        }
        let dow = bp.weekday_multipliers[date.weekday().num_days_from_monday() as usize];
        let mean = (base_revenue * dow + shift).max(0.0);
        let revenue = mean * (volatility * zr - 0.5 * volatility * volatility).exp();
        rows.push(activity(revenue, bp.fare, city.avg_hourly_pay, zq, zh, date));
    }
    let ledger = RevenuePanel::new(id, rows)?;
    Ok(PoolDriver {
        profile,
        latent,
        ledger,
    })
}

fn activity(revenue: f64, fare: f64, hourly: f64, zq: f64, zh: f64, date: NaiveDate) -> DayRecord {
    DayRecord {
        date,
        revenue,
        rides: (revenue / fare * (0.1 * zq).exp()).round().max(0.0),
        hours: revenue / hourly * (0.1 * zh).exp(),
    }
}

/// Random design starting on `start_date`.
pub fn draw_design(ranges: &DesignRanges, start_date: NaiveDate, rng: &mut impl Rng) -> ContestDesign {
    let team_size = ranges.team_sizes[rng.random_range(0..ranges.team_sizes.len())];
    let group_size = ranges.group_sizes[rng.random_range(0..ranges.group_sizes.len())];
    let contest_days = ranges.contest_days.sample(rng);
    let signup_days = ranges.signup_days.sample(rng);
    let top = ranges.top_prize.sample(rng);
    let mut prize_schedule = [0.0; 5];
    for (p, m) in prize_schedule.iter_mut().zip(ranges.prize_decay) {
        *p = (top * m / 10.0).round() * 10.0;
    }
    if rng.random_bool(ranges.fifth_prize_prob) {
        prize_schedule[4] = prize_schedule[3] / 2.0;
    }
    let captain_bonus = rng.random_bool(ranges.captain_bonus_prob);
    let exclude_worst_member = rng.random_bool(ranges.exclude_worst_prob);
    let performance_metric = match rng.random_range(0..3) {
        0 => PerformanceMetric::Revenue,
        1 => PerformanceMetric::Rides,
        _ => PerformanceMetric::Blend,
    };
    ContestDesign {
        team_size,
        group_size,
        contest_days,
        start_date,
        signup_days,
        prize_schedule,
        captain_bonus,
        exclude_worst_member,
        performance_metric,
    }
}

/// How sign-ups end up in teams.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationOptions {
    /// Share of sign-ups who form their own teams.
    pub self_formed_frac: f64,
    /// Share of the remaining drivers held out as solo controls.
    pub holdout_frac: f64,
    pub homophily: HomophilyWeights,
    /// Days of panel history kept before the contest start.
    pub pre_days: u32,
}

impl From<&SynthConfig> for FormationOptions {
    fn from(c: &SynthConfig) -> Self {
        Self {
            self_formed_frac: c.self_formed_frac,
            holdout_frac: c.holdout_frac,
            homophily: c.homophily.clone(),
            pre_days: c.pre_days,
        }
    }
}

impl Default for FormationOptions {
    fn default() -> Self {
        Self::from(&SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContestOutcome {
    pub dataset: ContestDataset,
    pub truth: GroundTruth,
}

/// Every driver of `pool` is treated as a sign-up.
pub fn generate_contest(
    id: ContestId,
    city: &City,
    design: &ContestDesign,
    pool: &DriverPool,
    dgp: &DgpConfig,
    options: &FormationOptions,
    seed: u64,
) -> Result<ContestOutcome> {
    design.validate()?;
    if !(0.0..1.0).contains(&options.self_formed_frac) {
        return Err(Error::Config("self-formed fraction must lie in [0, 1)".into()));
    }
    let n = pool.len();
    if n < design.team_size + 1 {
        return Err(Error::Generation(format!(
            "{n} sign-ups cannot fill a team of {} plus one solo driver",
            design.team_size
        )));
    }
    let contest = design.contest_period()?;
    let window = Period {
        start: design.start_date - Duration::days(i64::from(options.pre_days)),
        end: contest.end + Duration::days(1),
    };
    if window.start > design.signup_start() - Duration::days(30) {
        return Err(Error::Config("pre-contest history is shorter than 30 days".into()));
    }
    city.weather.over(&window)?;

    let mut history: HashMap<(DriverId, DriverId), u32> = HashMap::new();
    for r in &pool.coteam_history {
        *history.entry((r.a, r.b)).or_default() += 1;
    }

    // Self-formed teams.
    let mut frng = rng_for(seed, &[1]);
    let mut open: Vec<DriverId> = pool.ids();
    open.shuffle(&mut frng);
    let n_self_teams =
        ((options.self_formed_frac * n as f64).round() as usize) / design.team_size;
    let mut teams: Vec<Team> = Vec::new();
    let team_id = |t: usize| TeamId(id.0 * 10_000 + t as u64 + 1);
    let h = &options.homophily;
    for _ in 0..n_self_teams {
        let captain = open.swap_remove(0);
        let cp = &pool.drivers[&captain].profile;
        let mut members = Vec::with_capacity(design.team_size - 1);
        for _ in 1..design.team_size {
            let weights: Vec<f64> = open
                .iter()
                .map(|d| {
                    let p = &pool.drivers[d].profile;
                    let key = if captain < *d { (captain, *d) } else { (*d, captain) };
                    1.0 + h.hometown * f64::from(u8::from(p.hometown == cp.hometown))
                        + h.region * f64::from(u8::from(p.activity_region == cp.activity_region))
                        + h.history * f64::from(history.get(&key).copied().unwrap_or(0))
                })
                .collect();
            let pick = WeightedIndex::new(&weights)
                .map_err(|e| Error::Generation(e.to_string()))?
                .sample(&mut frng);
            members.push(open.swap_remove(pick));
        }
        teams.push(Team {
            id: team_id(teams.len()),
            contest_id: id,
            captain_id: captain,
            member_ids: members,
            formation: Formation::SelfFormed,
        });
    }

    // Platform teams over the remaining sign-ups.
    open.sort();
    let assignment = assign_system_teams(
        &open,
        design.team_size,
        options.holdout_frac,
        derive_seed(seed, &[2]),
    )?;
    for chunk in &assignment.teams {
        teams.push(Team {
            id: team_id(teams.len()),
            contest_id: id,
            captain_id: chunk[0],
            member_ids: chunk[1..].to_vec(),
            formation: Formation::SystemFormed,
        });
    }
    if teams.is_empty() || assignment.solo_ids.is_empty() {
        return Err(Error::Generation(format!(
            "{n} sign-ups yield {} teams and {} solo drivers",
            teams.len(),
            assignment.solo_ids.len()
        )));
    }

    let mut panels = BTreeMap::new();
    let mut prior_contest_revenue = BTreeMap::new();
    for (did, d) in &pool.drivers {
        let rows = d.ledger.slice(&window);
        if rows.len() != window.len_days() {
            return Err(Error::Generation(format!(
                "ledger of driver {did} does not cover {window}"
            )));
        }
        panels.insert(*did, RevenuePanel::new(*did, rows.to_vec())?);
        if let Some(last) = pool.last_contest.get(did) {
            if last.end < design.signup_start() {
                prior_contest_revenue.insert(*did, d.ledger.mean_over(last, Metric::Revenue));
            }
        }
    }

    let baseline = baseline_period(&contest, design.signup_start());
    let contest_groups = partition_contest_groups(&teams, &panels, design.group_size, &baseline)?;

    let mut dataset = ContestDataset {
        id,
        design: design.clone(),
        city: city.clone(),
        drivers: pool
            .drivers
            .iter()
            .map(|(k, v)| (*k, v.profile.clone()))
            .collect(),
        teams,
        contest_groups,
        solo_ids: assignment.solo_ids,
        overflow_ids: assignment.overflow_ids,
        panels,
        coteam_history: pool.coteam_history.clone(),
        prior_contest_revenue,
    };

    // Treatment effects from the pre-contest feature rows.
    let effect = dgp.effect.compile(&FeatureSchema::standard())?;
    let rows = extract_treated_rows(&dataset)?;
    let mut erng = rng_for(seed, &[3]);
    let mut true_ite = BTreeMap::new();
    for (did, _, row) in &rows {
        let latent = pool.drivers[did].latent.effort_response;
        let e = effect.draw(row, latent, &mut erng);
        let panel = dataset.panels.get_mut(did).expect("treated driver has a panel");
        let mut zrng = rng_for(seed, &[4, did.0]);
        let mut shift = 0.0;
        let start = window.start;
        for day in contest.days() {
            let rec = &mut panel.rows_mut()[(day - start).num_days() as usize];
            let revenue = (rec.revenue + e).max(0.0);
            shift += revenue - rec.revenue;
            if rec.revenue > 0.0 {
                let k = revenue / rec.revenue;
                rec.rides = (rec.rides * k).round();
                rec.hours *= k;
            } else {
                let zq: f64 = zrng.sample(StandardNormal);
                let zh: f64 = zrng.sample(StandardNormal);
                let a = activity(revenue, dgp.baseline.fare, city.avg_hourly_pay, zq, zh, day);
                rec.rides = a.rides;
                rec.hours = a.hours;
            }
            rec.revenue = revenue;
        }
        true_ite.insert(*did, shift / contest.len_days() as f64);
    }
    let true_atet = true_ite.values().sum::<f64>() / true_ite.len() as f64;
    dataset.coteam_history.sort();

    let truth = GroundTruth {
        contest_id: id,
        true_ite,
        true_atet,
        latent: pool.drivers.iter().map(|(k, v)| (*k, v.latent)).collect(),
        dgp_seed: seed,
        dgp: dgp.clone(),
    };
    Ok(ContestOutcome { dataset, truth })
}

/// All cities and contests of one synthetic run.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: SynthConfig,
    pub cities: Vec<City>,
    pub contests: Vec<ContestOutcome>,
}

impl World {
    pub fn datasets(&self) -> Vec<ContestDataset> {
        self.contests.iter().map(|c| c.dataset.clone()).collect()
    }

    pub fn n_unique_drivers(&self) -> usize {
        let ids: BTreeSet<DriverId> = self
            .contests
            .iter()
            .flat_map(|c| c.dataset.drivers.keys().copied())
            .collect();
        ids.len()
    }

    pub fn n_participations(&self) -> usize {
        self.contests.iter().map(|c| c.dataset.drivers.len()).sum()
    }
}

pub fn generate_world(config: &SynthConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let per_city: Vec<(City, Vec<ContestOutcome>)> = (0..config.n_cities)
        .into_par_iter()
        .map(|ci| generate_city_contests(config, seed, ci))
        .collect::<Result<_>>()?;
    let mut cities = Vec::with_capacity(per_city.len());
    let mut contests = Vec::new();
    for (city, outcomes) in per_city {
        cities.push(city);
        contests.extend(outcomes);
    }
    Ok(World {
        seed,
        config: config.clone(),
        cities,
        contests,
    })
}

fn generate_city_contests(
    config: &SynthConfig,
    seed: u64,
    ci: usize,
) -> Result<(City, Vec<ContestOutcome>)> {
    let c = ci as u64 + 1;
    let mut city = generate_city(config, CityId(c), derive_seed(seed, &[1, c]))?;
    let mut pool = DriverPool::generate(
        &city,
        config,
        config.drivers_per_city,
        c * 1_000_000,
        derive_seed(seed, &[2, c]),
    )?;
    let original = city.clone();
    let options = FormationOptions::from(config);
    let mut outcomes = Vec::with_capacity(config.contests_per_city);
    for k in 0..config.contests_per_city {
        let cid = ContestId(c * 1000 + k as u64 + 1);
        let mut rng = rng_for(seed, &[3, cid.0]);
        let slot = config.slot(k);
        let days = config.design.contest_days.sample(&mut rng);
        let earliest = slot.start + Duration::days(i64::from(MIN_LEAD_DAYS));
        let latest = slot.end - Duration::days(i64::from(days) - 1);
        let offset = rng.random_range(0..=(latest - earliest).num_days());
        let mut design = draw_design(&config.design, earliest + Duration::days(offset), &mut rng);
        design.contest_days = days;
        let n_signups = (config.signups.sample(&mut rng) as usize).min(pool.len());
        let ids = pool.ids();
        let chosen: Vec<DriverId> = index::sample(&mut rng, ids.len(), n_signups)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        let sub = pool.subset(&chosen)?;
        let outcome = generate_contest(
            cid,
            &city,
            &design,
            &sub,
            &config.dgp,
            &options,
            derive_seed(seed, &[4, cid.0]),
        )?;
        pool.record(&outcome.dataset)?;
        city.n_prior_contests += 1;
        outcomes.push(outcome);
    }
    Ok((original, outcomes))
}
