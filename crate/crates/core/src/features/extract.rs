use std::collections::{BTreeMap, HashMap};

use chrono::Duration;

use super::{FeatureGroup, FeatureKind, FeatureMatrix, FeatureSchema, RowKey, N_PROVINCES};
use crate::did::{baseline_period, IteRecord, Metric, RevenuePanel};
use crate::error::{Error, Result};
use crate::stats;
use crate::synthgen::{
    City, ContestDataset, ContestDesign, DriverProfile, Formation, Gender, PerformanceMetric, Team,
    Weather,
};
use crate::types::{ContestId, DriverId, Period, TeamId};

use FeatureGroup::{City as GCity, Contest as GContest, Driver as GDriver, Team as GTeam};
use FeatureKind::{Continuous as C, Dummy as D};

const CONTEST_DESIGN_COLUMNS: &[(&str, FeatureKind)] = &[
    ("team_size", C),
    ("group_size", C),
    ("contest_days", C),
    ("signup_days", C),
    ("prize_rank1", C),
    ("prize_rank2", C),
    ("prize_rank3", C),
    ("prize_rank4", C),
    ("prize_rank5", C),
    ("prize_total", C),
    ("rewards_5th", D),
    ("captain_bonus", D),
    ("exclude_worst_member", D),
    ("metric_revenue", D),
    ("metric_rides", D),
    ("metric_blend", D),
];

const CONTEST_ENV_COLUMNS: &[(&str, FeatureKind)] =
    &[("weather_snow_frac", C), ("weather_rain_frac", C)];

const DRIVER_TAIL_COLUMNS: &[(&str, FeatureKind)] = &[
    ("age", C),
    ("gender_female", D),
    ("platform_age_months", C),
    ("rental_car", D),
    ("prev_contest_revenue", C),
    ("no_prior_contest", D),
    ("is_captain", D),
];

const TEAM_COLUMNS: &[(&str, FeatureKind)] = &[
    ("team_n_members", C),
    ("system_formed", D),
    ("age_diversity", C),
    ("hometown_diversity", C),
    ("hometown_homophily", C),
    ("region_homophily", C),
    ("team_history", C),
    ("team_prod_mean", C),
    ("team_prod_sum", C),
];

const RELATIONAL_COLUMNS: &[(&str, FeatureKind)] = &[
    ("diff_from_team_mean", C),
    ("diff_from_team_max", C),
    ("team_gap_to_group_top", C),
];

const CITY_HEAD_COLUMNS: &[(&str, FeatureKind)] = &[
    ("city_population_tier", C),
    ("city_supply_demand_ratio", C),
    ("city_avg_hourly_pay", C),
    ("city_n_prior_contests", C),
    ("city_n_drivers", C),
];

const WINDOWS: [&str; 3] = ["baseline", "last7", "last30"];

pub(super) fn column_table() -> Vec<(String, FeatureGroup, FeatureKind, bool)> {
    fn push(
        cols: &mut Vec<(String, FeatureGroup, FeatureKind, bool)>,
        list: &[(&str, FeatureKind)],
        group: FeatureGroup,
        design: bool,
    ) {
        cols.extend(list.iter().map(|&(n, k)| (n.to_string(), group, k, design)));
    }

    let mut cols = Vec::new();
    push(&mut cols, CONTEST_DESIGN_COLUMNS, GContest, true);
    push(&mut cols, CONTEST_ENV_COLUMNS, GContest, false);
    for m in Metric::ALL {
        for w in WINDOWS {
            for stat in ["mean", "sd"] {
                cols.push((format!("{}_{w}_{stat}", m.name()), GDriver, C, false));
            }
        }
    }
    push(&mut cols, DRIVER_TAIL_COLUMNS, GDriver, false);
    push(&mut cols, TEAM_COLUMNS, GTeam, false);
    push(&mut cols, RELATIONAL_COLUMNS, GTeam, false);
    push(&mut cols, CITY_HEAD_COLUMNS, GCity, false);
    for p in 0..N_PROVINCES {
        cols.push((format!("province_{p}"), GCity, D, false));
    }
    cols
}

fn dummy(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Fractions of snowstorm and rain days among `weather`.
pub fn weather_fractions(weather: &[Weather]) -> (f64, f64) {
    if weather.is_empty() {
        return (0.0, 0.0);
    }
    let n = weather.len() as f64;
    let snow = weather.iter().filter(|w| **w == Weather::Snowstorm).count() as f64;
    let rain = weather.iter().filter(|w| **w == Weather::Rain).count() as f64;
    (snow / n, rain / n)
}

/// Contest-group fragment: design encoding followed by contest-period weather.
pub fn contest_features(design: &ContestDesign, weather_during_contest: &[Weather]) -> Vec<f64> {
    let p = &design.prize_schedule;
    let mut v = vec![
        design.team_size as f64,
        design.group_size as f64,
        f64::from(design.contest_days),
        f64::from(design.signup_days),
    ];
    v.extend_from_slice(p);
    v.push(p.iter().sum());
    v.push(dummy(p[4] > 0.0));
    v.push(dummy(design.captain_bonus));
    v.push(dummy(design.exclude_worst_member));
    v.push(dummy(design.performance_metric == PerformanceMetric::Revenue));
    v.push(dummy(design.performance_metric == PerformanceMetric::Rides));
    v.push(dummy(design.performance_metric == PerformanceMetric::Blend));
    let (snow, rain) = weather_fractions(weather_during_contest);
    v.push(snow);
    v.push(rain);
    debug_assert_eq!(v.len(), CONTEST_DESIGN_COLUMNS.len() + CONTEST_ENV_COLUMNS.len());
    v
}

/// Design fields recoverable from an encoded contest fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignFields {
    pub team_size: usize,
    pub group_size: usize,
    pub contest_days: u32,
    pub signup_days: u32,
    pub prize_schedule: [f64; 5],
    pub captain_bonus: bool,
    pub exclude_worst_member: bool,
    pub performance_metric: PerformanceMetric,
}

impl DesignFields {
    pub fn of(design: &ContestDesign) -> Self {
        Self {
            team_size: design.team_size,
            group_size: design.group_size,
            contest_days: design.contest_days,
            signup_days: design.signup_days,
            prize_schedule: design.prize_schedule,
            captain_bonus: design.captain_bonus,
            exclude_worst_member: design.exclude_worst_member,
            performance_metric: design.performance_metric,
        }
    }
}

pub fn decode_design_fragment(fragment: &[f64]) -> Result<DesignFields> {
    if fragment.len() < CONTEST_DESIGN_COLUMNS.len() {
        return Err(Error::Schema("contest fragment too short".into()));
    }
    let metric = match (fragment[13], fragment[14], fragment[15]) {
        (1.0, _, _) => PerformanceMetric::Revenue,
        (_, 1.0, _) => PerformanceMetric::Rides,
        (_, _, 1.0) => PerformanceMetric::Blend,
        _ => return Err(Error::Data("no performance metric dummy set".into())),
    };
    let mut prizes = [0.0; 5];
    prizes.copy_from_slice(&fragment[4..9]);
    Ok(DesignFields {
        team_size: fragment[0] as usize,
        group_size: fragment[1] as usize,
        contest_days: fragment[2] as u32,
        signup_days: fragment[3] as u32,
        prize_schedule: prizes,
        captain_bonus: fragment[11] == 1.0,
        exclude_worst_member: fragment[12] == 1.0,
        performance_metric: metric,
    })
}

/// Inputs for one driver's fragment. All panel statistics use data strictly
/// before `t_k`.
pub struct DriverInputs<'a> {
    pub profile: &'a DriverProfile,
    pub panel: &'a RevenuePanel,
    pub t_k: chrono::NaiveDate,
    pub baseline: Period,
    pub prior_contest_revenue: Option<f64>,
    pub is_captain: bool,
}

pub fn driver_features(inp: &DriverInputs<'_>) -> Result<Vec<f64>> {
    match inp.panel.last_date() {
        Some(last) if inp.t_k <= last => {}
        _ => {
            return Err(Error::Leakage(format!(
                "driver {}: feature cut-off {} is after the end of the panel",
                inp.profile.id, inp.t_k
            )))
        }
    }
    if inp.baseline.end >= inp.t_k {
        return Err(Error::Leakage(format!(
            "driver {}: baseline period {} reaches the cut-off {}",
            inp.profile.id, inp.baseline, inp.t_k
        )));
    }
    let last = |days: i64| Period {
        start: inp.t_k - Duration::days(days),
        end: inp.t_k - Duration::days(1),
    };
    let windows = [inp.baseline, last(7), last(30)];
    let mut v = Vec::with_capacity(25);
    for m in Metric::ALL {
        for w in &windows {
            let xs = inp.panel.daily_values(w, m);
            v.push(stats::mean(&xs));
            v.push(stats::sample_sd(&xs));
        }
    }
    let p = inp.profile;
    v.push(f64::from(p.age));
    v.push(dummy(p.gender == Gender::Female));
    v.push(f64::from(p.platform_age_months));
    v.push(dummy(p.rental_car));
    v.push(inp.prior_contest_revenue.unwrap_or(0.0));
    v.push(dummy(inp.prior_contest_revenue.is_none()));
    v.push(dummy(inp.is_captain));
    Ok(v)
}

/// Inputs for a team fragment seen from one focal member.
pub struct TeamInputs<'a> {
    pub team: &'a Team,
    /// Profiles of every member, captain included.
    pub members: &'a [&'a DriverProfile],
    pub focal: DriverId,
    /// Prior co-team counts keyed by ordered driver pair.
    pub pair_history: &'a HashMap<(DriverId, DriverId), u32>,
    /// Baseline-period mean daily revenue of each member, aligned to `members`.
    pub member_productivity: &'a [f64],
}

pub(crate) fn pair_key(a: DriverId, b: DriverId) -> (DriverId, DriverId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn team_features(inp: &TeamInputs<'_>) -> Vec<f64> {
    let members = inp.members;
    let n = members.len();
    let ages: Vec<f64> = members.iter().map(|m| f64::from(m.age)).collect();

    let mut hometown_counts: BTreeMap<u16, usize> = BTreeMap::new();
    for m in members {
        *hometown_counts.entry(m.hometown).or_default() += 1;
    }
    let max_share = hometown_counts.values().copied().max().unwrap_or(0) as f64 / n.max(1) as f64;

    let focal = members.iter().find(|m| m.id == inp.focal);
    let hometown_homophily = match focal {
        Some(f) if n > 1 => {
            let same = members
                .iter()
                .filter(|m| m.id != f.id && m.hometown == f.hometown)
                .count();
            same as f64 / (n - 1) as f64
        }
        _ => 0.0,
    };

    let mut pairs = 0usize;
    let mut same_region = 0usize;
    let mut history = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            pairs += 1;
            if members[i].activity_region == members[j].activity_region {
                same_region += 1;
            }
            history += u64::from(
                inp.pair_history
                    .get(&pair_key(members[i].id, members[j].id))
                    .copied()
                    .unwrap_or(0),
            );
        }
    }
    let per_pair = |x: f64| if pairs == 0 { 0.0 } else { x / pairs as f64 };

    vec![
        n as f64,
        dummy(inp.team.formation == Formation::SystemFormed),
        stats::sample_sd(&ages),
        1.0 - max_share,
        hometown_homophily,
        per_pair(same_region as f64),
        per_pair(history as f64),
        stats::mean(inp.member_productivity),
        inp.member_productivity.iter().sum(),
    ]
}

/// Driver-vs-team and team-vs-group productivity gaps on baseline revenue.
pub fn relational_features(
    driver_productivity: f64,
    member_productivity: &[f64],
    group_team_totals: &[f64],
) -> Vec<f64> {
    let team_mean = stats::mean(member_productivity);
    let team_max = member_productivity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let team_total: f64 = member_productivity.iter().sum();
    let group_top = group_team_totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    vec![
        driver_productivity - team_mean,
        driver_productivity - team_max,
        team_total - group_top,
    ]
}

pub fn city_features(city: &City) -> Vec<f64> {
    let mut v = vec![
        f64::from(city.population_tier),
        city.supply_demand_ratio,
        city.avg_hourly_pay,
        f64::from(city.n_prior_contests),
        f64::from(city.n_drivers),
    ];
    for p in 0..N_PROVINCES {
        v.push(dummy(usize::from(city.province) == p));
    }
    v
}

/// Feature rows of every teamed driver in a contest, in driver-id order.
pub fn extract_treated_rows(dataset: &ContestDataset) -> Result<Vec<(DriverId, TeamId, Vec<f64>)>> {
    let contest_period = dataset.contest_period()?;
    let t_k = dataset.signup_start();
    let baseline = baseline_period(&contest_period, t_k);

    let weather = dataset.city.weather.over(&contest_period)?;
    let contest_frag = contest_features(&dataset.design, &weather);
    let city_frag = city_features(&dataset.city);

    let mut pair_history: HashMap<(DriverId, DriverId), u32> = HashMap::new();
    for rec in &dataset.coteam_history {
        if rec.contest_id != dataset.id {
            *pair_history.entry(pair_key(rec.a, rec.b)).or_default() += 1;
        }
    }

    let productivity = |id: DriverId| -> Result<f64> {
        let panel = dataset
            .panels
            .get(&id)
            .ok_or_else(|| Error::Data(format!("driver {id} has no panel")))?;
        Ok(panel.mean_over(&baseline, Metric::Revenue))
    };

    let mut team_totals: HashMap<TeamId, f64> = HashMap::new();
    let mut team_prod: HashMap<TeamId, Vec<f64>> = HashMap::new();
    for team in &dataset.teams {
        let prods = team
            .all_members()
            .map(productivity)
            .collect::<Result<Vec<_>>>()?;
        team_totals.insert(team.id, prods.iter().sum());
        team_prod.insert(team.id, prods);
    }
    let mut group_of: HashMap<TeamId, usize> = HashMap::new();
    for (g, group) in dataset.contest_groups.iter().enumerate() {
        for t in &group.team_ids {
            group_of.insert(*t, g);
        }
    }

    let mut rows = Vec::new();
    for team in &dataset.teams {
        let ids: Vec<DriverId> = team.all_members().collect();
        let profiles = ids
            .iter()
            .map(|id| {
                dataset
                    .drivers
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("driver {id} has no profile")))
            })
            .collect::<Result<Vec<_>>>()?;
        let prods = &team_prod[&team.id];
        let group_totals: Vec<f64> = match group_of.get(&team.id) {
            Some(&g) => dataset.contest_groups[g]
                .team_ids
                .iter()
                .map(|t| team_totals.get(t).copied().unwrap_or(0.0))
                .collect(),
            None => vec![team_totals[&team.id]],
        };
        for (pos, &id) in ids.iter().enumerate() {
            let panel = &dataset.panels[&id];
            let mut row = contest_frag.clone();
            row.extend(driver_features(&DriverInputs {
                profile: profiles[pos],
                panel,
                t_k,
                baseline,
                prior_contest_revenue: dataset.prior_contest_revenue.get(&id).copied(),
                is_captain: id == team.captain_id,
            })?);
            row.extend(team_features(&TeamInputs {
                team,
                members: &profiles,
                focal: id,
                pair_history: &pair_history,
                member_productivity: prods,
            }));
            row.extend(relational_features(prods[pos], prods, &group_totals));
            row.extend(city_frag.iter().copied());
            rows.push((id, team.id, row));
        }
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows)
}

/// One row per ITE record, labelled with its ITE, sorted by (contest, driver).
pub fn assemble_matrix(
    contests: &[ContestDataset],
    ite_records: &[IteRecord],
    schema: &FeatureSchema,
) -> Result<FeatureMatrix> {
    let standard = FeatureSchema::standard();
    if schema.hash() != standard.hash() {
        return Err(Error::Schema(format!(
            "extractor emits schema {} but {} was requested",
            standard.version, schema.version
        )));
    }
    let mut by_contest: HashMap<ContestId, HashMap<DriverId, Vec<f64>>> = HashMap::new();
    for ds in contests {
        let rows = extract_treated_rows(ds)?;
        by_contest.insert(ds.id, rows.into_iter().map(|(d, _, r)| (d, r)).collect());
    }
    let mut records: Vec<&IteRecord> = ite_records.iter().collect();
    records.sort_by_key(|r| (r.contest_id, r.driver_id));
    let mut rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut keys = Vec::with_capacity(records.len());
    for r in records {
        let row = by_contest
            .get(&r.contest_id)
            .and_then(|m| m.get(&r.driver_id))
            .ok_or_else(|| {
                Error::Data(format!(
                    "no features for driver {} in contest {}",
                    r.driver_id, r.contest_id
                ))
            })?;
        rows.push(row.clone());
        labels.push(r.ite);
        keys.push(RowKey {
            contest_id: r.contest_id,
            driver_id: r.driver_id,
        });
    }
    FeatureMatrix::from_rows(schema.clone(), &rows, labels, keys)
}
