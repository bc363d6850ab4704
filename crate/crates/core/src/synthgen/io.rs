//! Dataset directories: one sub-directory per contest holding delimited tables
//! plus a `manifest.toml`, and a `ground_truth` sidecar kept apart from the
//! analyst-facing tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{DgpConfig, SynthConfig};
use super::generate::{ContestOutcome, World};
use super::{
    City, ContestDataset, ContestDesign, ContestGroup, CoteamRecord, DriverLatent, DriverProfile,
    Formation, Gender, GroundTruth, Team, Weather, WeatherSeries,
};
use crate::did::{DayRecord, RevenuePanel};
use crate::error::{Error, Result};
use crate::types::{CityId, ContestId, DriverId, TeamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_cities: usize,
    pub n_contests: usize,
    pub n_unique_drivers: usize,
    pub n_participations: usize,
    /// Contest sub-directories, relative to the dataset root.
    pub contests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub summary: DatasetSummary,
    pub config: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct CityInfo {
    id: CityId,
    province: u8,
    population_tier: u8,
    supply_demand_ratio: f64,
    avg_hourly_pay: f64,
    n_prior_contests: u32,
    n_drivers: u32,
}

#[derive(Serialize, Deserialize)]
struct ContestManifest {
    contest_id: ContestId,
    seed: u64,
    design: ContestDesign,
    city: CityInfo,
}

#[derive(Serialize, Deserialize)]
struct TruthManifest {
    contest_id: ContestId,
    true_atet: f64,
    dgp_seed: u64,
    dgp: DgpConfig,
}

#[derive(Serialize, Deserialize)]
struct DriverRow {
    driver_id: DriverId,
    role: String,
    age: u8,
    gender: Gender,
    platform_age_months: u16,
    hometown: u16,
    activity_region: u16,
    rental_car: bool,
    city_id: CityId,
    prior_contest_revenue: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TeamRow {
    team_id: TeamId,
    contest_id: ContestId,
    captain_id: DriverId,
    member_ids: String,
    formation: Formation,
}

#[derive(Serialize, Deserialize)]
struct GroupRow {
    group: usize,
    team_id: TeamId,
    productivity: f64,
    productivity_ratio: f64,
    short: bool,
}

#[derive(Serialize, Deserialize)]
struct PanelRow {
    driver_id: DriverId,
    date: NaiveDate,
    revenue: f64,
    rides: f64,
    hours: f64,
}

#[derive(Serialize, Deserialize)]
struct SoloRow {
    driver_id: DriverId,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct HistoryRow {
    driver_a: DriverId,
    driver_b: DriverId,
    contest_id: ContestId,
}

#[derive(Serialize, Deserialize)]
struct WeatherRow {
    date: NaiveDate,
    weather: Weather,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    driver_id: DriverId,
    true_ite: Option<f64>,
    latent_effort_response: f64,
    base_revenue: f64,
    volatility: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_path_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

fn csv_path_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

pub(crate) fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(toml::from_str(&text)?)
}

fn role_of(ds: &ContestDataset) -> BTreeMap<DriverId, &'static str> {
    let mut role = BTreeMap::new();
    for t in &ds.teams {
        role.insert(t.captain_id, "captain");
        for m in &t.member_ids {
            role.insert(*m, "member");
        }
    }
    for s in &ds.solo_ids {
        role.insert(*s, "solo");
    }
    for s in &ds.overflow_ids {
        role.insert(*s, "overflow");
    }
    role
}

/// Writes one contest. The ground-truth sidecar is written only when `truth`
/// is given.
pub fn write_contest_dir(
    dir: &Path,
    dataset: &ContestDataset,
    truth: Option<&GroundTruth>,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &dataset.city;
    write_toml(
        &dir.join("manifest.toml"),
        &ContestManifest {
            contest_id: dataset.id,
            seed,
            design: dataset.design.clone(),
            city: CityInfo {
                id: c.id,
                province: c.province,
                population_tier: c.population_tier,
                supply_demand_ratio: c.supply_demand_ratio,
                avg_hourly_pay: c.avg_hourly_pay,
                n_prior_contests: c.n_prior_contests,
                n_drivers: c.n_drivers,
            },
        },
    )?;

    let role = role_of(dataset);
    write_csv(
        &dir.join("drivers.csv"),
        dataset.drivers.values().map(|p| DriverRow {
            driver_id: p.id,
            role: role.get(&p.id).copied().unwrap_or("unassigned").to_string(),
            age: p.age,
            gender: p.gender,
            platform_age_months: p.platform_age_months,
            hometown: p.hometown,
            activity_region: p.activity_region,
            rental_car: p.rental_car,
            city_id: p.city_id,
            prior_contest_revenue: dataset.prior_contest_revenue.get(&p.id).copied(),
        }),
    )?;
    write_csv(
        &dir.join("teams.csv"),
        dataset.teams.iter().map(|t| TeamRow {
            team_id: t.id,
            contest_id: t.contest_id,
            captain_id: t.captain_id,
            member_ids: t
                .member_ids
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            formation: t.formation,
        }),
    )?;
    write_csv(
        &dir.join("groups.csv"),
        dataset.contest_groups.iter().enumerate().flat_map(|(g, grp)| {
            grp.team_ids
                .iter()
                .zip(&grp.productivity)
                .map(move |(t, p)| GroupRow {
                    group: g,
                    team_id: *t,
                    productivity: *p,
                    productivity_ratio: grp.productivity_ratio,
                    short: grp.short,
                })
        }),
    )?;
    write_csv(
        &dir.join("panels.csv"),
        dataset.panels.values().flat_map(|p| {
            p.rows().iter().map(move |r| PanelRow {
                driver_id: p.driver_id,
                date: r.date,
                revenue: r.revenue,
                rides: r.rides,
                hours: r.hours,
            })
        }),
    )?;
    write_csv(
        &dir.join("solo.csv"),
        dataset
            .solo_ids
            .iter()
            .map(|d| (d, "control"))
            .chain(dataset.overflow_ids.iter().map(|d| (d, "overflow")))
            .map(|(d, k)| SoloRow {
                driver_id: *d,
                kind: k.to_string(),
            }),
    )?;
    write_csv(
        &dir.join("history.csv"),
        dataset.coteam_history.iter().map(|r| HistoryRow {
            driver_a: r.a,
            driver_b: r.b,
            contest_id: r.contest_id,
        }),
    )?;
    let w = &c.weather;
    write_csv(
        &dir.join("weather.csv"),
        w.days.iter().enumerate().map(|(i, x)| WeatherRow {
            date: w.start + chrono::Duration::days(i as i64),
            weather: *x,
        }),
    )?;

    if let Some(gt) = truth {
        write_toml(
            &dir.join("ground_truth.toml"),
            &TruthManifest {
                contest_id: gt.contest_id,
                true_atet: gt.true_atet,
                dgp_seed: gt.dgp_seed,
                dgp: gt.dgp.clone(),
            },
        )?;
        write_csv(
            &dir.join("ground_truth.csv"),
            gt.latent.iter().map(|(id, l)| TruthRow {
                driver_id: *id,
                true_ite: gt.true_ite.get(id).copied(),
                latent_effort_response: l.effort_response,
                base_revenue: l.base_revenue,
                volatility: l.volatility,
            }),
        )?;
    }
    Ok(())
}

fn parse_ids(s: &str) -> Result<Vec<DriverId>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u64>()
                .map(DriverId)
                .map_err(|_| Error::Data(format!("invalid driver id {t:?}")))
        })
        .collect()
}

/// Reads one contest and its ground truth when the sidecar is present.
pub fn read_contest_dir(dir: &Path) -> Result<(ContestDataset, Option<GroundTruth>)> {
    let m: ContestManifest = read_toml(&dir.join("manifest.toml"))?;
    let weather_rows: Vec<WeatherRow> = read_csv(&dir.join("weather.csv"))?;
    let start = weather_rows
        .first()
        .map(|r| r.date)
        .ok_or_else(|| Error::Data(format!("{}: empty weather table", dir.display())))?;
    for (i, r) in weather_rows.iter().enumerate() {
        if r.date != start + chrono::Duration::days(i as i64) {
            return Err(Error::Data(format!("weather table has a gap at {}", r.date)));
        }
    }
    let city = City {
        id: m.city.id,
        province: m.city.province,
        population_tier: m.city.population_tier,
        supply_demand_ratio: m.city.supply_demand_ratio,
        avg_hourly_pay: m.city.avg_hourly_pay,
        n_prior_contests: m.city.n_prior_contests,
        n_drivers: m.city.n_drivers,
        weather: WeatherSeries {
            start,
            days: weather_rows.iter().map(|r| r.weather).collect(),
        },
    };

    let mut drivers = BTreeMap::new();
    let mut prior_contest_revenue = BTreeMap::new();
    for r in read_csv::<DriverRow>(&dir.join("drivers.csv"))? {
        if let Some(v) = r.prior_contest_revenue {
            prior_contest_revenue.insert(r.driver_id, v);
        }
        drivers.insert(
            r.driver_id,
            DriverProfile {
                id: r.driver_id,
                age: r.age,
                gender: r.gender,
                platform_age_months: r.platform_age_months,
                hometown: r.hometown,
                activity_region: r.activity_region,
                rental_car: r.rental_car,
                city_id: r.city_id,
            },
        );
    }

    let teams = read_csv::<TeamRow>(&dir.join("teams.csv"))?
        .into_iter()
        .map(|r| {
            Ok(Team {
                id: r.team_id,
                contest_id: r.contest_id,
                captain_id: r.captain_id,
                member_ids: parse_ids(&r.member_ids)?,
                formation: r.formation,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut contest_groups: Vec<ContestGroup> = Vec::new();
    for r in read_csv::<GroupRow>(&dir.join("groups.csv"))? {
        if r.group == contest_groups.len() {
            contest_groups.push(ContestGroup {
                team_ids: Vec::new(),
                productivity: Vec::new(),
                productivity_ratio: r.productivity_ratio,
                short: r.short,
            });
        } else if r.group + 1 != contest_groups.len() {
            return Err(Error::Data(format!("groups table is out of order at group {}", r.group)));
        }
        let g = contest_groups.last_mut().expect("group present");
        g.team_ids.push(r.team_id);
        g.productivity.push(r.productivity);
    }

    let mut rows: BTreeMap<DriverId, Vec<DayRecord>> = BTreeMap::new();
    for r in read_csv::<PanelRow>(&dir.join("panels.csv"))? {
        rows.entry(r.driver_id).or_default().push(DayRecord {
            date: r.date,
            revenue: r.revenue,
            rides: r.rides,
            hours: r.hours,
        });
    }
    let panels = rows
        .into_iter()
        .map(|(id, rs)| Ok((id, RevenuePanel::new(id, rs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut solo_ids = Vec::new();
    let mut overflow_ids = Vec::new();
    for r in read_csv::<SoloRow>(&dir.join("solo.csv"))? {
        match r.kind.as_str() {
            "control" => solo_ids.push(r.driver_id),
            "overflow" => overflow_ids.push(r.driver_id),
            k => return Err(Error::Data(format!("unknown solo kind {k:?}"))),
        }
    }
    let coteam_history = read_csv::<HistoryRow>(&dir.join("history.csv"))?
        .into_iter()
        .map(|r| CoteamRecord {
            a: r.driver_a,
            b: r.driver_b,
            contest_id: r.contest_id,
        })
        .collect();

    let dataset = ContestDataset {
        id: m.contest_id,
        design: m.design,
        city,
        drivers,
        teams,
        contest_groups,
        solo_ids,
        overflow_ids,
        panels,
        coteam_history,
        prior_contest_revenue,
    };

    let truth_path = dir.join("ground_truth.toml");
    let truth = if truth_path.exists() {
        let tm: TruthManifest = read_toml(&truth_path)?;
        let mut true_ite = BTreeMap::new();
        let mut latent = BTreeMap::new();
        for r in read_csv::<TruthRow>(&dir.join("ground_truth.csv"))? {
            if let Some(v) = r.true_ite {
                true_ite.insert(r.driver_id, v);
            }
            latent.insert(
                r.driver_id,
                DriverLatent {
                    effort_response: r.latent_effort_response,
                    base_revenue: r.base_revenue,
                    volatility: r.volatility,
                },
            );
        }
        Some(GroundTruth {
            contest_id: tm.contest_id,
            true_ite,
            true_atet: tm.true_atet,
            latent,
            dgp_seed: tm.dgp_seed,
            dgp: tm.dgp,
        })
    } else {
        None
    };
    Ok((dataset, truth))
}

fn contest_dir_name(id: ContestId) -> String {
    format!("contest_{id}")
}

pub fn write_dataset_dir(dir: &Path, world: &World) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(world.contests.len());
    for ContestOutcome { dataset, truth } in &world.contests {
        let name = contest_dir_name(dataset.id);
        write_contest_dir(&dir.join(&name), dataset, Some(truth), truth.dgp_seed)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        seed: world.seed,
        summary: DatasetSummary {
            n_cities: world.cities.len(),
            n_contests: world.contests.len(),
            n_unique_drivers: world.n_unique_drivers(),
            n_participations: world.n_participations(),
            contests: names,
        },
        config: world.config.clone(),
    };
    write_toml(&dir.join("manifest.toml"), &manifest)?;
    Ok(manifest)
}

/// Contest datasets in manifest order, with ground truth where present.
pub type LoadedDataset = (DatasetManifest, Vec<(ContestDataset, Option<GroundTruth>)>);

pub fn read_dataset_dir(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_toml(&dir.join("manifest.toml"))?;
    let contests = manifest
        .summary
        .contests
        .iter()
        .map(|name| read_contest_dir(&PathBuf::from(dir).join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, contests))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_world, IntRange};

    #[test]
    fn dataset_round_trips_exactly() {
        let cfg = SynthConfig {
            n_cities: 1,
            contests_per_city: 2,
            drivers_per_city: 150,
            calendar_start: NaiveDate::from_ymd_opt(2018, 3, 5).unwrap(),
            calendar_end: NaiveDate::from_ymd_opt(2018, 4, 30).unwrap(),
            signups: IntRange::new(60, 90),
            ..SynthConfig::default()
        };
        let world = generate_world(&cfg, 3).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let written = write_dataset_dir(tmp.path(), &world).unwrap();
        let (manifest, contests) = read_dataset_dir(tmp.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(manifest.config, cfg);
        assert_eq!(contests.len(), 2);
        for ((ds, gt), orig) in contests.iter().zip(&world.contests) {
            assert_eq!(ds, &orig.dataset);
            assert_eq!(gt.as_ref().unwrap(), &orig.truth);
        }
    }

    #[test]
    fn latent_parameters_stay_in_the_sidecar() {
        let cfg = SynthConfig {
            n_cities: 1,
            contests_per_city: 1,
            drivers_per_city: 80,
            calendar_start: NaiveDate::from_ymd_opt(2018, 3, 5).unwrap(),
            calendar_end: NaiveDate::from_ymd_opt(2018, 3, 31).unwrap(),
            signups: IntRange::new(60, 70),
            ..SynthConfig::default()
        };
        let world = generate_world(&cfg, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let c = &world.contests[0];
        write_contest_dir(tmp.path(), &c.dataset, None, 1).unwrap();
        assert!(!tmp.path().join("ground_truth.csv").exists());
        for f in ["drivers.csv", "manifest.toml", "panels.csv"] {
            let text = fs::read_to_string(tmp.path().join(f)).unwrap();
            assert!(!text.contains("effort_response"));
        }
        let (ds, gt) = read_contest_dir(tmp.path()).unwrap();
        assert_eq!(ds, c.dataset);
        assert!(gt.is_none());
    }
}
