use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ContestGroup, Team};
use crate::did::{Metric, RevenuePanel};
use crate::error::{Error, Result};
use crate::types::{DriverId, Period, TeamId};

/// Outcome of platform team building over the unteamed sign-ups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemAssignment {
    /// Full teams, captain first.
    pub teams: Vec<Vec<DriverId>>,
    /// Randomized hold-out controls.
    pub solo_ids: Vec<DriverId>,
    /// Drivers left over after chunking into full teams.
    pub overflow_ids: Vec<DriverId>,
}

pub fn assign_system_teams(
    unteamed_ids: &[DriverId],
    team_size: usize,
    holdout_frac: f64,
    seed: u64,
) -> Result<SystemAssignment> {
    if team_size < 3 {
        return Err(Error::InvalidDesign(format!("team size {team_size} is below 3")));
    }
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_frac} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = unteamed_ids.to_vec();
    ids.shuffle(&mut rng);
    let n_solo = (holdout_frac * ids.len() as f64).round() as usize;
    let rest = ids.split_off(n_solo.min(ids.len()));
    let mut solo_ids = ids;
    solo_ids.sort();

    let mut teams = Vec::new();
    let mut chunks = rest.chunks_exact(team_size);
    for c in chunks.by_ref() {
        teams.push(c.to_vec());
    }
    let mut overflow_ids = chunks.remainder().to_vec();
    overflow_ids.sort();
    Ok(SystemAssignment {
        teams,
        solo_ids,
        overflow_ids,
    })
}

/// Sorts teams by summed member mean daily revenue over `pre_window` (ties by
/// team id) and chunks them into consecutive groups of `group_size`.
pub fn partition_contest_groups(
    teams: &[Team],
    panels: &BTreeMap<DriverId, RevenuePanel>,
    group_size: usize,
    pre_window: &Period,
) -> Result<Vec<ContestGroup>> {
    if teams.is_empty() {
        return Err(Error::Generation("no teams to partition".into()));
    }
    if group_size == 0 {
        return Err(Error::InvalidDesign("group size must be positive".into()));
    }
    let mut scored: Vec<(f64, TeamId)> = Vec::with_capacity(teams.len());
    for team in teams {
        let mut total = 0.0;
        for id in team.all_members() {
            let panel = panels
                .get(&id)
                .ok_or_else(|| Error::Data(format!("driver {id} has no panel")))?;
            match (panel.first_date(), panel.last_date()) {
                (Some(a), Some(b)) if a <= pre_window.start && b >= pre_window.end => {}
                _ => {
                    return Err(Error::Data(format!(
                        "panel of driver {id} does not cover {pre_window}"
                    )))
                }
            }
            total += panel.mean_over(pre_window, Metric::Revenue);
        }
        scored.push((total, team.id));
    }
    Ok(partition_scores(scored, group_size))
}

pub(crate) fn partition_scores(mut scored: Vec<(f64, TeamId)>, group_size: usize) -> Vec<ContestGroup> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored
        .chunks(group_size)
        .map(|c| {
            let productivity: Vec<f64> = c.iter().map(|s| s.0).collect();
            let max = productivity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = productivity.iter().copied().fold(f64::INFINITY, f64::min);
            let productivity_ratio = if max == min {
                1.0
            } else if min > 0.0 {
                max / min
            } else {
                f64::INFINITY
            };
            ContestGroup {
                team_ids: c.iter().map(|s| s.1).collect(),
                productivity,
                productivity_ratio,
                short: c.len() < group_size,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did::DayRecord;
    use crate::synthgen::Formation;
    use crate::types::ContestId;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn ids(n: u64) -> Vec<DriverId> {
        (1..=n).map(DriverId).collect()
    }

    #[test]
    fn twenty_unteamed_drivers() {
        let a = assign_system_teams(&ids(20), 5, 0.10, 7).unwrap();
        assert_eq!(a.solo_ids.len(), 2);
        assert_eq!(a.teams.len(), 3);
        assert!(a.teams.iter().all(|t| t.len() == 5));
        assert_eq!(a.overflow_ids.len(), 3);
        let mut all: Vec<DriverId> = a.teams.concat();
        all.extend(&a.solo_ids);
        all.extend(&a.overflow_ids);
        all.sort();
        assert_eq!(all, ids(20));
    }

    #[test]
    fn sixty_unteamed_drivers() {
        let a = assign_system_teams(&ids(60), 5, 0.10, 1).unwrap();
        assert_eq!(a.solo_ids.len(), 6);
        assert_eq!(a.teams.len() * 5 + a.overflow_ids.len(), 54);
    }

    #[test]
    fn rejects_bad_holdout_and_team_size() {
        assert!(matches!(
            assign_system_teams(&ids(10), 5, 0.0, 1),
            Err(Error::Config(_))
        ));
        assert!(assign_system_teams(&ids(10), 5, 1.0, 1).is_err());
        assert!(matches!(
            assign_system_teams(&ids(10), 2, 0.1, 1),
            Err(Error::InvalidDesign(_))
        ));
    }

    #[test]
    fn solo_probability_is_uniform() {
        let n = 20u64;
        let seeds = 1000;
        let mut counts = vec![0usize; n as usize];
        for s in 0..seeds {
            let a = assign_system_teams(&ids(n), 5, 0.10, s).unwrap();
            for d in a.solo_ids {
                counts[(d.0 - 1) as usize] += 1;
            }
        }
        let p = 2.0 / n as f64;
        let se = (p * (1.0 - p) / seeds as f64).sqrt();
        for c in counts {
            let phat = c as f64 / seeds as f64;
            assert!((phat - p).abs() <= 3.5 * se, "solo frequency {phat} vs {p}");
        }
    }

    fn flat_panels(totals: &[f64], size: usize, start: NaiveDate) -> (Vec<Team>, BTreeMap<DriverId, RevenuePanel>) {
        let mut teams = Vec::new();
        let mut panels = BTreeMap::new();
        let mut next = 1u64;
        for (t, total) in totals.iter().enumerate() {
            let members: Vec<DriverId> = (0..size).map(|k| DriverId(next + k as u64)).collect();
            next += size as u64;
            for &m in &members {
                let rows = (0..7)
                    .map(|d| DayRecord {
                        date: start + chrono::Duration::days(d),
                        revenue: total / size as f64,
                        rides: 1.0,
                        hours: 1.0,
                    })
                    .collect();
                panels.insert(m, RevenuePanel::new(m, rows).unwrap());
            }
            teams.push(Team {
                id: TeamId(t as u64 + 1),
                contest_id: ContestId(1),
                captain_id: members[0],
                member_ids: members[1..].to_vec(),
                formation: Formation::SystemFormed,
            });
        }
        (teams, panels)
    }

    #[test]
    fn sort_and_chunk_example() {
        let start = NaiveDate::from_ymd_opt(2018, 3, 1).unwrap();
        let totals = [70.0, 10.0, 100.0, 40.0, 20.0, 90.0, 30.0, 60.0, 50.0, 80.0];
        let (teams, panels) = flat_panels(&totals, 4, start);
        let window = Period::starting_at(start, 7).unwrap();
        let groups = partition_contest_groups(&teams, &panels, 5, &window).unwrap();
        assert_eq!(groups.len(), 2);
        let sums = |g: &ContestGroup| g.productivity.iter().map(|x| x.round() as i64).collect::<Vec<_>>();
        assert_eq!(sums(&groups[0]), vec![10, 20, 30, 40, 50]);
        assert_eq!(sums(&groups[1]), vec![60, 70, 80, 90, 100]);
        assert!((groups[0].productivity_ratio - 5.0).abs() < 1e-9);
        assert!(!groups[1].short);
    }

    #[test]
    fn identical_teams_have_unit_ratio() {
        let start = NaiveDate::from_ymd_opt(2018, 3, 1).unwrap();
        let (teams, panels) = flat_panels(&[33.0; 5], 3, start);
        let window = Period::starting_at(start, 7).unwrap();
        let groups = partition_contest_groups(&teams, &panels, 5, &window).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].productivity_ratio, 1.0);
    }

    #[test]
    fn short_last_group_and_errors() {
        let start = NaiveDate::from_ymd_opt(2018, 3, 1).unwrap();
        let (teams, panels) = flat_panels(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], 3, start);
        let window = Period::starting_at(start, 7).unwrap();
        let groups = partition_contest_groups(&teams, &panels, 5, &window).unwrap();
        assert!(groups[1].short && groups[1].team_ids.len() == 2);
        assert!(partition_contest_groups(&[], &panels, 5, &window).is_err());
        let late = Period::starting_at(start, 10).unwrap();
        assert!(partition_contest_groups(&teams, &panels, 5, &late).is_err());
    }

    fn range(v: &[f64]) -> f64 {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    }

    proptest! {
        // Exchanging any pair of teams across two groups never shrinks the larger
        // of the two groups' internal ranges below what the sorted chunking gives.
        #[test]
        fn sorted_chunks_beat_cross_group_swaps(
            vals in prop::collection::vec(0.0f64..1000.0, 4..=8),
            gs in 2usize..=4,
        ) {
            let n = vals.len() / gs * gs;
            prop_assume!(n >= 2 * gs);
            let scored: Vec<(f64, TeamId)> = vals[..n].iter().enumerate().map(|(i, v)| (*v, TeamId(i as u64))).collect();
            let groups = partition_scores(scored, gs);
            for g1 in 0..groups.len() {
                for g2 in (g1 + 1)..groups.len() {
                    let base = range(&groups[g1].productivity).max(range(&groups[g2].productivity));
                    for i in 0..gs {
                        for j in 0..gs {
                            let mut a = groups[g1].productivity.clone();
                            let mut b = groups[g2].productivity.clone();
                            std::mem::swap(&mut a[i], &mut b[j]);
                            let swapped = range(&a).max(range(&b));
                            prop_assert!(base <= swapped + 1e-9);
                        }
                    }
                }
            }
        }
    }
}
