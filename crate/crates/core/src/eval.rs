//! Temporal train/validation/test splits, pooled RMSE, model comparison and
//! error analysis on held-out contests.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, RowKey};
use crate::models::{ModelFamily, TrainedModel};
use crate::stats;
use crate::types::{ContestId, Period};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Training contests end on or before this date.
    pub train_end: NaiveDate,
    /// Validation contests lie entirely within `[val_start, val_end]`.
    pub val_start: NaiveDate,
    pub val_end: NaiveDate,
    /// Test contests start on or after this date.
    pub test_start: NaiveDate,
}

impl Default for SplitSpec {
    fn default() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2018, m, day).unwrap();
        Self {
            train_end: d(6, 30),
            val_start: d(7, 1),
            val_end: d(7, 31),
            test_start: d(8, 1),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_end < self.val_start
            && self.val_start <= self.val_end
            && self.val_end < self.test_start)
        {
            return Err(Error::Config(format!(
                "split windows overlap or are out of order: train ≤ {}, val {}..{}, test ≥ {}",
                self.train_end, self.val_start, self.val_end, self.test_start
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
    Excluded,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
            SplitRole::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: BTreeSet<ContestId>,
    pub val: BTreeSet<ContestId>,
    pub test: BTreeSet<ContestId>,
    pub excluded: BTreeSet<ContestId>,
}

impl DataSplit {
    pub fn role(&self, id: ContestId) -> SplitRole {
        if self.train.contains(&id) {
            SplitRole::Train
        } else if self.val.contains(&id) {
            SplitRole::Val
        } else if self.test.contains(&id) {
            SplitRole::Test
        } else {
            SplitRole::Excluded
        }
    }

    /// (train, val, test) rows of `m`.
    pub fn apply(&self, m: &FeatureMatrix) -> (FeatureMatrix, FeatureMatrix, FeatureMatrix) {
        (
            m.filter_rows(|k| self.train.contains(&k.contest_id)),
            m.filter_rows(|k| self.val.contains(&k.contest_id)),
            m.filter_rows(|k| self.test.contains(&k.contest_id)),
        )
    }
}

pub fn assign_role(period: &Period, spec: &SplitSpec) -> SplitRole {
    if period.end <= spec.train_end {
        SplitRole::Train
    } else if period.start >= spec.val_start && period.end <= spec.val_end {
        SplitRole::Val
    } else if period.start >= spec.test_start {
        SplitRole::Test
    } else {
        SplitRole::Excluded
    }
}

/// Assigns each contest, given its contest period, to at most one split.
pub fn time_split(contests: &[(ContestId, Period)], spec: &SplitSpec) -> Result<DataSplit> {
    spec.validate()?;
    let mut split = DataSplit::default();
    for (id, period) in contests {
        let set = match assign_role(period, spec) {
            SplitRole::Train => &mut split.train,
            SplitRole::Val => &mut split.val,
            SplitRole::Test => &mut split.test,
            SplitRole::Excluded => {
                tracing::info!(contest = %id, %period, "contest matches no split window; excluded");
                &mut split.excluded
            }
        };
        if !set.insert(*id) {
            return Err(Error::Data(format!("contest {id} listed twice")));
        }
    }
    Ok(split)
}

/// Pooled RMSE over contests: `√(Σₖ Σⱼ (y − ŷ)² / Σₖ Nₖ)`, rows grouped by
/// consecutive contest blocks of the given sizes.
pub fn rmse(predictions: &[f64], labels: &[f64], contest_sizes: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: usize = contest_sizes.iter().sum();
    if total != labels.len() {
        return Err(Error::Data(format!(
            "contest sizes sum to {total} but there are {} rows",
            labels.len()
        )));
    }
    if total == 0 {
        return Err(Error::Data("RMSE of zero rows".into()));
    }
    let mut sse = 0.0;
    let mut at = 0;
    for &size in contest_sizes {
        let block: f64 = (at..at + size)
            .map(|i| (labels[i] - predictions[i]).powi(2))
            .sum();
        sse += block;
        at += size;
    }
    Ok((sse / total as f64).sqrt())
}

/// Plain root-mean-square error over all rows.
pub fn rmse_flat(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    rmse(predictions, labels, &[labels.len()])
}

/// Two-sided paired sign-flip permutation test of mean(a − b) = 0, with
/// `p = (1 + #{|mean*| ≥ |mean|}) / (n_perm + 1)`.
pub fn sign_flip_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Data("sign-flip test needs paired non-empty samples".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = d.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    // Relative slack so exact ties with the observed statistic count as extreme.
    let slack = 1e-12 * d.iter().map(|v| v.abs()).sum::<f64>();
    for _ in 0..n_perm {
        let s: f64 = d
            .iter()
            .map(|v| if rng.random_bool(0.5) { *v } else { -*v })
            .sum();
        if s.abs() >= observed - slack {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (n_perm + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub family: ModelFamily,
    pub rmse: f64,
    /// Percent RMSE reduction relative to the Uniform baseline.
    pub reduction_pct: Option<f64>,
    pub n_selected: usize,
    /// Paired test of squared errors against the Uniform baseline.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            n_permutations: 9_999,
            seed: 0,
        }
    }
}

/// Test-set RMSE of each named model, against the first Uniform model if any.
pub fn compare_models(
    models: &[(String, &TrainedModel)],
    test: &FeatureMatrix,
    options: &CompareOptions,
) -> Result<Vec<ComparisonRow>> {
    let sizes = test.contest_sizes();
    let mut preds = Vec::with_capacity(models.len());
    for (name, m) in models {
        let p = m.predict(test).map_err(|e| match e {
            Error::Schema(s) => Error::Schema(format!("{name}: {s}")),
            other => other,
        })?;
        preds.push(p);
    }
    let sq = |p: &[f64]| -> Vec<f64> {
        p.iter().zip(&test.labels).map(|(a, y)| (a - y).powi(2)).collect()
    };
    let reference = models.iter().position(|(_, m)| m.family() == ModelFamily::Uniform);
    let ref_rmse = match reference {
        Some(i) => Some(rmse(&preds[i], &test.labels, &sizes)?),
        None => None,
    };
    let ref_sq = reference.map(|i| sq(&preds[i]));
    let mut rows = Vec::with_capacity(models.len());
    for (k, ((name, m), p)) in models.iter().zip(&preds).enumerate() {
        let r = rmse(p, &test.labels, &sizes)?;
        let reduction_pct = ref_rmse.map(|u| if u > 0.0 { 100.0 * (u - r) / u } else { 0.0 });
        let p_value = match (&ref_sq, reference) {
            (Some(base), Some(i)) if i != k => Some(sign_flip_test(
                &sq(p),
                base,
                options.n_permutations,
                options.seed.wrapping_add(k as u64),
            )?),
            _ => None,
        };
        rows.push(ComparisonRow {
            name: name.clone(),
            family: m.family(),
            rmse: r,
            reduction_pct,
            n_selected: m.importance()?.n_selected,
            p_value,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTarget {
    Signed,
    Absolute,
}

impl ErrorTarget {
    pub fn name(self) -> &'static str {
        match self {
            ErrorTarget::Signed => "signed",
            ErrorTarget::Absolute => "absolute",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub feature: String,
    pub kind: FeatureKind,
    pub target: ErrorTarget,
    /// Pearson r (continuous) or two-sample t (dummy, mean where 1 minus
    /// mean where 0). `None` when undefined.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
}

impl Association {
    pub fn undefined(&self) -> bool {
        self.statistic.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub keys: Vec<RowKey>,
    /// `ŷ − y` per test row.
    pub signed: Vec<f64>,
    pub absolute: Vec<f64>,
    /// Signed-error associations, largest |statistic| first, undefined last.
    pub signed_associations: Vec<Association>,
    pub absolute_associations: Vec<Association>,
}

fn associations(test: &FeatureMatrix, err: &[f64], target: ErrorTarget) -> Vec<Association> {
    let mut out: Vec<Association> = test
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let col = test.values.column(j);
            let first = col[0];
            let constant = col.iter().all(|v| *v == first);
            let res = if constant {
                None
            } else {
                match spec.kind {
                    FeatureKind::Continuous => stats::pearson(&col.iter().copied().collect::<Vec<_>>(), err),
                    FeatureKind::Dummy => {
                        let (mut a, mut b) = (Vec::new(), Vec::new());
                        for (x, e) in col.iter().zip(err) {
                            if *x != 0.0 { a.push(*e) } else { b.push(*e) }
                        }
                        stats::two_sample_t(&a, &b)
                    }
                }
            };
            Association {
                feature: spec.name.clone(),
                kind: spec.kind,
                target,
                statistic: res.map(|r| r.0),
                p_value: res.map(|r| r.1),
            }
        })
        .collect();
    out.sort_by(|a, b| match (a.statistic, b.statistic) {
        (Some(x), Some(y)) => y.abs().total_cmp(&x.abs()),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    out
}

pub fn error_analysis(model: &TrainedModel, test: &FeatureMatrix) -> Result<ErrorReport> {
    if test.n_rows() == 0 {
        return Err(Error::Data("error analysis needs test rows".into()));
    }
    let pred = model.predict(test)?;
    let signed: Vec<f64> = pred.iter().zip(&test.labels).map(|(p, y)| p - y).collect();
    let absolute: Vec<f64> = signed.iter().map(|e| e.abs()).collect();
    Ok(ErrorReport {
        keys: test.keys.clone(),
        signed_associations: associations(test, &signed, ErrorTarget::Signed),
        absolute_associations: associations(test, &absolute, ErrorTarget::Absolute),
        signed,
        absolute,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureGroup, FeatureSchema, FeatureSpec};
    use crate::models::{ModelConfig, ModelParams};
    use crate::features::Scaling;
    use crate::types::DriverId;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand_distr::StandardNormal;

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, m, day).unwrap()
    }

    fn period(a: NaiveDate, b: NaiveDate) -> Period {
        Period::new(a, b).unwrap()
    }

    #[test]
    fn split_boundaries() {
        let spec = SplitSpec::default();
        let contests = vec![
            (ContestId(1), period(d(6, 27), d(6, 30))),
            (ContestId(2), period(d(6, 29), d(7, 2))),
            (ContestId(3), period(d(7, 1), d(7, 5))),
            (ContestId(4), period(d(7, 29), d(8, 2))),
            (ContestId(5), period(d(8, 1), d(8, 3))),
        ];
        let s = time_split(&contests, &spec).unwrap();
        assert_eq!(s.role(ContestId(1)), SplitRole::Train);
        assert_eq!(s.role(ContestId(2)), SplitRole::Excluded);
        assert_eq!(s.role(ContestId(3)), SplitRole::Val);
        assert_eq!(s.role(ContestId(4)), SplitRole::Excluded);
        assert_eq!(s.role(ContestId(5)), SplitRole::Test);
    }

    #[test]
    fn overlapping_windows_are_rejected() {
        let spec = SplitSpec {
            val_start: d(6, 30),
            ..SplitSpec::default()
        };
        assert!(matches!(time_split(&[], &spec), Err(Error::Config(_))));
        let spec = SplitSpec {
            test_start: d(7, 31),
            ..SplitSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_reproducible_partition(starts in prop::collection::vec((0i64..240, 1i64..10), 1..40)) {
            let spec = SplitSpec::default();
            let contests: Vec<(ContestId, Period)> = starts
                .iter()
                .enumerate()
                .map(|(i, (s, len))| {
                    let a = d(1, 1) + chrono::Duration::days(*s);
                    (ContestId(i as u64), period(a, a + chrono::Duration::days(len - 1)))
                })
                .collect();
            let a = time_split(&contests, &spec).unwrap();
            let b = time_split(&contests, &spec).unwrap();
            prop_assert_eq!(&a, &b);
            let total = a.train.len() + a.val.len() + a.test.len() + a.excluded.len();
            prop_assert_eq!(total, contests.len());
            prop_assert!(a.train.intersection(&a.val).next().is_none());
            prop_assert!(a.val.intersection(&a.test).next().is_none());
            prop_assert!(a.train.intersection(&a.test).next().is_none());
        }

        #[test]
        fn pooled_rmse_equals_flat(sizes in prop::collection::vec(1usize..20, 1..10), seed in 0u64..1000) {
            let n: usize = sizes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 50.0).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 50.0).collect();
            let pooled = rmse(&p, &y, &sizes).unwrap();
            let flat = (p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sqrt();
            prop_assert!((pooled - flat).abs() <= 1e-12 * flat.max(1.0));
        }
    }

    #[test]
    fn rmse_hand_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], &[2]).unwrap(), 0.0);
        assert_eq!(rmse(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0], &[1, 2]).unwrap(), 3.0);
        let p = [1.0, 1.0, 2.0, 2.0, 2.0];
        let y = [0.0; 5];
        assert_eq!(rmse(&p, &y, &[2, 3]).unwrap(), 2.8f64.sqrt());
        assert!(rmse(&p, &y, &[2, 2]).is_err());
        assert!(rmse(&p[..4], &y, &[5]).is_err());
    }

    #[test]
    fn sign_flip_rejection_rate_under_null() {
        let mut rejections = 0;
        for t in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + t);
            let y: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut shuffled = y.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            // Two exchangeable predictors of the shuffled labels.
            let a: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let sa: Vec<f64> = a.iter().zip(&shuffled).map(|(p, y)| (p - y).powi(2)).collect();
            let sb: Vec<f64> = b.iter().zip(&shuffled).map(|(p, y)| (p - y).powi(2)).collect();
            if sign_flip_test(&sa, &sb, 499, t).unwrap() < 0.05 {
                rejections += 1;
            }
        }
        assert!(rejections as f64 / 200.0 <= 0.07, "{rejections} rejections");
    }

    #[test]
    fn sign_flip_detects_a_real_difference() {
        let a: Vec<f64> = (0..50).map(|i| 1.0 + (i % 3) as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| (i % 3) as f64).collect();
        assert!(sign_flip_test(&a, &b, 999, 1).unwrap() < 0.01);
    }

    fn schema2() -> FeatureSchema {
        FeatureSchema::new(
            "e",
            vec![
                FeatureSpec {
                    name: "volatility".into(),
                    group: FeatureGroup::Driver,
                    kind: FeatureKind::Continuous,
                    design_derived: false,
                },
                FeatureSpec {
                    name: "flag".into(),
                    group: FeatureGroup::Driver,
                    kind: FeatureKind::Dummy,
                    design_derived: false,
                },
                FeatureSpec {
                    name: "fixed".into(),
                    group: FeatureGroup::City,
                    kind: FeatureKind::Continuous,
                    design_derived: false,
                },
            ],
        )
        .unwrap()
    }

    fn matrix(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> FeatureMatrix {
        let keys = (0..rows.len())
            .map(|i| RowKey {
                contest_id: ContestId(1 + (i / 500) as u64),
                driver_id: DriverId(i as u64),
            })
            .collect();
        FeatureMatrix::from_rows(schema2(), &rows, labels, keys).unwrap()
    }

    fn uniform(train: &FeatureMatrix) -> TrainedModel {
        TrainedModel::fit(
            &ModelConfig {
                params: ModelParams::Uniform,
                scaling: Scaling::None,
            },
            train,
        )
        .unwrap()
    }

    #[test]
    fn heteroskedastic_noise_shows_in_absolute_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(1.0..50.0), f64::from(u8::from(rng.random_bool(0.3))), 7.0])
            .collect();
        let labels: Vec<f64> = rows
            .iter()
            .map(|r| 10.0 + r[0] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = matrix(rows, labels);
        let report = error_analysis(&uniform(&m), &m).unwrap();
        let top = &report.absolute_associations[0];
        assert_eq!(top.feature, "volatility");
        assert!(top.statistic.unwrap() > 0.0 && top.p_value.unwrap() < 0.01);
        let fixed: Vec<_> = report
            .signed_associations
            .iter()
            .chain(&report.absolute_associations)
            .filter(|a| a.feature == "fixed")
            .collect();
        assert!(fixed.iter().all(|a| a.undefined()));
        assert!(report.signed_associations.last().unwrap().undefined());
    }

    #[test]
    fn zero_residuals_give_no_associations() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, f64::from(u8::from(i % 2 == 0)), 1.0]).collect();
        let m = matrix(rows, vec![5.0; 30]);
        let report = error_analysis(&uniform(&m), &m).unwrap();
        assert!(report.signed.iter().all(|e| *e == 0.0));
        for a in report.signed_associations.iter().chain(&report.absolute_associations) {
            assert!(a.undefined() || a.statistic == Some(0.0));
        }
    }

    #[test]
    fn uniform_against_itself() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 0.0, 1.0]).collect();
        let labels: Vec<f64> = (0..40).map(|i| (i * 7 % 11) as f64).collect();
        let m = matrix(rows, labels);
        let u = uniform(&m);
        let rows = compare_models(&[("uniform".into(), &u), ("uniform_copy".into(), &u)], &m, &CompareOptions::default()).unwrap();
        assert_eq!(rows[0].reduction_pct, Some(0.0));
        assert_eq!(rows[1].reduction_pct, Some(0.0));
        assert_eq!(rows[0].p_value, None);
        assert_eq!(rows[1].p_value, Some(1.0));
    }
}
