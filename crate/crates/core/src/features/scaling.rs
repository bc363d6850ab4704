use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    None,
    Standardize,
    #[serde(rename = "minmax")]
    MinMax,
}

impl Scaling {
    pub const ALL: [Scaling; 3] = [Scaling::None, Scaling::MinMax, Scaling::Standardize];

    pub fn name(self) -> &'static str {
        match self {
            Scaling::None => "none",
            Scaling::Standardize => "standardize",
            Scaling::MinMax => "minmax",
        }
    }
}

impl std::str::FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scaling::None),
            "standardize" => Ok(Scaling::Standardize),
            "minmax" => Ok(Scaling::MinMax),
            other => Err(Error::Config(format!("unknown scaling {other}"))),
        }
    }
}

/// `x' = (x - offset) / scale` for one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub offset: f64,
    pub scale: f64,
}

impl ColumnTransform {
    const IDENTITY: Self = Self {
        offset: 0.0,
        scale: 1.0,
    };
}

/// Per-column affine scaler. Dummy columns always pass through unchanged;
/// constant continuous columns map to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub method: Scaling,
    params: Option<Vec<ColumnTransform>>,
}

impl Scaler {
    pub fn new(method: Scaling) -> Self {
        Self { method, params: None }
    }

    pub fn fitted(method: Scaling, x: &DMatrix<f64>, schema: &FeatureSchema) -> Result<Self> {
        let mut s = Self::new(method);
        s.fit(x, schema)?;
        Ok(s)
    }

    pub fn is_fitted(&self) -> bool {
        self.params.is_some()
    }

    pub fn params(&self) -> Option<&[ColumnTransform]> {
        self.params.as_deref()
    }

    pub fn fit(&mut self, x: &DMatrix<f64>, schema: &FeatureSchema) -> Result<()> {
        if x.ncols() != schema.len() {
            return Err(Error::Schema(format!(
                "scaler fit on {} columns with a schema of {}",
                x.ncols(),
                schema.len()
            )));
        }
        if x.nrows() == 0 && self.method != Scaling::None {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        }
        let params = schema
            .features
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                if spec.kind == FeatureKind::Dummy {
                    return ColumnTransform::IDENTITY;
                }
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                match self.method {
                    Scaling::None => ColumnTransform::IDENTITY,
                    Scaling::Standardize => {
                        let sd = stats::sample_sd(&col);
                        ColumnTransform {
                            offset: stats::mean(&col),
                            scale: if sd > 0.0 { sd } else { 1.0 },
                        }
                    }
                    Scaling::MinMax => {
                        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        ColumnTransform {
                            offset: lo,
                            scale: if hi > lo { hi - lo } else { 1.0 },
                        }
                    }
                }
            })
            .collect();
        self.params = Some(params);
        Ok(())
    }

    fn checked(&self, ncols: usize) -> Result<&[ColumnTransform]> {
        let params = self
            .params
            .as_deref()
            .ok_or_else(|| Error::Fit(format!("{} scaler applied before fitting", self.method.name())))?;
        if params.len() != ncols {
            return Err(Error::Schema(format!(
                "scaler fitted on {} columns applied to {ncols}",
                params.len()
            )));
        }
        Ok(params)
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let params = self.checked(x.ncols())?;
        let mut out = x.clone();
        for (j, t) in params.iter().enumerate() {
            if *t != ColumnTransform::IDENTITY {
                out.column_mut(j).apply(|v| *v = (*v - t.offset) / t.scale);
            }
        }
        Ok(out)
    }

    pub fn transform_row(&self, row: &mut [f64]) -> Result<()> {
        let params = self.checked(row.len())?;
        for (v, t) in row.iter_mut().zip(params) {
            if *t != ColumnTransform::IDENTITY {
                *v = (*v - t.offset) / t.scale;
            }
        }
        Ok(())
    }

    pub fn inverse(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let params = self.checked(x.ncols())?;
        let mut out = x.clone();
        for (j, t) in params.iter().enumerate() {
            out.column_mut(j).apply(|v| *v = *v * t.scale + t.offset);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureGroup, FeatureSpec};
    use proptest::prelude::*;

    fn schema(kinds: &[FeatureKind]) -> FeatureSchema {
        FeatureSchema::new(
            "t",
            kinds
                .iter()
                .enumerate()
                .map(|(i, &kind)| FeatureSpec {
                    name: format!("f{i}"),
                    group: FeatureGroup::Driver,
                    kind,
                    design_derived: false,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn minmax_endpoints() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 10.0]);
        let s = Scaler::fitted(Scaling::MinMax, &x, &schema(&[FeatureKind::Continuous])).unwrap();
        let t = s.transform(&x).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let x = DMatrix::from_row_slice(3, 1, &[4.0, 4.0, 4.0]);
        let s = Scaler::fitted(Scaling::Standardize, &x, &schema(&[FeatureKind::Continuous])).unwrap();
        assert!(s.transform(&x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dummies_pass_through() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 5.0, 1.0, 7.0, 1.0, 9.0]);
        let sch = schema(&[FeatureKind::Dummy, FeatureKind::Continuous]);
        for m in Scaling::ALL {
            let t = Scaler::fitted(m, &x, &sch).unwrap().transform(&x).unwrap();
            assert_eq!(t.column(0), x.column(0));
        }
    }

    #[test]
    fn unfitted_scaler_errors() {
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(Scaler::new(Scaling::Standardize).transform(&x).is_err());
        let s = Scaler::fitted(Scaling::Standardize, &x, &schema(&[FeatureKind::Continuous])).unwrap();
        assert!(s.transform(&DMatrix::zeros(1, 2)).is_err());
    }

    proptest! {
        #[test]
        fn standardize_invariants_and_inverse(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..40)) {
            let n = rows.len();
            let x = DMatrix::from_fn(n, 3, |i, j| rows[i][j]);
            let sch = schema(&[FeatureKind::Continuous; 3]);
            let s = Scaler::fitted(Scaling::Standardize, &x, &sch).unwrap();
            let t = s.transform(&x).unwrap();
            for j in 0..3 {
                let col: Vec<f64> = t.column(j).iter().copied().collect();
                let raw: Vec<f64> = x.column(j).iter().copied().collect();
                prop_assert!(stats::mean(&col).abs() < 1e-8);
                if stats::sample_sd(&raw) > 1e-9 {
                    prop_assert!((stats::sample_sd(&col) - 1.0).abs() < 1e-8);
                }
            }
            let back = s.inverse(&t).unwrap();
            for (a, b) in back.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let mm = Scaler::fitted(Scaling::MinMax, &x, &sch).unwrap().transform(&x).unwrap();
            prop_assert!(mm.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
    }
}
