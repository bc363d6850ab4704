//! Named feature representation of contests, drivers, teams and cities, and
//! the labelled design matrix built from it.

mod extract;
mod io;
mod scaling;

pub use extract::{
    assemble_matrix, city_features, contest_features, decode_design_fragment, driver_features,
    extract_treated_rows, relational_features, team_features, weather_fractions, DesignFields,
    DriverInputs, TeamInputs,
};
pub use io::{read_matrix, read_schema, write_matrix, write_schema};
pub use scaling::{ColumnTransform, Scaler, Scaling};

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{ContestId, DriverId};

pub const SCHEMA_VERSION: &str = "v1";

/// Number of province dummy columns in the v1 schema.
pub const N_PROVINCES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Contest,
    Driver,
    Team,
    City,
}

impl FeatureGroup {
    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Contest => "contest",
            FeatureGroup::Driver => "driver",
            FeatureGroup::Team => "team",
            FeatureGroup::City => "city",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Dummy,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::Dummy => "dummy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub group: FeatureGroup,
    pub kind: FeatureKind,
    /// Column is a function of the contest design alone and may be rewritten
    /// by a counterfactual design override.
    pub design_derived: bool,
}

/// Ordered, versioned list of feature columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: String,
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    /// The v1 schema: every column the extractor emits, in emission order.
    pub fn standard() -> Self {
        let features = extract::column_table()
            .into_iter()
            .map(|(name, group, kind, design_derived)| FeatureSpec {
                name,
                group,
                kind,
                design_derived,
            })
            .collect();
        Self {
            version: SCHEMA_VERSION.to_string(),
            features,
        }
    }

    pub fn new(version: impl Into<String>, features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {}", f.name)));
            }
        }
        Ok(Self {
            version: version.into(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.names().enumerate().map(|(i, n)| (n, i)).collect()
    }

    /// Hex digest over version, names, groups and kinds.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.as_bytes());
        for f in &self.features {
            h.update(b"\n");
            h.update(f.name.as_bytes());
            h.update(b"|");
            h.update(f.group.name().as_bytes());
            h.update(b"|");
            h.update(f.kind.name().as_bytes());
            h.update(if f.design_derived { b"|d" } else { b"|-" });
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub contest_id: ContestId,
    pub driver_id: DriverId,
}

/// One row per treated driver, labelled with the estimated ITE.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub values: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub keys: Vec<RowKey>,
}

impl FeatureMatrix {
    pub fn new(
        schema: FeatureSchema,
        values: DMatrix<f64>,
        labels: Vec<f64>,
        keys: Vec<RowKey>,
    ) -> Result<Self> {
        if values.ncols() != schema.len() {
            return Err(Error::Schema(format!(
                "matrix has {} columns, schema has {}",
                values.ncols(),
                schema.len()
            )));
        }
        if values.nrows() != labels.len() || labels.len() != keys.len() {
            return Err(Error::Data(format!(
                "row count mismatch: {} values, {} labels, {} keys",
                values.nrows(),
                labels.len(),
                keys.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value in column {}",
                schema.features[pos / values.nrows().max(1)].name
            )));
        }
        Ok(Self {
            schema,
            values,
            labels,
            keys,
        })
    }

    /// Builds a matrix from row vectors.
    pub fn from_rows(
        schema: FeatureSchema,
        rows: &[Vec<f64>],
        labels: Vec<f64>,
        keys: Vec<RowKey>,
    ) -> Result<Self> {
        let p = schema.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::Schema(format!(
                "row of length {} for schema of length {p}",
                bad.len()
            )));
        }
        let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(schema, values, labels, keys)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.schema
            .index_of(name)
            .map(|j| self.values.column(j).iter().copied().collect())
    }

    /// Rows whose key satisfies `keep`, preserving order.
    pub fn filter_rows(&self, mut keep: impl FnMut(&RowKey) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(&self.keys[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let values = self.values.select_rows(idx.iter());
        Self {
            schema: self.schema.clone(),
            values,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            keys: idx.iter().map(|&i| self.keys[i]).collect(),
        }
    }

    pub fn for_contest(&self, contest: ContestId) -> Self {
        self.filter_rows(|k| k.contest_id == contest)
    }

    /// Rows of `self` followed by rows of `other`, re-sorted by key.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot concatenate matrices with different schemas".into()));
        }
        let n = self.n_rows() + other.n_rows();
        let mut order: Vec<(RowKey, usize)> = self
            .keys
            .iter()
            .chain(&other.keys)
            .copied()
            .enumerate()
            .map(|(i, k)| (k, i))
            .collect();
        order.sort();
        let pick = |i: usize, j: usize| {
            if i < self.n_rows() {
                self.values[(i, j)]
            } else {
                other.values[(i - self.n_rows(), j)]
            }
        };
        let values = DMatrix::from_fn(n, self.n_cols(), |r, j| pick(order[r].1, j));
        let label = |i: usize| {
            if i < self.n_rows() {
                self.labels[i]
            } else {
                other.labels[i - self.n_rows()]
            }
        };
        Ok(Self {
            schema: self.schema.clone(),
            values,
            labels: order.iter().map(|&(_, i)| label(i)).collect(),
            keys: order.iter().map(|&(k, _)| k).collect(),
        })
    }

    /// Distinct contest ids in row order.
    pub fn contest_ids(&self) -> Vec<ContestId> {
        let mut ids: Vec<ContestId> = self.keys.iter().map(|k| k.contest_id).collect();
        ids.dedup();
        ids
    }

    /// Number of rows per contest, in the order of `contest_ids`.
    pub fn contest_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = Vec::new();
        let mut last = None;
        for k in &self.keys {
            if last == Some(k.contest_id) {
                *sizes.last_mut().unwrap() += 1;
            } else {
                sizes.push(1);
                last = Some(k.contest_id);
            }
        }
        sizes
    }

    pub fn ensure_schema(&self, expected_hash: &str) -> Result<()> {
        let got = self.schema.hash();
        if got != expected_hash {
            return Err(Error::Schema(format!(
                "matrix schema {} does not match model schema {}",
                &got[..12],
                &expected_hash[..12.min(expected_hash.len())]
            )));
        }
        Ok(())
    }
}
