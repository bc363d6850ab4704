use std::path::Path;

use super::{FeatureGroup, FeatureKind, FeatureMatrix, FeatureSchema, FeatureSpec, RowKey};
use crate::error::{Error, Result};
use crate::types::{ContestId, DriverId};

pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["contest_id".to_string(), "driver_id".into(), "label".into()];
    header.extend(m.schema.names().map(str::to_string));
    w.write_record(&header)?;
    for i in 0..m.n_rows() {
        let mut rec = vec![
            m.keys[i].contest_id.to_string(),
            m.keys[i].driver_id.to_string(),
            m.labels[i].to_string(),
        ];
        rec.extend(m.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_matrix(path: &Path, schema: &FeatureSchema) -> Result<FeatureMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().skip(3).collect();
    if names != schema.names().collect::<Vec<_>>() {
        return Err(Error::Schema(format!(
            "{} columns do not match schema {}",
            path.display(),
            schema.version
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad number {s:?} in {}", path.display())))
        };
        let id = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad id {s:?} in {}", path.display())))
        };
        keys.push(RowKey {
            contest_id: ContestId(id(&rec[0])?),
            driver_id: DriverId(id(&rec[1])?),
        });
        labels.push(num(&rec[2])?);
        rows.push(rec.iter().skip(3).map(num).collect::<Result<Vec<_>>>()?);
    }
    FeatureMatrix::from_rows(schema.clone(), &rows, labels, keys)
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["version", "name", "group", "kind", "design_derived", "scaling"])?;
    for f in &schema.features {
        let scaling = match f.kind {
            FeatureKind::Dummy => "passthrough",
            FeatureKind::Continuous => "model",
        };
        w.write_record([
            schema.version.as_str(),
            &f.name,
            f.group.name(),
            f.kind.name(),
            if f.design_derived { "1" } else { "0" },
            scaling,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let mut r = csv::Reader::from_path(path)?;
    let mut version = None;
    let mut features = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        version.get_or_insert_with(|| rec[0].to_string());
        let group = match &rec[2] {
            "contest" => FeatureGroup::Contest,
            "driver" => FeatureGroup::Driver,
            "team" => FeatureGroup::Team,
            "city" => FeatureGroup::City,
            g => return Err(Error::Schema(format!("unknown feature group {g}"))),
        };
        let kind = match &rec[3] {
            "continuous" => FeatureKind::Continuous,
            "dummy" => FeatureKind::Dummy,
            k => return Err(Error::Schema(format!("unknown feature kind {k}"))),
        };
        features.push(FeatureSpec {
            name: rec[1].to_string(),
            group,
            kind,
            design_derived: &rec[4] == "1",
        });
    }
    FeatureSchema::new(version.unwrap_or_default(), features)
}
