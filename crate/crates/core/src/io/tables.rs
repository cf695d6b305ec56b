//! Small CSV tables: covariates, forest/funnel data, DW strata.

use std::path::Path;

use crate::meta::{ForestTable, FunnelPoint};

use super::{csv_error, invalid, IoError};

/// Per-subject covariates keyed by subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Covariates {
    pub fn get(&self, subject_id: &str) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(id, _)| id == subject_id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Header `subject_id,<name>...`, one numeric row per subject.
pub fn read_covariates(path: &Path) -> Result<Covariates, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header = r.headers().map_err(csv_error(path))?.clone();
    if header.get(0) != Some("subject_id") {
        return Err(invalid(format!("{}: header", path.display()), "first column must be subject_id"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| invalid(format!("{} row {}", path.display(), n + 1), format!("not a finite number: {s:?}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let id = rec[0].to_owned();
        if rows.iter().any(|(other, _)| *other == id) {
            return Err(invalid(format!("{}: subject_id", path.display()), format!("duplicate subject {id}")));
        }
        rows.push((id, values));
    }
    Ok(Covariates { names, rows })
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Subject rows in covariate order, then the population row.
pub fn write_forest(path: &Path, table: &ForestTable) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["subject_id", "covariate", "estimate", "se", "ci_lo", "ci_hi"])
        .map_err(csv_error(path))?;
    for r in table.all_rows() {
        w.write_record([
            r.subject_id.clone(),
            cell(r.covariate),
            cell(r.estimate),
            cell(r.se),
            cell(r.ci_lo),
            cell(r.ci_hi),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_owned(), source })
}

pub fn write_funnel(path: &Path, points: &[FunnelPoint]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["estimate", "precision"]).map_err(csv_error(path))?;
    for p in points {
        w.write_record([cell(p.estimate), cell(p.precision)]).map_err(csv_error(path))?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_owned(), source })
}

/// Long format: one `(theta, dw)` row per point in each stratum.
pub fn write_dw_strata(path: &Path, thetas: &[f64], strata: &[Vec<f64>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["theta", "dw"]).map_err(csv_error(path))?;
    for (theta, values) in thetas.iter().zip(strata) {
        for v in values {
            w.write_record([format!("{theta}"), format!("{v}")]).map_err(csv_error(path))?;
        }
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_owned(), source })
}
