//! Field export (CSV + NIfTI + manifest) and import.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fit::{FitError, ParamField, PointFit};
use crate::lattice::{Lattice, LatticeRegion, ScalarField};
use crate::meta::{Effect, EffectField, MetaError, MetaField};
use crate::stats::quantile_sorted;

use super::nifti::{read_nifti, write_nifti, NiftiVolume};
use super::{create_dir, csv_error, invalid, read_json, write_json, IoError, SCHEMA_VERSION};

pub const FIELD_JSON: &str = "field.json";
const PARAM_CSV: &str = "field.csv";
const EFFECT_CSV: &str = "effect.csv";
const META_CSV: &str = "meta.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Param,
    Effect,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub schema_version: u32,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    pub lattice: Lattice,
    pub masked: usize,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn volume(lattice: &Lattice, values: Vec<f64>) -> NiftiVolume {
    let s = lattice.spacing;
    NiftiVolume::float32(lattice.shape.to_vec(), [s[0], s[1], s[2], 0.0], lattice.origin, values)
}

fn location(lattice: &Lattice, i: usize) -> [String; 7] {
    let [a, b, c] = lattice.ijk(i);
    let p = lattice.point(i);
    [i.to_string(), a.to_string(), b.to_string(), c.to_string(), num(p.x), num(p.y), num(p.z)]
}

const LOCATION: [&str; 8] = ["index", "i", "j", "k", "x", "y", "z", "status"];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, IoError> {
    csv::Writer::from_path(path).map_err(csv_error(path))
}

fn manifest(dir: &Path, kind: FieldKind, subject_id: Option<&str>, lattice: &Lattice, masked: usize) -> Result<(), IoError> {
    write_json(
        &dir.join(FIELD_JSON),
        &FieldManifest {
            schema_version: SCHEMA_VERSION,
            kind,
            subject_id: subject_id.map(str::to_owned),
            lattice: *lattice,
            masked,
        },
    )
}

/// Writes `field.json`, `field.csv` (one row per masked point) and float32
/// volumes `alpha.nii`, `beta.nii`, `var_beta.nii`, `t.nii`.
pub fn write_param_field(dir: &Path, field: &ParamField, subject_id: &str) -> Result<(), IoError> {
    create_dir(dir)?;
    let l = &field.lattice;
    manifest(dir, FieldKind::Param, Some(subject_id), l, field.mask.len())?;
    let path = dir.join(PARAM_CSV);
    let mut w = writer(&path)?;
    let header = [
        "alpha", "beta", "var_beta", "t", "sigma2", "n_obs", "n_effective", "dw", "df", "coefficients",
    ];
    w.write_record(LOCATION.iter().chain(&header)).map_err(csv_error(&path))?;
    for (i, f) in field.fits.iter().enumerate() {
        let Some(f) = f else { continue };
        let mut row: Vec<String> = location(l, i).to_vec();
        match f {
            Ok(p) => {
                row.push("ok".into());
                row.extend([
                    num(p.alpha_hat),
                    num(p.beta_hat),
                    num(p.var_beta_hat),
                    opt(p.t_value),
                    num(p.sigma2_hat),
                    p.n_obs.to_string(),
                    num(p.n_effective),
                    opt(p.dw),
                    num(p.df),
                    p.coefficients.iter().map(|c| num(*c)).collect::<Vec<_>>().join(" "),
                ]);
            }
            Err(e) => {
                row.push(e.to_string());
                row.extend(std::iter::repeat_n(String::new(), header.len()));
            }
        }
        w.write_record(&row).map_err(csv_error(&path))?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.clone(), source })?;
    for (name, vals) in [
        ("alpha.nii", field.alpha()),
        ("beta.nii", field.beta()),
        ("var_beta.nii", field.map(|p| p.var_beta_hat)),
        ("t.nii", field.t()),
    ] {
        write_nifti(&dir.join(name), &volume(l, vals.values().to_vec()))?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<FieldManifest, IoError> {
    let m: FieldManifest = read_json(&dir.join(FIELD_JSON))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaVersion {
            found: m.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(m)
}

struct Rows {
    path: std::path::PathBuf,
    header: csv::StringRecord,
    records: Vec<csv::StringRecord>,
}

impl Rows {
    fn read(path: &Path) -> Result<Self, IoError> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
        let header = r.headers().map_err(csv_error(path))?.clone();
        let records = r.records().collect::<Result<Vec<_>, _>>().map_err(csv_error(path))?;
        Ok(Self {
            path: path.to_owned(),
            header,
            records,
        })
    }

    fn col(&self, name: &str) -> Result<usize, IoError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: {name}", self.path.display()), "missing column"))
    }

    fn parse<T: std::str::FromStr>(&self, rec: &csv::StringRecord, col: usize, row: usize) -> Result<T, IoError> {
        rec[col]
            .parse()
            .map_err(|_| invalid(format!("{} row {row}, column {}", self.path.display(), &self.header[col]), format!("cannot parse {:?}", &rec[col])))
    }

    fn parse_opt(&self, rec: &csv::StringRecord, col: usize, row: usize) -> Result<Option<f64>, IoError> {
        if rec[col].is_empty() {
            Ok(None)
        } else {
            self.parse(rec, col, row).map(Some)
        }
    }
}

fn index_of(rows: &Rows, rec: &csv::StringRecord, r: usize, lattice: &Lattice) -> Result<usize, IoError> {
    let i: usize = rows.parse(rec, 0, r)?;
    if i >= lattice.len() {
        return Err(invalid(format!("{} row {r}", rows.path.display()), format!("index {i} outside the lattice")));
    }
    Ok(i)
}

/// Reads a field written by [`write_param_field`]; returns it with its subject id.
pub fn read_param_field(dir: &Path) -> Result<(ParamField, String), IoError> {
    let m = read_manifest(dir)?;
    if m.kind != FieldKind::Param {
        return Err(invalid(FIELD_JSON, format!("expected a param field, found {:?}", m.kind)));
    }
    let rows = Rows::read(&dir.join(PARAM_CSV))?;
    let cols: Vec<usize> = [
        "status", "alpha", "beta", "var_beta", "t", "sigma2", "n_obs", "n_effective", "dw", "df", "coefficients",
    ]
    .iter()
    .map(|c| rows.col(c))
    .collect::<Result<_, _>>()?;
    let l = m.lattice;
    let mut fits = vec![None; l.len()];
    let mut mask = LatticeRegion::empty(&l);
    for (r, rec) in rows.records.iter().enumerate() {
        let i = index_of(&rows, rec, r, &l)?;
        mask.insert(i);
        let status = &rec[cols[0]];
        if status != "ok" {
            fits[i] = Some(Err(FitError::Recorded(status.to_owned())));
            continue;
        }
        let coefficients = rec[cols[10]]
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| invalid("coefficients", format!("cannot parse {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        fits[i] = Some(Ok(PointFit {
            coefficients,
            alpha_hat: rows.parse(rec, cols[1], r)?,
            beta_hat: rows.parse(rec, cols[2], r)?,
            var_beta_hat: rows.parse(rec, cols[3], r)?,
            t_value: rows.parse_opt(rec, cols[4], r)?,
            sigma2_hat: rows.parse(rec, cols[5], r)?,
            n_obs: rows.parse(rec, cols[6], r)?,
            n_effective: rows.parse(rec, cols[7], r)?,
            dw: rows.parse_opt(rec, cols[8], r)?,
            df: rows.parse(rec, cols[9], r)?,
        }));
    }
    let subject = m.subject_id.unwrap_or_default();
    Ok((ParamField { lattice: l, mask, fits }, subject))
}

/// Writes `field.json`, `effect.csv` and `estimate.nii`, `variance.nii`.
pub fn write_effect_field(dir: &Path, field: &EffectField) -> Result<(), IoError> {
    create_dir(dir)?;
    let l = &field.lattice;
    manifest(dir, FieldKind::Effect, Some(&field.subject_id), l, field.mask.len())?;
    let path = dir.join(EFFECT_CSV);
    let mut w = writer(&path)?;
    w.write_record(LOCATION.iter().chain(&["estimate", "variance"])).map_err(csv_error(&path))?;
    for (i, e) in field.points.iter().enumerate() {
        let Some(e) = e else { continue };
        let mut row: Vec<String> = location(l, i).to_vec();
        match e {
            Ok(e) => row.extend(["ok".into(), num(e.estimate), num(e.variance)]),
            Err(err) => row.extend([err.to_string(), String::new(), String::new()]),
        }
        w.write_record(&row).map_err(csv_error(&path))?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.clone(), source })?;
    write_nifti(&dir.join("estimate.nii"), &volume(l, field.estimates().values().to_vec()))?;
    write_nifti(&dir.join("variance.nii"), &volume(l, field.variances().values().to_vec()))?;
    Ok(())
}

/// Reads an effect field; a param field directory yields its raw `β̂`.
pub fn read_effect_field(dir: &Path) -> Result<EffectField, IoError> {
    let m = read_manifest(dir)?;
    match m.kind {
        FieldKind::Param => {
            let (f, id) = read_param_field(dir)?;
            return Ok(EffectField::from_param(&f, id));
        }
        FieldKind::Meta => return Err(invalid(FIELD_JSON, "a meta field is not a subject field")),
        FieldKind::Effect => {}
    }
    let rows = Rows::read(&dir.join(EFFECT_CSV))?;
    let cols: Vec<usize> = ["status", "estimate", "variance"]
        .iter()
        .map(|c| rows.col(c))
        .collect::<Result<_, _>>()?;
    let l = m.lattice;
    let mut points = vec![None; l.len()];
    let mut mask = LatticeRegion::empty(&l);
    for (r, rec) in rows.records.iter().enumerate() {
        let i = index_of(&rows, rec, r, &l)?;
        mask.insert(i);
        points[i] = Some(if &rec[cols[0]] == "ok" {
            Ok(Effect {
                estimate: rows.parse(rec, cols[1], r)?,
                variance: rows.parse(rec, cols[2], r)?,
            })
        } else {
            Err(MetaError::PointFit(FitError::Recorded(rec[cols[0]].to_owned())))
        });
    }
    Ok(EffectField {
        subject_id: m.subject_id.unwrap_or_default(),
        lattice: l,
        mask,
        points,
    })
}

/// Writes `field.json`, `meta.csv` and volumes `gamma.nii`, `t_adjusted.nii`,
/// `p.nii`, `tau2.nii`. `covariates` names the non-intercept coefficients.
pub fn write_meta_field(dir: &Path, field: &MetaField, covariates: &[String]) -> Result<(), IoError> {
    create_dir(dir)?;
    let l = &field.lattice;
    manifest(dir, FieldKind::Meta, None, l, field.mask.len())?;
    let path = dir.join(META_CSV);
    let mut w = writer(&path)?;
    let mut header: Vec<String> = LOCATION.iter().map(|s| s.to_string()).collect();
    header.extend(
        ["gamma", "se", "t_adjusted", "p", "ci_lo", "ci_hi", "tau2", "q", "k", "df"]
            .iter()
            .map(|s| s.to_string()),
    );
    for c in covariates {
        header.extend([c.clone(), format!("se_{c}"), format!("t_adjusted_{c}"), format!("p_{c}")]);
    }
    let width = header.len() - LOCATION.len();
    w.write_record(&header).map_err(csv_error(&path))?;
    for (i, f) in field.fits.iter().enumerate() {
        let Some(f) = f else { continue };
        let mut row: Vec<String> = location(l, i).to_vec();
        match f {
            Ok(m) => {
                if m.coefficients.len() != covariates.len() + 1 {
                    return Err(invalid("covariates", format!("{} names for {} coefficients", covariates.len(), m.coefficients.len())));
                }
                row.push("ok".into());
                row.extend([
                    num(m.gamma_hat()),
                    num(m.se_adjusted[0]),
                    num(m.t_adjusted[0]),
                    num(m.p_values[0]),
                    num(m.ci95[0][0]),
                    num(m.ci95[0][1]),
                    num(m.tau2),
                    num(m.q),
                    m.k.to_string(),
                    m.df.to_string(),
                ]);
                for j in 1..m.coefficients.len() {
                    row.extend([
                        num(m.coefficients[j]),
                        num(m.se_adjusted[j]),
                        num(m.t_adjusted[j]),
                        num(m.p_values[j]),
                    ]);
                }
            }
            Err(e) => {
                row.push(e.to_string());
                row.extend(std::iter::repeat_n(String::new(), width));
            }
        }
        w.write_record(&row).map_err(csv_error(&path))?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.clone(), source })?;
    for (name, vals) in [
        ("gamma.nii", field.map(|m| m.gamma_hat())),
        ("t_adjusted.nii", field.map(|m| m.t_adjusted[0])),
        ("p.nii", field.map(|m| m.p_values[0])),
        ("tau2.nii", field.map(|m| m.tau2)),
    ] {
        write_nifti(&dir.join(name), &volume(l, vals.values().to_vec()))?;
    }
    Ok(())
}

/// A 3D volume as a scalar field on its axis-aligned lattice.
pub fn read_scalar_field(path: &Path) -> Result<ScalarField, IoError> {
    let v = read_nifti(path)?;
    if v.dims.len() != 3 {
        return Err(IoError::MalformedHeader {
            field: "dim",
            detail: format!("expected a 3D volume, got {} dimensions", v.dims.len()),
        });
    }
    let lattice = Lattice::new(v.origin, [v.pixdim[0], v.pixdim[1], v.pixdim[2]], [v.dims[0], v.dims[1], v.dims[2]])?;
    Ok(ScalarField::new(lattice, v.data)?)
}

pub fn write_scalar_field(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    write_nifti(path, &volume(field.lattice(), field.values().to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    pub index: usize,
    pub ijk: [usize; 3],
    pub point: [f64; 3],
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub masked: usize,
    pub fitted: usize,
    pub failed: usize,
    pub argmax_t: Option<PeakSummary>,
    pub dw: Option<DwSummary>,
}

pub fn summarize(field: &ParamField) -> FieldSummary {
    let fitted = field.successful().count();
    let argmax_t = field.argmax_t().map(|i| {
        let p = field.lattice.point(i);
        let t = match &field.fits[i] {
            Some(Ok(f)) => f.t_value.unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        PeakSummary {
            index: i,
            ijk: field.lattice.ijk(i),
            point: [p.x, p.y, p.z],
            t,
        }
    });
    let mut dws: Vec<f64> = field.successful().filter_map(|(_, f)| f.dw).collect();
    dws.sort_by(f64::total_cmp);
    let dw = (!dws.is_empty()).then(|| DwSummary {
        count: dws.len(),
        mean: dws.iter().sum::<f64>() / dws.len() as f64,
        median: quantile_sorted(&dws, 0.5),
        min: dws[0],
        max: dws[dws.len() - 1],
    });
    FieldSummary {
        masked: field.mask.len(),
        fitted,
        failed: field.mask.len() - fitted,
        argmax_t,
        dw,
    }
}
