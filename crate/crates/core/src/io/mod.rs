//! File formats: NIfTI-1 volumes, session bundles, field tables and run
//! configuration.

mod bundle;
mod config;
mod field;
pub mod nifti;
mod tables;

pub use bundle::{read_session, read_session_dir, write_session, Sidecar, SESSION_JSON, SESSION_NII};
pub use config::{KernelChoice, LatticeSpec, MaskSpec, RunConfig, SCHEMA_VERSION};
pub use field::{
    read_effect_field, read_param_field, read_scalar_field, summarize, write_scalar_field, write_effect_field, write_meta_field, write_param_field,
    DwSummary, FieldKind, FieldManifest, FieldSummary, PeakSummary, FIELD_JSON,
};
pub use nifti::{read_nifti, write_nifti, Datatype, NiftiVolume};
pub use tables::{read_covariates, write_dw_strata, write_forest, write_funnel, Covariates};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::lattice::LatticeError;
use crate::session::SessionError;
use crate::weights::WeightError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed NIfTI header field `{field}`: {detail}")]
    MalformedHeader { field: &'static str, detail: String },
    #[error("sidecar field `{field}` has {got} entries, volume implies {expected}")]
    SidecarMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid `{field}`: {detail}")]
    Invalid { field: String, detail: String },
    #[error("value {value} at index {index} cannot be stored in the requested datatype")]
    Unrepresentable { index: usize, value: f64 },
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

pub(crate) fn invalid(field: impl Into<String>, detail: impl Into<String>) -> IoError {
    IoError::Invalid {
        field: field.into(),
        detail: detail.into(),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_owned(),
        source,
    })?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub(crate) fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_owned(),
        source,
    }
}
