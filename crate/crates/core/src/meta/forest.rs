//! Plot-ready tables for forest and funnel displays.

use serde::{Deserialize, Serialize};

use crate::stats::Z_975;

use super::{MetaError, MetaFit, StudyPoint};

/// One subject at the point of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSummary {
    pub subject_id: String,
    /// Covariate used to order the forest rows.
    pub covariate: f64,
    pub point: StudyPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub subject_id: String,
    pub covariate: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelPoint {
    pub estimate: f64,
    /// `1 / se`.
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestTable {
    /// Subjects in covariate order.
    pub rows: Vec<ForestRow>,
    /// Population estimate with its Knapp–Hartung interval; all NaN when
    /// the meta-regression was not possible.
    pub population: ForestRow,
    pub meta_disabled: bool,
}

impl ForestTable {
    /// Subject rows followed by the population row.
    pub fn all_rows(&self) -> impl Iterator<Item = &ForestRow> {
        self.rows.iter().chain(std::iter::once(&self.population))
    }

    /// Funnel coordinates, ascending in precision.
    pub fn funnel(&self) -> Vec<FunnelPoint> {
        let mut v: Vec<FunnelPoint> = self
            .rows
            .iter()
            .map(|r| FunnelPoint {
                estimate: r.estimate,
                precision: 1.0 / r.se,
            })
            .collect();
        v.sort_by(|a, b| a.precision.total_cmp(&b.precision));
        v
    }
}

pub const POPULATION_ID: &str = "population";

/// Subject rows use normal 95% intervals; the population row copies the
/// intercept of `meta` when present.
pub fn forest_funnel_data(subjects: &[SubjectSummary], meta: Option<&MetaFit>) -> Result<ForestTable, MetaError> {
    if subjects.is_empty() {
        return Err(MetaError::Empty);
    }
    let mut rows: Vec<ForestRow> = subjects
        .iter()
        .map(|s| {
            let se = s.point.variance.sqrt();
            ForestRow {
                subject_id: s.subject_id.clone(),
                covariate: s.covariate,
                estimate: s.point.beta_hat,
                se,
                ci_lo: s.point.beta_hat - Z_975 * se,
                ci_hi: s.point.beta_hat + Z_975 * se,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.covariate.total_cmp(&b.covariate));
    let population = match meta {
        Some(m) => ForestRow {
            subject_id: POPULATION_ID.into(),
            covariate: f64::NAN,
            estimate: m.gamma_hat(),
            se: m.se_adjusted[0],
            ci_lo: m.ci95[0][0],
            ci_hi: m.ci95[0][1],
        },
        None => ForestRow {
            subject_id: POPULATION_ID.into(),
            covariate: f64::NAN,
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
        },
    };
    Ok(ForestTable {
        rows,
        population,
        meta_disabled: meta.is_none(),
    })
}
