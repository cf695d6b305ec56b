//! Random-effects meta-regression across subjects.
//!
//! Each subject contributes an estimate `β̂ᵢ` with sampling variance `vᵢ`. The
//! population model is `β̂ᵢ = xᵢᵀθ + ζᵢ + eᵢ` with `ζᵢ ~ N(0, τ²)`.

mod ati;
mod field;
mod forest;

pub use ati::{normalize_to_ati, reference_field, Effect, EffectAt, EffectField};
pub use field::{meta_field, MetaAt, MetaField};
pub use forest::{forest_funnel_data, ForestRow, ForestTable, FunnelPoint, SubjectSummary};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::FitError;
use crate::lattice::LatticeError;
use crate::linalg::{weighted_least_squares, LinalgError};
use crate::stats::{normal_two_sided_p, t_two_sided_p, t_upper_quantile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("{k} subjects cannot support {p} coefficients")]
    Degenerate { k: usize, p: usize },
    #[error("subject {index}: variance must be finite and positive, got {value}")]
    BadVariance { index: usize, value: f64 },
    #[error("subject {index}: non-finite estimate or covariate")]
    NonFinite { index: usize },
    #[error("heterogeneity must be finite and nonnegative, got {0}")]
    BadTau2(f64),
    #[error("design has {rows} rows for {k} subjects")]
    DimensionMismatch { rows: usize, k: usize },
    #[error("covariate design is rank deficient")]
    RankDeficient,
    #[error("no subjects given")]
    Empty,
    #[error("lattice point {index}: fitted intercept {value} is not positive")]
    NonpositiveIntercept { index: usize, value: f64 },
    #[error("lattice point {index}: template is not positive")]
    NonpositiveTemplate { index: usize },
    #[error("lattice point {index}: no template support under the kernel")]
    EmptyNeighbourhood { index: usize },
    #[error("subject {subject} has no estimate at this point")]
    MissingSubject { subject: usize },
    #[error(transparent)]
    PointFit(#[from] FitError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

impl From<LinalgError> for MetaError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Underdetermined { n, p } => MetaError::Degenerate { k: n, p },
            _ => MetaError::RankDeficient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub beta_hat: f64,
    pub variance: f64,
}

impl StudyPoint {
    pub fn new(beta_hat: f64, variance: f64) -> Self {
        Self { beta_hat, variance }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau2Estimator {
    #[default]
    Hedges,
    #[serde(alias = "dl")]
    DerSimonianLaird,
    #[serde(alias = "pm")]
    PauleMandel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaOptions {
    pub estimator: Tau2Estimator,
    /// Use `max(1, q)` instead of `q`.
    pub truncate_q: bool,
}

/// Intercept column followed by one column per covariate.
pub fn covariate_design(k: usize, covariates: &[Vec<f64>]) -> Result<DMatrix<f64>, MetaError> {
    if let Some(c) = covariates.iter().find(|c| c.len() != k) {
        return Err(MetaError::DimensionMismatch { rows: c.len(), k });
    }
    Ok(DMatrix::from_fn(k, covariates.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            covariates[j - 1][i]
        }
    }))
}

fn check(points: &[StudyPoint], x: &DMatrix<f64>) -> Result<(), MetaError> {
    if points.is_empty() {
        return Err(MetaError::Empty);
    }
    if x.nrows() != points.len() {
        return Err(MetaError::DimensionMismatch {
            rows: x.nrows(),
            k: points.len(),
        });
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.variance.is_finite() && p.variance > 0.0) {
            return Err(MetaError::BadVariance {
                index: i,
                value: p.variance,
            });
        }
        if !p.beta_hat.is_finite() || x.row(i).iter().any(|v| !v.is_finite()) {
            return Err(MetaError::NonFinite { index: i });
        }
    }
    Ok(())
}

fn require_df(points: &[StudyPoint], x: &DMatrix<f64>) -> Result<(), MetaError> {
    check(points, x)?;
    if points.len() <= x.ncols() {
        return Err(MetaError::Degenerate {
            k: points.len(),
            p: x.ncols(),
        });
    }
    Ok(())
}

fn residuals(points: &[StudyPoint], x: &DMatrix<f64>, theta: &[f64]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| p.beta_hat - (0..x.ncols()).map(|j| x[(i, j)] * theta[j]).sum::<f64>())
        .collect()
}

/// Method-of-moments heterogeneity from unweighted OLS residuals:
/// `max(0, (êᵀê − tr((I−H)V)) / (k − p))`.
pub fn hedges_tau2(points: &[StudyPoint], x: &DMatrix<f64>) -> Result<f64, MetaError> {
    require_df(points, x)?;
    let k = points.len();
    let p = x.ncols();
    let y: Vec<f64> = points.iter().map(|s| s.beta_hat).collect();
    let ols = weighted_least_squares(x, &vec![1.0; k], &y)?;
    let e = residuals(points, x, ols.coefficients.as_slice());
    let rss: f64 = e.iter().map(|v| v * v).sum();
    let trace: f64 = points
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let xi = x.row(i).transpose();
            let h = (xi.transpose() * &ols.xtwx_inv * &xi)[(0, 0)];
            s.variance * (1.0 - h)
        })
        .sum();
    Ok(((rss - trace) / (k - p) as f64).max(0.0))
}

/// Generalized Q statistic `Σ wᵢ êᵢ²` at heterogeneity `tau2`.
fn q_statistic(points: &[StudyPoint], x: &DMatrix<f64>, tau2: f64) -> Result<f64, MetaError> {
    let g = meta_gls(points, x, tau2)?;
    Ok(g.weights.iter().zip(&g.residuals).map(|(w, e)| w * e * e).sum())
}

pub fn dersimonian_laird_tau2(points: &[StudyPoint], x: &DMatrix<f64>) -> Result<f64, MetaError> {
    require_df(points, x)?;
    let g = meta_gls(points, x, 0.0)?;
    let q: f64 = g.weights.iter().zip(&g.residuals).map(|(w, e)| w * e * e).sum();
    // tr(P) with P = W − WX(XᵀWX)⁻¹XᵀW
    let mut trace = 0.0;
    for (i, w) in g.weights.iter().enumerate() {
        let xi = x.row(i).transpose();
        let h = (xi.transpose() * &g.cov * &xi)[(0, 0)];
        trace += w - w * w * h;
    }
    let df = (points.len() - x.ncols()) as f64;
    Ok(((q - df) / trace).max(0.0))
}

/// Root of the generalized Q-profile `Q(τ²) = k − p`, or 0 when `Q(0) ≤ k − p`.
pub fn paule_mandel_tau2(points: &[StudyPoint], x: &DMatrix<f64>) -> Result<f64, MetaError> {
    require_df(points, x)?;
    let df = (points.len() - x.ncols()) as f64;
    if q_statistic(points, x, 0.0)? <= df {
        return Ok(0.0);
    }
    let vmax = points.iter().map(|p| p.variance).fold(0.0, f64::max);
    let mut hi = hedges_tau2(points, x)?.max(vmax);
    while q_statistic(points, x, hi)? > df {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q_statistic(points, x, mid)? > df {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn estimate_tau2(points: &[StudyPoint], x: &DMatrix<f64>, estimator: Tau2Estimator) -> Result<f64, MetaError> {
    match estimator {
        Tau2Estimator::Hedges => hedges_tau2(points, x),
        Tau2Estimator::DerSimonianLaird => dersimonian_laird_tau2(points, x),
        Tau2Estimator::PauleMandel => paule_mandel_tau2(points, x),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsFit {
    pub coefficients: Vec<f64>,
    /// Nominal covariance `(XᵀWX)⁻¹`.
    pub cov: DMatrix<f64>,
    /// `1 / (vᵢ + τ²)`.
    pub weights: Vec<f64>,
    pub residuals: Vec<f64>,
    pub tau2: f64,
}

pub fn meta_gls(points: &[StudyPoint], x: &DMatrix<f64>, tau2: f64) -> Result<GlsFit, MetaError> {
    check(points, x)?;
    if !(tau2.is_finite() && tau2 >= 0.0) {
        return Err(MetaError::BadTau2(tau2));
    }
    if points.len() < x.ncols() {
        return Err(MetaError::Degenerate {
            k: points.len(),
            p: x.ncols(),
        });
    }
    let weights: Vec<f64> = points.iter().map(|p| 1.0 / (p.variance + tau2)).collect();
    let y: Vec<f64> = points.iter().map(|p| p.beta_hat).collect();
    let sol = weighted_least_squares(x, &weights, &y)?;
    let coefficients = sol.coefficients.as_slice().to_vec();
    let residuals = residuals(points, x, &coefficients);
    Ok(GlsFit {
        coefficients,
        cov: sol.xtwx_inv,
        weights,
        residuals,
        tau2,
    })
}

/// Population fit with Knapp–Hartung adjusted inference for every coefficient.
/// Coefficient 0 is the intercept `γ`, the rest are covariate effects `δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFit {
    pub coefficients: Vec<f64>,
    pub tau2: f64,
    /// Knapp–Hartung factor (after truncation, if requested).
    pub q: f64,
    pub k: usize,
    pub df: usize,
    pub se_unadjusted: Vec<f64>,
    pub z_unadjusted: Vec<f64>,
    pub p_unadjusted: Vec<f64>,
    pub se_adjusted: Vec<f64>,
    pub t_adjusted: Vec<f64>,
    pub p_values: Vec<f64>,
    pub ci95: Vec<[f64; 2]>,
}

impl MetaFit {
    pub fn gamma_hat(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn delta_hat(&self) -> &[f64] {
        &self.coefficients[1..]
    }
}

fn ratio(est: f64, se: f64) -> (f64, bool) {
    if se > 0.0 {
        (est / se, false)
    } else if est == 0.0 {
        (0.0, true)
    } else {
        (est.signum() * f64::INFINITY, true)
    }
}

pub fn knapp_hartung(
    points: &[StudyPoint],
    x: &DMatrix<f64>,
    gls: &GlsFit,
    truncate_q: bool,
) -> Result<MetaFit, MetaError> {
    require_df(points, x)?;
    let k = points.len();
    let p = x.ncols();
    let df = k - p;
    let raw_q = gls
        .weights
        .iter()
        .zip(&gls.residuals)
        .map(|(w, e)| w * e * e)
        .sum::<f64>()
        / df as f64;
    let q = if truncate_q { raw_q.max(1.0) } else { raw_q };
    let crit = t_upper_quantile(0.025, df as f64).expect("df ≥ 1");
    let mut fit = MetaFit {
        coefficients: gls.coefficients.clone(),
        tau2: gls.tau2,
        q,
        k,
        df,
        se_unadjusted: Vec::with_capacity(p),
        z_unadjusted: Vec::with_capacity(p),
        p_unadjusted: Vec::with_capacity(p),
        se_adjusted: Vec::with_capacity(p),
        t_adjusted: Vec::with_capacity(p),
        p_values: Vec::with_capacity(p),
        ci95: Vec::with_capacity(p),
    };
    for j in 0..p {
        let est = gls.coefficients[j];
        let se0 = gls.cov[(j, j)].max(0.0).sqrt();
        let (z, _) = ratio(est, se0);
        fit.se_unadjusted.push(se0);
        fit.z_unadjusted.push(z);
        fit.p_unadjusted.push(normal_two_sided_p(z));
        let se = (q * gls.cov[(j, j)]).max(0.0).sqrt();
        let (t, degenerate) = ratio(est, se);
        let pv = if degenerate {
            if t == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            t_two_sided_p(t, df as f64).expect("finite t")
        };
        fit.se_adjusted.push(se);
        fit.t_adjusted.push(t);
        fit.p_values.push(pv);
        fit.ci95.push([est - crit * se, est + crit * se]);
    }
    Ok(fit)
}

/// Heterogeneity estimate, GLS and Knapp–Hartung in one call.
pub fn fit_meta(points: &[StudyPoint], x: &DMatrix<f64>, options: &MetaOptions) -> Result<MetaFit, MetaError> {
    let tau2 = estimate_tau2(points, x, options.estimator)?;
    let gls = meta_gls(points, x, tau2)?;
    knapp_hartung(points, x, &gls, options.truncate_q)
}
