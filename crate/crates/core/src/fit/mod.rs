//! The per-point weighted least-squares estimator and its variance, t and
//! residual diagnostics.

mod diagnostics;
mod field;

pub use diagnostics::{dw_peak_densities, framewise_displacement, grubbs_outlier_cycles, DiagnosticError};
pub use field::{fit_field, fit_point, FieldFit, FitContext, FitFieldError, ParamField};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{baseline_contrast, design_row, indicator, task_contrast, BlockDesign, DesignError, ModelSpec};
use crate::geometry::Point3;
use crate::linalg::{weighted_least_squares, LinalgError};
use crate::session::ScanSession;
use crate::weights::WeightScheme;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{n} observations for {p} coefficients")]
    Underdetermined { n: usize, p: usize },
    #[error("design has rank {rank} < {p} under these weights")]
    RankDeficient { rank: usize, p: usize },
    #[error("effective sample size {n_effective:.3} does not exceed {p} coefficients")]
    InsufficientEffectiveSample { n_effective: f64, p: usize },
    #[error("variance of the task effect is zero; t undefined")]
    ZeroVariance,
    #[error("weights must be finite and nonnegative")]
    BadWeight,
    #[error(transparent)]
    Design(#[from] DesignError),
    /// Failure read back from an exported field.
    #[error("{0}")]
    Recorded(String),
}

impl From<LinalgError> for FitError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Underdetermined { n, p } => FitError::Underdetermined { n, p },
            LinalgError::RankDeficient { rank, p } => FitError::RankDeficient { rank, p },
            LinalgError::BadWeight | LinalgError::DimensionMismatch(_) => FitError::BadWeight,
        }
    }
}

/// One measured value placed in subject space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub location: Point3,
    pub value: f64,
    pub cycle: usize,
    pub slice: usize,
    /// In-plane voxel index (`i + nx·j`).
    pub voxel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Heteroskedasticity-robust sandwich with locality weights.
    #[default]
    Sandwich,
    /// `σ̂² Σ (xᵢᵀa)² wᵢ²` with `a = (XᵀWX)⁻¹c`.
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub variance: VarianceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFit {
    pub coefficients: Vec<f64>,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub sigma2_hat: f64,
    pub var_beta_hat: f64,
    /// `None` when the variance is zero.
    pub t_value: Option<f64>,
    pub n_obs: usize,
    pub n_effective: f64,
    /// `None` when fewer than three residuals or all residuals vanish.
    pub dw: Option<f64>,
    pub df: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsResult {
    pub fit: PointFit,
    /// Residuals of the nonzero-weight observations in acquisition order.
    pub residuals: Vec<f64>,
    /// Input position of each residual.
    pub order: Vec<usize>,
}

/// Every observation of `session` with nonzero weight at the subject-space
/// point `center`. Observations with an undefined task indicator and those
/// in excluded cycles are skipped. Output is in acquisition order.
pub fn collect_observations(session: &ScanSession, center: &Point3, scheme: &WeightScheme) -> Vec<(Observation, f64)> {
    let grid = session.grid();
    let design = session.design();
    let [nx, ny] = grid.in_plane_shape();
    let [dx, dy, _] = grid.voxel_size();
    let origin = grid.origin();
    let radius = scheme.query_radius();
    let mut out = Vec::new();
    for cycle in 0..session.cycles() {
        if session.is_excluded(cycle) {
            continue;
        }
        let rho = &session.motions()[cycle];
        let vc = rho.apply(center);
        for &slice in grid.slice_order() {
            let time = grid.acquisition_time(cycle, slice);
            if indicator(design, time).is_none() {
                continue;
            }
            let (i_range, j_range) = if radius.is_finite() {
                let dz = vc.z - grid.slice_z(slice);
                if dz.abs() > radius {
                    continue;
                }
                let rr = (radius * radius - dz * dz).sqrt();
                let span = |c: f64, o: f64, d: f64, n: usize| {
                    let lo = ((c - rr - o) / d).ceil().max(0.0);
                    let hi = ((c + rr - o) / d).floor().min(n as f64 - 1.0);
                    if hi < lo {
                        0..0
                    } else {
                        lo as usize..hi as usize + 1
                    }
                };
                (span(vc.x, origin[0], dx, nx), span(vc.y, origin[1], dy, ny))
            } else {
                (0..nx, 0..ny)
            };
            for j in j_range {
                for i in i_range.clone() {
                    let location = rho.inverse_apply(&grid.voxel_center(i, j, slice));
                    let w = scheme.weight(center, &location);
                    if w > 0.0 {
                        let voxel = i + nx * j;
                        out.push((
                            Observation {
                                time,
                                location,
                                value: session.value(cycle, slice, voxel),
                                cycle,
                                slice,
                                voxel,
                            },
                            w,
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Weighted least-squares fit of `model` to weighted observations.
pub fn wls_fit(obs: &[(Observation, f64)], model: &ModelSpec, design: &BlockDesign) -> Result<PointFit, FitError> {
    wls_fit_with(obs, model, design, &FitOptions::default()).map(|r| r.fit)
}

pub fn wls_fit_with(
    obs: &[(Observation, f64)],
    model: &ModelSpec,
    design: &BlockDesign,
    options: &FitOptions,
) -> Result<WlsResult, FitError> {
    model.validate()?;
    let contrast = task_contrast(model, design);
    let baseline = baseline_contrast(model, design);
    fit_grouped(obs, &contrast, &baseline, options, |o| {
        design_row(model, design, o.time).map(|r| r.values).map_err(FitError::from)
    })
}

/// Core estimator. Observations sharing an acquisition time share a design
/// row, so the fit runs on weighted group means with group weights `Σw`,
/// which has the same minimizer.
pub(crate) fn fit_grouped(
    obs: &[(Observation, f64)],
    contrast: &[f64],
    baseline: &[f64],
    options: &FitOptions,
    mut row_of: impl FnMut(&Observation) -> Result<Vec<f64>, FitError>,
) -> Result<WlsResult, FitError> {
    let p = contrast.len();
    if obs.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(FitError::BadWeight);
    }
    let mut order: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].1 > 0.0).collect();
    let key = |i: usize| (obs[i].0.time, obs[i].0.slice, obs[i].0.voxel);
    let sorted = order.windows(2).all(|w| {
        let (a, b) = (key(w[0]), key(w[1]));
        a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) <= (b.1, b.2))
    });
    if !sorted {
        order.sort_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then((ka.1, ka.2).cmp(&(kb.1, kb.2)))
        });
    }
    let n = order.len();
    if n < p {
        return Err(FitError::Underdetermined { n, p });
    }

    // Groups of consecutive observations with identical time.
    let mut bounds = Vec::new();
    let mut start = 0;
    for k in 1..=n {
        if k == n || obs[order[k]].0.time != obs[order[start]].0.time {
            bounds.push((start, k));
            start = k;
        }
    }
    let g = bounds.len();
    let mut xg = DMatrix::zeros(g, p);
    let mut wg = vec![0.0; g];
    let mut yg = vec![0.0; g];
    for (gi, &(s, e)) in bounds.iter().enumerate() {
        let row = row_of(&obs[order[s]].0)?;
        for (c, v) in row.iter().enumerate() {
            xg[(gi, c)] = *v;
        }
        let (mut sw, mut swy) = (0.0, 0.0);
        for &i in &order[s..e] {
            let (o, w) = &obs[i];
            sw += w;
            swy += w * o.value;
        }
        wg[gi] = sw;
        yg[gi] = swy / sw;
    }
    let sol = weighted_least_squares(&xg, &wg, &yg)?;
    let theta = &sol.coefficients;
    let fitted = &xg * theta;
    let a = &sol.xtwx_inv * DVector::from_column_slice(contrast);
    let u = &xg * &a;

    let mut residuals = Vec::with_capacity(n);
    let (mut sw, mut sw2, mut swe2) = (0.0, 0.0, 0.0);
    let (mut sandwich, mut lever) = (0.0, 0.0);
    for (gi, &(s, e)) in bounds.iter().enumerate() {
        let (mut gw2e2, mut gw2) = (0.0, 0.0);
        for &i in &order[s..e] {
            let (o, w) = &obs[i];
            let r = o.value - fitted[gi];
            residuals.push(r);
            sw += w;
            sw2 += w * w;
            swe2 += w * r * r;
            gw2e2 += w * w * r * r;
            gw2 += w * w;
        }
        let ug2 = u[gi] * u[gi];
        sandwich += ug2 * gw2e2;
        lever += ug2 * gw2;
    }
    let n_effective = sw * sw / sw2;
    if n_effective <= p as f64 {
        return Err(FitError::InsufficientEffectiveSample { n_effective, p });
    }
    let sigma2_hat = swe2 / (sw * (1.0 - p as f64 / n_effective));
    let var_beta_hat = match options.variance {
        VarianceMode::Sandwich => sandwich,
        VarianceMode::Classical => sigma2_hat * lever,
    };
    let dot = |v: &[f64]| v.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
    let beta_hat = dot(contrast);
    let mut fit = PointFit {
        coefficients: theta.iter().copied().collect(),
        alpha_hat: dot(baseline),
        beta_hat,
        sigma2_hat,
        var_beta_hat,
        t_value: None,
        n_obs: n,
        n_effective,
        dw: durbin_watson(&residuals).ok(),
        df: n_effective - p as f64,
    };
    fit.t_value = t_statistic(&fit).ok();
    Ok(WlsResult {
        fit,
        residuals,
        order,
    })
}

/// Variance of `cᵀθ̂` for a WLS fit with design `x` (one row per
/// observation), weights `w` and residuals `residuals`.
pub fn beta_variance(
    x: &DMatrix<f64>,
    w: &[f64],
    residuals: &[f64],
    contrast: &[f64],
    mode: VarianceMode,
) -> Result<f64, FitError> {
    let p = x.ncols();
    let zeros = vec![0.0; w.len()];
    let sol = weighted_least_squares(x, w, &zeros)?;
    let a = &sol.xtwx_inv * DVector::from_column_slice(contrast);
    let u = x * &a;
    let (mut sw, mut sw2, mut swe2, mut sandwich, mut lever) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (wi, ei) = (w[i], residuals[i]);
        sw += wi;
        sw2 += wi * wi;
        swe2 += wi * ei * ei;
        sandwich += u[i] * u[i] * wi * wi * ei * ei;
        lever += u[i] * u[i] * wi * wi;
    }
    Ok(match mode {
        VarianceMode::Sandwich => sandwich,
        VarianceMode::Classical => {
            let n_effective = sw * sw / sw2;
            if n_effective <= p as f64 {
                return Err(FitError::InsufficientEffectiveSample { n_effective, p });
            }
            swe2 / (sw * (1.0 - p as f64 / n_effective)) * lever
        }
    })
}

/// `β̂ / √var(β̂)`.
pub fn t_statistic(fit: &PointFit) -> Result<f64, FitError> {
    if !(fit.var_beta_hat > 0.0 && fit.var_beta_hat.is_finite()) {
        return Err(FitError::ZeroVariance);
    }
    Ok(fit.beta_hat / fit.var_beta_hat.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DurbinWatsonError {
    #[error("need at least 3 residuals, got {0}")]
    TooFew(usize),
    #[error("all residuals are zero")]
    AllZero,
}

/// `Σ (eᵢ − eᵢ₋₁)² / Σ eᵢ²` over residuals in acquisition order.
pub fn durbin_watson(residuals: &[f64]) -> Result<f64, DurbinWatsonError> {
    if residuals.len() < 3 {
        return Err(DurbinWatsonError::TooFew(residuals.len()));
    }
    let den: f64 = residuals.iter().map(|e| e * e).sum();
    if den == 0.0 {
        return Err(DurbinWatsonError::AllZero);
    }
    let num: f64 = residuals.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok(num / den)
}

#[cfg(test)]
mod tests;
