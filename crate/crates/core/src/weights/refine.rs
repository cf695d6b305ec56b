//! Iterative refinement of a weighting scheme by the native divergence of the
//! current parameter estimate.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::AffineMap;
use crate::lattice::ScalarField;

use super::{DivergenceMap, Kernel, Region, WeightError, WeightScheme};

#[derive(Debug, Error)]
pub enum RefineError<E> {
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("empty kernel sequence")]
    NoKernels,
    #[error("initial divergence has no Euclidean component to keep the support local")]
    NoEuclideanTerm,
    #[error("refit failed: {0}")]
    Fit(E),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// Everything except the estimate that `refine_scheme` needs.
#[derive(Debug, Clone)]
pub struct RefineSettings {
    /// `φ_0, φ_1, …`; the last kernel is reused once the list runs out.
    pub kernels: Vec<Kernel>,
    pub d0: DivergenceMap,
    pub cutoff_mm: f64,
    pub mask: Region,
    /// Divisor for native divergences; robust spread of the estimate when `None`.
    pub native_scale: Option<f64>,
    /// Map from weight space into the coordinates of the estimate's lattice.
    pub frame: AffineMap,
}

impl RefineSettings {
    pub fn new(kernels: Vec<Kernel>, d0: DivergenceMap) -> Self {
        Self {
            kernels,
            d0,
            cutoff_mm: f64::INFINITY,
            mask: Region::Everywhere,
            native_scale: None,
            frame: AffineMap::identity(),
        }
    }
}

/// MAD·1.4826 over the finite values, floored at `√ε_mach · max(1, max|β|)`.
pub fn robust_scale(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let peak = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let floor = f64::EPSILON.sqrt() * peak;
    if v.is_empty() {
        return floor;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let m = median(&mut v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
    (1.4826 * median(&mut dev)).max(floor)
}

/// Runs `iterations − 1` refinement rounds starting from `φ_0 ∘ d_0`.
///
/// Round `n` sets `d_{n+1} = max(d_0, native(β̂_n) / scale)` where `β̂_n` is
/// produced by `refit` under the current scheme (`β̂_0 = beta_hat`).
pub fn refine_scheme<E>(
    beta_hat: &ScalarField,
    settings: &RefineSettings,
    iterations: usize,
    mut refit: impl FnMut(&WeightScheme) -> Result<ScalarField, E>,
) -> Result<WeightScheme, RefineError<E>> {
    if iterations == 0 {
        return Err(RefineError::NoIterations);
    }
    if settings.kernels.is_empty() {
        return Err(RefineError::NoKernels);
    }
    if settings.d0.euclidean_bandwidth().is_none() {
        return Err(RefineError::NoEuclideanTerm);
    }
    let kernel = |n: usize| settings.kernels[n.min(settings.kernels.len() - 1)].clone();
    let mut scheme = WeightScheme {
        kernel: kernel(0),
        divergence: settings.d0.clone(),
        cutoff_mm: settings.cutoff_mm,
        mask: settings.mask.clone(),
    };
    let mut estimate = beta_hat.clone();
    for n in 1..iterations {
        if n > 1 {
            estimate = refit(&scheme).map_err(RefineError::Fit)?;
        }
        let scale = settings
            .native_scale
            .unwrap_or_else(|| robust_scale(estimate.values()));
        if !(scale > 0.0) {
            return Err(WeightError::NonPositiveBandwidth(scale).into());
        }
        let native = DivergenceMap::Native {
            field: Arc::new(estimate.clone()),
            scale,
            frame: settings.frame.clone(),
        };
        scheme = WeightScheme {
            kernel: kernel(n),
            divergence: DivergenceMap::Composite(vec![settings.d0.clone(), native]),
            cutoff_mm: settings.cutoff_mm,
            mask: settings.mask.clone(),
        };
    }
    Ok(scheme)
}
