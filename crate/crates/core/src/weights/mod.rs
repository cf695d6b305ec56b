//! Weighting schemes `ω_r^x = φ(d(r‖x))`: a kernel composed with a divergence
//! map, restricted to a mask and a hard distance cutoff.

mod epsilon;
mod refine;

pub use epsilon::{
    connected_divergence, default_candidates, delta_error, epsilon_error, epsilon_nice_check,
    epsilon_omega, native_divergence, u_epsilon, u_epsilon_index, DeltaError, EpsilonOmega, EpsilonReport,
};
pub use refine::{refine_scheme, robust_scale, RefineError, RefineSettings};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fwhm_to_sigma, AffineMap, GeometryError, Point3};
use crate::lattice::{Lattice, LatticeError, LatticeRegion, ScalarField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("kernel table needs at least two finite samples and a positive support")]
    BadTable,
    #[error("empty probe set")]
    EmptyProbes,
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("point is not a lattice point of the field")]
    NotOnLattice,
    #[error("x is not a member of the region")]
    NotInRegion,
    #[error("weighting scheme has no support on the lattice at this point")]
    EmptySupport,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Radial profile `φ`, evaluated at a dimensionless divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-d²/2)`, untruncated.
    Gaussian,
    /// `1 - d²` on `[0, 1)`.
    Epanechnikov,
    /// `(1 - d³)³` on `[0, 1)`.
    Tricube,
    /// Piecewise-linear through equally spaced samples on `[0, support]`, zero beyond.
    Table { samples: Vec<f64>, support: f64 },
}

impl Kernel {
    pub fn table(samples: Vec<f64>, support: f64) -> Result<Self, WeightError> {
        if samples.len() < 2 || samples.iter().any(|v| !v.is_finite()) || !(support > 0.0) {
            return Err(WeightError::BadTable);
        }
        Ok(Kernel::Table { samples, support })
    }

    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * d * d).exp(),
            Kernel::Epanechnikov => {
                if d < 1.0 {
                    1.0 - d * d
                } else {
                    0.0
                }
            }
            Kernel::Tricube => {
                if d < 1.0 {
                    let u = 1.0 - d * d * d;
                    u * u * u
                } else {
                    0.0
                }
            }
            Kernel::Table { samples, support } => {
                if !(d <= *support) {
                    return 0.0;
                }
                let pos = d / support * (samples.len() - 1) as f64;
                let i = (pos.floor() as usize).min(samples.len() - 2);
                let f = pos - i as f64;
                samples[i] * (1.0 - f) + samples[i + 1] * f
            }
        }
    }

    /// Divergence beyond which the kernel vanishes (`∞` for the Gaussian).
    pub fn support_radius(&self) -> f64 {
        match self {
            Kernel::Gaussian => f64::INFINITY,
            Kernel::Epanechnikov | Kernel::Tricube => 1.0,
            Kernel::Table { support, .. } => *support,
        }
    }
}

/// Region `M` outside of which all weights vanish.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Region {
    #[default]
    Everywhere,
    Ball { center: Point3, radius: f64 },
    Box { min: Point3, max: Point3 },
    /// Points whose nearest lattice point is a member.
    Lattice { lattice: Lattice, members: Arc<LatticeRegion> },
}

impl Region {
    pub fn contains(&self, p: &Point3) -> bool {
        match self {
            Region::Everywhere => true,
            Region::Ball { center, radius } => (p - center).norm() <= *radius,
            Region::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Region::Lattice { lattice, members } => lattice
                .nearest(p)
                .is_some_and(|i| members.contains(i)),
        }
    }
}

/// Divergence `d(r‖x)` replacing the scaled distance in the kernel argument.
#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceMap {
    /// `‖r − x‖ / h`.
    ScaledEuclidean { h: f64 },
    /// `|β(r) − β(x)| / scale`, with `β` sampled at `frame(r)` and `frame(x)`.
    /// Infinite where the field is undefined.
    Native {
        field: Arc<ScalarField>,
        scale: f64,
        frame: AffineMap,
    },
    /// Pointwise maximum of the members.
    Composite(Vec<DivergenceMap>),
}

impl DivergenceMap {
    pub fn scaled_euclidean(h: f64) -> Result<Self, WeightError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(WeightError::NonPositiveBandwidth(h));
        }
        Ok(DivergenceMap::ScaledEuclidean { h })
    }

    #[inline]
    pub fn eval(&self, r: &Point3, x: &Point3) -> f64 {
        match self {
            DivergenceMap::ScaledEuclidean { h } => (r - x).norm() / h,
            DivergenceMap::Native {
                field,
                scale,
                frame,
            } => {
                let br = field.sample(&frame.apply(r));
                let bx = field.sample(&frame.apply(x));
                match (br, bx) {
                    (Some(a), Some(b)) if a.is_finite() && b.is_finite() => {
                        let diff = (a - b).abs();
                        if diff == 0.0 {
                            0.0
                        } else {
                            diff / scale
                        }
                    }
                    _ => f64::INFINITY,
                }
            }
            DivergenceMap::Composite(members) => members
                .iter()
                .map(|m| m.eval(r, x))
                .fold(0.0, f64::max),
        }
    }

    /// Smallest Euclidean bandwidth that bounds the divergence from below,
    /// i.e. `d(r‖x) ≥ ‖r − x‖ / h`.
    pub fn euclidean_bandwidth(&self) -> Option<f64> {
        match self {
            DivergenceMap::ScaledEuclidean { h } => Some(*h),
            DivergenceMap::Native { .. } => None,
            DivergenceMap::Composite(members) => members
                .iter()
                .filter_map(|m| m.euclidean_bandwidth())
                .reduce(f64::min),
        }
    }
}

/// A complete weighting scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    pub kernel: Kernel,
    pub divergence: DivergenceMap,
    /// Observations farther than this (mm) get weight exactly 0.
    pub cutoff_mm: f64,
    pub mask: Region,
}

impl WeightScheme {
    pub fn new(kernel: Kernel, divergence: DivergenceMap) -> Self {
        Self {
            kernel,
            divergence,
            cutoff_mm: f64::INFINITY,
            mask: Region::Everywhere,
        }
    }

    /// Gaussian scheme with standard deviation `sigma` mm truncated at
    /// `cutoff_sigmas · sigma`.
    pub fn gaussian(sigma: f64, cutoff_sigmas: f64) -> Result<Self, WeightError> {
        Ok(Self {
            kernel: Kernel::Gaussian,
            divergence: DivergenceMap::scaled_euclidean(sigma)?,
            cutoff_mm: sigma * cutoff_sigmas,
            mask: Region::Everywhere,
        })
    }

    pub fn gaussian_fwhm(fwhm_mm: f64, cutoff_sigmas: f64) -> Result<Self, WeightError> {
        Self::gaussian(fwhm_to_sigma(fwhm_mm)?, cutoff_sigmas)
    }

    pub fn with_cutoff(mut self, cutoff_mm: f64) -> Self {
        self.cutoff_mm = cutoff_mm;
        self
    }

    pub fn with_mask(mut self, mask: Region) -> Self {
        self.mask = mask;
        self
    }

    #[inline]
    pub fn weight(&self, x: &Point3, r: &Point3) -> f64 {
        if !self.mask.contains(r) || !self.mask.contains(x) {
            return 0.0;
        }
        if (r - x).norm() > self.cutoff_mm {
            return 0.0;
        }
        self.kernel.eval(self.divergence.eval(r, x))
    }

    /// Radius (mm) outside of which every weight is zero; may be infinite.
    pub fn query_radius(&self) -> f64 {
        let kernel_reach = match self.divergence.euclidean_bandwidth() {
            Some(h) => self.kernel.support_radius() * h,
            None => f64::INFINITY,
        };
        self.cutoff_mm.min(kernel_reach)
    }

    /// Typical length scale of the scheme in mm.
    pub fn length_scale(&self) -> f64 {
        self.divergence
            .euclidean_bandwidth()
            .unwrap_or(if self.cutoff_mm.is_finite() { self.cutoff_mm } else { 1.0 })
    }
}

/// Gaussian weight `exp(-½ (‖r − x‖ / h)²)` when both points lie in `mask`, else 0.
pub fn gaussian_weight(x: &Point3, r: &Point3, h: f64, mask: &Region) -> Result<f64, WeightError> {
    if !(h > 0.0) {
        return Err(WeightError::NonPositiveBandwidth(h));
    }
    if !mask.contains(r) || !mask.contains(x) {
        return Ok(0.0);
    }
    let d = (r - x).norm() / h;
    Ok((-0.5 * d * d).exp())
}

pub fn scheme_weight(scheme: &WeightScheme, x: &Point3, r: &Point3) -> f64 {
    scheme.weight(x, r)
}

/// A point at which a validity condition failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub x: Point3,
    pub r: Point3,
    pub s: Option<Point3>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub passed: bool,
    pub witness: Option<Witness>,
}

impl Check {
    fn pass() -> Self {
        Check {
            passed: true,
            witness: None,
        }
    }
    fn fail(w: Witness) -> Self {
        Check {
            passed: false,
            witness: Some(w),
        }
    }
}

/// Outcome of the four validity conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub nonnegative: Check,
    pub monotone: Check,
    pub decay: Check,
    pub smooth: Check,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.nonnegative.passed && self.monotone.passed && self.decay.passed && self.smooth.passed
    }
}

/// Numerically checks nonnegativity, strict monotone decrease in divergence,
/// decay, and a bounded finite-difference gradient on the given `(x, r, s)` probes.
///
/// Monotonicity is only demanded where the smaller divergence still carries
/// positive weight; compact kernels are flat (zero) outside their support.
pub fn validate_scheme(
    scheme: &WeightScheme,
    probes: &[(Point3, Point3, Point3)],
) -> Result<ValidityReport, WeightError> {
    if probes.is_empty() {
        return Err(WeightError::EmptyProbes);
    }
    let mut nonnegative = Check::pass();
    let mut monotone = Check::pass();
    let mut smooth = Check::pass();

    let scale = scheme.length_scale();
    let phi0 = scheme.kernel.eval(0.0);
    let step = 1e-4 * scale;
    let grad_bound = 10.0 * phi0.abs().max(1.0) / scale;

    for (x, r, s) in probes {
        let wr = scheme.weight(x, r);
        let ws = scheme.weight(x, s);
        if nonnegative.passed && (wr < 0.0 || ws < 0.0) {
            let (bad, w) = if wr < 0.0 { (r, wr) } else { (s, ws) };
            nonnegative = Check::fail(Witness {
                x: *x,
                r: *bad,
                s: None,
                detail: format!("weight {w:.6e} < 0"),
            });
        }
        if monotone.passed {
            let dr = scheme.divergence.eval(r, x);
            let ds = scheme.divergence.eval(s, x);
            let (far, near, w_far, w_near) = if dr > ds { (r, s, wr, ws) } else { (s, r, ws, wr) };
            if dr != ds && w_near > 0.0 && w_far >= w_near {
                monotone = Check::fail(Witness {
                    x: *x,
                    r: *far,
                    s: Some(*near),
                    detail: format!(
                        "divergence {:.6} > {:.6} but weight {w_far:.6e} >= {w_near:.6e}",
                        dr.max(ds),
                        dr.min(ds)
                    ),
                });
            }
        }
        if smooth.passed {
            for axis in 0..3 {
                let mut plus = *r;
                let mut minus = *r;
                plus[axis] += step;
                minus[axis] -= step;
                let g = (scheme.weight(x, &plus) - scheme.weight(x, &minus)) / (2.0 * step);
                if !(g.abs() <= grad_bound) {
                    smooth = Check::fail(Witness {
                        x: *x,
                        r: *r,
                        s: None,
                        detail: format!("finite-difference gradient {g:.3e} exceeds {grad_bound:.3e}"),
                    });
                    break;
                }
            }
        }
    }

    // Divergences are in bandwidth units, so the support scale is 1.
    let support_scale = 1.0;
    let far = scheme.kernel.eval(10.0 * support_scale);
    let decay = if phi0 > 0.0 && far < 1e-6 * phi0 {
        Check::pass()
    } else {
        let (x, r, _) = probes[0];
        Check::fail(Witness {
            x,
            r,
            s: None,
            detail: format!("φ(0) = {phi0:.6e}, φ({:.1}) = {far:.6e}", 10.0 * support_scale),
        })
    };

    Ok(ValidityReport {
        nonnegative,
        monotone,
        decay,
        smooth,
    })
}
