//! Monte Carlo harnesses over phantom replicates.
//!
//! Replicate `r` uses noise seed `spec.seed ^ r`, so each replicate equals
//! `simulate_session(spec, spec.seed ^ r)`. Observation sets and weights do
//! not depend on the noise and are prepared once.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::design::ModelSpec;
use crate::fit::{FitContext, FitError, FitOptions, Observation};
use crate::geometry::Point3;
use crate::lattice::{Lattice, ScalarField};
use crate::stats::t_upper_quantile;
use crate::weights::{epsilon_omega, WeightError, WeightScheme};

use super::{noiseless_values, standard_noise, simulate_session, BetaSpec, MotionSpec, PhantomError, PhantomSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("type-I simulation needs a null phantom (beta must be zero)")]
    NotNull,
    #[error("need at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("epsilon_omega certification failed: {0}")]
    Certification(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

struct Prepared<'a> {
    ctx: FitContext<'a>,
    obs: Vec<(Observation, f64)>,
    indices: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(ctx: FitContext<'a>, center: &Point3) -> Self {
        let obs = ctx.observations(center);
        let s = ctx.session();
        let indices = obs
            .iter()
            .map(|(o, _)| s.value_index(o.cycle, o.slice, o.voxel))
            .collect();
        Self { ctx, obs, indices }
    }

    fn fit(&self, values: &[f64]) -> Result<crate::fit::PointFit, FitError> {
        let obs: Vec<(Observation, f64)> = self
            .obs
            .iter()
            .zip(&self.indices)
            .map(|((o, w), &i)| (Observation { value: values[i], ..*o }, *w))
            .collect();
        self.ctx.fit_observations(&obs).map(|r| r.fit)
    }
}

fn replicate_values(spec: &PhantomSpec, noiseless: &[f64], r: usize) -> Vec<f64> {
    let scale = spec.noise_sigma * spec.grey_scale;
    if scale == 0.0 {
        return noiseless.to_vec();
    }
    noiseless
        .iter()
        .zip(standard_noise(spec, spec.seed ^ r as u64))
        .map(|(m, z)| m + scale * z)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRate {
    pub scheme: usize,
    pub probe: Point3,
    pub rejections: usize,
    pub failures: usize,
    pub reps: usize,
    pub rate: f64,
    /// Binomial Monte Carlo standard error of `rate`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Type1Report {
    pub alpha: f64,
    pub reps: usize,
    /// One entry per (scheme, probe), schemes outermost.
    pub rates: Vec<ProbeRate>,
}

/// Rejection rate of the two-sided t-test of `β = 0` at standard-space
/// `probes` over `reps` null replicates, for each scheme. Replicates are
/// shared across schemes and probes.
pub fn mc_type1(
    spec: &PhantomSpec,
    schemes: &[WeightScheme],
    model: &ModelSpec,
    options: FitOptions,
    probes: &[Point3],
    reps: usize,
    alpha: f64,
) -> Result<Type1Report, McError> {
    if spec.beta != BetaSpec::Zero {
        return Err(McError::NotNull);
    }
    if reps < 100 {
        return Err(McError::TooFewReplicates { min: 100, got: reps });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(McError::BadAlpha(alpha));
    }
    let (session, truth) = simulate_session(spec, spec.seed)?;
    let mut prepared = Vec::new();
    for scheme in schemes {
        for x in probes {
            let ctx = FitContext::new(&session, scheme, model, options)?;
            prepared.push(Prepared::new(ctx, &spec.psi.apply(x)));
        }
    }
    let counts = (0..reps)
        .into_par_iter()
        .map(|r| {
            let values = replicate_values(spec, &truth.noiseless, r);
            prepared
                .iter()
                .map(|p| match p.fit(&values) {
                    Ok(f) => match (f.t_value, t_upper_quantile(alpha / 2.0, f.df)) {
                        (Some(t), Some(crit)) => ((t.abs() >= crit) as usize, 0usize),
                        _ => (0, 1),
                    },
                    Err(_) => (0, 1),
                })
                .collect::<Vec<_>>()
        })
        .reduce(
            || vec![(0, 0); prepared.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| (x.0 + y.0, x.1 + y.1)).collect(),
        );
    let rates = counts
        .iter()
        .enumerate()
        .map(|(k, &(rej, fail))| {
            let rate = rej as f64 / reps as f64;
            ProbeRate {
                scheme: k / probes.len(),
                probe: probes[k % probes.len()],
                rejections: rej,
                failures: fail,
                reps,
                rate,
                se: (rate * (1.0 - rate) / reps as f64).sqrt(),
            }
        })
        .collect();
    Ok(Type1Report { alpha, reps, rates })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub probe: Point3,
    /// Grey-scaled true `β` at the probe.
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub mc_se: f64,
    /// Certified `ε_ω` (grey-scaled).
    pub epsilon_omega: f64,
    pub witness_region: String,
    pub bound: f64,
    pub within_bound: bool,
    pub reps: usize,
    pub failures: usize,
}

/// Empirical bias of `β̂` at `probe` against the certified bound `2ε_ω`.
///
/// `ε_ω` is certified on the lattice of scanner voxel centres, which is the
/// sampling lattice when the head is still and `ψ` is a translation; other
/// configurations are refused.
pub fn mc_bias(
    spec: &PhantomSpec,
    scheme: &WeightScheme,
    model: &ModelSpec,
    options: FitOptions,
    probe: &Point3,
    reps: usize,
    radii: &[f64],
) -> Result<BiasReport, McError> {
    if reps < 2 {
        return Err(McError::TooFewReplicates { min: 2, got: reps });
    }
    if spec.motion != MotionSpec::Still || spec.psi.linear() != &nalgebra::Matrix3::identity() {
        return Err(McError::Certification(
            "certification lattice requires a still head and a translation-only psi".into(),
        ));
    }
    let grid = &spec.grid;
    let [nx, ny] = grid.in_plane_shape();
    let psi_inv = spec.psi.inverse();
    let origin = psi_inv.apply(&grid.voxel_center(0, 0, 0));
    let lattice = Lattice::new(origin.coords.into(), grid.voxel_size(), [nx, ny, grid.slice_count()])
        .map_err(|e| McError::Certification(e.to_string()))?;
    let g = spec.grey_scale;
    let beta_field = ScalarField::from_fn(lattice, |p| g * spec.beta.eval(p));
    let cert = epsilon_omega(scheme, &beta_field, probe, radii)
        .map_err(|e| McError::Certification(e.to_string()))?;

    let (_, noiseless) = noiseless_values(spec)?;
    let (session, _) = simulate_session(spec, spec.seed)?;
    let ctx = FitContext::new(&session, scheme, model, options)?;
    let prepared = Prepared::new(ctx, &spec.psi.apply(probe));
    let truth = g * spec.beta.eval(probe);
    let (sum, sum2, ok) = (0..reps)
        .into_par_iter()
        .map(|r| match prepared.fit(&replicate_values(spec, &noiseless, r)) {
            Ok(f) => {
                let e = f.beta_hat - truth;
                (e, e * e, 1usize)
            }
            Err(_) => (0.0, 0.0, 0),
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if ok < 2 {
        return Err(McError::TooFewReplicates { min: 2, got: ok });
    }
    let n = ok as f64;
    let bias = sum / n;
    let var = ((sum2 - n * bias * bias) / (n - 1.0)).max(0.0);
    let mc_se = (var / n).sqrt();
    let bound = 2.0 * cert.value;
    Ok(BiasReport {
        probe: *probe,
        truth,
        mean_estimate: truth + bias,
        bias,
        mc_se,
        epsilon_omega: cert.value,
        witness_region: cert.witness_region,
        bound,
        within_bound: bias.abs() <= bound + 3.0 * mc_se,
        reps,
        failures: reps - ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwReport {
    pub probe: Point3,
    pub mean: f64,
    pub se: f64,
    pub values: Vec<f64>,
}

/// Durbin–Watson statistic of the point fit at `probe` over replicates.
pub fn mc_dw(
    spec: &PhantomSpec,
    scheme: &WeightScheme,
    model: &ModelSpec,
    options: FitOptions,
    probe: &Point3,
    reps: usize,
) -> Result<DwReport, McError> {
    if reps < 2 {
        return Err(McError::TooFewReplicates { min: 2, got: reps });
    }
    let (session, truth) = simulate_session(spec, spec.seed)?;
    let ctx = FitContext::new(&session, scheme, model, options)?;
    let prepared = Prepared::new(ctx, &spec.psi.apply(probe));
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .filter_map(|r| prepared.fit(&replicate_values(spec, &truth.noiseless, r)).ok()?.dw)
        .collect();
    if values.len() < 2 {
        return Err(McError::TooFewReplicates { min: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(DwReport {
        probe: *probe,
        mean,
        se: (var / n).sqrt(),
        values,
    })
}
