//! Evaluation of the estimator over a lattice in standard space.

use rayon::prelude::*;

use crate::design::{baseline_contrast, design_row, task_contrast, ModelSpec};
use crate::geometry::{AffineMap, Point3};
use crate::lattice::{Lattice, LatticeError, LatticeRegion, ScalarField};
use crate::session::ScanSession;
use crate::weights::WeightScheme;

use super::{collect_observations, fit_grouped, FitError, FitOptions, Observation, PointFit, WlsResult};

/// Outcome at one lattice point: `None` outside the mask.
pub type FieldFit = Option<Result<PointFit, FitError>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamField {
    pub lattice: Lattice,
    pub mask: LatticeRegion,
    pub fits: Vec<FieldFit>,
}

impl ParamField {
    pub fn successful(&self) -> impl Iterator<Item = (usize, &PointFit)> {
        self.fits
            .iter()
            .enumerate()
            .filter_map(|(i, f)| match f {
                Some(Ok(p)) => Some((i, p)),
                _ => None,
            })
    }

    /// Scalar field of `f(fit)`, NaN where there is no successful fit.
    pub fn map(&self, f: impl Fn(&PointFit) -> f64) -> ScalarField {
        let values = self
            .fits
            .iter()
            .map(|x| match x {
                Some(Ok(p)) => f(p),
                _ => f64::NAN,
            })
            .collect();
        ScalarField::new(self.lattice.clone(), values).expect("one value per lattice point")
    }

    pub fn beta(&self) -> ScalarField {
        self.map(|p| p.beta_hat)
    }

    pub fn alpha(&self) -> ScalarField {
        self.map(|p| p.alpha_hat)
    }

    pub fn t(&self) -> ScalarField {
        self.map(|p| p.t_value.unwrap_or(f64::NAN))
    }

    /// Lattice index of the largest t value.
    pub fn argmax_t(&self) -> Option<usize> {
        self.successful()
            .filter_map(|(i, p)| p.t_value.map(|t| (i, t)))
            .fold(None, |best: Option<(usize, f64)>, (i, t)| match best {
                Some((_, bt)) if bt >= t => best,
                _ => Some((i, t)),
            })
            .map(|(i, _)| i)
    }
}

/// Everything a point fit needs that does not depend on the point.
pub struct FitContext<'a> {
    session: &'a ScanSession,
    scheme: &'a WeightScheme,
    options: FitOptions,
    contrast: Vec<f64>,
    baseline: Vec<f64>,
    /// Design row for each `(cycle, slice)`; `None` where the indicator is undefined.
    rows: Vec<Option<Vec<f64>>>,
}

impl<'a> FitContext<'a> {
    pub fn new(
        session: &'a ScanSession,
        scheme: &'a WeightScheme,
        model: &ModelSpec,
        options: FitOptions,
    ) -> Result<Self, FitError> {
        model.validate()?;
        let design = session.design();
        let grid = session.grid();
        let slices = grid.slice_count();
        let mut rows = Vec::with_capacity(session.cycles() * slices);
        for cycle in 0..session.cycles() {
            for slice in 0..slices {
                let t = grid.acquisition_time(cycle, slice);
                rows.push(design_row(model, design, t).ok().map(|r| r.values));
            }
        }
        Ok(Self {
            session,
            scheme,
            options,
            contrast: task_contrast(model, design),
            baseline: baseline_contrast(model, design),
            rows,
        })
    }

    pub fn session(&self) -> &ScanSession {
        self.session
    }

    /// Weighted observations at a subject-space point.
    pub fn observations(&self, center: &Point3) -> Vec<(Observation, f64)> {
        collect_observations(self.session, center, self.scheme)
    }

    /// Fits already collected observations (values may have been replaced).
    pub fn fit_observations(&self, obs: &[(Observation, f64)]) -> Result<WlsResult, FitError> {
        let slices = self.session.grid().slice_count();
        fit_grouped(obs, &self.contrast, &self.baseline, &self.options, |o| {
            self.rows[o.cycle * slices + o.slice]
                .clone()
                .ok_or(FitError::Design(crate::design::DesignError::UndefinedIndicator(o.time)))
        })
    }

    /// Fit at a subject-space point.
    pub fn fit_at(&self, center: &Point3) -> Result<WlsResult, FitError> {
        self.fit_observations(&self.observations(center))
    }
}

/// Fit at the standard-space point `x`, i.e. at subject-space `ψ(x)`.
pub fn fit_point(
    session: &ScanSession,
    x: &Point3,
    scheme: &WeightScheme,
    model: &ModelSpec,
    psi: &AffineMap,
    options: FitOptions,
) -> Result<PointFit, FitError> {
    FitContext::new(session, scheme, model, options)?
        .fit_at(&psi.apply(x))
        .map(|r| r.fit)
}

/// Fits every masked lattice point in parallel on the current rayon pool.
/// Per-point failures are recorded, never fatal.
pub fn fit_field(
    session: &ScanSession,
    lattice: &Lattice,
    mask: &LatticeRegion,
    scheme: &WeightScheme,
    model: &ModelSpec,
    psi: &AffineMap,
    options: FitOptions,
) -> Result<ParamField, FitFieldError> {
    if !mask.fits(lattice) {
        return Err(FitFieldError::Lattice(LatticeError::LatticeMismatch));
    }
    let ctx = FitContext::new(session, scheme, model, options)?;
    let fits = (0..lattice.len())
        .into_par_iter()
        .map(|i| {
            mask.contains(i)
                .then(|| ctx.fit_at(&psi.apply(&lattice.point(i))).map(|r| r.fit))
        })
        .collect();
    Ok(ParamField {
        lattice: lattice.clone(),
        mask: mask.clone(),
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitFieldError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Fit(#[from] FitError),
}
