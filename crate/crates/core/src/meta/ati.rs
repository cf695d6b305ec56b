//! Normalization of subject effects to units above template intensity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fit::ParamField;
use crate::lattice::{Lattice, LatticeError, LatticeRegion, ScalarField};
use crate::weights::WeightScheme;

use super::{MetaError, StudyPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub estimate: f64,
    pub variance: f64,
}

impl From<Effect> for StudyPoint {
    fn from(e: Effect) -> Self {
        StudyPoint::new(e.estimate, e.variance)
    }
}

/// Outcome at one lattice point: `None` outside the mask.
pub type EffectAt = Option<Result<Effect, MetaError>>;

/// One subject's effect estimates over a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectField {
    pub subject_id: String,
    pub lattice: Lattice,
    pub mask: LatticeRegion,
    pub points: Vec<EffectAt>,
}

impl EffectField {
    /// Raw `β̂` and its variance, in the session's own grey units.
    pub fn from_param(field: &ParamField, subject_id: impl Into<String>) -> Self {
        let points = field
            .fits
            .iter()
            .map(|f| {
                f.as_ref().map(|r| {
                    r.as_ref()
                        .map(|p| Effect {
                            estimate: p.beta_hat,
                            variance: p.var_beta_hat,
                        })
                        .map_err(|e| MetaError::PointFit(e.clone()))
                })
            })
            .collect();
        Self {
            subject_id: subject_id.into(),
            lattice: field.lattice,
            mask: field.mask.clone(),
            points,
        }
    }

    pub fn effect(&self, index: usize) -> Option<Effect> {
        match &self.points[index] {
            Some(Ok(e)) => Some(*e),
            _ => None,
        }
    }

    /// Estimates as a scalar field, NaN where missing.
    pub fn estimates(&self) -> ScalarField {
        let v = (0..self.points.len())
            .map(|i| self.effect(i).map_or(f64::NAN, |e| e.estimate))
            .collect();
        ScalarField::new(self.lattice, v).expect("one value per lattice point")
    }

    pub fn variances(&self) -> ScalarField {
        let v = (0..self.points.len())
            .map(|i| self.effect(i).map_or(f64::NAN, |e| e.variance))
            .collect();
        ScalarField::new(self.lattice, v).expect("one value per lattice point")
    }
}

/// Kernel-smoothed template `μ_x = Σ ω T / Σ ω` at every masked point;
/// NaN elsewhere. The template must be positive on the mask.
pub fn reference_field(
    template: &ScalarField,
    mask: &LatticeRegion,
    scheme: &WeightScheme,
) -> Result<ScalarField, MetaError> {
    let lattice = *template.lattice();
    if !mask.fits(&lattice) {
        return Err(LatticeError::LatticeMismatch.into());
    }
    if let Some(i) = mask.indices().find(|&i| !(template.value(i) > 0.0)) {
        return Err(MetaError::NonpositiveTemplate { index: i });
    }
    let radius = scheme.query_radius();
    let values = (0..lattice.len())
        .into_par_iter()
        .map(|i| {
            if !mask.contains(i) {
                return Ok(f64::NAN);
            }
            let x = lattice.point(i);
            let (mut num, mut den) = (0.0, 0.0);
            for r in lattice.within(&x, radius) {
                let w = scheme.weight(&x, &lattice.point(r));
                let t = template.value(r);
                if w > 0.0 && t.is_finite() {
                    num += w * t;
                    den += w;
                }
            }
            if den > 0.0 && num / den > 0.0 {
                Ok(num / den)
            } else {
                Err(MetaError::EmptyNeighbourhood { index: i })
            }
        })
        .collect::<Result<Vec<f64>, MetaError>>()?;
    Ok(ScalarField::new(lattice, values)?)
}

/// `c·β̂` with `c = μ_x / α̂(x)`, and variance scaled by `c²`.
/// Points with a non-positive intercept carry an error instead of a value.
pub fn normalize_to_ati(
    field: &ParamField,
    mu: &ScalarField,
    subject_id: impl Into<String>,
) -> Result<EffectField, MetaError> {
    if *mu.lattice() != field.lattice {
        return Err(LatticeError::LatticeMismatch.into());
    }
    let raw = EffectField::from_param(field, subject_id);
    let points = raw
        .points
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let e = e.as_ref()?;
            Some(e.clone().and_then(|e| {
                let alpha = match &field.fits[i] {
                    Some(Ok(p)) => p.alpha_hat,
                    _ => unreachable!("effect present only for successful fits"),
                };
                if !(alpha > 0.0) {
                    return Err(MetaError::NonpositiveIntercept { index: i, value: alpha });
                }
                let m = mu.value(i);
                if !(m > 0.0) {
                    return Err(MetaError::NonpositiveTemplate { index: i });
                }
                let c = m / alpha;
                Ok(Effect {
                    estimate: c * e.estimate,
                    variance: c * c * e.variance,
                })
            }))
        })
        .collect();
    Ok(EffectField { points, ..raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{FitError, PointFit};
    use crate::geometry::Point3;

    fn lattice(n: usize) -> Lattice {
        Lattice::centered(Point3::origin(), [1.0; 3], [n; 3]).unwrap()
    }

    #[test]
    fn constant_template_is_fixed() {
        let l = lattice(7);
        let t = ScalarField::from_fn(l, |_| 42.0);
        let s = WeightScheme::gaussian(1.2, 3.0).unwrap();
        let mu = reference_field(&t, &LatticeRegion::full(&l), &s).unwrap();
        for v in mu.values() {
            assert!((v - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spike_gives_normalized_kernel() {
        let l = lattice(11);
        let centre = l.nearest(&Point3::origin()).unwrap();
        let mut vals = vec![1e-300; l.len()];
        vals[centre] = 1.0;
        let t = ScalarField::new(l, vals.clone()).unwrap();
        let s = WeightScheme::gaussian(1.0, 3.0).unwrap();
        let mu = reference_field(&t, &LatticeRegion::full(&l), &s).unwrap();
        // direct convolution over the whole lattice
        for i in 0..l.len() {
            let x = l.point(i);
            let den: f64 = (0..l.len()).map(|r| s.weight(&x, &l.point(r))).sum();
            let num: f64 = (0..l.len()).map(|r| s.weight(&x, &l.point(r)) * vals[r]).sum();
            assert!((mu.value(i) - num / den).abs() <= 1e-12 * (num / den), "{i}");
        }
    }

    #[test]
    fn smoothing_reduces_curvature() {
        let l = lattice(21);
        let t = ScalarField::from_fn(l, |p| 100.0 + 10.0 * (p.x / 2.0).sin() * (p.y / 3.0).cos());
        let s = WeightScheme::gaussian(1.5, 3.0).unwrap();
        let mu = reference_field(&t, &LatticeRegion::full(&l), &s).unwrap();
        let curv = |f: &ScalarField| {
            let mut m: f64 = 0.0;
            for i in 0..l.len() {
                if l.on_boundary(i) {
                    continue;
                }
                let [a, b, c] = l.ijk(i);
                let lap: f64 = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
                    .iter()
                    .map(|d| {
                        f.value(l.index([a + d[0], b + d[1], c + d[2]]))
                            + f.value(l.index([a - d[0], b - d[1], c - d[2]]))
                            - 2.0 * f.value(i)
                    })
                    .sum();
                m = m.max(lap.abs());
            }
            m
        };
        assert!(curv(&mu) <= curv(&t));
    }

    #[test]
    fn rejects_nonpositive_template() {
        let l = lattice(3);
        let t = ScalarField::from_fn(l, |p| p.x);
        let s = WeightScheme::gaussian(1.0, 3.0).unwrap();
        assert!(matches!(
            reference_field(&t, &LatticeRegion::full(&l), &s),
            Err(MetaError::NonpositiveTemplate { .. })
        ));
    }

    fn fit(alpha: f64, beta: f64, var: f64) -> PointFit {
        PointFit {
            coefficients: vec![],
            alpha_hat: alpha,
            beta_hat: beta,
            sigma2_hat: 1.0,
            var_beta_hat: var,
            t_value: None,
            n_obs: 10,
            n_effective: 10.0,
            dw: None,
            df: 8.0,
        }
    }

    #[test]
    fn normalization_ratios() {
        let l = lattice(2);
        let mask = LatticeRegion::from_indices(&l, 0..7);
        let mut fits: Vec<_> = (0..8).map(|_| Some(Ok(fit(200.0, 10.0, 4.0)))).collect();
        fits[1] = Some(Ok(fit(100.0, 10.0, 4.0)));
        fits[2] = Some(Ok(fit(-1.0, 10.0, 4.0)));
        fits[3] = Some(Err(FitError::ZeroVariance));
        fits[7] = None;
        let field = ParamField { lattice: l, mask, fits };
        let mu = ScalarField::from_fn(l, |_| 100.0);
        let out = normalize_to_ati(&field, &mu, "s").unwrap();
        assert_eq!(out.effect(0), Some(Effect { estimate: 5.0, variance: 1.0 }));
        assert_eq!(out.effect(1), Some(Effect { estimate: 10.0, variance: 4.0 }));
        assert!(matches!(out.points[2], Some(Err(MetaError::NonpositiveIntercept { index: 2, .. }))));
        assert!(matches!(out.points[3], Some(Err(MetaError::PointFit(_)))));
        assert!(out.points[7].is_none());
    }
}
