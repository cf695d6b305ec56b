//! Versioned run configuration shared by the CLI subcommands.

use serde::{Deserialize, Serialize};

use crate::design::ModelSpec;
use crate::fit::{FitOptions, VarianceMode};
use crate::geometry::{fwhm_to_sigma, Point3};
use crate::lattice::{Lattice, LatticeRegion, ScalarField};
use crate::meta::{MetaOptions, Tau2Estimator};
use crate::weights::{DivergenceMap, Kernel, WeightScheme};

use super::{invalid, IoError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    #[default]
    Gaussian,
    Epanechnikov,
    Tricube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatticeSpec {
    Explicit {
        origin: [f64; 3],
        spacing: [f64; 3],
        shape: [usize; 3],
    },
    /// The lattice of the template volume.
    FromTemplate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    #[default]
    Full,
    Ball {
        center: [f64; 3],
        radius: f64,
    },
    /// Template values strictly above `threshold`.
    TemplateAbove { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub kernel: KernelChoice,
    pub fwhm_mm: f64,
    #[serde(default = "three")]
    pub cutoff_sigmas: f64,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub variance: VarianceMode,
    #[serde(default)]
    pub heterogeneity: Tau2Estimator,
    #[serde(default)]
    pub kh_truncate: bool,
    #[serde(default)]
    pub grubbs_alpha: Option<f64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn three() -> f64 {
    3.0
}

fn default_model() -> ModelSpec {
    ModelSpec::TaskLinearTime
}

impl RunConfig {
    pub fn new(fwhm_mm: f64, lattice: LatticeSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kernel: KernelChoice::Gaussian,
            fwhm_mm,
            cutoff_sigmas: 3.0,
            model: default_model(),
            lattice,
            mask: MaskSpec::Full,
            variance: VarianceMode::Sandwich,
            heterogeneity: Tau2Estimator::Hedges,
            kh_truncate: false,
            grubbs_alpha: None,
            threads: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| invalid("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IoError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if !(self.fwhm_mm.is_finite() && self.fwhm_mm > 0.0) {
            return Err(invalid("fwhm_mm", format!("must be positive, got {}", self.fwhm_mm)));
        }
        if !(self.cutoff_sigmas > 0.0) {
            return Err(invalid("cutoff_sigmas", format!("must be positive, got {}", self.cutoff_sigmas)));
        }
        if let LatticeSpec::Explicit { spacing, shape, .. } = &self.lattice {
            if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(invalid("lattice.spacing", format!("must be positive, got {spacing:?}")));
            }
            if shape.contains(&0) {
                return Err(invalid("lattice.shape", format!("empty dimension in {shape:?}")));
            }
        }
        if let MaskSpec::Ball { radius, .. } = self.mask {
            if !(radius > 0.0) {
                return Err(invalid("mask.radius", format!("must be positive, got {radius}")));
            }
        }
        if let Some(a) = self.grubbs_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid("grubbs_alpha", format!("must lie in (0, 1), got {a}")));
            }
        }
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        Ok(())
    }

    /// Kernel bandwidth chosen so that every kernel has full width at half
    /// maximum `fwhm_mm`; the cutoff is `cutoff_sigmas` Gaussian sigmas.
    pub fn scheme(&self) -> Result<WeightScheme, IoError> {
        let sigma = fwhm_to_sigma(self.fwhm_mm)?;
        let (kernel, h) = match self.kernel {
            KernelChoice::Gaussian => (Kernel::Gaussian, sigma),
            KernelChoice::Epanechnikov => (Kernel::Epanechnikov, self.fwhm_mm / 2f64.sqrt()),
            KernelChoice::Tricube => {
                let half = (1.0 - 0.5f64.powf(1.0 / 3.0)).powf(1.0 / 3.0);
                (Kernel::Tricube, self.fwhm_mm / (2.0 * half))
            }
        };
        Ok(WeightScheme::new(kernel, DivergenceMap::scaled_euclidean(h)?).with_cutoff(self.cutoff_sigmas * sigma))
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            variance: self.variance,
        }
    }

    pub fn meta_options(&self) -> MetaOptions {
        MetaOptions {
            estimator: self.heterogeneity,
            truncate_q: self.kh_truncate,
        }
    }

    pub fn lattice(&self, template: Option<&ScalarField>) -> Result<Lattice, IoError> {
        match (&self.lattice, template) {
            (LatticeSpec::Explicit { origin, spacing, shape }, _) => Ok(Lattice::new(*origin, *spacing, *shape)?),
            (LatticeSpec::FromTemplate, Some(t)) => Ok(*t.lattice()),
            (LatticeSpec::FromTemplate, None) => Err(invalid("lattice", "\"from_template\" needs a template")),
        }
    }

    pub fn mask(&self, lattice: &Lattice, template: Option<&ScalarField>) -> Result<LatticeRegion, IoError> {
        match (&self.mask, template) {
            (MaskSpec::Full, _) => Ok(LatticeRegion::full(lattice)),
            (MaskSpec::Ball { center, radius }, _) => Ok(LatticeRegion::ball(lattice, &Point3::from(*center), *radius)),
            (MaskSpec::TemplateAbove { threshold }, Some(t)) if t.lattice() == lattice => {
                Ok(LatticeRegion::from_predicate(lattice, |i| t.value(i) > *threshold))
            }
            (MaskSpec::TemplateAbove { .. }, Some(_)) => {
                Err(invalid("mask", "template lattice differs from the evaluation lattice"))
            }
            (MaskSpec::TemplateAbove { .. }, None) => Err(invalid("mask", "\"template_above\" needs a template")),
        }
    }
}
