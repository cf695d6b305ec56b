//! Synthetic sessions with known ground truth.

mod mc;

pub use mc::{mc_bias, mc_dw, mc_type1, BiasReport, DwReport, McError, ProbeRate, Type1Report};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{indicator, BlockDesign, DesignError};
use crate::geometry::{AcquisitionGrid, AffineMap, GeometryError, MotionRecord, Point3, RigidMotion};
use crate::session::{ScanSession, SessionError};
use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Baseline intensity `α(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSpec {
    Constant { value: f64 },
    /// `base + amplitude · exp(−‖x − center‖² / (2 width²))`.
    Bump {
        base: f64,
        amplitude: f64,
        center: [f64; 3],
        width: f64,
    },
}

impl AlphaSpec {
    pub fn eval(&self, p: &Point3) -> f64 {
        match self {
            AlphaSpec::Constant { value } => *value,
            AlphaSpec::Bump {
                base,
                amplitude,
                center,
                width,
            } => {
                let d2 = (p - Point3::from(*center)).norm_squared();
                base + amplitude * (-d2 / (2.0 * width * width)).exp()
            }
        }
    }
}

/// Task effect `β(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude` inside `radius − edge_width/2`, zero beyond
    /// `radius + edge_width/2`, smoothstep in between.
    Sphere {
        center: [f64; 3],
        radius: f64,
        amplitude: f64,
        #[serde(default)]
        edge_width: f64,
    },
    /// `high` where `normal · x ≥ offset`, `low` elsewhere.
    StepEdge {
        normal: [f64; 3],
        offset: f64,
        low: f64,
        high: f64,
    },
}

impl BetaSpec {
    pub fn eval(&self, p: &Point3) -> f64 {
        match self {
            BetaSpec::Zero => 0.0,
            BetaSpec::Constant { value } => *value,
            BetaSpec::Sphere {
                center,
                radius,
                amplitude,
                edge_width,
            } => {
                let d = (p - Point3::from(*center)).norm();
                let inner = radius - edge_width / 2.0;
                if d <= inner {
                    *amplitude
                } else if d >= radius + edge_width / 2.0 {
                    0.0
                } else {
                    let u = (d - inner) / edge_width;
                    amplitude * (1.0 - u * u * (3.0 - 2.0 * u))
                }
            }
            BetaSpec::StepEdge {
                normal,
                offset,
                low,
                high,
            } => {
                if Vector3::from(*normal).dot(&p.coords) >= *offset {
                    *high
                } else {
                    *low
                }
            }
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        match self {
            BetaSpec::Sphere {
                radius, edge_width, ..
            } if !(*radius > 0.0) || *edge_width < 0.0 || *edge_width > 2.0 * radius => Err(PhantomError::Invalid(
                format!("sphere needs radius > 0 and 0 <= edge_width <= 2·radius (radius {radius}, edge {edge_width})"),
            )),
            _ => Ok(()),
        }
    }
}

/// Spatially constant drift `f(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    #[default]
    None,
    /// Offset per block index (cycled when shorter than the design).
    BlockOffsets { offsets: Vec<f64> },
    Linear { slope: f64 },
    Sinusoid { amplitude: f64, period: f64 },
}

impl DriftSpec {
    pub fn eval(&self, design: &BlockDesign, t: f64) -> f64 {
        match self {
            DriftSpec::None => 0.0,
            DriftSpec::BlockOffsets { offsets } => match design.block_at(t) {
                Some(k) if !offsets.is_empty() => offsets[k % offsets.len()],
                _ => 0.0,
            },
            DriftSpec::Linear { slope } => slope * t,
            DriftSpec::Sinusoid { amplitude, period } => amplitude * (2.0 * std::f64::consts::PI * t / period).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    Iid,
    /// Stationary AR(1) along each voxel's time track.
    Ar1 { rho: f64 },
}

/// Per-cycle head motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionSpec {
    #[default]
    Still,
    /// Translation `amplitude · sin(2π t / period)` and a rotation about z of
    /// `rotation_amplitude · sin(2π t / period)` radians, `t` the cycle start.
    SinusoidalTranslation {
        amplitude: [f64; 3],
        period: f64,
        #[serde(default)]
        rotation_amplitude: f64,
    },
    Scripted { motions: Vec<MotionRecord> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub alpha: AlphaSpec,
    pub beta: BetaSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_model: NoiseModel,
    #[serde(default)]
    pub motion: MotionSpec,
    pub grid: AcquisitionGrid,
    pub design: BlockDesign,
    /// Number of scan cycles; enough to cover the design when absent.
    #[serde(default)]
    pub cycles: Option<usize>,
    #[serde(default)]
    pub psi: AffineMap,
    #[serde(default = "one")]
    pub grey_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_subject")]
    pub subject_id: String,
}

fn one() -> f64 {
    1.0
}

fn default_subject() -> String {
    "phantom".into()
}

impl PhantomSpec {
    /// 16×16×8 grid of 3×3×4.6 mm voxels, TR 1.45 s ascending, 8+8
    /// pseudo-random 15 s blocks, α ≡ 100, β ≡ 0, unit white noise, no motion.
    pub fn desk(seed: u64) -> Self {
        Self {
            alpha: AlphaSpec::Constant { value: 100.0 },
            beta: BetaSpec::Zero,
            drift: DriftSpec::None,
            noise_sigma: 1.0,
            noise_model: NoiseModel::Iid,
            motion: MotionSpec::Still,
            grid: AcquisitionGrid::ascending([16, 16], 8, [3.0, 3.0, 4.6], 1.45).expect("valid default grid"),
            design: BlockDesign::pseudo_random(8, 15.0, 0.0, seed).expect("valid default design"),
            cycles: None,
            psi: AffineMap::identity(),
            grey_scale: 1.0,
            seed,
            subject_id: default_subject(),
        }
    }

    pub fn n_cycles(&self) -> usize {
        self.cycles.unwrap_or_else(|| {
            (self.design.total_duration() / self.grid.cycle_duration()).ceil() as usize
        })
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::Invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.grey_scale > 0.0 && self.grey_scale.is_finite()) {
            return Err(PhantomError::Invalid(format!("grey_scale must be > 0, got {}", self.grey_scale)));
        }
        if let NoiseModel::Ar1 { rho } = self.noise_model {
            if !(rho.abs() < 1.0) {
                return Err(PhantomError::Invalid(format!("AR(1) coefficient must satisfy |rho| < 1, got {rho}")));
            }
        }
        if let MotionSpec::Scripted { motions } = &self.motion {
            if motions.len() != self.n_cycles() {
                return Err(PhantomError::Invalid(format!(
                    "scripted motion has {} entries for {} cycles",
                    motions.len(),
                    self.n_cycles()
                )));
            }
        }
        if self.n_cycles() == 0 {
            return Err(PhantomError::Invalid("phantom needs at least one cycle".into()));
        }
        self.beta.validate()
    }

    pub fn motions(&self) -> Result<Vec<RigidMotion>, PhantomError> {
        let n = self.n_cycles();
        let tr = self.grid.cycle_duration();
        Ok(match &self.motion {
            MotionSpec::Still => vec![RigidMotion::identity(); n],
            MotionSpec::SinusoidalTranslation {
                amplitude,
                period,
                rotation_amplitude,
            } => (0..n)
                .map(|c| {
                    let s = (2.0 * std::f64::consts::PI * c as f64 * tr / period).sin();
                    RigidMotion::from_axis_angle(Vector3::z(), rotation_amplitude * s, Vector3::from(*amplitude) * s)
                })
                .collect(),
            MotionSpec::Scripted { motions } => motions
                .iter()
                .map(|m| RigidMotion::from_quaternion(m.quaternion, m.translation))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// The noiseless signal and the fields that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    spec: PhantomSpec,
    psi_inverse: AffineMap,
    /// `grey_scale · (α + 𝟙β + f)` for every stored value, with `𝟙` read as 0
    /// where it is undefined.
    pub noiseless: Vec<f64>,
}

impl GroundTruth {
    /// `α` at the standard-space point `x`, before grey scaling.
    pub fn alpha(&self, x: &Point3) -> f64 {
        self.spec.alpha.eval(x)
    }

    /// `β` at the standard-space point `x`, before grey scaling.
    pub fn beta(&self, x: &Point3) -> f64 {
        self.spec.beta.eval(x)
    }

    pub fn grey_scale(&self) -> f64 {
        self.spec.grey_scale
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    /// Standard-space point of a subject-space location.
    pub fn to_standard(&self, r: &Point3) -> Point3 {
        self.psi_inverse.apply(r)
    }

    /// Expected value in each block at `x` when the drift is piecewise
    /// constant per block, grey-scaled.
    pub fn block_means(&self, x: &Point3) -> Option<Vec<f64>> {
        let design = &self.spec.design;
        let (a, b) = (self.alpha(x), self.beta(x));
        let g = self.spec.grey_scale;
        match &self.spec.drift {
            DriftSpec::None | DriftSpec::BlockOffsets { .. } => Some(
                design
                    .blocks()
                    .iter()
                    .map(|blk| {
                        let task = if blk.kind == crate::design::BlockType::A { b } else { 0.0 };
                        g * (a + task + self.spec.drift.eval(design, blk.start))
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

/// Unit-variance noise for every stored value, before scaling by
/// `noise_sigma · grey_scale`.
pub fn standard_noise(spec: &PhantomSpec, seed: u64) -> Vec<f64> {
    let n_cycles = spec.n_cycles();
    let per_cycle = spec.grid.voxels_per_cycle();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_cycles * per_cycle);
    match spec.noise_model {
        NoiseModel::Iid => {
            for _ in 0..n_cycles * per_cycle {
                out.push(StandardNormal.sample(&mut rng));
            }
        }
        NoiseModel::Ar1 { rho } => {
            let innovation = (1.0 - rho * rho).sqrt();
            for c in 0..n_cycles {
                for v in 0..per_cycle {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let e = if c == 0 { z } else { rho * out[(c - 1) * per_cycle + v] + innovation * z };
                    out.push(e);
                }
            }
        }
    }
    out
}

/// Noiseless signal for the spec, without building a session.
pub fn noiseless_values(spec: &PhantomSpec) -> Result<(Vec<RigidMotion>, Vec<f64>), PhantomError> {
    spec.validate()?;
    let motions = spec.motions()?;
    let grid = &spec.grid;
    let psi_inv = spec.psi.inverse();
    let [nx, ny] = grid.in_plane_shape();
    let mut values = Vec::with_capacity(motions.len() * grid.voxels_per_cycle());
    for (cycle, rho) in motions.iter().enumerate() {
        for slice in 0..grid.slice_count() {
            let t = grid.acquisition_time(cycle, slice);
            let task = indicator(&spec.design, t);
            let drift = spec.drift.eval(&spec.design, t);
            for j in 0..ny {
                for i in 0..nx {
                    let x = psi_inv.apply(&rho.inverse_apply(&grid.voxel_center(i, j, slice)));
                    let beta = match task {
                        Some(true) => spec.beta.eval(&x),
                        _ => 0.0,
                    };
                    values.push(spec.grey_scale * (spec.alpha.eval(&x) + beta + drift));
                }
            }
        }
    }
    Ok((motions, values))
}

/// Forward simulation of the signal model. Values are
/// `grey_scale · (α + 𝟙β + f + noise)` at the subject-space location of each
/// voxel; identical `(spec, seed)` give identical sessions.
pub fn simulate_session(spec: &PhantomSpec, seed: u64) -> Result<(ScanSession, GroundTruth), PhantomError> {
    let (motions, noiseless) = noiseless_values(spec)?;
    let scale = spec.noise_sigma * spec.grey_scale;
    let values: Vec<f64> = if scale == 0.0 {
        noiseless.clone()
    } else {
        noiseless
            .iter()
            .zip(standard_noise(spec, seed))
            .map(|(m, z)| m + scale * z)
            .collect()
    };
    let session = ScanSession::new(
        spec.grid.clone(),
        motions,
        spec.design.clone(),
        spec.psi.clone(),
        values,
        spec.subject_id.clone(),
    )?;
    Ok((
        session,
        GroundTruth {
            spec: spec.clone(),
            psi_inverse: spec.psi.inverse(),
            noiseless,
        },
    ))
}
