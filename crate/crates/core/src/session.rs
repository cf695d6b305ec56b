//! A scan session: raw values on the acquisition grid plus the per-cycle
//! motions that place each value in subject space.

use thiserror::Error;

use crate::design::BlockDesign;
use crate::geometry::{AcquisitionGrid, AffineMap, Point3, RigidMotion};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session needs at least one scan cycle")]
    NoCycles,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("cycle {cycle} out of range ({count} cycles)")]
    CycleOutOfRange { cycle: usize, count: usize },
}

/// Values are stored cycle-major, then slice, then row `j`, then column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSession {
    grid: AcquisitionGrid,
    motions: Vec<RigidMotion>,
    design: BlockDesign,
    psi: AffineMap,
    values: Vec<f64>,
    excluded: Vec<bool>,
    subject_id: String,
}

impl ScanSession {
    pub fn new(
        grid: AcquisitionGrid,
        motions: Vec<RigidMotion>,
        design: BlockDesign,
        psi: AffineMap,
        values: Vec<f64>,
        subject_id: impl Into<String>,
    ) -> Result<Self, SessionError> {
        if motions.is_empty() {
            return Err(SessionError::NoCycles);
        }
        let expected = motions.len() * grid.voxels_per_cycle();
        if values.len() != expected {
            return Err(SessionError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(SessionError::NonFiniteValue { index });
        }
        let excluded = vec![false; motions.len()];
        Ok(Self {
            grid,
            motions,
            design,
            psi,
            values,
            excluded,
            subject_id: subject_id.into(),
        })
    }

    pub fn grid(&self) -> &AcquisitionGrid {
        &self.grid
    }

    pub fn motions(&self) -> &[RigidMotion] {
        &self.motions
    }

    pub fn design(&self) -> &BlockDesign {
        &self.design
    }

    pub fn psi(&self) -> &AffineMap {
        &self.psi
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn set_subject_id(&mut self, id: impl Into<String>) {
        self.subject_id = id.into();
    }

    pub fn cycles(&self) -> usize {
        self.motions.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value_index(&self, cycle: usize, slice: usize, voxel: usize) -> usize {
        (cycle * self.grid.slice_count() + slice) * self.grid.voxels_per_slice() + voxel
    }

    #[inline]
    pub fn value(&self, cycle: usize, slice: usize, voxel: usize) -> f64 {
        self.values[self.value_index(cycle, slice, voxel)]
    }

    /// Replaces all values, keeping geometry and design.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, SessionError> {
        let mut s = Self::new(
            self.grid.clone(),
            self.motions.clone(),
            self.design.clone(),
            self.psi.clone(),
            values,
            self.subject_id.clone(),
        )?;
        s.excluded = self.excluded.clone();
        Ok(s)
    }

    /// Multiplies every value by `c`.
    pub fn scale_values(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn exclude_cycle(&mut self, cycle: usize) -> Result<(), SessionError> {
        let count = self.cycles();
        *self
            .excluded
            .get_mut(cycle)
            .ok_or(SessionError::CycleOutOfRange { cycle, count })? = true;
        Ok(())
    }

    pub fn is_excluded(&self, cycle: usize) -> bool {
        self.excluded[cycle]
    }

    pub fn excluded_cycles(&self) -> Vec<usize> {
        (0..self.cycles()).filter(|&c| self.excluded[c]).collect()
    }

    /// Axis-aligned box (subject space) containing every observation location.
    pub fn bounds(&self) -> (Point3, Point3) {
        let (lo, hi) = self.grid.bounds();
        let mut min = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for m in &self.motions {
            for corner in 0..8 {
                let c = Point3::new(
                    if corner & 1 == 0 { lo.x } else { hi.x },
                    if corner & 2 == 0 { lo.y } else { hi.y },
                    if corner & 4 == 0 { lo.z } else { hi.z },
                );
                let p = m.inverse_apply(&c);
                for a in 0..3 {
                    min[a] = min[a].min(p[a]);
                    max[a] = max[a].max(p[a]);
                }
            }
        }
        (min, max)
    }
}
