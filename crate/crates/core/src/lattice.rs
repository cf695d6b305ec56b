//! Regular evaluation lattices, scalar fields sampled on them, and lattice regions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("lattice spacing must be positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("lattice has an empty dimension: {0:?}")]
    EmptyShape([usize; 3]),
    #[error("field has {got} values for a lattice of {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("point ({0:.3}, {1:.3}, {2:.3}) lies outside the field domain")]
    OutsideDomain(f64, f64, f64),
    #[error("regions live on different lattices")]
    LatticeMismatch,
}

/// Axis-aligned lattice: point `(i, j, k)` sits at `origin + (i, j, k) ⊙ spacing`.
/// Linear indices run with `i` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub shape: [usize; 3],
}

impl Lattice {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], shape: [usize; 3]) -> Result<Self, LatticeError> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(LatticeError::BadSpacing(spacing));
        }
        if shape.iter().any(|&n| n == 0) {
            return Err(LatticeError::EmptyShape(shape));
        }
        Ok(Self {
            origin,
            spacing,
            shape,
        })
    }

    /// Lattice of `shape` points with the given spacing, centred on `center`.
    pub fn centered(center: Point3, spacing: [f64; 3], shape: [usize; 3]) -> Result<Self, LatticeError> {
        let origin = [0, 1, 2].map(|a| center[a] - (shape[a] as f64 - 1.0) / 2.0 * spacing[a]);
        Self::new(origin, spacing, shape)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.shape[0] * (ijk[1] + self.shape[1] * ijk[2])
    }

    pub fn ijk(&self, index: usize) -> [usize; 3] {
        let i = index % self.shape[0];
        let rest = index / self.shape[0];
        [i, rest % self.shape[1], rest / self.shape[1]]
    }

    pub fn point(&self, index: usize) -> Point3 {
        self.point_ijk(self.ijk(index))
    }

    pub fn point_ijk(&self, ijk: [usize; 3]) -> Point3 {
        Point3::new(
            self.origin[0] + ijk[0] as f64 * self.spacing[0],
            self.origin[1] + ijk[1] as f64 * self.spacing[1],
            self.origin[2] + ijk[2] as f64 * self.spacing[2],
        )
    }

    /// Continuous lattice coordinates of `p`.
    pub fn continuous_index(&self, p: &Point3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Index of the lattice point nearest to `p`, if `p` is within half a
    /// spacing of the lattice bounds.
    pub fn nearest(&self, p: &Point3) -> Option<usize> {
        let c = self.continuous_index(p);
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r <= (self.shape[a] - 1) as f64) || (c[a] - r).abs() > 0.5 {
                return None;
            }
            ijk[a] = r as usize;
        }
        Some(self.index(ijk))
    }

    /// Indices of lattice points within Euclidean distance `radius` of `p`.
    pub fn within(&self, p: &Point3, radius: f64) -> Vec<usize> {
        let c = self.continuous_index(p);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let r = radius / self.spacing[a];
            let l = (c[a] - r).ceil().max(0.0);
            let h = (c[a] + r).floor().min((self.shape[a] - 1) as f64);
            if l > h {
                return Vec::new();
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        let r2 = radius * radius;
        let mut out = Vec::new();
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let q = self.point_ijk([i, j, k]);
                    if (q - p).norm_squared() <= r2 {
                        out.push(self.index([i, j, k]));
                    }
                }
            }
        }
        out
    }

    /// The up to six face neighbours of a lattice point.
    pub fn neighbours6(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let ijk = self.ijk(index);
        let shape = self.shape;
        (0..6).filter_map(move |n| {
            let axis = n / 2;
            let mut q = ijk;
            if n % 2 == 0 {
                if q[axis] == 0 {
                    return None;
                }
                q[axis] -= 1;
            } else {
                if q[axis] + 1 >= shape[axis] {
                    return None;
                }
                q[axis] += 1;
            }
            Some(self.index(q))
        })
    }

    /// True if the index sits on the outer face of the lattice.
    pub fn on_boundary(&self, index: usize) -> bool {
        let ijk = self.ijk(index);
        (0..3).any(|a| ijk[a] == 0 || ijk[a] + 1 == self.shape[a])
    }
}

/// Scalar field given by its values on a lattice, trilinearly interpolated in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    lattice: Lattice,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self, LatticeError> {
        if values.len() != lattice.len() {
            return Err(LatticeError::LengthMismatch {
                expected: lattice.len(),
                got: values.len(),
            });
        }
        Ok(Self { lattice, values })
    }

    pub fn from_fn(lattice: Lattice, f: impl Fn(&Point3) -> f64) -> Self {
        let values = (0..lattice.len()).map(|i| f(&lattice.point(i))).collect();
        Self { lattice, values }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Trilinear interpolation; `None` outside the lattice's bounding box.
    pub fn sample(&self, p: &Point3) -> Option<f64> {
        let c = self.lattice.continuous_index(p);
        let shape = self.lattice.shape;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (shape[a] - 1) as f64;
            // small tolerance so points on the boundary face are accepted
            if !(c[a] >= -1e-9 && c[a] <= max + 1e-9) {
                return None;
            }
            let ca = c[a].clamp(0.0, max);
            if shape[a] == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let b = (ca.floor() as usize).min(shape[a] - 2);
                base[a] = b;
                frac[a] = ca - b as f64;
            }
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut q = base;
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                if hi {
                    if shape[a] == 1 {
                        w = 0.0;
                        break;
                    }
                    q[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[self.lattice.index(q)];
            }
        }
        Some(acc)
    }

    pub fn try_sample(&self, p: &Point3) -> Result<f64, LatticeError> {
        self.sample(p)
            .ok_or(LatticeError::OutsideDomain(p.x, p.y, p.z))
    }
}

/// A set of lattice points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeRegion {
    lattice_shape: [usize; 3],
    members: Vec<bool>,
}

impl LatticeRegion {
    pub fn empty(lattice: &Lattice) -> Self {
        Self {
            lattice_shape: lattice.shape,
            members: vec![false; lattice.len()],
        }
    }

    pub fn full(lattice: &Lattice) -> Self {
        Self {
            lattice_shape: lattice.shape,
            members: vec![true; lattice.len()],
        }
    }

    pub fn from_indices(lattice: &Lattice, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut r = Self::empty(lattice);
        for i in indices {
            r.members[i] = true;
        }
        r
    }

    pub fn from_predicate(lattice: &Lattice, f: impl Fn(usize) -> bool) -> Self {
        Self {
            lattice_shape: lattice.shape,
            members: (0..lattice.len()).map(f).collect(),
        }
    }

    /// Lattice points within `radius` of `center`.
    pub fn ball(lattice: &Lattice, center: &Point3, radius: f64) -> Self {
        Self::from_indices(lattice, lattice.within(center, radius))
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.get(index).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, index: usize) {
        self.members[index] = true;
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|m| *m)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
    }

    pub fn fits(&self, lattice: &Lattice) -> bool {
        self.lattice_shape == lattice.shape
    }

    pub fn is_subset_of(&self, other: &LatticeRegion) -> bool {
        self.lattice_shape == other.lattice_shape
            && self
                .members
                .iter()
                .zip(&other.members)
                .all(|(a, b)| !*a || *b)
    }

    pub fn intersection(&self, other: &LatticeRegion) -> Result<LatticeRegion, LatticeError> {
        if self.lattice_shape != other.lattice_shape {
            return Err(LatticeError::LatticeMismatch);
        }
        Ok(LatticeRegion {
            lattice_shape: self.lattice_shape,
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn members(&self) -> &[bool] {
        &self.members
    }
}
