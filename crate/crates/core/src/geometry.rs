//! Coordinates, rigid motions, affine maps and acquisition grids.
//!
//! Three frames are involved. Standard space holds the evaluation lattice
//! (the template brain). An [`AffineMap`] carries a standard-space point into
//! subject space. A [`RigidMotion`] carries subject space into scanner space
//! at one scan cycle, so a scanner voxel `v` was measured at the subject
//! location `motion.inverse_apply(v)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in millimetres.
pub type Point3 = nalgebra::Point3<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("affine map is singular (|det| = {0:.3e})")]
    SingularAffine(f64),
    #[error("quaternion norm {0} deviates from 1 by more than 1e-6")]
    NonUnitQuaternion(f64),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("slice {slice} out of range (grid has {count} slices)")]
    SliceOutOfRange { slice: usize, count: usize },
    #[error("invalid acquisition grid: {0}")]
    InvalidGrid(String),
    #[error("negative full width at half maximum: {0}")]
    NegativeWidth(f64),
}

/// Rigid body transformation `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MotionRecord", into = "MotionRecord")]
pub struct RigidMotion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized form of a motion: unit quaternion `[w, x, y, z]` plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("rigid motion"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let dev = ortho.max(det);
        if dev > ORTHO_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation about `axis` by `angle` radians followed by a translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Builds a motion from a unit quaternion `[w, x, y, z]`.
    pub fn from_quaternion(q: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NonUnitQuaternion(norm));
        }
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let rotation = *uq.to_rotation_matrix().matrix();
        Self::new(rotation, Vector3::from(translation))
    }

    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut out = [q.w, q.i, q.j, q.k];
        // canonical hemisphere
        if out[0] < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `rotation^T * (p - translation)`, i.e. the inverse motion applied to `p`.
    pub fn inverse_apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.tr_mul(&(p.coords - self.translation)))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidMotion) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

impl From<RigidMotion> for MotionRecord {
    fn from(m: RigidMotion) -> Self {
        MotionRecord {
            quaternion: m.to_quaternion(),
            translation: m.translation.into(),
        }
    }
}

impl TryFrom<MotionRecord> for RigidMotion {
    type Error = GeometryError;
    fn try_from(r: MotionRecord) -> Result<Self, Self::Error> {
        RigidMotion::from_quaternion(r.quaternion, r.translation)
    }
}

pub fn apply_motion(rho: &RigidMotion, p: &Point3) -> Point3 {
    rho.apply(p)
}

pub fn invert_motion(rho: &RigidMotion) -> RigidMotion {
    rho.inverse()
}

/// Affine map `p -> linear * p + offset` from standard space into subject space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffineRecord", into = "AffineRecord")]
pub struct AffineMap {
    linear: Matrix3<f64>,
    offset: Vector3<f64>,
}

/// Serialized affine map with the linear part stored row by row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRecord {
    pub linear: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            offset: Vector3::zeros(),
        }
    }

    pub fn new(linear: Matrix3<f64>, offset: Vector3<f64>) -> Result<Self, GeometryError> {
        if linear.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("affine map"));
        }
        let det = linear.determinant();
        if det.abs() <= 1e-12 {
            return Err(GeometryError::SingularAffine(det.abs()));
        }
        Ok(Self { linear, offset })
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            linear: Matrix3::identity(),
            offset: t,
        }
    }

    pub fn linear(&self) -> &Matrix3<f64> {
        &self.linear
    }

    pub fn offset(&self) -> &Vector3<f64> {
        &self.offset
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.linear * p.coords + self.offset)
    }

    pub fn inverse(&self) -> Self {
        // invertibility is a construction invariant
        let inv = self.linear.try_inverse().expect("affine map invertible by construction");
        Self {
            linear: inv,
            offset: -(inv * self.offset),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.linear == Matrix3::identity() && self.offset == Vector3::zeros()
    }
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<AffineMap> for AffineRecord {
    fn from(a: AffineMap) -> Self {
        let l = a.linear;
        AffineRecord {
            linear: [
                [l[(0, 0)], l[(0, 1)], l[(0, 2)]],
                [l[(1, 0)], l[(1, 1)], l[(1, 2)]],
                [l[(2, 0)], l[(2, 1)], l[(2, 2)]],
            ],
            offset: a.offset.into(),
        }
    }
}

impl TryFrom<AffineRecord> for AffineMap {
    type Error = GeometryError;
    fn try_from(r: AffineRecord) -> Result<Self, Self::Error> {
        let l = Matrix3::from_fn(|i, j| r.linear[i][j]);
        AffineMap::new(l, Vector3::from(r.offset))
    }
}

/// The scanner's acquisition grid: `slice_count` slices of `nx × ny` voxels,
/// slices stacked along the scanner z axis.
///
/// Voxel `(i, j, k)` has its centre at `origin + (i·dx, j·dy, k·dz)` in
/// scanner coordinates. Slice `k` is acquired `slice_times[k]` seconds after
/// the start of each scan cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRecord", into = "GridRecord")]
pub struct AcquisitionGrid {
    shape: [usize; 2],
    slice_count: usize,
    voxel_size: [f64; 3],
    origin: [f64; 3],
    slice_order: Vec<usize>,
    slice_times: Vec<f64>,
    cycle_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub in_plane_shape: [usize; 2],
    pub slice_count: usize,
    pub voxel_size: [f64; 3],
    #[serde(default)]
    pub origin: Option<[f64; 3]>,
    pub slice_times: Vec<f64>,
    pub cycle_duration: f64,
}

impl AcquisitionGrid {
    /// Grid centred on the scanner origin with the given slice timing.
    pub fn new(
        in_plane_shape: [usize; 2],
        voxel_size: [f64; 3],
        slice_times: Vec<f64>,
        cycle_duration: f64,
    ) -> Result<Self, GeometryError> {
        let n = slice_times.len();
        let origin = [
            -((in_plane_shape[0] as f64 - 1.0) / 2.0) * voxel_size[0],
            -((in_plane_shape[1] as f64 - 1.0) / 2.0) * voxel_size[1],
            -((n as f64 - 1.0) / 2.0) * voxel_size[2],
        ];
        Self::with_origin(in_plane_shape, voxel_size, origin, slice_times, cycle_duration)
    }

    pub fn with_origin(
        in_plane_shape: [usize; 2],
        voxel_size: [f64; 3],
        origin: [f64; 3],
        slice_times: Vec<f64>,
        cycle_duration: f64,
    ) -> Result<Self, GeometryError> {
        let invalid = |m: String| Err(GeometryError::InvalidGrid(m));
        if in_plane_shape[0] == 0 || in_plane_shape[1] == 0 || slice_times.is_empty() {
            return invalid("grid has no voxels".into());
        }
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid(format!("voxel sizes must be positive, got {voxel_size:?}"));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("grid origin"));
        }
        if !(cycle_duration.is_finite() && cycle_duration > 0.0) {
            return invalid(format!("cycle duration must be positive, got {cycle_duration}"));
        }
        if let Some(t) = slice_times.iter().find(|t| !(**t >= 0.0 && **t < cycle_duration)) {
            return invalid(format!("slice time {t} outside [0, {cycle_duration})"));
        }
        let mut slice_order: Vec<usize> = (0..slice_times.len()).collect();
        slice_order.sort_by(|&a, &b| slice_times[a].total_cmp(&slice_times[b]));
        if slice_order
            .windows(2)
            .any(|w| slice_times[w[0]] >= slice_times[w[1]])
        {
            return invalid("slice times must be distinct".into());
        }
        Ok(Self {
            shape: in_plane_shape,
            slice_count: slice_times.len(),
            voxel_size,
            origin,
            slice_order,
            slice_times,
            cycle_duration,
        })
    }

    /// Ascending sequential acquisition: slice `k` starts at `k · TR / n`.
    pub fn ascending(
        in_plane_shape: [usize; 2],
        slice_count: usize,
        voxel_size: [f64; 3],
        cycle_duration: f64,
    ) -> Result<Self, GeometryError> {
        let times = (0..slice_count)
            .map(|k| k as f64 * cycle_duration / slice_count as f64)
            .collect();
        Self::new(in_plane_shape, voxel_size, times, cycle_duration)
    }

    pub fn in_plane_shape(&self) -> [usize; 2] {
        self.shape
    }
    pub fn slice_count(&self) -> usize {
        self.slice_count
    }
    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    /// Slice indices in order of acquisition.
    pub fn slice_order(&self) -> &[usize] {
        &self.slice_order
    }
    pub fn slice_times(&self) -> &[f64] {
        &self.slice_times
    }
    pub fn cycle_duration(&self) -> f64 {
        self.cycle_duration
    }
    pub fn voxels_per_slice(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
    pub fn voxels_per_cycle(&self) -> usize {
        self.voxels_per_slice() * self.slice_count
    }

    /// Scanner-space centre of voxel `(i, j)` in `slice`.
    pub fn voxel_center(&self, i: usize, j: usize, slice: usize) -> Point3 {
        Point3::new(
            self.origin[0] + i as f64 * self.voxel_size[0],
            self.origin[1] + j as f64 * self.voxel_size[1],
            self.origin[2] + slice as f64 * self.voxel_size[2],
        )
    }

    /// Scanner z coordinate of a slice plane.
    pub fn slice_z(&self, slice: usize) -> f64 {
        self.origin[2] + slice as f64 * self.voxel_size[2]
    }

    /// Acquisition time of `slice` in scan cycle `cycle`.
    pub fn acquisition_time(&self, cycle: usize, slice: usize) -> f64 {
        cycle as f64 * self.cycle_duration + self.slice_times[slice]
    }

    /// Axis-aligned scanner-space bounding box of all voxel centres.
    pub fn bounds(&self) -> (Point3, Point3) {
        let lo = Point3::from(self.origin);
        let hi = self.voxel_center(self.shape[0] - 1, self.shape[1] - 1, self.slice_count - 1);
        (lo, hi)
    }
}

impl From<AcquisitionGrid> for GridRecord {
    fn from(g: AcquisitionGrid) -> Self {
        GridRecord {
            in_plane_shape: g.shape,
            slice_count: g.slice_count,
            voxel_size: g.voxel_size,
            origin: Some(g.origin),
            slice_times: g.slice_times,
            cycle_duration: g.cycle_duration,
        }
    }
}

impl TryFrom<GridRecord> for AcquisitionGrid {
    type Error = GeometryError;
    fn try_from(r: GridRecord) -> Result<Self, Self::Error> {
        if r.slice_times.len() != r.slice_count {
            return Err(GeometryError::InvalidGrid(format!(
                "slice_times has {} entries for {} slices",
                r.slice_times.len(),
                r.slice_count
            )));
        }
        match r.origin {
            Some(o) => Self::with_origin(r.in_plane_shape, r.voxel_size, o, r.slice_times, r.cycle_duration),
            None => Self::new(r.in_plane_shape, r.voxel_size, r.slice_times, r.cycle_duration),
        }
    }
}

/// Subject-space sample locations of one slice under motion `rho`, with the
/// slice's acquisition time in scan cycle `cycle`.
///
/// Locations are listed in in-plane order (`i` fastest).
pub fn grid_sample_locations(
    grid: &AcquisitionGrid,
    rho: &RigidMotion,
    slice: usize,
    cycle: usize,
) -> Result<Vec<(Point3, f64)>, GeometryError> {
    if slice >= grid.slice_count {
        return Err(GeometryError::SliceOutOfRange {
            slice,
            count: grid.slice_count,
        });
    }
    let time = grid.acquisition_time(cycle, slice);
    let [nx, ny] = grid.shape;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push((rho.inverse_apply(&grid.voxel_center(i, j, slice)), time));
        }
    }
    Ok(out)
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3; // 2 * sqrt(2 ln 2)

pub fn fwhm_to_sigma(fwhm: f64) -> Result<f64, GeometryError> {
    if fwhm < 0.0 || fwhm.is_nan() {
        return Err(GeometryError::NegativeWidth(fwhm));
    }
    Ok(fwhm / FWHM_PER_SIGMA)
}

pub fn sigma_to_fwhm(sigma: f64) -> Result<f64, GeometryError> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(GeometryError::NegativeWidth(sigma));
    }
    Ok(sigma * FWHM_PER_SIGMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_motion_leaves_points() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(apply_motion(&RigidMotion::identity(), &p), p);
    }

    #[test]
    fn quarter_turn_about_z() {
        let rho = RigidMotion::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let q = apply_motion(&rho, &Point3::new(1.0, 0.0, 0.0));
        assert!((q - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rejects_reflections_and_bad_quaternions() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            RigidMotion::new(reflect, Vector3::zeros()),
            Err(GeometryError::NotARotation(_))
        ));
        assert!(matches!(
            RigidMotion::from_quaternion([1.0, 0.1, 0.0, 0.0], [0.0; 3]),
            Err(GeometryError::NonUnitQuaternion(_))
        ));
        assert!(AffineMap::new(Matrix3::zeros(), Vector3::zeros()).is_err());
    }

    fn motion_strategy() -> impl Strategy<Value = RigidMotion> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.2f64..3.2,
            prop::array::uniform3(-20.0f64..20.0),
        )
            .prop_filter("axis nonzero", |(a, _, _)| {
                Vector3::from(*a).norm() > 1e-3
            })
            .prop_map(|(axis, angle, t)| {
                RigidMotion::from_axis_angle(Vector3::from(axis), angle, Vector3::from(t))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn motion_round_trip(rho in motion_strategy(), p in prop::array::uniform3(-100.0f64..100.0)) {
            let p = Point3::from(p);
            let back = apply_motion(&invert_motion(&rho), &apply_motion(&rho, &p));
            prop_assert!((back - p).norm() < 1e-9);
            let back2 = rho.inverse_apply(&rho.apply(&p));
            prop_assert!((back2 - p).norm() < 1e-9);
        }

        #[test]
        fn quaternion_round_trip(rho in motion_strategy()) {
            let rec = MotionRecord::from(rho);
            let again = RigidMotion::try_from(rec).unwrap();
            prop_assert!((again.rotation() - rho.rotation()).abs().max() < 1e-12);
        }

        #[test]
        fn fwhm_sigma_inverse(s in 0.0f64..1e3) {
            let back = fwhm_to_sigma(sigma_to_fwhm(s).unwrap()).unwrap();
            prop_assert!((back - s).abs() <= 1e-12 * s.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn fwhm_examples() {
        assert!((fwhm_to_sigma(5.42).unwrap() - 2.30).abs() < 0.005);
        assert_eq!(fwhm_to_sigma(0.0).unwrap(), 0.0);
        assert!((fwhm_to_sigma(2.3548200).unwrap() - 1.0).abs() < 1e-6);
        assert!(fwhm_to_sigma(-1.0).is_err());
    }

    fn small_grid() -> AcquisitionGrid {
        AcquisitionGrid::ascending([4, 4], 3, [3.0, 3.0, 4.0], 1.5).unwrap()
    }

    #[test]
    fn identity_locations_are_voxel_centres() {
        let g = small_grid();
        let locs = grid_sample_locations(&g, &RigidMotion::identity(), 1, 2).unwrap();
        assert_eq!(locs.len(), 16);
        for (idx, (p, t)) in locs.iter().enumerate() {
            assert_eq!(*p, g.voxel_center(idx % 4, idx / 4, 1));
            assert_eq!(*t, 2.0 * 1.5 + 0.5);
        }
    }

    #[test]
    fn translation_shifts_locations_back() {
        let g = small_grid();
        let tau = Vector3::new(0.7, -1.1, 0.3);
        let locs = grid_sample_locations(&g, &RigidMotion::translation(tau), 0, 0).unwrap();
        for (idx, (p, _)) in locs.iter().enumerate() {
            let v = g.voxel_center(idx % 4, idx / 4, 0);
            assert!((p.coords - (v.coords - tau)).norm() < 1e-12);
        }
    }

    #[test]
    fn distinct_motions_sample_disjoint_points() {
        let g = small_grid();
        let a = RigidMotion::from_axis_angle(Vector3::new(0.2, 0.1, 1.0), 0.03, Vector3::new(0.1, 0.2, 0.0));
        let b = RigidMotion::from_axis_angle(Vector3::new(0.0, 1.0, 0.3), -0.02, Vector3::new(-0.3, 0.0, 0.15));
        let la = grid_sample_locations(&g, &a, 1, 0).unwrap();
        let lb = grid_sample_locations(&g, &b, 1, 1).unwrap();
        for (p, _) in &la {
            for (q, _) in &lb {
                assert!((p - q).norm() > 1e-9);
            }
        }
    }

    #[test]
    fn slice_out_of_range() {
        let g = small_grid();
        assert_eq!(
            grid_sample_locations(&g, &RigidMotion::identity(), 3, 0),
            Err(GeometryError::SliceOutOfRange { slice: 3, count: 3 })
        );
    }

    #[test]
    fn grid_validation() {
        assert!(AcquisitionGrid::new([2, 2], [1.0, 1.0, 0.0], vec![0.0], 1.0).is_err());
        assert!(AcquisitionGrid::new([2, 2], [1.0, 1.0, 1.0], vec![0.0, 1.0], 1.0).is_err());
        assert!(AcquisitionGrid::new([2, 2], [1.0, 1.0, 1.0], vec![0.5, 0.5], 1.0).is_err());
        let g = AcquisitionGrid::new([2, 2], [1.0, 1.0, 1.0], vec![0.5, 0.0, 0.25], 1.0).unwrap();
        assert_eq!(g.slice_order(), &[1, 2, 0]);
    }
}
