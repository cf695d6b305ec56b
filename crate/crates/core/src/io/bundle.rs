//! Session bundles: a 4D NIfTI volume plus a JSON sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::BlockDesign;
use crate::fit::{framewise_displacement, grubbs_outlier_cycles};
use crate::geometry::{AcquisitionGrid, AffineMap, MotionRecord, RigidMotion};
use crate::session::ScanSession;

use super::nifti::{read_nifti, write_nifti, Datatype, NiftiVolume};
use super::{create_dir, invalid, read_json, write_json, IoError, SCHEMA_VERSION};

pub const SESSION_NII: &str = "session.nii";
pub const SESSION_JSON: &str = "session.json";

/// Lever arm (mm) converting rotation angles to displacement in the motion
/// screen.
const SCREEN_RADIUS_MM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default = "schema_one")]
    pub schema_version: u32,
    pub motions: Vec<MotionRecord>,
    pub slice_times: Vec<f64>,
    pub design: BlockDesign,
    #[serde(default)]
    pub psi: AffineMap,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grey_scale_note: Option<String>,
    /// Full-precision copies of the header geometry, which NIfTI stores as f32.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_cycles: Vec<usize>,
}

fn schema_one() -> u32 {
    SCHEMA_VERSION
}

/// Writes `dir/session.nii` (float32) and `dir/session.json`.
pub fn write_session(dir: &Path, session: &ScanSession, grey_scale_note: Option<String>) -> Result<(), IoError> {
    create_dir(dir)?;
    let g = session.grid();
    let [nx, ny] = g.in_plane_shape();
    let vs = g.voxel_size();
    let vol = NiftiVolume {
        dims: vec![nx, ny, g.slice_count(), session.cycles()],
        pixdim: [vs[0], vs[1], vs[2], g.cycle_duration()],
        origin: g.origin(),
        datatype: Datatype::Float32,
        scl_slope: 1.0,
        scl_inter: 0.0,
        data: session.values().to_vec(),
    };
    write_nifti(&dir.join(SESSION_NII), &vol)?;
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        motions: session.motions().iter().map(|m| MotionRecord::from(*m)).collect(),
        slice_times: g.slice_times().to_vec(),
        design: session.design().clone(),
        psi: *session.psi(),
        subject_id: session.subject_id().to_owned(),
        grey_scale_note,
        voxel_size: Some(vs),
        origin: Some(g.origin()),
        cycle_duration: Some(g.cycle_duration()),
        excluded_cycles: session.excluded_cycles(),
    };
    write_json(&dir.join(SESSION_JSON), &sidecar)
}

fn agrees(header: f64, precise: f64) -> bool {
    (header - precise).abs() <= 1e-6 * precise.abs().max(1.0)
}

/// Reads a session. With `grubbs_alpha`, cycles whose framewise displacement
/// is a Grubbs outlier are excluded.
pub fn read_session(volume: &Path, sidecar: &Path, grubbs_alpha: Option<f64>) -> Result<ScanSession, IoError> {
    let vol = read_nifti(volume)?;
    let side: Sidecar = read_json(sidecar)?;
    if side.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaVersion {
            found: side.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if vol.dims.len() != 4 {
        return Err(IoError::MalformedHeader {
            field: "dim",
            detail: "session volume must be 4D".into(),
        });
    }
    let (nx, ny, nz, nt) = (vol.dims[0], vol.dims[1], vol.dims[2], vol.dims[3]);
    if side.motions.len() != nt {
        return Err(IoError::SidecarMismatch {
            field: "motions",
            expected: nt,
            got: side.motions.len(),
        });
    }
    if side.slice_times.len() != nz {
        return Err(IoError::SidecarMismatch {
            field: "slice_times",
            expected: nz,
            got: side.slice_times.len(),
        });
    }
    let motions = side
        .motions
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let norm = m.quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("motions[{c}].quaternion"), format!("norm {norm} is not 1")));
            }
            RigidMotion::from_quaternion(m.quaternion, m.translation)
                .map_err(|e| invalid(format!("motions[{c}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let header_vs = [vol.pixdim[0], vol.pixdim[1], vol.pixdim[2]];
    let voxel_size = match side.voxel_size {
        Some(v) if (0..3).all(|a| agrees(header_vs[a], v[a])) => v,
        Some(_) => return Err(invalid("voxel_size", "sidecar disagrees with the NIfTI pixdim")),
        None => header_vs,
    };
    let origin = match side.origin {
        Some(o) if (0..3).all(|a| agrees(vol.origin[a], o[a])) => o,
        Some(_) => return Err(invalid("origin", "sidecar disagrees with the NIfTI qoffset")),
        None => vol.origin,
    };
    let tr = match side.cycle_duration {
        Some(t) if agrees(vol.pixdim[3], t) => t,
        Some(_) => return Err(invalid("cycle_duration", "sidecar disagrees with the NIfTI TR")),
        None => vol.pixdim[3],
    };
    let grid = AcquisitionGrid::with_origin([nx, ny], voxel_size, origin, side.slice_times, tr)?;
    let screen = match grubbs_alpha {
        Some(alpha) if nt >= 3 => grubbs_outlier_cycles(&framewise_displacement(&motions, SCREEN_RADIUS_MM), alpha)
            .map_err(|e| invalid("grubbs_alpha", e.to_string()))?,
        _ => Vec::new(),
    };
    let mut session = ScanSession::new(grid, motions, side.design, side.psi, vol.data, side.subject_id)?;
    for c in side.excluded_cycles.into_iter().chain(screen) {
        session.exclude_cycle(c)?;
    }
    Ok(session)
}

pub fn read_session_dir(dir: &Path, grubbs_alpha: Option<f64>) -> Result<ScanSession, IoError> {
    read_session(&dir.join(SESSION_NII), &dir.join(SESSION_JSON), grubbs_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{simulate_session, MotionSpec, PhantomSpec};

    fn small() -> PhantomSpec {
        let mut spec = PhantomSpec::desk(4);
        spec.grid = AcquisitionGrid::ascending([6, 5], 4, [3.0, 3.0, 4.6], 1.45).unwrap();
        spec.motion = MotionSpec::SinusoidalTranslation {
            amplitude: [0.5, 0.3, 0.2],
            period: 40.0,
            rotation_amplitude: 0.01,
        };
        spec
    }

    #[test]
    fn round_trip_is_single_precision_exact() {
        let (s, _) = simulate_session(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &s, Some("arbitrary scanner units".into())).unwrap();
        let back = read_session_dir(dir.path(), None).unwrap();
        let quantized: Vec<f64> = s.values().iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(back.values(), &quantized[..]);
        assert_eq!(back.grid(), s.grid());
        assert_eq!(back.design(), s.design());
        assert_eq!(back.subject_id(), s.subject_id());
        for (a, b) in back.motions().iter().zip(s.motions()) {
            assert!((a.rotation() - b.rotation()).abs().max() < 1e-12);
            assert!((a.translation_vector() - b.translation_vector()).norm() < 1e-12);
        }
        // second round trip is bit-identical
        let dir2 = tempfile::tempdir().unwrap();
        write_session(dir2.path(), &back, None).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(SESSION_NII)).unwrap(),
            std::fs::read(dir2.path().join(SESSION_NII)).unwrap()
        );
    }

    #[test]
    fn motion_count_mismatch() {
        let (s, _) = simulate_session(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &s, None).unwrap();
        let path = dir.path().join(SESSION_JSON);
        let mut side: Sidecar = read_json(&path).unwrap();
        side.motions.pop();
        write_json(&path, &side).unwrap();
        match read_session_dir(dir.path(), None) {
            Err(IoError::SidecarMismatch { field, expected, got }) => {
                assert_eq!(field, "motions");
                assert_eq!(got + 1, expected);
            }
            other => panic!("{other:?}"),
        }
        side.motions.push(side.motions[0]);
        side.slice_times.pop();
        write_json(&path, &side).unwrap();
        assert!(matches!(
            read_session_dir(dir.path(), None),
            Err(IoError::SidecarMismatch { field: "slice_times", .. })
        ));
    }

    #[test]
    fn quaternion_must_be_unit() {
        let (s, _) = simulate_session(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &s, None).unwrap();
        let path = dir.path().join(SESSION_JSON);
        let mut side: Sidecar = read_json(&path).unwrap();
        side.motions[3].quaternion = [1.0, 0.01, 0.0, 0.0];
        write_json(&path, &side).unwrap();
        match read_session_dir(dir.path(), None) {
            Err(IoError::Invalid { field, .. }) => assert_eq!(field, "motions[3].quaternion"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grubbs_screen_excludes_jerk() {
        let mut spec = small();
        let mut motions = vec![MotionRecord { quaternion: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }; spec.n_cycles()];
        for (c, m) in motions.iter_mut().enumerate() {
            m.translation = [0.01 * (c % 3) as f64, 0.0, 0.0];
        }
        motions[20].translation = [3.0, 0.0, 0.0];
        spec.motion = MotionSpec::Scripted { motions };
        let (s, _) = simulate_session(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &s, None).unwrap();
        let back = read_session_dir(dir.path(), Some(0.05)).unwrap();
        assert!(back.is_excluded(20) && back.is_excluded(21));
        assert!(read_session_dir(dir.path(), None).unwrap().excluded_cycles().is_empty());
    }
}
