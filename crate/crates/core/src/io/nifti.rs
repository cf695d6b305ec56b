//! Single-file NIfTI-1 (`.nii`), little-endian, uint16/int16/float32 only.

use std::path::Path;

use super::{read_file, write_file, IoError};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint16,
    Int16,
    Float32,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Uint16 => 512,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            512 => Some(Datatype::Uint16),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            _ => None,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            Datatype::Float32 => 32,
            _ => 16,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

/// A 3D or 4D volume. `data` holds scaled values, x fastest, then y, z, t.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub dims: Vec<usize>,
    /// Voxel sizes in mm and, for 4D volumes, the repetition time in s.
    pub pixdim: [f64; 4],
    /// Position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
    pub datatype: Datatype,
    /// Raw-to-value scaling, `value = slope·raw + inter`. A zero slope on
    /// disk means no scaling and reads back as 1.
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub data: Vec<f64>,
}

impl NiftiVolume {
    pub fn float32(dims: Vec<usize>, pixdim: [f64; 4], origin: [f64; 3], data: Vec<f64>) -> Self {
        Self {
            dims,
            pixdim,
            origin,
            datatype: Datatype::Float32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn malformed(field: &'static str, detail: impl Into<String>) -> IoError {
    IoError::MalformedHeader {
        field,
        detail: detail.into(),
    }
}

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn i32_at(b: &[u8], o: usize) -> i32 {
    i32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume, IoError> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed("sizeof_hdr", format!("file has only {} bytes", bytes.len())));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(malformed("sizeof_hdr", "big-endian files are not supported"));
        }
        return Err(malformed("sizeof_hdr", format!("expected 348, found {sizeof_hdr}")));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(malformed("magic", "expected single-file \"n+1\""));
    }
    let ndim = i16_at(bytes, 40);
    if !(3..=4).contains(&ndim) {
        return Err(malformed("dim", format!("only 3D and 4D volumes are supported, dim[0] = {ndim}")));
    }
    let mut dims = Vec::with_capacity(4);
    for a in 1..=7 {
        let d = i16_at(bytes, 40 + 2 * a);
        if a <= ndim as usize {
            if d < 1 {
                return Err(malformed("dim", format!("dim[{a}] = {d}")));
            }
            dims.push(d as usize);
        }
    }
    let code = i16_at(bytes, 70);
    let datatype = Datatype::from_code(code)
        .ok_or_else(|| malformed("datatype", format!("unsupported datatype code {code}")))?;
    let bitpix = i16_at(bytes, 72);
    if bitpix != datatype.bitpix() {
        return Err(malformed("bitpix", format!("{bitpix} does not match datatype {code}")));
    }
    let mut pixdim = [0.0; 4];
    for (a, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(bytes, 80 + 4 * a) as f64;
    }
    if pixdim[..3].iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(malformed("pixdim", format!("voxel sizes must be positive, got {:?}", &pixdim[..3])));
    }
    if ndim == 4 && !(pixdim[3].is_finite() && pixdim[3] > 0.0) {
        return Err(malformed("pixdim", format!("repetition time must be positive, got {}", pixdim[3])));
    }
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= VOX_OFFSET as f32 && vox_offset.fract() == 0.0) {
        return Err(malformed("vox_offset", format!("{vox_offset}")));
    }
    let mut slope = f32_at(bytes, 112) as f64;
    let mut inter = f32_at(bytes, 116) as f64;
    if slope == 0.0 {
        slope = 1.0;
        inter = 0.0;
    }
    if !slope.is_finite() || !inter.is_finite() {
        return Err(malformed("scl_slope", "scaling must be finite"));
    }
    let qform = i16_at(bytes, 252);
    let sform = i16_at(bytes, 254);
    let origin = if sform > 0 {
        for (row, off) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for col in 0..3 {
                if col != row && f32_at(bytes, off + 4 * col) != 0.0 {
                    return Err(malformed("srow_x", "only axis-aligned orientations are supported"));
                }
            }
        }
        [f32_at(bytes, 292), f32_at(bytes, 308), f32_at(bytes, 324)].map(f64::from)
    } else if qform > 0 {
        if (0..3).any(|i| f32_at(bytes, 256 + 4 * i) != 0.0) {
            return Err(malformed("quatern_b", "only axis-aligned orientations are supported"));
        }
        [f32_at(bytes, 268), f32_at(bytes, 272), f32_at(bytes, 276)].map(f64::from)
    } else {
        [0.0; 3]
    };
    let n: usize = dims.iter().product();
    let start = vox_offset as usize;
    let need = start + n * datatype.bytes();
    if bytes.len() < need {
        return Err(malformed("dim", format!("{n} voxels need {need} bytes, file has {}", bytes.len())));
    }
    let payload = &bytes[start..need];
    let data: Vec<f64> = match datatype {
        Datatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| slope * f32::from_le_bytes(c.try_into().unwrap()) as f64 + inter)
            .collect(),
        Datatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| slope * i16::from_le_bytes([c[0], c[1]]) as f64 + inter)
            .collect(),
        Datatype::Uint16 => payload
            .chunks_exact(2)
            .map(|c| slope * u16::from_le_bytes([c[0], c[1]]) as f64 + inter)
            .collect(),
    };
    Ok(NiftiVolume {
        dims,
        pixdim,
        origin,
        datatype,
        scl_slope: slope,
        scl_inter: inter,
        data,
    })
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume, IoError> {
    parse_nifti(&read_file(path)?)
}

/// Serializes `vol`. Integer datatypes store `round((value − inter) / slope)`
/// and fail when that does not fit.
pub fn encode_nifti(vol: &NiftiVolume) -> Result<Vec<u8>, IoError> {
    if !(3..=4).contains(&vol.dims.len()) || vol.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(malformed("dim", format!("cannot store dimensions {:?}", vol.dims)));
    }
    if vol.data.len() != vol.len() {
        return Err(malformed("dim", format!("{} values for dimensions {:?}", vol.data.len(), vol.dims)));
    }
    if !(vol.scl_slope.is_finite() && vol.scl_slope != 0.0 && vol.scl_inter.is_finite()) {
        return Err(malformed("scl_slope", "scaling must be finite with a nonzero slope"));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, vol.dims.len() as i16);
    for a in 1..=7 {
        put_i16(&mut h, 40 + 2 * a, *vol.dims.get(a - 1).unwrap_or(&1) as i16);
    }
    put_i16(&mut h, 70, vol.datatype.code());
    put_i16(&mut h, 72, vol.datatype.bitpix());
    put_f32(&mut h, 76, 1.0);
    for a in 0..4 {
        put_f32(&mut h, 80 + 4 * a, vol.pixdim[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, vol.scl_slope as f32);
    put_f32(&mut h, 116, vol.scl_inter as f32);
    // mm and seconds
    h[123] = 2 | 8;
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, vol.origin[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 4 * a, vol.pixdim[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 12, vol.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(vol.len() * vol.datatype.bytes());
    let raw = |v: f64| (v - vol.scl_inter) / vol.scl_slope;
    for (i, &v) in vol.data.iter().enumerate() {
        match vol.datatype {
            Datatype::Float32 => out.extend_from_slice(&(raw(v) as f32).to_le_bytes()),
            Datatype::Int16 => {
                let r = raw(v).round();
                if !(r >= i16::MIN as f64 && r <= i16::MAX as f64) {
                    return Err(IoError::Unrepresentable { index: i, value: v });
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            Datatype::Uint16 => {
                let r = raw(v).round();
                if !(r >= 0.0 && r <= u16::MAX as f64) {
                    return Err(IoError::Unrepresentable { index: i, value: v });
                }
                out.extend_from_slice(&(r as u16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_nifti(path: &Path, vol: &NiftiVolume) -> Result<(), IoError> {
    write_file(path, &encode_nifti(vol)?)
}
