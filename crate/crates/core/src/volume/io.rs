//! Volume file IO: the MVOL container (read/write) and uncompressed NIfTI-1 (read).
//!
//! MVOL layout: 8-byte magic `MVOL\0\0\0\x01`, a little-endian `u32` header
//! length, a UTF-8 JSON header
//! `{"dims":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"dtype":"f32","channels":1}`,
//! then the little-endian payload, x-fastest, channel-interleaved.
//!
//! `store_*` writes `f32` whenever every value survives the round trip through
//! `f32` unchanged and falls back to `f64` otherwise, so a store/load cycle is
//! always bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GridMeta, LabelVolume, ScalarVolume, VectorField};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: [u8; 8] = *b"MVOL\0\0\0\x01";

/// Tolerance applied when validating partial-volume maps on load.
pub const PV_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvolHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: DType,
    pub channels: usize,
}

/// How a scalar file should be interpreted on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Intensity,
    /// Validated to `[0, 1]` within [`PV_TOLERANCE`], then clamped.
    PartialVolume,
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
}

impl LoadedVolume {
    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            LoadedVolume::Scalar(v) => Ok(v),
            LoadedVolume::Labels(l) => Ok(l.to_scalar()),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            LoadedVolume::Labels(l) => Ok(l),
            LoadedVolume::Scalar(v) => LabelVolume::from_scalar(&v),
        }
    }
}

fn smallest_lossless_dtype(values: &[f64]) -> DType {
    if values.iter().all(|&v| (v as f32) as f64 == v) {
        DType::F32
    } else {
        DType::F64
    }
}

/// Serializes raw channel-interleaved values into MVOL bytes.
pub fn encode_mvol(meta: &GridMeta, channels: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != meta.len() * channels {
        return Err(Error::ShapeMismatch {
            what: "mvol payload",
            expected: meta.len() * channels,
            got: values.len(),
        });
    }
    let header = MvolHeader {
        dims: meta.dims,
        spacing_mm: meta.spacing_mm,
        dtype: smallest_lossless_dtype(values),
        channels,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + values.len() * header.dtype.size());
    out.extend_from_slice(&MVOL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match header.dtype {
        DType::F32 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses MVOL bytes into the header metadata and the raw payload.
pub fn decode_mvol(bytes: &[u8]) -> Result<(GridMeta, usize, Vec<f64>)> {
    let bad = |field: &'static str, detail: String| Error::BadHeader { field, detail };
    if bytes.len() < 12 || bytes[..8] != MVOL_MAGIC {
        return Err(bad("magic", "expected MVOL\\0\\0\\0\\x01".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("header_length", format!("{hlen} exceeds file size")))?;
    let header: MvolHeader =
        serde_json::from_slice(json).map_err(|e| bad("header", e.to_string()))?;
    if header.channels != 1 && header.channels != 3 {
        return Err(bad(
            "channels",
            format!("must be 1 or 3, got {}", header.channels),
        ));
    }
    let meta = GridMeta::new(header.dims, header.spacing_mm).map_err(|e| match e {
        Error::InvalidGrid(d) => bad("dims", d),
        other => other,
    })?;
    let n = meta.len() * header.channels;
    let payload = &bytes[12 + hlen..];
    let expected = n * header.dtype.size();
    if payload.len() != expected {
        return Err(bad(
            "dims",
            format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mvol payload"));
    }
    Ok((meta, header.channels, values))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn store_volume(v: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mvol(&v.meta, 1, &v.data)?)
}

pub fn store_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    store_volume(&v.to_scalar(), path)
}

pub fn store_field(f: &VectorField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mvol(&f.meta, 3, &f.to_flat())?)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let (meta, channels, values) = decode_mvol(&read_bytes(path.as_ref())?)?;
    if channels != 3 {
        return Err(Error::BadHeader {
            field: "channels",
            detail: format!("vector field needs 3 channels, got {channels}"),
        });
    }
    VectorField::from_flat(meta, &values)
}

/// Loads an MVOL or uncompressed NIfTI-1 scalar file.
pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<LoadedVolume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let volume = if bytes.starts_with(&MVOL_MAGIC) {
        let (meta, channels, values) = decode_mvol(&bytes)?;
        if channels != 1 {
            return Err(Error::BadHeader {
                field: "channels",
                detail: format!("scalar volume needs 1 channel, got {channels}"),
            });
        }
        ScalarVolume::new(meta, values)?
    } else {
        decode_nifti1(&bytes)?
    };
    Ok(match kind {
        VolumeKind::Intensity => LoadedVolume::Scalar(volume),
        VolumeKind::PartialVolume => LoadedVolume::Scalar(volume.validate_pv(PV_TOLERANCE)?),
        VolumeKind::Labels => LoadedVolume::Labels(LabelVolume::from_scalar(&volume)?),
    })
}

pub fn load_pv(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    load_volume(path, VolumeKind::PartialVolume)?.into_scalar()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    load_volume(path, VolumeKind::Labels)?.into_labels()
}

const NIFTI1_HEADER_SIZE: usize = 348;

/// Reads a single-file NIfTI-1 image (`n+1`) with float32, uint8 or int16
/// voxels. Orientation fields are ignored.
pub fn decode_nifti1(bytes: &[u8]) -> Result<ScalarVolume> {
    let bad = |field: &'static str, detail: String| Error::BadHeader { field, detail };
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(bad(
            "sizeof_hdr",
            format!("file has {} bytes, need 348", bytes.len()),
        ));
    }
    let le = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => true,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => false,
        other => return Err(bad("sizeof_hdr", format!("expected 348, got {other}"))),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(bad(
            "magic",
            format!(
                "expected \"n+1\", got {:?}",
                String::from_utf8_lossy(&bytes[344..347])
            ),
        ));
    }
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };

    let ndim = i16_at(40);
    let dim: Vec<i16> = (0..8).map(|k| i16_at(40 + 2 * k)).collect();
    let extra_ok = (4..=ndim.clamp(0, 7) as usize).all(|k| dim[k] == 1);
    if !(1..=7).contains(&ndim) || (ndim > 3 && !extra_ok) {
        return Err(bad(
            "dim",
            format!("only 3D volumes are supported, got {dim:?}"),
        ));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if a < ndim as usize {
            if dim[a + 1] < 1 {
                return Err(bad("dim", format!("non-positive extent {}", dim[a + 1])));
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    let mut spacing = [1.0f64; 3];
    for a in 0..3 {
        let p = f32_at(80 + 4 * a).abs() as f64;
        if a < ndim as usize {
            if !(p.is_finite() && p > 0.0) {
                return Err(bad("pixdim", format!("invalid spacing {p} on axis {a}")));
            }
            spacing[a] = p;
        }
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI1_HEADER_SIZE as f32) {
        return Err(bad("vox_offset", format!("invalid offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let meta = GridMeta::new(dims, spacing)?;
    let n = meta.len();
    let size = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => {
            return Err(bad(
                "datatype",
                format!("unsupported datatype {other} (float32, uint8, int16 only)"),
            ))
        }
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * size)
        .ok_or_else(|| bad("dim", format!("voxel data shorter than {} voxels", n)))?;
    let mut data: Vec<f64> = match datatype {
        2 => payload.iter().map(|&b| b as f64).collect(),
        4 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                }) as f64
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                (if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }) as f64
            })
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nifti voxel data"));
    }
    ScalarVolume::new(meta, data)
}
