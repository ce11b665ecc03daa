//! Binary sweep and volume files. All multi-byte values are little-endian.
//!
//! Sweep file:
//!
//! ```text
//! "CSSWEEP1"
//! frame_count u32, width u32, height u32, lateral_spacing f64, axial_spacing f64
//! per frame: rotation 9 x f64 (row-major), translation 3 x f64,
//!            width * height x f32 intensities (row-major)
//! ```
//!
//! Volume file:
//!
//! ```text
//! "CSVOL1"
//! kind u8 (1 mean, 2 median, 3 tensor, 4 spherical)
//! dims 3 x u32, origin 3 x f64, spacing f64
//! grid scheme u8 (0 none, 1 lat-long, 2 icosahedral, 3 fibonacci), grid param u32
//! provenance length u32, provenance UTF-8 JSON
//! per voxel: scalar   f32 value, u8 empty flag
//!            tensor   6 x f32 (xx yy zz xy xz yz), u8 valid flag
//!            spherical n_cells x f32, NaN marks an empty cell
//! ```
//!
//! The lat-long grid parameter is the number of latitude steps (`180 / resolution`).

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::grids::GridSpec;
use crate::rng::keyed_rng;
use crate::types::{
    CoreError, Frame, FrameGeometry, Payload, Pose, Provenance, ScalarVoxel, Sweep, SymmetricTensor, Volume,
    VolumeKind, VoxelLattice,
};
use crate::{Mat3, Vec3};

pub const SWEEP_MAGIC: &[u8; 8] = b"CSSWEEP1";
pub const VOLUME_MAGIC: &[u8; 6] = b"CSVOL1";

/// Rotation deviation tolerated when loading poses.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("file is truncated")]
    TruncatedFile,
    #[error("frame {frame}: rotation deviates from orthonormal by {deviation:.3e}")]
    InvalidPose { frame: usize, deviation: f64 },
    #[error("frame {frame}: intensity {value} outside [0, 1]")]
    OutOfRangeIntensity { frame: usize, value: f32 },
    #[error("format error: {0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(IoError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_sweep(sweep: &Sweep) -> Vec<u8> {
    let g = &sweep.geometry;
    let mut out = Vec::with_capacity(44 + sweep.frames.len() * (96 + 4 * g.pixel_count()));
    out.extend_from_slice(SWEEP_MAGIC);
    put_u32(&mut out, sweep.frames.len());
    put_u32(&mut out, g.width);
    put_u32(&mut out, g.height);
    put_f64(&mut out, g.lateral_spacing);
    put_f64(&mut out, g.axial_spacing);
    for f in &sweep.frames {
        let r = f.pose.rotation();
        for i in 0..3 {
            for j in 0..3 {
                put_f64(&mut out, r[(i, j)]);
            }
        }
        for c in f.pose.translation().iter() {
            put_f64(&mut out, *c);
        }
        for v in &f.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_sweep(bytes: &[u8], id: &str) -> Result<Sweep, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(SWEEP_MAGIC.len()).map_err(|_| IoError::BadMagic)? != SWEEP_MAGIC {
        return Err(IoError::BadMagic);
    }
    let frame_count = r.u32()? as usize;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let geometry = FrameGeometry {
        width,
        height,
        lateral_spacing: r.f64()?,
        axial_spacing: r.f64()?,
    };
    geometry.validate().map_err(|e| format_err(e.to_string()))?;
    if frame_count == 0 {
        return Err(format_err("sweep has no frames"));
    }
    let per_frame = 96 + 4 * (width as u64) * (height as u64);
    let expected = per_frame.checked_mul(frame_count as u64).ok_or(IoError::TruncatedFile)?;
    let remaining = r.remaining() as u64;
    if remaining < expected {
        return Err(IoError::TruncatedFile);
    }
    if remaining > expected {
        return Err(format_err(format!("{} trailing bytes", remaining - expected)));
    }
    let mut frames = Vec::with_capacity(frame_count);
    for k in 0..frame_count {
        let mut m = [0.0; 9];
        for v in &mut m {
            *v = r.f64()?;
        }
        let rotation = Mat3::from_row_slice(&m);
        let translation = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let pose = Pose::with_tolerance(rotation, translation, POSE_TOLERANCE).map_err(|e| match e {
            CoreError::InvalidPose(deviation) => IoError::InvalidPose { frame: k, deviation },
            other => format_err(other.to_string()),
        })?;
        let mut pixels = Vec::with_capacity(geometry.pixel_count());
        for _ in 0..geometry.pixel_count() {
            let v = r.f32()?;
            if !(0.0..=1.0).contains(&v) {
                return Err(IoError::OutOfRangeIntensity { frame: k, value: v });
            }
            pixels.push(v);
        }
        frames.push(Frame { pixels, pose });
    }
    Sweep::new(id, geometry, frames).map_err(|e| format_err(e.to_string()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a sweep; its id is the file stem.
pub fn read_sweep(path: impl AsRef<Path>) -> Result<Sweep, IoError> {
    let path = path.as_ref();
    decode_sweep(&fs::read(path)?, &file_stem(path))
}

pub fn write_sweep(sweep: &Sweep, path: impl AsRef<Path>) -> Result<(), IoError> {
    Ok(fs::write(path, encode_sweep(sweep))?)
}

fn kind_tag(kind: VolumeKind) -> u8 {
    match kind {
        VolumeKind::ScalarMean => 1,
        VolumeKind::ScalarMedian => 2,
        VolumeKind::Tensor => 3,
        VolumeKind::Spherical => 4,
    }
}

fn kind_from_tag(tag: u8) -> Option<VolumeKind> {
    match tag {
        1 => Some(VolumeKind::ScalarMean),
        2 => Some(VolumeKind::ScalarMedian),
        3 => Some(VolumeKind::Tensor),
        4 => Some(VolumeKind::Spherical),
        _ => None,
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let lat = &volume.lattice;
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(kind_tag(volume.kind));
    for d in lat.dims {
        put_u32(&mut out, d);
    }
    for o in lat.origin {
        put_f64(&mut out, o);
    }
    put_f64(&mut out, lat.spacing);
    match &volume.grid {
        Some(g) => {
            out.push(g.spec().scheme_tag());
            out.extend_from_slice(&g.spec().param().to_le_bytes());
        }
        None => out.extend_from_slice(&[0; 5]),
    }
    let json = serde_json::to_string(&volume.provenance).expect("provenance serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    match &volume.payload {
        Payload::Scalar(v) => {
            out.reserve(v.len() * 5);
            for s in v {
                out.extend_from_slice(&s.value.to_le_bytes());
                out.push(u8::from(s.empty));
            }
        }
        Payload::Tensor(v) => {
            out.reserve(v.len() * 25);
            for t in v {
                for c in t.coeffs {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
                out.push(u8::from(t.valid));
            }
        }
        Payload::Spherical(v) => {
            out.reserve(v.len() * 4);
            for c in v {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    out
}

fn flag(b: u8, what: &str) -> Result<bool, IoError> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(format_err(format!("{what} flag must be 0 or 1, got {b}"))),
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(VOLUME_MAGIC.len()).map_err(|_| IoError::BadMagic)? != VOLUME_MAGIC {
        return Err(IoError::BadMagic);
    }
    let tag = r.u8()?;
    let kind = kind_from_tag(tag).ok_or_else(|| format_err(format!("unknown volume kind {tag}")))?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let spacing = r.f64()?;
    let lattice = VoxelLattice::new(dims, origin, spacing).map_err(|e| format_err(e.to_string()))?;
    let scheme = r.u8()?;
    let param = r.u32()?;
    let grid = match (kind, scheme) {
        (VolumeKind::Spherical, 0) => return Err(format_err("spherical volume without grid")),
        (VolumeKind::Spherical, tag) => {
            let spec = GridSpec::from_tag(tag, param).ok_or_else(|| format_err(format!("unknown grid scheme {tag}")))?;
            let grid = spec.build().map_err(|e| format_err(e.to_string()))?;
            // Rebuilt grids must map their own points back to themselves.
            let mut rng = keyed_rng(u64::from(param), &[u64::from(tag)]);
            for _ in 0..16 {
                let k = rng.random_range(0..grid.n_cells());
                let back = grid.direction_of(k).and_then(|d| grid.cell_of(&d));
                if back != Ok(k) {
                    return Err(format_err(format!("rebuilt grid {spec} fails the mapping check at cell {k}")));
                }
            }
            Some(grid)
        }
        (_, 0) if param == 0 => None,
        _ => return Err(format_err("grid specification on a non-spherical volume")),
    };
    let json_len = r.u32()? as usize;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|_| format_err("provenance is not UTF-8"))?;
    let provenance: Provenance =
        serde_json::from_str(json).map_err(|e| format_err(format!("bad provenance: {e}")))?;

    let n = lattice.voxel_count() as u64;
    let record = match kind {
        VolumeKind::ScalarMean | VolumeKind::ScalarMedian => 5,
        VolumeKind::Tensor => 25,
        VolumeKind::Spherical => 4 * grid.as_ref().map_or(0, |g| g.n_cells()) as u64,
    };
    let expected = n.checked_mul(record).ok_or_else(|| format_err("payload size overflows"))?;
    if r.remaining() as u64 != expected {
        return Err(format_err(format!(
            "payload has {} bytes, header implies {expected}",
            r.remaining()
        )));
    }
    let n = n as usize;
    let payload = match kind {
        VolumeKind::ScalarMean | VolumeKind::ScalarMedian => {
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let value = r.f32()?;
                let empty = flag(r.u8()?, "empty")?;
                if !empty && !value.is_finite() {
                    return Err(format_err(format!("non-finite value in voxel {i}")));
                }
                v.push(ScalarVoxel { value, empty });
            }
            Payload::Scalar(v)
        }
        VolumeKind::Tensor => {
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let mut coeffs = [0.0; 6];
                for c in &mut coeffs {
                    *c = f64::from(r.f32()?);
                }
                let valid = flag(r.u8()?, "valid")?;
                if valid && coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(format_err(format!("non-finite coefficient in valid tensor {i}")));
                }
                v.push(SymmetricTensor { coeffs, valid });
            }
            Payload::Tensor(v)
        }
        VolumeKind::Spherical => {
            let mut v = Vec::with_capacity(r.remaining() / 4);
            while r.remaining() > 0 {
                v.push(r.f32()?);
            }
            Payload::Spherical(v)
        }
    };
    Volume::new(lattice, kind, payload, grid, provenance).map_err(|e| format_err(e.to_string()))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    decode_volume(&fs::read(path)?)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), IoError> {
    Ok(fs::write(path, encode_volume(volume))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep() -> Sweep {
        let g = FrameGeometry {
            width: 2,
            height: 3,
            lateral_spacing: 0.5,
            axial_spacing: 0.25,
        };
        let frame = Frame {
            pixels: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
            pose: Pose::identity(),
        };
        Sweep::new("s", g, vec![frame.clone(), frame]).unwrap()
    }

    #[test]
    fn sweep_round_trip() {
        let s = sweep();
        let bytes = encode_sweep(&s);
        assert_eq!(bytes.len(), 8 + 28 + 2 * (96 + 24));
        let back = decode_sweep(&bytes, "s").unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_sweep(&back), bytes);
    }

    #[test]
    fn sweep_errors() {
        let bytes = encode_sweep(&sweep());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_sweep(&bad, "s"), Err(IoError::BadMagic)));
        assert!(matches!(decode_sweep(&bytes[..bytes.len() - 3], "s"), Err(IoError::TruncatedFile)));
        let mut bad = bytes.clone();
        // First rotation entry of frame 0.
        bad[36..44].copy_from_slice(&1.01f64.to_le_bytes());
        assert!(matches!(decode_sweep(&bad, "s"), Err(IoError::InvalidPose { frame: 0, .. })));
        let mut bad = bytes.clone();
        let at = 36 + 96 + 4;
        bad[at..at + 4].copy_from_slice(&1.5f32.to_le_bytes());
        assert!(matches!(decode_sweep(&bad, "s"), Err(IoError::OutOfRangeIntensity { frame: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_sweep(&long, "s"), Err(IoError::Format(_))));
    }

    fn tensor_volume() -> Volume {
        let lattice = VoxelLattice::new([2, 1, 1], [0.5, -1.0, 2.0], 0.5).unwrap();
        Volume::new(
            lattice,
            VolumeKind::Tensor,
            Payload::Tensor(vec![SymmetricTensor::isotropic(0.25), SymmetricTensor::INVALID]),
            None,
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn nan_in_valid_tensor_rejected() {
        let mut bytes = encode_volume(&tensor_volume());
        let payload = bytes.len() - 50;
        bytes[payload..payload + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_volume(&bytes), Err(IoError::Format(_))));
    }

    #[test]
    fn volume_round_trip_and_trailing_bytes() {
        let v = tensor_volume();
        let mut bytes = encode_volume(&v);
        assert_eq!(decode_volume(&bytes).unwrap(), v);
        bytes.push(0);
        assert!(matches!(decode_volume(&bytes), Err(IoError::Format(_))));
    }

    #[test]
    fn spherical_length_mismatch() {
        let grid = GridSpec::Fibonacci { n_cells: 42 }.build().unwrap();
        let lattice = VoxelLattice::new([1, 1, 1], [0.0; 3], 1.0).unwrap();
        let v = Volume::new(
            lattice,
            VolumeKind::Spherical,
            Payload::Spherical(vec![f32::NAN; 42]),
            Some(grid),
            Provenance::default(),
        )
        .unwrap();
        let mut bytes = encode_volume(&v);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_volume(&bytes), Err(IoError::Format(_))));
    }
}
