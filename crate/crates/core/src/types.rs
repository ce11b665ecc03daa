//! Domain types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::SphericalGrid;
use crate::reconstruct::ReconstructionConfig;
use crate::{Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("pixel ({ix}, {iy}) outside a {width}x{height} frame")]
    IndexOutOfRange {
        ix: usize,
        iy: usize,
        width: usize,
        height: usize,
    },
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:.3e})")]
    InvalidPose(f64),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
}

/// One ultrasound measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    /// Normalized amplitude in `[0, 1]`.
    pub intensity: f64,
    /// World position in millimeters.
    pub position: Vec3,
    /// Unit beam direction.
    pub direction: Vec3,
    pub ray_id: u64,
    pub frame_id: u32,
}

/// Rigid transform from image coordinates (mm) to world coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub const ORTHO_TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, CoreError> {
        Self::with_tolerance(rotation, translation, Self::ORTHO_TOLERANCE)
    }

    pub fn with_tolerance(rotation: Mat3, translation: Vec3, tol: f64) -> Result<Self, CoreError> {
        let dev = Self::orthonormality_error(&rotation);
        if !(dev <= tol) || !translation.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidPose(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Largest of `|RᵀR - I|` (entrywise) and `|det R - 1|`.
    pub fn orthonormality_error(r: &Mat3) -> f64 {
        let gram = r.transpose() * r - Mat3::identity();
        let e = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        e.max((r.determinant() - 1.0).abs())
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Probe geometry shared by all frames of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
    /// Lateral pixel spacing (mm), along image x.
    pub lateral_spacing: f64,
    /// Axial pixel spacing (mm), along image y (the beam).
    pub axial_spacing: f64,
}

impl FrameGeometry {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::InvalidFrame("empty frame".into()));
        }
        if !(self.lateral_spacing > 0.0 && self.axial_spacing > 0.0) {
            return Err(CoreError::InvalidFrame("pixel spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn width_mm(&self) -> f64 {
        (self.width.saturating_sub(1)) as f64 * self.lateral_spacing
    }

    pub fn depth_mm(&self) -> f64 {
        (self.height.saturating_sub(1)) as f64 * self.axial_spacing
    }
}

/// Image axis along which the beam travels.
pub const AXIAL_AXIS: Vec3 = Vec3::new(0.0, 1.0, 0.0);

/// A tracked B-mode frame. Pixels are row-major (`iy * width + ix`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f32>,
    pub pose: Pose,
}

impl Frame {
    pub fn intensity(&self, geom: &FrameGeometry, ix: usize, iy: usize) -> f32 {
        self.pixels[iy * geom.width + ix]
    }

    /// Beam direction in world coordinates; constant across a linear-array frame.
    pub fn direction(&self) -> Vec3 {
        (self.pose.rotation * AXIAL_AXIS).normalize()
    }
}

/// An ordered set of tracked frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub id: String,
    pub geometry: FrameGeometry,
    pub frames: Vec<Frame>,
}

impl Sweep {
    pub fn new(id: impl Into<String>, geometry: FrameGeometry, frames: Vec<Frame>) -> Result<Self, CoreError> {
        geometry.validate()?;
        if frames.is_empty() {
            return Err(CoreError::InvalidFrame("sweep has no frames".into()));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.pixels.len() != geometry.pixel_count() {
                return Err(CoreError::InvalidFrame(format!(
                    "frame {k} has {} pixels, expected {}",
                    f.pixels.len(),
                    geometry.pixel_count()
                )));
            }
            if let Some(v) = f.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CoreError::InvalidFrame(format!(
                    "frame {k} has intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            geometry,
            frames,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.frames.len() * self.geometry.pixel_count()
    }

    /// Sample for pixel `(ix, iy)` of frame `frame_id`.
    pub fn sample_of_pixel(&self, frame_id: usize, ix: usize, iy: usize) -> Result<Sample, CoreError> {
        let frame = self.frames.get(frame_id).ok_or_else(|| {
            CoreError::InvalidFrame(format!("no frame {frame_id} in sweep of {}", self.frames.len()))
        })?;
        sample_of_pixel(frame, &self.geometry, frame_id as u32, ix, iy)
    }

    /// Sample with global index `frame * width * height + iy * width + ix`.
    pub fn sample(&self, index: usize) -> Sample {
        let per = self.geometry.pixel_count();
        let (f, rem) = (index / per, index % per);
        let (iy, ix) = (rem / self.geometry.width, rem % self.geometry.width);
        sample_of_pixel(&self.frames[f], &self.geometry, f as u32, ix, iy)
            .expect("global sample index in range")
    }

    /// All samples in global index order.
    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        let g = self.geometry;
        self.frames.iter().enumerate().flat_map(move |(f, frame)| {
            let dir = frame.direction();
            (0..g.height).flat_map(move |iy| {
                (0..g.width).map(move |ix| Sample {
                    intensity: f64::from(frame.pixels[iy * g.width + ix]),
                    position: frame.pose.apply(&pixel_plane_position(&g, ix, iy)),
                    direction: dir,
                    ray_id: ray_id(&g, f as u32, ix),
                    frame_id: f as u32,
                })
            })
        })
    }
}

/// Ray identifier of column `ix` in frame `frame_id`.
pub fn ray_id(geom: &FrameGeometry, frame_id: u32, ix: usize) -> u64 {
    u64::from(frame_id) * geom.width as u64 + ix as u64
}

/// Image-plane coordinates (mm) of pixel `(ix, iy)`.
pub fn pixel_plane_position(geom: &FrameGeometry, ix: usize, iy: usize) -> Vec3 {
    Vec3::new(
        ix as f64 * geom.lateral_spacing,
        iy as f64 * geom.axial_spacing,
        0.0,
    )
}

pub fn sample_of_pixel(
    frame: &Frame,
    geom: &FrameGeometry,
    frame_id: u32,
    ix: usize,
    iy: usize,
) -> Result<Sample, CoreError> {
    if ix >= geom.width || iy >= geom.height {
        return Err(CoreError::IndexOutOfRange {
            ix,
            iy,
            width: geom.width,
            height: geom.height,
        });
    }
    Ok(Sample {
        intensity: f64::from(frame.intensity(geom, ix, iy)),
        position: frame.pose.apply(&pixel_plane_position(geom, ix, iy)),
        direction: frame.direction(),
        ray_id: ray_id(geom, frame_id, ix),
        frame_id,
    })
}

/// Regular isotropic lattice of voxel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelLattice {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl VoxelLattice {
    pub const DEFAULT_SPACING: f64 = 0.5;

    pub fn new(dims: [usize; 3], origin: [f64; 3], spacing: f64) -> Result<Self, CoreError> {
        if dims.contains(&0) {
            return Err(CoreError::InvalidLattice("dimensions must be positive".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(CoreError::InvalidLattice("spacing must be positive".into()));
        }
        Ok(Self { dims, origin, spacing })
    }

    /// Smallest lattice with the given spacing covering the box `[lo, hi]`.
    pub fn covering(lo: Vec3, hi: Vec3, spacing: f64) -> Result<Self, CoreError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let span = (hi[a] - lo[a]).max(0.0);
            dims[a] = (span / spacing).ceil() as usize + 1;
        }
        Self::new(dims, [lo.x, lo.y, lo.z], spacing)
    }

    /// Lattice covering every sample position of a sweep.
    pub fn covering_sweep(sweep: &Sweep, spacing: f64) -> Result<Self, CoreError> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let g = sweep.geometry;
        for frame in &sweep.frames {
            for (ix, iy) in [(0, 0), (g.width - 1, 0), (0, g.height - 1), (g.width - 1, g.height - 1)] {
                let p = frame.pose.apply(&pixel_plane_position(&g, ix, iy));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        Self::covering(lo, hi, spacing)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index with x varying fastest.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let ix = index % self.dims[0];
        let rest = index / self.dims[0];
        [ix, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.spacing * ix as f64,
            self.origin[1] + self.spacing * iy as f64,
            self.origin[2] + self.spacing * iz as f64,
        )
    }

    pub fn center_of(&self, index: usize) -> Vec3 {
        let [x, y, z] = self.coords(index);
        self.center(x, y, z)
    }

    /// Continuous lattice coordinates of a world point.
    pub fn continuous(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.origin[0]) / self.spacing,
            (p.y - self.origin[1]) / self.spacing,
            (p.z - self.origin[2]) / self.spacing,
        )
    }

    /// Voxel whose center is nearest to `p`, if `p` rounds into the lattice.
    pub fn nearest(&self, p: &Vec3) -> Option<usize> {
        let u = self.continuous(p);
        let mut c = [0usize; 3];
        for a in 0..3 {
            let r = u[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            c[a] = r as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }
}

/// Symmetric 3x3 tensor stored as `(xx, yy, zz, xy, xz, yz)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymmetricTensor {
    pub coeffs: [f64; 6],
    pub valid: bool,
}

impl SymmetricTensor {
    pub const INVALID: Self = Self {
        coeffs: [0.0; 6],
        valid: false,
    };

    pub fn new(coeffs: [f64; 6]) -> Self {
        Self { coeffs, valid: true }
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Self::new([
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            0.5 * (m[(1, 2)] + m[(2, 1)]),
        ])
    }

    pub fn isotropic(c: f64) -> Self {
        Self::new([c, c, c, 0.0, 0.0, 0.0])
    }

    pub fn matrix(&self) -> Mat3 {
        let [xx, yy, zz, xy, xz, yz] = self.coeffs;
        Mat3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// Quadratic form `dᵀTd`.
    pub fn project(&self, d: &Vec3) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.coeffs;
        xx * d.x * d.x
            + yy * d.y * d.y
            + zz * d.z * d.z
            + 2.0 * (xy * d.x * d.y + xz * d.x * d.z + yz * d.y * d.z)
    }

    pub fn trace(&self) -> f64 {
        self.coeffs[0] + self.coeffs[1] + self.coeffs[2]
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        (self.matrix() - other.matrix()).norm()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix().norm()
    }

    /// Rounds every coefficient to `f32` precision, the precision of volume files.
    pub fn quantized(&self) -> Self {
        Self {
            coeffs: self.coeffs.map(|c| f64::from(c as f32)),
            valid: self.valid,
        }
    }
}

/// Per-cell intensities of one voxel; `NaN` marks an empty cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalModel {
    pub cells: Vec<f32>,
}

impl SphericalModel {
    pub fn empty(n_cells: usize) -> Self {
        Self {
            cells: vec![f32::NAN; n_cells],
        }
    }

    pub fn is_empty_cell(&self, k: usize) -> bool {
        self.cells[k].is_nan()
    }

    pub fn non_empty(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(|(k, v)| (k, *v))
    }
}

/// Scalar voxel; empty voxels carry value 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalarVoxel {
    pub value: f32,
    pub empty: bool,
}

impl ScalarVoxel {
    pub const EMPTY: Self = Self {
        value: 0.0,
        empty: true,
    };

    pub fn from_option(v: Option<f64>) -> Self {
        match v {
            Some(v) => Self {
                value: v as f32,
                empty: false,
            },
            None => Self::EMPTY,
        }
    }

    pub fn get(&self) -> Option<f64> {
        (!self.empty).then_some(f64::from(self.value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    ScalarMean,
    ScalarMedian,
    Tensor,
    Spherical,
}

impl VolumeKind {
    pub fn is_scalar(self) -> bool {
        matches!(self, VolumeKind::ScalarMean | VolumeKind::ScalarMedian)
    }

    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::ScalarMean => "scalar_mean",
            VolumeKind::ScalarMedian => "scalar_median",
            VolumeKind::Tensor => "tensor",
            VolumeKind::Spherical => "spherical",
        }
    }
}

/// Per-voxel models, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Scalar(Vec<ScalarVoxel>),
    Tensor(Vec<SymmetricTensor>),
    /// Flattened `N_vox x N_cells` cell values.
    Spherical(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub sweep_id: String,
    pub software_version: String,
    #[serde(default)]
    pub parameters: Option<ReconstructionConfig>,
}

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("payload holds {got} records, lattice needs {expected}")]
    PayloadLength { got: usize, expected: usize },
    #[error("{kind:?} volume cannot hold this payload")]
    KindMismatch { kind: VolumeKind },
    #[error("spherical volumes need a grid")]
    MissingGrid,
}

/// A lattice of voxel models.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub lattice: VoxelLattice,
    pub kind: VolumeKind,
    pub payload: Payload,
    pub grid: Option<SphericalGrid>,
    pub provenance: Provenance,
}

impl Volume {
    pub fn new(
        lattice: VoxelLattice,
        kind: VolumeKind,
        payload: Payload,
        grid: Option<SphericalGrid>,
        provenance: Provenance,
    ) -> Result<Self, VolumeError> {
        let n = lattice.voxel_count();
        let got = match (&payload, kind) {
            (Payload::Scalar(v), k) if k.is_scalar() => v.len(),
            (Payload::Tensor(v), VolumeKind::Tensor) => v.len(),
            (Payload::Spherical(v), VolumeKind::Spherical) => {
                let g = grid.as_ref().ok_or(VolumeError::MissingGrid)?;
                if v.len() != n * g.n_cells() {
                    return Err(VolumeError::PayloadLength {
                        got: v.len(),
                        expected: n * g.n_cells(),
                    });
                }
                n
            }
            _ => return Err(VolumeError::KindMismatch { kind }),
        };
        if got != n {
            return Err(VolumeError::PayloadLength { got, expected: n });
        }
        if kind != VolumeKind::Spherical && grid.is_some() {
            return Err(VolumeError::KindMismatch { kind });
        }
        Ok(Self {
            lattice,
            kind,
            payload,
            grid,
            provenance,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.grid.as_ref().map_or(0, |g| g.n_cells())
    }

    pub fn scalar(&self, voxel: usize) -> Option<ScalarVoxel> {
        match &self.payload {
            Payload::Scalar(v) => Some(v[voxel]),
            _ => None,
        }
    }

    pub fn tensor(&self, voxel: usize) -> Option<SymmetricTensor> {
        match &self.payload {
            Payload::Tensor(v) => Some(v[voxel]),
            _ => None,
        }
    }

    pub fn cells(&self, voxel: usize) -> Option<&[f32]> {
        match &self.payload {
            Payload::Spherical(v) => {
                let n = self.n_cells();
                Some(&v[voxel * n..(voxel + 1) * n])
            }
            _ => None,
        }
    }

    pub fn spherical_model(&self, voxel: usize) -> Option<SphericalModel> {
        self.cells(voxel).map(|c| SphericalModel { cells: c.to_vec() })
    }
}
