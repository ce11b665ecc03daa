//! Scalar extraction from model volumes, direction color-mapping, slices and
//! free-view directional images.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eigen;
use crate::evaluate::spherical_lookup;
use crate::grids::SphericalGrid;
use crate::par::{self, Exec};
use crate::types::{Payload, SphericalModel, SymmetricTensor, Volume, VolumeKind, VoxelLattice};
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("tensor is marked invalid")]
    InvalidTensor,
    #[error("all cells of the spherical model are empty")]
    AllCellsEmpty,
    #[error("main and reference directions are (nearly) parallel")]
    DegenerateFrame,
    #[error("{0:?} volumes do not support directional images")]
    UnsupportedVolumeKind(VolumeKind),
    #[error("mode {mode} does not apply to {kind:?} volumes")]
    ModeMismatch { mode: SliceMode, kind: VolumeKind },
    #[error("invalid slice plane: {0}")]
    InvalidPlane(String),
    #[error("view direction has (near) zero length")]
    DegenerateDirection,
}

/// `|trace(T)|`.
pub fn tensor_trace_intensity(t: &SymmetricTensor) -> Result<f64, RenderError> {
    if !t.valid {
        return Err(RenderError::InvalidTensor);
    }
    Ok(t.trace().abs())
}

/// Largest eigenvalue with its sign-normalized unit eigenvector.
pub fn dominant_intensity(t: &SymmetricTensor) -> Result<(f64, Vec3), RenderError> {
    if !t.valid {
        return Err(RenderError::InvalidTensor);
    }
    Ok(eigen::dominant(t))
}

/// Mean over the non-empty cells.
pub fn spherical_mean_intensity(m: &SphericalModel) -> Result<f64, RenderError> {
    cell_mean(&m.cells).ok_or(RenderError::AllCellsEmpty)
}

fn cell_mean(cells: &[f32]) -> Option<f64> {
    let (sum, n) = cells
        .iter()
        .filter(|c| !c.is_nan())
        .fold((0.0, 0usize), |(s, n), c| (s + f64::from(*c), n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cell_argmax(cells: &[f32]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f32)> = None;
    for (k, v) in cells.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|(_, b)| *v > b) {
            best = Some((k, *v));
        }
    }
    best.map(|(k, v)| (k, f64::from(v)))
}

/// Largest cell value and the direction of its cell; ties go to the smallest
/// cell index.
pub fn spherical_max_intensity(m: &SphericalModel, grid: &SphericalGrid) -> Result<(f64, Vec3), RenderError> {
    let (k, v) = cell_argmax(&m.cells).ok_or(RenderError::AllCellsEmpty)?;
    Ok((v, grid.points()[k]))
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue (degrees in `[0, 360)`) and saturation of `d` relative to `main`,
/// with hue measured from `reference` in the plane perpendicular to `main`.
pub fn direction_hs(d: &Vec3, main: &Vec3, reference: &Vec3) -> Result<(f64, f64), RenderError> {
    let main = main.normalize();
    if main.dot(&reference.normalize()).abs() > 1.0 - 1e-6 {
        return Err(RenderError::DegenerateFrame);
    }
    let e1 = (reference - main * main.dot(reference)).normalize();
    let e2 = main.cross(&e1);
    let d = d.normalize();
    let angle = d.dot(&main).clamp(-1.0, 1.0).acos().to_degrees();
    let s = (angle / 90.0).clamp(0.0, 1.0);
    let h = d.dot(&e2).atan2(d.dot(&e1)).to_degrees().rem_euclid(360.0);
    Ok((h, s))
}

/// RGB in `[0, 1]`: saturation grows with the deviation from `main`, hue
/// encodes the azimuth around it, value is 1.
pub fn direction_color(d: &Vec3, main: &Vec3, reference: &Vec3) -> Result<[f64; 3], RenderError> {
    let (h, s) = direction_hs(d, main, reference)?;
    Ok(hsv_to_rgb(h, s, 1.0))
}

/// Rectangular grid of sample points in world space. Pixel `(i, j)` lies at
/// `origin + pixel_size * (i * axes[0] + j * axes[1])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePlane {
    pub origin: Vec3,
    pub axes: [Vec3; 2],
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl SlicePlane {
    pub fn new(origin: Vec3, axes: [Vec3; 2], width: usize, height: usize, pixel_size: f64) -> Result<Self, RenderError> {
        let [u, v] = axes;
        if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
            return Err(RenderError::InvalidPlane("axes must be orthonormal".into()));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::InvalidPlane("extent must be positive".into()));
        }
        if !(pixel_size > 0.0) {
            return Err(RenderError::InvalidPlane("pixel size must be positive".into()));
        }
        Ok(Self {
            origin,
            axes,
            width,
            height,
            pixel_size,
        })
    }

    /// Lattice plane of constant z.
    pub fn axial(lattice: &VoxelLattice, index: usize) -> Result<Self, RenderError> {
        Self::lattice_plane(lattice, 2, index)
    }

    /// Lattice plane of constant y.
    pub fn lateral(lattice: &VoxelLattice, index: usize) -> Result<Self, RenderError> {
        Self::lattice_plane(lattice, 1, index)
    }

    fn lattice_plane(lattice: &VoxelLattice, normal_axis: usize, index: usize) -> Result<Self, RenderError> {
        if index >= lattice.dims[normal_axis] {
            return Err(RenderError::InvalidPlane(format!(
                "index {index} outside 0..{}",
                lattice.dims[normal_axis]
            )));
        }
        let mut origin = Vec3::from(lattice.origin);
        origin[normal_axis] += lattice.spacing * index as f64;
        let (a, b) = if normal_axis == 2 { (0, 1) } else { (0, 2) };
        Self::new(
            origin,
            [Vec3::ith(a, 1.0), Vec3::ith(b, 1.0)],
            lattice.dims[a],
            lattice.dims[b],
            lattice.spacing,
        )
    }

    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        self.origin + (self.axes[0] * i as f64 + self.axes[1] * j as f64) * self.pixel_size
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Row-major float image with one or three channels and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Image {
    fn from_pixels(plane: &SlicePlane, channels: usize, pixels: Vec<Option<[f64; 3]>>) -> Self {
        let mut data = Vec::with_capacity(pixels.len() * channels);
        let mut mask = Vec::with_capacity(pixels.len());
        for p in pixels {
            mask.push(p.is_some());
            let p = p.unwrap_or([0.0; 3]);
            data.extend_from_slice(&p[..channels]);
        }
        Self {
            width: plane.width,
            height: plane.height,
            channels,
            data,
            mask,
        }
    }

    pub fn value(&self, i: usize, j: usize) -> &[f64] {
        let o = (j * self.width + i) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// 8-bit samples; values are clamped to `[0, 1]`, or min-max stretched
    /// over the valid pixels when `normalize` is set. Masked pixels are 0.
    pub fn to_u8(&self, normalize: bool) -> Vec<u8> {
        let (lo, hi) = if normalize {
            self.data
                .chunks(self.channels)
                .zip(&self.mask)
                .filter(|(_, m)| **m)
                .flat_map(|(p, _)| p.iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        } else {
            (0.0, 1.0)
        };
        let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
        self.data
            .chunks(self.channels)
            .zip(&self.mask)
            .flat_map(|(p, m)| {
                p.iter().map(move |v| {
                    if !*m {
                        return 0;
                    }
                    let x = if normalize { (v - lo) * scale } else { *v };
                    (x.clamp(0.0, 1.0) * 255.0).round() as u8
                })
            })
            .collect()
    }

    /// Binary PGM (one channel) or PPM (three channels).
    pub fn to_pnm(&self, normalize: bool) -> Vec<u8> {
        let bytes = self.to_u8(normalize);
        if self.channels == 1 {
            encode_pgm(self.width, self.height, &bytes)
        } else {
            encode_ppm(self.width, self.height, &bytes)
        }
    }
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "PGM payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "PPM payload size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    Mean,
    Median,
    Trace,
    Dominant,
    CellMean,
    CellMax,
    NormalColor,
}

impl SliceMode {
    pub const ALL: [SliceMode; 7] = [
        SliceMode::Mean,
        SliceMode::Median,
        SliceMode::Trace,
        SliceMode::Dominant,
        SliceMode::CellMean,
        SliceMode::CellMax,
        SliceMode::NormalColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SliceMode::Mean => "mean",
            SliceMode::Median => "median",
            SliceMode::Trace => "trace",
            SliceMode::Dominant => "dominant",
            SliceMode::CellMean => "cell_mean",
            SliceMode::CellMax => "cell_max",
            SliceMode::NormalColor => "normal_color",
        }
    }

    pub fn supports(self, kind: VolumeKind) -> bool {
        matches!(
            (self, kind),
            (SliceMode::Mean, VolumeKind::ScalarMean)
                | (SliceMode::Median, VolumeKind::ScalarMedian)
                | (SliceMode::Trace | SliceMode::Dominant, VolumeKind::Tensor)
                | (SliceMode::CellMean | SliceMode::CellMax | SliceMode::NormalColor, VolumeKind::Spherical)
        )
    }

    /// Default mode for a volume kind.
    pub fn default_for(kind: VolumeKind) -> Self {
        match kind {
            VolumeKind::ScalarMean => SliceMode::Mean,
            VolumeKind::ScalarMedian => SliceMode::Median,
            VolumeKind::Tensor => SliceMode::Trace,
            VolumeKind::Spherical => SliceMode::CellMean,
        }
    }

    /// Trace and dominant images are min-max stretched for display.
    pub fn normalized_for_display(self) -> bool {
        matches!(self, SliceMode::Trace | SliceMode::Dominant)
    }

    pub fn channels(self) -> usize {
        if self == SliceMode::NormalColor {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for SliceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SliceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SliceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown mode '{s}' (expected mean, median, trace, dominant, cell_mean, cell_max or normal_color)")
            })
    }
}

/// Reference frame of the direction color map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorFrame {
    pub main: Vec3,
    pub reference: Vec3,
}

impl ColorFrame {
    /// `main` is the normalized average of the strongest-cell directions of
    /// all non-empty voxels; the reference is world x, or y when x is too
    /// close to `main`.
    pub fn for_volume(volume: &Volume) -> Self {
        let mut sum = Vec3::zeros();
        if let (Payload::Spherical(_), Some(grid)) = (&volume.payload, &volume.grid) {
            for v in 0..volume.lattice.voxel_count() {
                if let Some((k, _)) = volume.cells(v).and_then(cell_argmax) {
                    sum += eigen::canonical_sign(grid.points()[k]);
                }
            }
        }
        let main = sum.try_normalize(1e-12).unwrap_or(Vec3::z());
        Self::with_main(main)
    }

    pub fn with_main(main: Vec3) -> Self {
        let reference = if main.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        Self { main, reference }
    }
}

/// Nearest-voxel slice of a volume.
pub fn extract_slice(volume: &Volume, plane: &SlicePlane, mode: SliceMode) -> Result<Image, RenderError> {
    extract_slice_with(volume, plane, mode, &ColorFrame::for_volume(volume), Exec::default())
}

pub fn extract_slice_with(
    volume: &Volume,
    plane: &SlicePlane,
    mode: SliceMode,
    frame: &ColorFrame,
    exec: Exec,
) -> Result<Image, RenderError> {
    if !mode.supports(volume.kind) {
        return Err(RenderError::ModeMismatch {
            mode,
            kind: volume.kind,
        });
    }
    if mode == SliceMode::NormalColor {
        direction_hs(&frame.main, &frame.main, &frame.reference)?;
    }
    let pixels = par::map_range(exec, plane.pixel_count(), |p| {
        let voxel = volume.lattice.nearest(&plane.point(p % plane.width, p / plane.width))?;
        voxel_value(volume, voxel, mode, frame)
    });
    Ok(Image::from_pixels(plane, mode.channels(), pixels))
}

fn voxel_value(volume: &Volume, voxel: usize, mode: SliceMode, frame: &ColorFrame) -> Option<[f64; 3]> {
    let gray = |v: f64| Some([v, 0.0, 0.0]);
    match mode {
        SliceMode::Mean | SliceMode::Median => gray(volume.scalar(voxel)?.get()?),
        SliceMode::Trace => gray(tensor_trace_intensity(&volume.tensor(voxel)?).ok()?),
        SliceMode::Dominant => gray(dominant_intensity(&volume.tensor(voxel)?).ok()?.0),
        SliceMode::CellMean => gray(cell_mean(volume.cells(voxel)?)?),
        SliceMode::CellMax => gray(cell_argmax(volume.cells(voxel)?)?.1),
        SliceMode::NormalColor => {
            let cells = volume.cells(voxel)?;
            let (k, _) = cell_argmax(cells)?;
            let scale = cell_mean(cells)?;
            let d = volume.grid.as_ref()?.points()[k];
            let rgb = direction_color(&d, &frame.main, &frame.reference).ok()?;
            Some(rgb.map(|c| c * scale))
        }
    }
}

/// Intensity seen from direction `d` at each plane pixel: `dᵀTd` clamped to
/// `[0, 1]` for tensor volumes, the cell value for spherical volumes.
pub fn free_view_image(volume: &Volume, plane: &SlicePlane, d: &Vec3) -> Result<Image, RenderError> {
    free_view_image_exec(volume, plane, d, Exec::default())
}

pub fn free_view_image_exec(volume: &Volume, plane: &SlicePlane, d: &Vec3, exec: Exec) -> Result<Image, RenderError> {
    if volume.kind.is_scalar() {
        return Err(RenderError::UnsupportedVolumeKind(volume.kind));
    }
    let d = d.try_normalize(1e-6).ok_or(RenderError::DegenerateDirection)?;
    let pixels = par::map_range(exec, plane.pixel_count(), |p| {
        let voxel = volume.lattice.nearest(&plane.point(p % plane.width, p / plane.width))?;
        let v = match volume.kind {
            VolumeKind::Tensor => {
                let t = volume.tensor(voxel)?;
                if !t.valid {
                    return None;
                }
                t.project(&d).clamp(0.0, 1.0)
            }
            _ => spherical_lookup(volume, voxel, &d)?,
        };
        Some([v, 0.0, 0.0])
    });
    Ok(Image::from_pixels(plane, 1, pixels))
}
