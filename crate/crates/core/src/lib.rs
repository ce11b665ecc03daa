//! Direction-preserving compounding of tracked freehand ultrasound.
//!
//! A sweep of tracked B-mode frames is turned into a regular lattice of
//! per-voxel models. Besides the classic scalar reconstructions (mean and
//! median compounding) two directional models are supported:
//!
//! - a symmetric 3x3 tensor per voxel whose quadratic form `dᵀTd`
//!   approximates the intensity seen from direction `d`;
//! - a discretized spherical function per voxel that stores one intensity
//!   per cell of a spherical grid (latitude-longitude, icosahedral or
//!   spherical Fibonacci).
//!
//! The pipeline is split into [`selection`] (which samples contribute to a
//! voxel), [`reconstruct`] (fitting the per-voxel model), [`evaluate`]
//! (reprojection error analysis) and [`render`] (scalar extraction and
//! free-view directional images). [`simulate`] produces synthetic sweeps with
//! direction-dependent reflectance, and [`io`] holds the binary file formats.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod eigen;
pub mod evaluate;
pub mod grids;
pub mod io;
pub mod par;
pub mod reconstruct;
pub mod render;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod types;

pub use grids::{GridSpec, SphericalGrid};
pub use reconstruct::{Method, ReconstructionConfig};
pub use selection::SelectionEllipsoid;
pub use types::{
    Frame, FrameGeometry, Pose, Sample, Sweep, SymmetricTensor, Volume, VolumeKind, VoxelLattice,
};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Version string recorded in volume provenance.
pub const SOFTWARE_VERSION: &str = concat!("sonocs ", env!("CARGO_PKG_VERSION"));
