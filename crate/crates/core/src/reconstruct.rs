//! Reconstruction functions mapping a voxel's sample subset to its model,
//! and the volume-level orchestrator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eigen;
use crate::grids::{GridError, GridSpec, SphericalGrid};
use crate::par::{self, Exec};
use crate::selection::{SampleIndex, SampleSubset, SelectionEllipsoid, SelectionParams};
use crate::types::{
    Payload, Provenance, ScalarVoxel, SphericalModel, Sweep, SymmetricTensor, Volume, VolumeKind,
    VoxelLattice,
};
use crate::{Vec3, SOFTWARE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mean,
    Median,
    Tensor,
    Spherical,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mean, Method::Median, Method::Tensor, Method::Spherical];

    pub fn volume_kind(self) -> VolumeKind {
        match self {
            Method::Mean => VolumeKind::ScalarMean,
            Method::Median => VolumeKind::ScalarMedian,
            Method::Tensor => VolumeKind::Tensor,
            Method::Spherical => VolumeKind::Spherical,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mean => "mean",
            Method::Median => "median",
            Method::Tensor => "tensor",
            Method::Spherical => "spherical",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Method::Mean),
            "median" => Ok(Method::Median),
            "tensor" => Ok(Method::Tensor),
            "spherical" => Ok(Method::Spherical),
            _ => Err(format!("unknown method '{s}' (expected mean, median, tensor or spherical)")),
        }
    }
}

/// Per-cell reducer of the spherical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    #[default]
    Mean,
    Median,
}

impl FromStr for Reducer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Reducer::Mean),
            "median" => Ok(Reducer::Median),
            _ => Err(format!("unknown cell reducer '{s}' (expected mean or median)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub method: Method,
    /// Required for [`Method::Spherical`], ignored otherwise.
    pub grid: Option<GridSpec>,
    pub cell_reducer: Reducer,
    pub min_tensor_samples: usize,
    pub sample_cap: usize,
    pub spd_clamp: bool,
    pub ellipsoid: SelectionEllipsoid,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            method: Method::Mean,
            grid: None,
            cell_reducer: Reducer::Mean,
            min_tensor_samples: Self::MIN_TENSOR_SAMPLES,
            sample_cap: 500,
            spd_clamp: false,
            ellipsoid: SelectionEllipsoid::sphere(1.0),
            seed: 0,
        }
    }
}

impl ReconstructionConfig {
    /// Six coefficients need at least six equations.
    pub const MIN_TENSOR_SAMPLES: usize = 6;

    pub fn new(method: Method) -> Self {
        let grid = (method == Method::Spherical).then_some(GridSpec::Fibonacci { n_cells: 512 });
        Self {
            method,
            grid,
            ..Self::default()
        }
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn selection(&self, sweep_id: &str) -> SelectionParams {
        SelectionParams::new(self.ellipsoid, self.sample_cap, self.seed, sweep_id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructError {
    #[error("spherical reconstruction needs a grid specification")]
    ConfigMismatch,
    #[error("min_tensor_samples must be at least 6 (got {0})")]
    InvalidMinSamples(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Arithmetic mean of the intensities, `None` for an empty subset.
pub fn compound_mean(subset: &SampleSubset) -> Option<f64> {
    mean_of(subset.intensities())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Median of the intensities; even counts average the two middle values.
pub fn compound_median(subset: &SampleSubset) -> Option<f64> {
    median_of(subset.intensities().collect())
}

fn median_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Design-matrix row of the quadratic form `dᵀTd` in the coefficients
/// `(xx, yy, zz, xy, xz, yz)`.
pub fn tensor_row(d: &Vec3) -> [f64; 6] {
    [
        d.x * d.x,
        d.y * d.y,
        d.z * d.z,
        2.0 * d.x * d.y,
        2.0 * d.x * d.z,
        2.0 * d.y * d.z,
    ]
}

/// Cholesky factorization `A = LLᵀ` of a 6x6 SPD matrix, `None` when a pivot
/// is not positive.
fn cholesky6(a: &[[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let mut l = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky6_solve(l: &[[f64; 6]; 6], b: &[f64; 6]) -> [f64; 6] {
    let mut y = [0.0; 6];
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let mut s = y[i];
        for k in i + 1..6 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Condition-number limit of the normal matrix above which a fit is rejected.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

/// Least-squares tensor from `(direction, value)` observations.
///
/// Solves the normal equations of `min Σ (dⱼᵀTdⱼ - vⱼ)²` by Cholesky. The fit
/// is marked invalid with fewer than `min_samples` observations, when the
/// factorization fails, when the condition estimate `(max Lᵢᵢ / min Lᵢᵢ)²`
/// exceeds [`MAX_NORMAL_CONDITION`], or when the result is not finite.
pub fn fit_tensor_observations<'a>(
    observations: impl IntoIterator<Item = (&'a Vec3, f64)>,
    min_samples: usize,
    spd_clamp: bool,
) -> SymmetricTensor {
    let mut ata = [[0.0; 6]; 6];
    let mut atb = [0.0; 6];
    let mut n = 0usize;
    for (d, v) in observations {
        let row = tensor_row(d);
        for i in 0..6 {
            atb[i] += row[i] * v;
            for j in 0..=i {
                ata[i][j] += row[i] * row[j];
            }
        }
        n += 1;
    }
    if n < min_samples.max(ReconstructionConfig::MIN_TENSOR_SAMPLES) {
        return SymmetricTensor::INVALID;
    }
    for i in 0..6 {
        for j in 0..i {
            ata[j][i] = ata[i][j];
        }
    }
    let Some(l) = cholesky6(&ata) else {
        return SymmetricTensor::INVALID;
    };
    let (lo, hi) = (0..6).fold((f64::INFINITY, 0.0_f64), |(lo, hi), i| {
        (lo.min(l[i][i]), hi.max(l[i][i]))
    });
    if !((hi / lo).powi(2) <= MAX_NORMAL_CONDITION) {
        return SymmetricTensor::INVALID;
    }
    let coeffs = cholesky6_solve(&l, &atb);
    if coeffs.iter().any(|c| !c.is_finite()) {
        return SymmetricTensor::INVALID;
    }
    let t = SymmetricTensor::new(coeffs);
    if spd_clamp {
        eigen::clamp_positive(&t)
    } else {
        t
    }
}

pub fn fit_tensor(subset: &SampleSubset, cfg: &ReconstructionConfig) -> SymmetricTensor {
    fit_tensor_observations(
        subset.samples.iter().map(|s| (&s.direction, s.intensity)),
        cfg.min_tensor_samples,
        cfg.spd_clamp,
    )
}

/// Per-cell reduction of the samples falling into each grid cell; cells
/// without samples hold `NaN`.
pub fn fit_spherical(subset: &SampleSubset, grid: &SphericalGrid, reducer: Reducer) -> SphericalModel {
    let mut model = SphericalModel::empty(grid.n_cells());
    fill_spherical(subset, grid, reducer, &mut model.cells);
    model
}

fn fill_spherical(subset: &SampleSubset, grid: &SphericalGrid, reducer: Reducer, out: &mut [f32]) {
    let mut binned: Vec<(usize, f64)> = subset
        .samples
        .iter()
        .map(|s| (grid.cell_of_unit(&s.direction), s.intensity))
        .collect();
    // Stable: keeps subset order inside each cell.
    binned.sort_by_key(|(k, _)| *k);
    for group in binned.chunk_by(|a, b| a.0 == b.0) {
        let values = group.iter().map(|(_, v)| *v);
        let value = match reducer {
            Reducer::Mean => mean_of(values),
            Reducer::Median => median_of(values.collect()),
        };
        out[group[0].0] = value.map_or(f32::NAN, |v| v as f32);
    }
}

/// Reconstructs every voxel of `lattice` with the default execution policy.
pub fn reconstruct_volume(
    sweep: &Sweep,
    lattice: &VoxelLattice,
    cfg: &ReconstructionConfig,
) -> Result<Volume, ReconstructError> {
    reconstruct_volume_exec(sweep, lattice, cfg, Exec::default())
}

pub fn reconstruct_volume_exec(
    sweep: &Sweep,
    lattice: &VoxelLattice,
    cfg: &ReconstructionConfig,
    exec: Exec,
) -> Result<Volume, ReconstructError> {
    if cfg.min_tensor_samples < ReconstructionConfig::MIN_TENSOR_SAMPLES {
        return Err(ReconstructError::InvalidMinSamples(cfg.min_tensor_samples));
    }
    let grid = match cfg.method {
        Method::Spherical => Some(cfg.grid.ok_or(ReconstructError::ConfigMismatch)?.build()?),
        _ => None,
    };
    let mut stored_cfg = *cfg;
    if cfg.method != Method::Spherical {
        stored_cfg.grid = None;
    }
    let index = SampleIndex::build(sweep, cfg.selection(&sweep.id));
    let n_vox = lattice.voxel_count();
    let select = |i: usize| index.select(&lattice.center_of(i), i);

    let payload = match cfg.method {
        Method::Mean | Method::Median => {
            let reduce = if cfg.method == Method::Mean {
                compound_mean
            } else {
                compound_median
            };
            Payload::Scalar(par::map_range(exec, n_vox, |i| {
                ScalarVoxel::from_option(reduce(&select(i)))
            }))
        }
        Method::Tensor => Payload::Tensor(par::map_range(exec, n_vox, |i| {
            fit_tensor(&select(i), cfg).quantized()
        })),
        Method::Spherical => {
            let grid = grid.as_ref().expect("grid built above");
            let n_cells = grid.n_cells();
            let per_voxel = par::map_range(exec, n_vox, |i| {
                let mut cells = vec![f32::NAN; n_cells];
                fill_spherical(&select(i), grid, cfg.cell_reducer, &mut cells);
                cells
            });
            Payload::Spherical(per_voxel.concat())
        }
    };
    let covered = match &payload {
        Payload::Scalar(v) => v.iter().any(|s| !s.empty),
        Payload::Tensor(v) => v.iter().any(|t| t.valid),
        Payload::Spherical(v) => v.iter().any(|c| !c.is_nan()),
    };
    if !covered && cfg.method == Method::Tensor {
        log::warn!("no valid tensor fit in the lattice from sweep '{}' (too few samples or directions)", sweep.id);
    } else if !covered {
        log::warn!("no voxel of the lattice received samples from sweep '{}'", sweep.id);
    }
    let provenance = Provenance {
        sweep_id: sweep.id.clone(),
        software_version: SOFTWARE_VERSION.to_string(),
        parameters: Some(stored_cfg),
    };
    Ok(Volume::new(*lattice, cfg.method.volume_kind(), payload, grid, provenance)
        .expect("payload built for every voxel"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::build_fibonacci;
    use crate::rng::{keyed_rng, unit_vector};
    use crate::types::Sample;
    use approx::assert_abs_diff_eq;

    fn subset(values: &[f64]) -> SampleSubset {
        let dirs = [Vec3::x(), Vec3::y(), Vec3::z()];
        SampleSubset {
            voxel_index: 0,
            samples: values
                .iter()
                .enumerate()
                .map(|(i, v)| Sample {
                    intensity: *v,
                    position: Vec3::zeros(),
                    direction: dirs[i % 3],
                    ray_id: i as u64,
                    frame_id: 0,
                })
                .collect(),
        }
    }

    fn with_dirs(values: &[(Vec3, f64)]) -> SampleSubset {
        SampleSubset {
            voxel_index: 0,
            samples: values
                .iter()
                .enumerate()
                .map(|(i, (d, v))| Sample {
                    intensity: *v,
                    position: Vec3::zeros(),
                    direction: *d,
                    ray_id: i as u64,
                    frame_id: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn mean_cases() {
        assert_abs_diff_eq!(compound_mean(&subset(&[0.2, 0.4])).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(compound_mean(&subset(&[0.7])), Some(0.7));
        assert_abs_diff_eq!(compound_mean(&subset(&[0.1, 0.2, 0.6])).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(compound_mean(&subset(&[])), None);
    }

    #[test]
    fn median_cases() {
        assert_eq!(compound_median(&subset(&[0.1, 0.9, 0.2])), Some(0.2));
        assert_abs_diff_eq!(compound_median(&subset(&[0.1, 0.3])).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(compound_median(&subset(&[0.4])), Some(0.4));
        assert_eq!(compound_median(&subset(&[])), None);
    }

    #[test]
    fn tensor_identity_from_six_directions() {
        let s = 0.5f64.sqrt();
        let dirs = [
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(s, s, 0.0),
            Vec3::new(s, 0.0, s),
            Vec3::new(0.0, s, s),
        ];
        let obs: Vec<(Vec3, f64)> = dirs.iter().map(|d| (*d, 1.0)).collect();
        let t = fit_tensor(&with_dirs(&obs), &ReconstructionConfig::new(Method::Tensor));
        assert!(t.valid);
        assert!(t.frobenius_distance(&SymmetricTensor::isotropic(1.0)) < 1e-9);
    }

    #[test]
    fn tensor_recovers_generating_quadratic_form() {
        // v = dᵀ diag(2, 1, 0.5) d / 2, kept in [0, 1].
        let truth = SymmetricTensor::new([1.0, 0.5, 0.25, 0.0, 0.0, 0.0]);
        let mut rng = keyed_rng(5, &[]);
        let obs: Vec<(Vec3, f64)> = (0..12)
            .map(|_| {
                let d = unit_vector(&mut rng);
                let v = (d.x * d.x * 2.0 + d.y * d.y + d.z * d.z * 0.5) / 2.0;
                (d, v)
            })
            .collect();
        let t = fit_tensor(&with_dirs(&obs), &ReconstructionConfig::new(Method::Tensor));
        assert!(t.valid);
        assert!(t.frobenius_distance(&truth) < 1e-6);
    }

    #[test]
    fn tensor_needs_six_samples() {
        let mut rng = keyed_rng(6, &[]);
        let obs: Vec<(Vec3, f64)> = (0..5).map(|_| (unit_vector(&mut rng), 0.5)).collect();
        assert!(!fit_tensor(&with_dirs(&obs), &ReconstructionConfig::new(Method::Tensor)).valid);
    }

    #[test]
    fn tensor_rejects_coplanar_directions() {
        // Directions in one plane leave the out-of-plane coefficients undetermined.
        let obs: Vec<(Vec3, f64)> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.1;
                (Vec3::new(a.cos(), a.sin(), 0.0), 0.5)
            })
            .collect();
        let t = fit_tensor(&with_dirs(&obs), &ReconstructionConfig::new(Method::Tensor));
        assert!(!t.valid);
        assert_eq!(t, SymmetricTensor::INVALID);
    }

    #[test]
    fn spd_clamp_applies() {
        // Data from an indefinite tensor; clamping must remove the negative eigenvalue.
        let truth = SymmetricTensor::new([0.8, -0.3, 0.4, 0.0, 0.0, 0.0]);
        let mut rng = keyed_rng(7, &[]);
        let obs: Vec<(Vec3, f64)> = (0..50)
            .map(|_| {
                let d = unit_vector(&mut rng);
                (d, truth.project(&d))
            })
            .collect();
        let mut cfg = ReconstructionConfig::new(Method::Tensor);
        cfg.spd_clamp = true;
        let t = fit_tensor(&with_dirs(&obs), &cfg);
        assert!(eigen::eigen_decompose(&t).0[2] >= -1e-12);
        assert_abs_diff_eq!(t.coeffs[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn spherical_single_direction() {
        let g = build_fibonacci(42).unwrap();
        let d = Vec3::new(0.3, -0.2, 0.9).normalize();
        let model = fit_spherical(&with_dirs(&[(d, 0.2), (d, 0.4), (d, 0.9)]), &g, Reducer::Mean);
        let filled: Vec<(usize, f32)> = model.non_empty().collect();
        assert_eq!(filled.len(), 1);
        assert_eq!(filled[0].0, g.cell_of(&d).unwrap());
        assert_abs_diff_eq!(filled[0].1, 0.5, epsilon = 1e-7);
        let med = fit_spherical(&with_dirs(&[(d, 0.2), (d, 0.4), (d, 0.9)]), &g, Reducer::Median);
        assert_eq!(med.non_empty().next().unwrap().1, 0.4);
    }

    #[test]
    fn spherical_one_cell_is_mean() {
        let g = build_fibonacci(1).unwrap();
        let mut rng = keyed_rng(8, &[]);
        let obs: Vec<(Vec3, f64)> = (0..37).map(|i| (unit_vector(&mut rng), (i as f64 * 0.37) % 1.0)).collect();
        let s = with_dirs(&obs);
        let model = fit_spherical(&s, &g, Reducer::Mean);
        assert_eq!(model.cells[0], compound_mean(&s).unwrap() as f32);
    }

    #[test]
    fn spherical_antipodal_pair() {
        let g = build_fibonacci(42).unwrap();
        let d = Vec3::new(0.1, 0.7, -0.2).normalize();
        let model = fit_spherical(&with_dirs(&[(d, 0.2), (-d, 0.8)]), &g, Reducer::Mean);
        // Brute-force assignment as the reference.
        let nearest = |q: Vec3| {
            (0..g.n_cells())
                .max_by(|a, b| {
                    q.dot(&g.points()[*a])
                        .total_cmp(&q.dot(&g.points()[*b]))
                        .then(b.cmp(a))
                })
                .unwrap()
        };
        let filled: Vec<(usize, f32)> = model.non_empty().collect();
        assert_eq!(filled.len(), 2);
        assert_eq!(model.cells[nearest(d)], 0.2);
        assert_eq!(model.cells[nearest(-d)], 0.8);
    }

    #[test]
    fn spherical_without_grid_is_rejected() {
        let g = crate::types::FrameGeometry {
            width: 3,
            height: 3,
            lateral_spacing: 1.0,
            axial_spacing: 1.0,
        };
        let frame = crate::types::Frame {
            pixels: vec![0.5; 9],
            pose: crate::types::Pose::identity(),
        };
        let sweep = Sweep::new("tiny", g, vec![frame]).unwrap();
        let lattice = VoxelLattice::covering_sweep(&sweep, 1.0).unwrap();
        let cfg = ReconstructionConfig {
            method: Method::Spherical,
            grid: None,
            ..ReconstructionConfig::default()
        };
        assert_eq!(
            reconstruct_volume(&sweep, &lattice, &cfg).unwrap_err(),
            ReconstructError::ConfigMismatch
        );
    }
}
