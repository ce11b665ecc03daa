//! Reprojection of volumes at the original sample poses and the
//! representation-error analyses built on it.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::spherical_variance;
use crate::par::{self, Exec};
use crate::reconstruct::ReconstructionConfig;
use crate::selection::{SampleIndex, SampleSubset};
use crate::types::{Payload, Sample, Sweep, Volume, VolumeKind};
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty sample subset")]
    EmptySubset,
    #[error("at least two bins are required (got {0})")]
    TooFewBins(usize),
}

/// Population variance of the subset intensities.
pub fn intensity_variance(subset: &SampleSubset) -> Result<f64, EvalError> {
    variance(&subset.intensities().collect::<Vec<_>>())
}

fn variance(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    // Shifted by the first value, which keeps constant inputs exactly at 0.
    let n = values.len() as f64;
    let shift = values[0];
    let (s, s2) = values.iter().fold((0.0, 0.0), |(s, s2), v| (s + (v - shift), s2 + (v - shift).powi(2)));
    let mean = s / n;
    Ok((s2 / n - mean * mean).max(0.0))
}

/// Intensity the volume predicts for a sample, `None` when it has no model
/// there.
pub fn reproject(volume: &Volume, s: &Sample) -> Option<f64> {
    reproject_at(volume, &s.position, &s.direction)
}

pub fn reproject_at(volume: &Volume, position: &Vec3, direction: &Vec3) -> Option<f64> {
    match volume.kind {
        VolumeKind::ScalarMean | VolumeKind::ScalarMedian => trilinear(volume, position),
        VolumeKind::Tensor => {
            let t = volume.tensor(volume.lattice.nearest(position)?)?;
            t.valid.then(|| t.project(direction))
        }
        VolumeKind::Spherical => spherical_lookup(volume, volume.lattice.nearest(position)?, direction),
    }
}

/// Cell value for `direction` at one voxel; empty cells fall back to the mean
/// of the voxel's non-empty cells.
pub fn spherical_lookup(volume: &Volume, voxel: usize, direction: &Vec3) -> Option<f64> {
    let cells = volume.cells(voxel)?;
    let grid = volume.grid.as_ref()?;
    let k = grid.cell_of(direction).ok()?;
    let v = cells[k];
    if !v.is_nan() {
        return Some(f64::from(v));
    }
    let (sum, n) = cells
        .iter()
        .filter(|c| !c.is_nan())
        .fold((0.0, 0usize), |(s, n), c| (s + f64::from(*c), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Trilinear interpolation over the non-empty corners of the enclosing cell,
/// with renormalized weights.
fn trilinear(volume: &Volume, p: &Vec3) -> Option<f64> {
    let Payload::Scalar(voxels) = &volume.payload else {
        return None;
    };
    let lat = &volume.lattice;
    let u = lat.continuous(p);
    let base = [u.x.floor(), u.y.floor(), u.z.floor()];
    let frac = [u.x - base[0], u.y - base[1], u.z - base[2]];
    let (mut acc, mut wsum) = (0.0, 0.0);
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let c = base[a] + bit as f64;
            if c < 0.0 || c >= lat.dims[a] as f64 {
                inside = false;
                break;
            }
            idx[a] = c as usize;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if !inside || w == 0.0 {
            continue;
        }
        if let Some(v) = voxels[lat.index(idx[0], idx[1], idx[2])].get() {
            acc += w * v;
            wsum += w;
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

/// Reprojection error over every sample of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: VolumeKind,
    pub skip_missing: bool,
    /// Mean squared error under the chosen convention.
    pub mse: f64,
    /// Samples entering `mse`.
    pub sample_count: usize,
    pub total_samples: usize,
    pub missing_count: usize,
    /// MSE over samples with a reprojection only.
    pub mse_skip_missing: f64,
    /// MSE with missing reprojections counted as 0.
    pub mse_count_missing: f64,
    /// Per-sample intensities and reprojections in sweep order.
    #[serde(skip)]
    pub samples: Vec<SampleError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleError {
    pub intensity: f64,
    pub reprojected: Option<f64>,
}

impl SampleError {
    pub fn squared_error(&self) -> Option<f64> {
        self.reprojected.map(|r| (self.intensity - r).powi(2))
    }

    /// Squared error with a missing reprojection taken as 0.
    pub fn squared_error_or_zero(&self) -> f64 {
        (self.intensity - self.reprojected.unwrap_or(0.0)).powi(2)
    }
}

impl ErrorReport {
    /// Squared errors entering `mse`, in sweep order.
    pub fn evaluated_errors(&self) -> impl Iterator<Item = f64> + '_ {
        let skip = self.skip_missing;
        self.samples.iter().filter_map(move |s| match s.reprojected {
            None if skip => None,
            _ => Some(s.squared_error_or_zero()),
        })
    }
}

pub fn representation_error(volume: &Volume, sweep: &Sweep, skip_missing: bool) -> ErrorReport {
    representation_error_exec(volume, sweep, skip_missing, Exec::default())
}

pub fn representation_error_exec(
    volume: &Volume,
    sweep: &Sweep,
    skip_missing: bool,
    exec: Exec,
) -> ErrorReport {
    if volume.provenance.sweep_id != sweep.id {
        log::warn!(
            "volume was reconstructed from '{}', evaluating against '{}'",
            volume.provenance.sweep_id,
            sweep.id
        );
    }
    let samples = sample_errors(volume, sweep, exec);
    let total = samples.len();
    let (mut sum_hit, mut n_hit, mut sum_all) = (0.0, 0usize, 0.0);
    for s in &samples {
        let e = s.squared_error_or_zero();
        if s.reprojected.is_some() {
            sum_hit += e;
            n_hit += 1;
        }
        sum_all += e;
    }
    let mse_skip = if n_hit > 0 { sum_hit / n_hit as f64 } else { 0.0 };
    let mse_all = if total > 0 { sum_all / total as f64 } else { 0.0 };
    ErrorReport {
        kind: volume.kind,
        skip_missing,
        mse: if skip_missing { mse_skip } else { mse_all },
        sample_count: if skip_missing { n_hit } else { total },
        total_samples: total,
        missing_count: total - n_hit,
        mse_skip_missing: mse_skip,
        mse_count_missing: mse_all,
        samples,
    }
}

fn sample_errors(volume: &Volume, sweep: &Sweep, exec: Exec) -> Vec<SampleError> {
    par::map_range(exec, sweep.sample_count(), |i| {
        let s = sweep.sample(i);
        SampleError {
            intensity: s.intensity,
            reprojected: reproject(volume, &s),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceAxis {
    IntensityVar,
    SphericalVar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_center: f64,
    pub mse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSeries {
    pub axis: VarianceAxis,
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<Bin>,
    /// Evaluated samples whose position lies outside the lattice.
    pub unbinned: usize,
}

impl BinnedSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,mse,count\n");
        for b in &self.bins {
            writeln!(out, "{},{},{}", b.bin_center, b.mse, b.count).expect("write to string");
        }
        out
    }
}

/// Variance of the subset of the voxel nearest to each sample, `None` for
/// samples outside the lattice.
pub fn sample_variances(
    volume: &Volume,
    sweep: &Sweep,
    axis: VarianceAxis,
    exec: Exec,
) -> Vec<Option<f64>> {
    let cfg = volume.provenance.parameters.unwrap_or_default();
    let sweep_id = if volume.provenance.sweep_id.is_empty() {
        sweep.id.as_str()
    } else {
        volume.provenance.sweep_id.as_str()
    };
    let index = SampleIndex::build(sweep, ReconstructionConfig::selection(&cfg, sweep_id));
    let nearest: Vec<Option<usize>> = index
        .samples()
        .iter()
        .map(|s| volume.lattice.nearest(&s.position))
        .collect();
    let mut voxels: Vec<usize> = nearest.iter().flatten().copied().collect();
    voxels.sort_unstable();
    voxels.dedup();
    let sigma = par::map_slice(exec, &voxels, |&v| {
        let subset = index.select(&volume.lattice.center_of(v), v);
        match axis {
            VarianceAxis::IntensityVar => intensity_variance(&subset).ok(),
            VarianceAxis::SphericalVar => spherical_variance(&subset.directions()).ok(),
        }
    });
    let table: HashMap<usize, Option<f64>> = voxels.into_iter().zip(sigma).collect();
    nearest.iter().map(|v| v.and_then(|v| table[&v])).collect()
}

/// Groups evaluated samples by the variance of their voxel's subset and
/// reports the MSE per bin. Bins span `[0, 2]` for spherical variance and the
/// observed range for intensity variance; empty bins report MSE 0.
pub fn binned_error(
    volume: &Volume,
    sweep: &Sweep,
    axis: VarianceAxis,
    n_bins: usize,
    skip_missing: bool,
) -> Result<BinnedSeries, EvalError> {
    binned_error_exec(volume, sweep, axis, n_bins, skip_missing, Exec::default())
}

pub fn binned_error_exec(
    volume: &Volume,
    sweep: &Sweep,
    axis: VarianceAxis,
    n_bins: usize,
    skip_missing: bool,
    exec: Exec,
) -> Result<BinnedSeries, EvalError> {
    if n_bins < 2 {
        return Err(EvalError::TooFewBins(n_bins));
    }
    let errors = sample_errors(volume, sweep, exec);
    let sigmas = sample_variances(volume, sweep, axis, exec);
    let evaluated: Vec<(f64, f64)> = errors
        .iter()
        .zip(&sigmas)
        .filter(|(e, _)| !(skip_missing && e.reprojected.is_none()))
        .map(|(e, s)| (s.unwrap_or(f64::NAN), e.squared_error_or_zero()))
        .collect();
    Ok(bin_values(&evaluated, axis, n_bins))
}

/// Bins `(σ, squared error)` pairs; pairs with a `NaN` σ are counted as unbinned.
pub fn bin_values(values: &[(f64, f64)], axis: VarianceAxis, n_bins: usize) -> BinnedSeries {
    let (lo, hi) = match axis {
        VarianceAxis::SphericalVar => (0.0, 2.0),
        VarianceAxis::IntensityVar => values
            .iter()
            .filter(|(s, _)| !s.is_nan())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (s, _)| (lo.min(*s), hi.max(*s))),
    };
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let mut unbinned = 0;
    for (s, e) in values {
        if s.is_nan() {
            unbinned += 1;
            continue;
        }
        let k = if width > 0.0 {
            (((s - lo) / width).floor().max(0.0) as usize).min(n_bins - 1)
        } else {
            0
        };
        sums[k] += e;
        counts[k] += 1;
    }
    let bins = (0..n_bins)
        .map(|k| Bin {
            bin_center: lo + (k as f64 + 0.5) * width,
            mse: if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 },
            count: counts[k],
        })
        .collect();
    BinnedSeries {
        axis,
        lo,
        hi,
        bins,
        unbinned,
    }
}

/// JSON summary written next to the binned CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: VolumeKind,
    pub sweep_id: String,
    pub mse: f64,
    pub sample_count: usize,
    pub total_samples: usize,
    pub missing_count: usize,
    pub skip_missing: bool,
    pub mse_skip_missing: f64,
    pub mse_count_missing: f64,
    pub params: Option<ReconstructionConfig>,
    pub binned: Option<BinnedSeries>,
}

impl ReportSummary {
    pub fn new(volume: &Volume, report: &ErrorReport, binned: Option<BinnedSeries>) -> Self {
        Self {
            method: report.kind,
            sweep_id: volume.provenance.sweep_id.clone(),
            mse: report.mse,
            sample_count: report.sample_count,
            total_samples: report.total_samples,
            missing_count: report.missing_count,
            skip_missing: report.skip_missing,
            mse_skip_missing: report.mse_skip_missing,
            mse_count_missing: report.mse_count_missing,
            params: volume.provenance.parameters,
            binned,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Per-sample squared errors as CSV (`sample,squared_error`); missing samples
/// have an empty error field.
pub fn sample_errors_csv(report: &ErrorReport) -> String {
    let mut out = String::from("sample,squared_error\n");
    for (i, s) in report.samples.iter().enumerate() {
        match s.squared_error() {
            Some(e) => writeln!(out, "{i},{e}"),
            None => writeln!(out, "{i},"),
        }
        .expect("write to string");
    }
    out
}
