//! Sample selection: which samples of a sweep contribute to a voxel.
//!
//! A sample is relevant when the voxel center lies inside the axis-aligned
//! ellipsoid of influence around the sample position. Of all relevant samples
//! on one ray only the one nearest to the voxel center is kept. Subsets larger
//! than the cap are subsampled uniformly with a stream keyed by
//! `(seed, sweep id, voxel index)`.

use std::collections::HashMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng::{fnv1a, keyed_rng};
use crate::types::{Sample, Sweep};
use crate::Vec3;

/// Semi-axes (mm) of the region of influence along world x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionEllipsoid {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for SelectionEllipsoid {
    fn default() -> Self {
        Self::sphere(1.0)
    }
}

impl SelectionEllipsoid {
    pub fn new(a: f64, b: f64, c: f64) -> Option<Self> {
        (a > 0.0 && b > 0.0 && c > 0.0 && a.is_finite() && b.is_finite() && c.is_finite())
            .then_some(Self { a, b, c })
    }

    pub fn sphere(r: f64) -> Self {
        Self { a: r, b: r, c: r }
    }

    pub fn max_axis(&self) -> f64 {
        self.a.max(self.b).max(self.c)
    }

    pub fn contains(&self, center: &Vec3, p: &Vec3) -> bool {
        ellipsoid_contains(center, p, self)
    }
}

/// Boundary inclusive.
pub fn ellipsoid_contains(center: &Vec3, p: &Vec3, e: &SelectionEllipsoid) -> bool {
    let d = center - p;
    (d.x / e.a).powi(2) + (d.y / e.b).powi(2) + (d.z / e.c).powi(2) <= 1.0
}

/// Samples selected for one voxel, ordered by ray id.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSubset {
    pub voxel_index: usize,
    pub samples: Vec<Sample>,
}

impl SampleSubset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn intensities(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.intensity)
    }

    pub fn directions(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.direction).collect()
    }
}

/// Parameters shared by every voxel query.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionParams {
    pub ellipsoid: SelectionEllipsoid,
    pub cap: usize,
    pub seed: u64,
    pub sweep_id: String,
}

impl SelectionParams {
    pub fn new(ellipsoid: SelectionEllipsoid, cap: usize, seed: u64, sweep_id: impl Into<String>) -> Self {
        Self {
            ellipsoid,
            cap: cap.max(1),
            seed,
            sweep_id: sweep_id.into(),
        }
    }
}

/// In-ellipsoid candidate: `(ray id, squared distance, global sample index)`.
type Candidate = (u64, f64, usize);

/// Keeps the nearest candidate per ray and applies the cap.
fn finish(
    mut candidates: Vec<Candidate>,
    voxel_index: usize,
    params: &SelectionParams,
    sample: impl Fn(usize) -> Sample,
) -> SampleSubset {
    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.dedup_by_key(|c| c.0);
    if candidates.len() > params.cap {
        let mut rng = keyed_rng(
            params.seed,
            &[fnv1a(params.sweep_id.as_bytes()), voxel_index as u64],
        );
        let mut keep = index::sample(&mut rng, candidates.len(), params.cap).into_vec();
        keep.sort_unstable();
        candidates = keep.into_iter().map(|i| candidates[i]).collect();
    }
    SampleSubset {
        voxel_index,
        samples: candidates.into_iter().map(|c| sample(c.2)).collect(),
    }
}

/// Reference selection by a linear scan over every sample of the sweep.
pub fn select_samples(
    voxel_center: &Vec3,
    voxel_index: usize,
    sweep: &Sweep,
    params: &SelectionParams,
) -> SampleSubset {
    let candidates = sweep
        .samples()
        .enumerate()
        .filter(|(_, s)| params.ellipsoid.contains(voxel_center, &s.position))
        .map(|(i, s)| (s.ray_id, (s.position - voxel_center).norm_squared(), i))
        .collect();
    finish(candidates, voxel_index, params, |i| sweep.sample(i))
}

/// All samples of a sweep, binned in a uniform spatial hash.
#[derive(Debug, Clone)]
pub struct SampleIndex {
    samples: Vec<Sample>,
    cell: f64,
    bins: HashMap<[i64; 3], Vec<u32>>,
    params: SelectionParams,
}

impl SampleIndex {
    /// Builds the index; the hash cell size is the largest semi-axis.
    pub fn build(sweep: &Sweep, params: SelectionParams) -> Self {
        let samples: Vec<Sample> = sweep.samples().collect();
        let cell = params.ellipsoid.max_axis();
        let mut bins: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            bins.entry(bin_of(&s.position, cell)).or_default().push(i as u32);
        }
        Self {
            samples,
            cell,
            bins,
            params,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn params(&self) -> &SelectionParams {
        &self.params
    }

    /// Same result as [`select_samples`] with the index's parameters.
    pub fn select(&self, voxel_center: &Vec3, voxel_index: usize) -> SampleSubset {
        let e = &self.params.ellipsoid;
        let lo = bin_of(&(voxel_center - Vec3::new(e.a, e.b, e.c)), self.cell);
        let hi = bin_of(&(voxel_center + Vec3::new(e.a, e.b, e.c)), self.cell);
        let mut candidates = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let Some(bin) = self.bins.get(&[x, y, z]) else {
                        continue;
                    };
                    for &i in bin {
                        let s = &self.samples[i as usize];
                        if e.contains(voxel_center, &s.position) {
                            candidates.push((
                                s.ray_id,
                                (s.position - voxel_center).norm_squared(),
                                i as usize,
                            ));
                        }
                    }
                }
            }
        }
        finish(candidates, voxel_index, &self.params, |i| self.samples[i])
    }
}

fn bin_of(p: &Vec3, cell: f64) -> [i64; 3] {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}
