//! Spherical grids and directional statistics.
//!
//! A grid is a set of unit points `g_k`; its Voronoi cells partition the
//! sphere. [`SphericalGrid::cell_of`] returns the index of the point with the
//! largest dot product to the query direction (smallest index on ties), for
//! every scheme:
//!
//! - latitude-longitude: closed form, a handful of candidate rows/columns;
//! - Fibonacci: the lattice-basis inverse mapping seeds a search radius, then
//!   the narrow polar band that can contain a closer point is scanned;
//! - icosahedral: brute force.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::rng::{keyed_rng, unit_vector};
use crate::Vec3;

/// Golden ratio.
pub const PHI: f64 = 1.618_033_988_749_895;

const MAX_GRID_POINTS: u64 = 10_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("resolution {0} deg does not divide 180 deg evenly")]
    InvalidResolution(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid would have {0} points (limit 10^7)")]
    ResourceLimit(u64),
    #[error("cell {k} out of range for a grid of {n} cells")]
    IndexOutOfRange { k: usize, n: usize },
    #[error("direction has (near) zero length")]
    DegenerateDirection,
    #[error("empty input")]
    EmptyInput,
}

/// Serializable description of a grid; grids are always rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum GridSpec {
    /// `steps` latitude intervals of `180/steps` degrees each.
    LatLong { steps: u32 },
    Icosahedral { subdivisions: u32 },
    Fibonacci { n_cells: u32 },
}

impl GridSpec {
    pub fn lat_long_deg(resolution_deg: f64) -> Result<Self, GridError> {
        Ok(GridSpec::LatLong {
            steps: lat_long_steps(resolution_deg)?,
        })
    }

    pub fn build(&self) -> Result<SphericalGrid, GridError> {
        match *self {
            GridSpec::LatLong { steps } => {
                if steps == 0 {
                    return Err(GridError::InvalidResolution(f64::INFINITY));
                }
                build_lat_long_steps(steps)
            }
            GridSpec::Icosahedral { subdivisions } => build_icosahedral(subdivisions),
            GridSpec::Fibonacci { n_cells } => build_fibonacci(n_cells as usize),
        }
    }

    /// Tag byte used in volume files.
    pub fn scheme_tag(&self) -> u8 {
        match self {
            GridSpec::LatLong { .. } => 1,
            GridSpec::Icosahedral { .. } => 2,
            GridSpec::Fibonacci { .. } => 3,
        }
    }

    pub fn param(&self) -> u32 {
        match *self {
            GridSpec::LatLong { steps } => steps,
            GridSpec::Icosahedral { subdivisions } => subdivisions,
            GridSpec::Fibonacci { n_cells } => n_cells,
        }
    }

    pub fn from_tag(tag: u8, param: u32) -> Option<Self> {
        match tag {
            1 => Some(GridSpec::LatLong { steps: param }),
            2 => Some(GridSpec::Icosahedral {
                subdivisions: param,
            }),
            3 => Some(GridSpec::Fibonacci { n_cells: param }),
            _ => None,
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GridSpec::LatLong { steps } => write!(f, "latlong:{}", 180.0 / f64::from(steps)),
            GridSpec::Icosahedral { subdivisions } => write!(f, "ico:{subdivisions}"),
            GridSpec::Fibonacci { n_cells } => write!(f, "fib:{n_cells}"),
        }
    }
}

impl FromStr for GridSpec {
    type Err = GridError;

    /// Parses `latlong:<deg>`, `ico:<s>` or `fib:<n>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, value) = s
            .split_once(':')
            .ok_or_else(|| GridError::InvalidArgument(format!("expected <scheme>:<value>, got '{s}'")))?;
        let bad = || GridError::InvalidArgument(format!("bad grid parameter '{value}'"));
        let spec = match scheme {
            "latlong" => GridSpec::lat_long_deg(value.parse().map_err(|_| bad())?)?,
            "ico" => GridSpec::Icosahedral {
                subdivisions: value.parse().map_err(|_| bad())?,
            },
            "fib" => {
                let n: u32 = value.parse().map_err(|_| bad())?;
                if n < 1 {
                    return Err(GridError::InvalidArgument("fibonacci grid needs n_cells >= 1".into()));
                }
                GridSpec::Fibonacci { n_cells: n }
            }
            other => {
                return Err(GridError::InvalidArgument(format!(
                    "unknown grid scheme '{other}' (expected latlong, ico or fib)"
                )))
            }
        };
        if let GridSpec::Icosahedral { subdivisions } = spec {
            icosahedral_vertex_count(subdivisions)?;
        }
        Ok(spec)
    }
}

/// Partition of the unit sphere into Voronoi cells around `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalGrid {
    spec: GridSpec,
    points: Vec<Vec3>,
}

/// `(polar angle from +z, azimuth from +x in [0, 2π))` of a unit vector.
pub fn to_spherical(d: &Vec3) -> (f64, f64) {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    if phi >= 2.0 * PI {
        phi -= 2.0 * PI;
    }
    (theta, phi)
}

pub fn from_spherical(theta: f64, phi: f64) -> Vec3 {
    let s = theta.sin();
    Vec3::new(s * phi.cos(), s * phi.sin(), theta.cos())
}

fn lat_long_steps(resolution_deg: f64) -> Result<u32, GridError> {
    if !(resolution_deg > 0.0 && resolution_deg <= 180.0) {
        return Err(GridError::InvalidResolution(resolution_deg));
    }
    let steps = 180.0 / resolution_deg;
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-9 * steps.max(1.0) {
        return Err(GridError::InvalidResolution(resolution_deg));
    }
    Ok(rounded as u32)
}

/// Number of points of the uncollapsed latitude-longitude grid, where each
/// pole appears once per longitude.
pub fn lat_long_raw_count(resolution_deg: f64) -> Result<usize, GridError> {
    let steps = lat_long_steps(resolution_deg)? as usize;
    Ok((steps + 1) * 2 * steps)
}

/// Latitude-longitude grid with equal polar and azimuthal steps.
///
/// Each pole row is collapsed to a single point, so the grid has
/// `2 + (steps - 1) * 2 * steps` points: north pole first, then rows of
/// increasing polar angle (azimuth increasing within a row), south pole last.
pub fn build_lat_long(resolution_deg: f64) -> Result<SphericalGrid, GridError> {
    build_lat_long_steps(lat_long_steps(resolution_deg)?)
}

fn build_lat_long_steps(steps: u32) -> Result<SphericalGrid, GridError> {
    let steps = steps as usize;
    let lons = 2 * steps;
    let count = 2 + (steps - 1) * lons;
    if count as u64 > MAX_GRID_POINTS {
        return Err(GridError::ResourceLimit(count as u64));
    }
    let r = PI / steps as f64;
    let mut points = Vec::with_capacity(count);
    points.push(Vec3::new(0.0, 0.0, 1.0));
    for i in 1..steps {
        for j in 0..lons {
            points.push(from_spherical(i as f64 * r, j as f64 * r));
        }
    }
    points.push(Vec3::new(0.0, 0.0, -1.0));
    Ok(SphericalGrid {
        spec: GridSpec::LatLong { steps: steps as u32 },
        points,
    })
}

fn icosahedral_vertex_count(subdivisions: u32) -> Result<u64, GridError> {
    let count = 4u64
        .checked_pow(subdivisions)
        .and_then(|p| p.checked_mul(10))
        .map(|c| c + 2)
        .unwrap_or(u64::MAX);
    if count > MAX_GRID_POINTS {
        return Err(GridError::ResourceLimit(count));
    }
    Ok(count)
}

/// Geodesic grid from repeated midpoint subdivision of an icosahedron.
pub fn build_icosahedral(subdivisions: u32) -> Result<SphericalGrid, GridError> {
    let expected = icosahedral_vertex_count(subdivisions)? as usize;
    let t = PHI;
    let mut points: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, points: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = (points[a as usize] + points[b as usize]).normalize();
                points.push(m);
                (points.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut points);
            let bc = midpoint(b, c, &mut points);
            let ca = midpoint(c, a, &mut points);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    debug_assert_eq!(points.len(), expected);
    Ok(SphericalGrid {
        spec: GridSpec::Icosahedral { subdivisions },
        points,
    })
}

/// Spherical Fibonacci grid: `φ_k = 2πk/Φ mod 2π`, `z_k = 1 - (2k+1)/n`.
pub fn build_fibonacci(n_cells: usize) -> Result<SphericalGrid, GridError> {
    if n_cells < 1 {
        return Err(GridError::InvalidArgument("fibonacci grid needs n_cells >= 1".into()));
    }
    if n_cells as u64 > MAX_GRID_POINTS {
        return Err(GridError::ResourceLimit(n_cells as u64));
    }
    let n = n_cells as f64;
    let points = (0..n_cells)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n;
            let phi = 2.0 * PI * fract(k as f64 * (PHI - 1.0));
            let s = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(s * phi.cos(), s * phi.sin(), z)
        })
        .collect();
    Ok(SphericalGrid {
        spec: GridSpec::Fibonacci {
            n_cells: n_cells as u32,
        },
        points,
    })
}

fn fract(x: f64) -> f64 {
    x - x.floor()
}

impl SphericalGrid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn n_cells(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn direction_of(&self, k: usize) -> Result<Vec3, GridError> {
        self.points.get(k).copied().ok_or(GridError::IndexOutOfRange {
            k,
            n: self.points.len(),
        })
    }

    /// Index of the grid point nearest to `d` (renormalized internally).
    pub fn cell_of(&self, d: &Vec3) -> Result<usize, GridError> {
        let n = d.norm();
        if !(n >= 1e-6) || !n.is_finite() {
            return Err(GridError::DegenerateDirection);
        }
        Ok(self.cell_of_unit(&(d / n)))
    }

    /// [`cell_of`](Self::cell_of) for a direction already known to be unit length.
    pub fn cell_of_unit(&self, d: &Vec3) -> usize {
        match self.spec {
            GridSpec::LatLong { steps } => self.lat_long_cell(d, steps as usize),
            GridSpec::Fibonacci { .. } => self.fibonacci_cell(d),
            GridSpec::Icosahedral { .. } => self.brute_force_cell(d),
        }
    }

    /// Argmax of `d·g_k` over all points, smallest index on ties.
    pub fn brute_force_cell(&self, d: &Vec3) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (k, g) in self.points.iter().enumerate() {
            let dot = d.dot(g);
            if dot > best_dot {
                best_dot = dot;
                best = k;
            }
        }
        best
    }

    fn consider(&self, d: &Vec3, k: usize, best: &mut (usize, f64)) {
        let dot = d.dot(&self.points[k]);
        if dot > best.1 || (dot == best.1 && k < best.0) {
            *best = (k, dot);
        }
    }

    fn lat_long_cell(&self, d: &Vec3, steps: usize) -> usize {
        let lons = 2 * steps;
        let r = PI / steps as f64;
        let south = self.points.len() - 1;
        let (theta, phi) = to_spherical(d);
        let j0 = ((phi / r).floor() as usize) % lons;
        let j1 = (j0 + 1) % lons;
        let offset = phi - j0 as f64 * r;
        let nearest_lon = offset.min(r - offset).max(0.0);
        // For a fixed azimuth offset, d·g is a shifted cosine in the row's
        // polar angle, peaking at `alpha`; the best row brackets it.
        let alpha = (theta.sin() * nearest_lon.cos()).atan2(theta.cos());
        let centre = (alpha / r).floor() as isize;
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in (centre - 1).max(0)..=(centre + 2).min(steps as isize) {
            let i = i as usize;
            if i == 0 {
                self.consider(d, 0, &mut best);
            } else if i == steps {
                self.consider(d, south, &mut best);
            } else {
                let row = 1 + (i - 1) * lons;
                self.consider(d, row + j0, &mut best);
                self.consider(d, row + j1, &mut best);
            }
        }
        best.0
    }

    /// Seed index from the Fibonacci lattice basis; exact up to rounding.
    pub fn fibonacci_seed(&self, d: &Vec3) -> usize {
        let n_cells = self.points.len();
        if n_cells <= 2 {
            return 0;
        }
        let n = n_cells as f64;
        let phi = d.y.atan2(d.x).min(PI);
        let cos_theta = d.z.clamp(-1.0, 1.0);
        let sin2 = (1.0 - cos_theta * cos_theta).max(1e-300);
        let level = ((n * PI * 5f64.sqrt() * sin2).ln() / (PHI * PHI).ln()).floor().max(2.0);
        let fk = PHI.powf(level) / 5f64.sqrt();
        let f0 = fk.round();
        let f1 = (fk * PHI).round();
        let step = |f: f64| 2.0 * PI * fract((f + 1.0) * (PHI - 1.0)) - 2.0 * PI * (PHI - 1.0);
        // Columns are the (azimuth, z) steps of index strides f0 and f1.
        let (b00, b01, b10, b11) = (step(f0), step(f1), -2.0 * f0 / n, -2.0 * f1 / n);
        let det = b00 * b11 - b01 * b10;
        if det.abs() < 1e-300 || !det.is_finite() {
            return 0;
        }
        let rhs = (phi, cos_theta - (1.0 - 1.0 / n));
        let c0 = ((b11 * rhs.0 - b01 * rhs.1) / det).floor();
        let c1 = ((-b10 * rhs.0 + b00 * rhs.1) / det).floor();
        let mut best = (0usize, f64::NEG_INFINITY);
        for s in 0..4 {
            let (u, v) = ((s % 2) as f64, (s / 2) as f64);
            let i = f0 * (c0 + u) + f1 * (c1 + v);
            if i.is_finite() && i >= 0.0 && i < n {
                self.consider(d, i as usize, &mut best);
            }
        }
        if best.1 == f64::NEG_INFINITY {
            // Near the poles the basis can point outside the index range.
            let k = (((1.0 - cos_theta) * n - 1.0) / 2.0).round().clamp(0.0, n - 1.0);
            return k as usize;
        }
        best.0
    }

    fn fibonacci_cell(&self, d: &Vec3) -> usize {
        let n_cells = self.points.len();
        if n_cells == 1 {
            return 0;
        }
        let n = n_cells as f64;
        let seed = self.fibonacci_seed(d);
        // Any point closer than the seed lies within `radius` in polar angle.
        let radius = d.dot(&self.points[seed]).clamp(-1.0, 1.0).acos() + 1e-6;
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let z_hi = (theta - radius).max(0.0).cos();
        let z_lo = (theta + radius).min(PI).cos();
        let index_of_z = |z: f64| ((1.0 - z) * n - 1.0) / 2.0;
        let k_min = (index_of_z(z_hi).floor() - 1.0).max(0.0) as usize;
        let k_max = ((index_of_z(z_lo).ceil() + 1.0).max(0.0) as usize).min(n_cells - 1);
        let mut best = (seed, f64::NEG_INFINITY);
        for k in k_min..=k_max {
            let dot = d.dot(&self.points[k]);
            if dot > best.1 {
                best = (k, dot);
            }
        }
        best.0
    }
}

/// `2(1 - R̄)` where `R̄` is the mean resultant length.
pub fn spherical_variance(directions: &[Vec3]) -> Result<f64, GridError> {
    if directions.is_empty() {
        return Err(GridError::EmptyInput);
    }
    let sum: Vec3 = directions.iter().sum();
    let r_bar = sum.norm() / directions.len() as f64;
    Ok((2.0 * (1.0 - r_bar)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellAreaStats {
    /// Estimated solid angle of each cell (steradians).
    pub areas: Vec<f64>,
    pub mean_area: f64,
    pub max_min_ratio: f64,
    /// Sum of all cell areas; `4π` up to rounding since the cells partition the sphere.
    pub total_area: f64,
    pub n_mc: usize,
}

const AREA_CHUNK: usize = 1 << 14;

/// Monte Carlo estimate of every cell's solid angle.
pub fn cell_area_stats(
    grid: &SphericalGrid,
    n_mc: usize,
    seed: u64,
    exec: Exec,
) -> Result<CellAreaStats, GridError> {
    if n_mc < 10_000 {
        return Err(GridError::InvalidArgument("n_mc must be at least 10^4".into()));
    }
    let chunks = n_mc.div_ceil(AREA_CHUNK);
    let partial = par::map_range(exec, chunks, |c| {
        let mut rng = keyed_rng(seed, &[c as u64]);
        let len = AREA_CHUNK.min(n_mc - c * AREA_CHUNK);
        let mut counts = vec![0u64; grid.n_cells()];
        for _ in 0..len {
            counts[grid.cell_of_unit(&unit_vector(&mut rng))] += 1;
        }
        counts
    });
    let mut counts = vec![0u64; grid.n_cells()];
    for p in partial {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    let areas: Vec<f64> = counts
        .iter()
        .map(|c| 4.0 * PI * *c as f64 / n_mc as f64)
        .collect();
    let max = areas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = areas.iter().cloned().fold(f64::INFINITY, f64::min);
    let total_area = areas.iter().sum();
    Ok(CellAreaStats {
        mean_area: total_area / areas.len() as f64,
        max_min_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
        areas,
        total_area,
        n_mc,
    })
}

/// Uniform random direction helper re-exported for callers building fixtures.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    unit_vector(rng)
}
