//! Synthetic phantoms with direction-dependent reflectance and tracked
//! sweep generation.
//!
//! Every primitive reflects `α + β·|cos γ|^p`, where `γ` is the angle between
//! the beam direction and the surface normal at the closest surface point.
//! Occluders zero the response of every (point, direction) pair whose beam
//! passed through them on the way in, which breaks the point symmetry of the
//! reflectance model.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::PHI;
use crate::par::{self, Exec};
use crate::rng::keyed_rng;
use crate::types::{pixel_plane_position, CoreError, Frame, FrameGeometry, Pose, Sweep};
use crate::{Mat3, Vec3};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("cannot parse simulation config: {0}")]
    Config(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Infinite cylinder around the line through `point` along `axis`.
    Cylinder {
        point: [f64; 3],
        axis: [f64; 3],
        radius: f64,
    },
    /// Thin cylinder.
    Wire {
        point: [f64; 3],
        axis: [f64; 3],
        radius: f64,
    },
}

impl Shape {
    /// Distance to the surface and the unit surface normal at the closest point.
    pub fn closest(&self, x: &Vec3) -> (f64, Vec3) {
        match *self {
            Shape::Plane { point, normal } => {
                let n = Vec3::from(normal).normalize();
                ((x - Vec3::from(point)).dot(&n).abs(), n)
            }
            Shape::Sphere { center, radius } => {
                let r = x - Vec3::from(center);
                let len = r.norm();
                let n = if len > 0.0 { r / len } else { Vec3::z() };
                ((len - radius).abs(), n)
            }
            Shape::Cylinder {
                point,
                axis,
                radius,
            }
            | Shape::Wire {
                point,
                axis,
                radius,
            } => {
                let a = Vec3::from(axis).normalize();
                let r = x - Vec3::from(point);
                let radial = r - a * r.dot(&a);
                let len = radial.norm();
                let n = if len > 0.0 {
                    radial / len
                } else {
                    crate::eigen::canonical_sign(a.cross(&Vec3::x()).try_normalize(1e-12).unwrap_or(Vec3::y()))
                };
                ((len - radius).abs(), n)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        let unit = |v: [f64; 3], what: &str| {
            if Vec3::from(v).norm() > 1e-9 {
                Ok(())
            } else {
                Err(format!("{what} must be non-zero"))
            }
        };
        match *self {
            Shape::Plane { normal, .. } => unit(normal, "plane normal"),
            Shape::Sphere { radius, .. } if !(radius > 0.0) => Err("sphere radius must be positive".into()),
            Shape::Sphere { .. } => Ok(()),
            Shape::Cylinder { axis, radius, .. } | Shape::Wire { axis, radius, .. } => {
                if !(radius > 0.0) {
                    return Err("cylinder radius must be positive".into());
                }
                unit(axis, "cylinder axis")
            }
        }
    }
}

fn default_capture() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    /// Ambient reflectance.
    pub alpha: f64,
    /// Specular gain.
    pub beta: f64,
    /// Specular exponent.
    pub exponent: f64,
    /// Points farther than this from the surface (mm) do not see the primitive.
    #[serde(default = "default_capture")]
    pub capture: f64,
}

impl Primitive {
    pub fn new(shape: Shape, alpha: f64, beta: f64, exponent: f64) -> Self {
        Self {
            shape,
            alpha,
            beta,
            exponent,
            capture: default_capture(),
        }
    }

    pub fn with_capture(mut self, capture: f64) -> Self {
        self.capture = capture;
        self
    }

    pub fn reflectance(&self, normal: &Vec3, d: &Vec3) -> f64 {
        let c = normal.dot(d).abs().min(1.0);
        self.alpha + self.beta * c.powf(self.exponent)
    }
}

/// Planar occluder: a disc of `radius` around `point`, or the whole plane when
/// `radius` is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub radius: Option<f64>,
}

impl Occluder {
    /// True when the beam reaching `x` along `d` crossed the occluder.
    pub fn blocks(&self, x: &Vec3, d: &Vec3) -> bool {
        let n = Vec3::from(self.normal).normalize();
        let q = Vec3::from(self.point);
        let dn = d.dot(&n);
        if dn.abs() < 1e-12 {
            return false;
        }
        // Points on the incoming ray are x - t·d with t > 0.
        let t = (x - q).dot(&n) / dn;
        if t <= 0.0 {
            return false;
        }
        match self.radius {
            Some(r) => (x - d * t - q).norm() <= r,
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SimulateError> {
        for (i, p) in self.primitives.iter().enumerate() {
            let bad = |m: String| SimulateError::InvalidScene(format!("primitive {i}: {m}"));
            p.shape.validate().map_err(bad)?;
            if !(0.0..=1.0).contains(&p.alpha) || !(0.0..=1.0).contains(&p.beta) {
                return Err(bad("alpha and beta must lie in [0, 1]".into()));
            }
            if p.alpha + p.beta > 1.0 + 1e-12 {
                return Err(bad("alpha + beta must not exceed 1".into()));
            }
            if !(p.exponent >= 1.0) {
                return Err(bad("exponent must be at least 1".into()));
            }
            if !(p.capture > 0.0) {
                return Err(bad("capture distance must be positive".into()));
            }
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if Vec3::from(o.normal).norm() < 1e-9 || o.radius.is_some_and(|r| !(r > 0.0)) {
                return Err(SimulateError::InvalidScene(format!(
                    "occluder {i} needs a non-zero normal and a positive radius"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SimulateError::InvalidScene("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Noiseless intensity seen at `point` from beam direction `d`.
    pub fn directional_intensity(&self, point: &Vec3, d: &Vec3) -> f64 {
        let mut best: Option<(f64, &Primitive, Vec3)> = None;
        for p in &self.primitives {
            let (dist, n) = p.shape.closest(point);
            if dist <= p.capture && best.is_none_or(|(b, _, _)| dist < b) {
                best = Some((dist, p, n));
            }
        }
        let Some((_, prim, normal)) = best else {
            return 0.0;
        };
        if self.occluders.iter().any(|o| o.blocks(point, d)) {
            return 0.0;
        }
        prim.reflectance(&normal, d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    LinearSweep,
    FanTilt,
    Orbit,
}

fn default_step() -> f64 {
    0.2
}

fn default_distance() -> f64 {
    10.0
}

/// Probe motion. `center` is the probe-face center of the middle frame for
/// `linear_sweep`, the tilt pivot for `fan_tilt` and the focus for `orbit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub frame_count: usize,
    /// Degrees.
    pub angular_span: f64,
    #[serde(default)]
    pub center: [f64; 3],
    /// Elevational translation per frame (mm), linear sweeps only.
    #[serde(default = "default_step")]
    pub step: f64,
    /// Probe-face distance from the focus (mm), orbits only.
    #[serde(default = "default_distance")]
    pub distance: f64,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, frame_count: usize, angular_span: f64) -> Self {
        Self {
            kind,
            frame_count,
            angular_span,
            center: [0.0; 3],
            step: default_step(),
            distance: default_distance(),
        }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::InvalidTrajectory(m.into()));
        if self.frame_count < 1 {
            return bad("frame_count must be at least 1");
        }
        if !(0.0..=360.0).contains(&self.angular_span) {
            return bad("angular_span must lie in [0, 360] degrees");
        }
        match self.kind {
            TrajectoryKind::Orbit if self.angular_span == 0.0 && self.frame_count > 1 => {
                bad("an orbit with zero span cannot hold more than one frame")
            }
            TrajectoryKind::Orbit if self.angular_span > 180.0 => {
                bad("orbit span must not exceed 180 degrees")
            }
            TrajectoryKind::Orbit if !(self.distance > 0.0) => bad("orbit distance must be positive"),
            TrajectoryKind::FanTilt if self.angular_span >= 180.0 => {
                bad("fan span must be below 180 degrees")
            }
            TrajectoryKind::LinearSweep if !self.step.is_finite() => bad("step must be finite"),
            _ => Ok(()),
        }
    }
}

/// Rotation with image x along `lateral` and image y along `beam`.
pub fn probe_rotation(lateral: &Vec3, beam: &Vec3) -> Mat3 {
    Mat3::from_columns(&[*lateral, *beam, lateral.cross(beam)])
}

/// Pose placing the probe-face center of a frame at `face` with the given
/// orientation.
fn probe_pose(rotation: Mat3, face: Vec3, geom: &FrameGeometry) -> Result<Pose, CoreError> {
    let half = Vec3::new(0.5 * (geom.width - 1) as f64 * geom.lateral_spacing, 0.0, 0.0);
    Pose::new(rotation, face - rotation * half)
}

fn axis_rotation(axis: &Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}

/// Frame poses of a trajectory; nominally the lateral axis is world +x and
/// the beam points along world +z.
pub fn trajectory_poses(traj: &TrajectorySpec, geom: &FrameGeometry) -> Result<Vec<Pose>, SimulateError> {
    traj.validate()?;
    geom.validate()?;
    let n = traj.frame_count;
    let center = Vec3::from(traj.center);
    let span = traj.angular_span.to_radians();
    let nominal = probe_rotation(&Vec3::x(), &Vec3::z());
    // Position in [-0.5, 0.5] along the trajectory.
    let u = |k: usize| {
        if n == 1 {
            0.0
        } else {
            k as f64 / (n - 1) as f64 - 0.5
        }
    };
    let poses = (0..n).map(|k| -> Result<Pose, SimulateError> {
        let pose = match traj.kind {
            TrajectoryKind::LinearSweep => {
                // Two-axis tilt wobble with incommensurate phases so that
                // neighbouring frames see distinct directions.
                let a = 0.5 * span;
                let tx = a * (k as f64 * 2.399_963).sin();
                let ty = a * (k as f64 * 1.324_718 + 0.5).sin();
                let tilt = axis_rotation(&Vec3::x(), tx) * axis_rotation(&Vec3::y(), ty);
                let face = center + Vec3::y() * (traj.step * (k as f64 - 0.5 * (n - 1) as f64));
                probe_pose(tilt * nominal, face, geom)?
            }
            TrajectoryKind::FanTilt => {
                let r = axis_rotation(&Vec3::x(), span * u(k));
                probe_pose(r * nominal, center, geom)?
            }
            TrajectoryKind::Orbit => {
                // Spiral over the cap of half-angle span/2 around +z.
                let cos_max = (0.5 * span).cos();
                let cos_t = 1.0 - (1.0 - cos_max) * (k as f64 + 0.5) / n as f64;
                let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
                let phi = 2.0 * PI * k as f64 / PHI;
                let beam = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
                let lateral = (Vec3::x() - beam * beam.x)
                    .try_normalize(1e-6)
                    .unwrap_or_else(|| (Vec3::y() - beam * beam.y).normalize());
                // The focus lies on the central ray at depth `distance`.
                let face = center - beam * traj.distance;
                probe_pose(probe_rotation(&lateral, &beam), face, geom)?
            }
        };
        Ok(pose)
    });
    poses.collect()
}

/// Complete simulation input as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default)]
    pub seed: u64,
    pub probe: FrameGeometry,
    pub trajectory: TrajectorySpec,
    pub scene: Scene,
}

impl SimulationConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimulateError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn generate(&self, id: &str) -> Result<Sweep, SimulateError> {
        generate_sweep(&self.scene, &self.trajectory, &self.probe, self.seed, id)
    }
}

/// Renders every frame of a trajectory. The noise of frame `k` comes from a
/// stream keyed by `(seed, k)`, so frames may be generated in any order.
pub fn generate_sweep(
    scene: &Scene,
    traj: &TrajectorySpec,
    geom: &FrameGeometry,
    seed: u64,
    id: &str,
) -> Result<Sweep, SimulateError> {
    generate_sweep_exec(scene, traj, geom, seed, id, Exec::default())
}

pub fn generate_sweep_exec(
    scene: &Scene,
    traj: &TrajectorySpec,
    geom: &FrameGeometry,
    seed: u64,
    id: &str,
    exec: Exec,
) -> Result<Sweep, SimulateError> {
    scene.validate()?;
    let poses = trajectory_poses(traj, geom)?;
    let noise = (scene.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, scene.noise_sigma).expect("sigma validated"));
    let frames = par::map_slice(exec, &poses.iter().enumerate().collect::<Vec<_>>(), |(k, pose)| {
        let mut rng = keyed_rng(seed, &[*k as u64]);
        let d = (pose.rotation() * crate::types::AXIAL_AXIS).normalize();
        let mut pixels = Vec::with_capacity(geom.pixel_count());
        for iy in 0..geom.height {
            for ix in 0..geom.width {
                let p = pose.apply(&pixel_plane_position(geom, ix, iy));
                let mut v = scene.directional_intensity(&p, &d);
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Frame {
            pixels,
            pose: **pose,
        }
    });
    Ok(Sweep::new(id, *geom, frames)?)
}

/// Uniform random rotation, for tests and fixtures.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let a = crate::rng::unit_vector(rng);
    let angle = rng.random_range(0.0..2.0 * PI);
    axis_rotation(&a, angle)
}

/// Named configurations used by the CLI and the test fixtures.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 4] = ["fan-plane", "shadowed-orbit", "constant-linear", "wire"];

    pub fn by_name(name: &str) -> Option<SimulationConfig> {
        match name {
            "fan-plane" => Some(fan_plane()),
            "shadowed-orbit" => Some(shadowed_orbit()),
            "constant-linear" => Some(constant_linear()),
            "wire" => Some(wire()),
            _ => None,
        }
    }

    /// Fan sweep over a specular plane.
    pub fn fan_plane() -> SimulationConfig {
        SimulationConfig {
            seed: 1,
            probe: FrameGeometry {
                width: 48,
                height: 48,
                lateral_spacing: 0.25,
                axial_spacing: 0.25,
            },
            trajectory: TrajectorySpec::new(TrajectoryKind::FanTilt, 40, 60.0),
            scene: Scene {
                primitives: vec![Primitive::new(
                    Shape::Plane {
                        point: [0.0, 0.0, 3.0],
                        normal: [0.0, 0.0, 1.0],
                    },
                    0.1,
                    0.8,
                    8.0,
                )
                .with_capture(20.0)],
                occluders: vec![],
                noise_sigma: 0.02,
            },
        }
    }

    /// Wide orbit over a plane; a distant disc shadows one flank of the orbit cap.
    pub fn shadowed_orbit() -> SimulationConfig {
        SimulationConfig {
            seed: 2,
            probe: FrameGeometry {
                width: 40,
                height: 56,
                lateral_spacing: 0.25,
                axial_spacing: 0.25,
            },
            trajectory: TrajectorySpec {
                distance: 8.0,
                ..TrajectorySpec::new(TrajectoryKind::Orbit, 60, 150.0)
            },
            scene: Scene {
                primitives: vec![Primitive::new(
                    Shape::Plane {
                        point: [0.0, 0.0, 0.0],
                        normal: [0.0, 0.0, 1.0],
                    },
                    0.1,
                    0.8,
                    2.0,
                )
                .with_capture(100.0)],
                occluders: vec![Occluder {
                    point: [1732.0, 0.0, -1000.0],
                    normal: [0.0, 0.0, 1.0],
                    radius: Some(800.0),
                }],
                noise_sigma: 0.02,
            },
        }
    }

    /// Noiseless constant-intensity scene with a wobbling linear sweep.
    pub fn constant_linear() -> SimulationConfig {
        SimulationConfig {
            seed: 3,
            probe: FrameGeometry {
                width: 24,
                height: 24,
                lateral_spacing: 0.25,
                axial_spacing: 0.25,
            },
            trajectory: TrajectorySpec {
                step: 0.1,
                ..TrajectorySpec::new(TrajectoryKind::LinearSweep, 40, 40.0)
            },
            scene: Scene {
                primitives: vec![Primitive::new(
                    Shape::Plane {
                        point: [0.0, 0.0, 0.0],
                        normal: [0.0, 0.0, 1.0],
                    },
                    0.6,
                    0.0,
                    1.0,
                )
                .with_capture(1e6)],
                occluders: vec![],
                noise_sigma: 0.0,
            },
        }
    }

    /// Wire phantom crossing a fan sweep.
    pub fn wire() -> SimulationConfig {
        SimulationConfig {
            seed: 4,
            probe: FrameGeometry {
                width: 48,
                height: 64,
                lateral_spacing: 0.25,
                axial_spacing: 0.25,
            },
            trajectory: TrajectorySpec::new(TrajectoryKind::FanTilt, 30, 40.0),
            scene: Scene {
                primitives: vec![
                    Primitive::new(
                        Shape::Wire {
                            point: [3.0, 0.0, 6.0],
                            axis: [0.0, 1.0, 0.0],
                            radius: 0.2,
                        },
                        0.2,
                        0.7,
                        4.0,
                    )
                    .with_capture(0.5),
                    Primitive::new(
                        Shape::Plane {
                            point: [0.0, 0.0, 12.0],
                            normal: [0.0, 0.3, 1.0],
                        },
                        0.05,
                        0.6,
                        6.0,
                    ),
                ],
                occluders: vec![],
                noise_sigma: 0.01,
            },
        }
    }
}
