use std::path::PathBuf;

use sonocs::grids::GridSpec;
use sonocs::io::{self, IoError};
use sonocs::render::{self, ColorFrame, SliceMode, SlicePlane};
use sonocs::types::{Payload, Provenance, ScalarVoxel};
use sonocs::{Frame, FrameGeometry, Mat3, Pose, Sweep, SymmetricTensor, Vec3, Volume, VolumeKind, VoxelLattice};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes, expected.as_slice(), "{name} differs from golden file");
}

struct Le(Vec<u8>);

impl Le {
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f32(&mut self, v: f32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.0.extend_from_slice(v);
        self
    }
}

fn tiny_sweep() -> Sweep {
    let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let frame = Frame {
        pixels: vec![0.25, 1.0],
        pose: Pose::new(r, Vec3::new(1.5, -2.0, 3.0)).unwrap(),
    };
    let geometry = FrameGeometry {
        width: 2,
        height: 1,
        lateral_spacing: 0.5,
        axial_spacing: 0.125,
    };
    Sweep::new("tiny", geometry, vec![frame]).unwrap()
}

#[test]
fn sweep_layout() {
    let mut e = Le(Vec::new());
    e.raw(b"CSSWEEP1").u32(1).u32(2).u32(1).f64(0.5).f64(0.125);
    for v in [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.5, -2.0, 3.0] {
        e.f64(v);
    }
    e.f32(0.25).f32(1.0);
    let bytes = io::encode_sweep(&tiny_sweep());
    assert_eq!(bytes, e.0);
    check_golden("tiny.cssweep", &bytes);
    assert_eq!(io::decode_sweep(&bytes, "tiny").unwrap(), tiny_sweep());
}

#[test]
fn sweep_rejects_bad_input() {
    let bytes = io::encode_sweep(&tiny_sweep());
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XXXX");
    assert!(matches!(io::decode_sweep(&magic, "t"), Err(IoError::BadMagic)));
    assert!(matches!(io::decode_sweep(&bytes[..bytes.len() - 1], "t"), Err(IoError::TruncatedFile)));
    let mut skewed = bytes.clone();
    skewed[44..52].copy_from_slice(&0.01f64.to_le_bytes());
    assert!(matches!(io::decode_sweep(&skewed, "t"), Err(IoError::InvalidPose { frame: 0, .. })));
    let mut bright = bytes.clone();
    let n = bright.len();
    bright[n - 4..].copy_from_slice(&1.5f32.to_le_bytes());
    assert!(matches!(io::decode_sweep(&bright, "t"), Err(IoError::OutOfRangeIntensity { frame: 0, .. })));
}

fn header(e: &mut Le, kind: u8, dims: [u32; 3], grid: (u8, u32), provenance: &str) {
    e.raw(b"CSVOL1").raw(&[kind]);
    for d in dims {
        e.u32(d);
    }
    e.f64(-1.0).f64(0.0).f64(2.5).f64(0.5);
    e.raw(&[grid.0]).u32(grid.1);
    e.u32(provenance.len() as u32).raw(provenance.as_bytes());
}

fn provenance() -> Provenance {
    Provenance {
        sweep_id: "tiny".into(),
        software_version: "sonocs test".into(),
        parameters: None,
    }
}

const PROVENANCE_JSON: &str = r#"{"sweep_id":"tiny","software_version":"sonocs test","parameters":null}"#;

#[test]
fn scalar_volume_layout() {
    let lattice = VoxelLattice::new([2, 1, 1], [-1.0, 0.0, 2.5], 0.5).unwrap();
    let payload = Payload::Scalar(vec![ScalarVoxel::from_option(Some(0.75)), ScalarVoxel::EMPTY]);
    let volume = Volume::new(lattice, VolumeKind::ScalarMedian, payload, None, provenance()).unwrap();
    let mut e = Le(Vec::new());
    header(&mut e, 2, [2, 1, 1], (0, 0), PROVENANCE_JSON);
    e.f32(0.75).raw(&[0]).f32(0.0).raw(&[1]);
    let bytes = io::encode_volume(&volume);
    assert_eq!(bytes, e.0);
    check_golden("scalar.csvol", &bytes);
    assert_eq!(io::decode_volume(&bytes).unwrap(), volume);
}

#[test]
fn tensor_volume_layout() {
    let lattice = VoxelLattice::new([1, 2, 1], [-1.0, 0.0, 2.5], 0.5).unwrap();
    let t = SymmetricTensor::new([1.0, 0.5, 0.25, -0.125, 0.0, 2.0]);
    let payload = Payload::Tensor(vec![t, SymmetricTensor::INVALID]);
    let volume = Volume::new(lattice, VolumeKind::Tensor, payload, None, provenance()).unwrap();
    let mut e = Le(Vec::new());
    header(&mut e, 3, [1, 2, 1], (0, 0), PROVENANCE_JSON);
    for c in t.coeffs {
        e.f32(c as f32);
    }
    e.raw(&[1]);
    for _ in 0..6 {
        e.f32(0.0);
    }
    e.raw(&[0]);
    let bytes = io::encode_volume(&volume);
    assert_eq!(bytes, e.0);
    check_golden("tensor.csvol", &bytes);
    assert_eq!(io::decode_volume(&bytes).unwrap(), volume);

    let mut nan = bytes.clone();
    let at = bytes.len() - 2 * 25;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(io::decode_volume(&nan), Err(IoError::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(io::decode_volume(&trailing), Err(IoError::Format(_))));
}

#[test]
fn spherical_volume_layout() {
    let lattice = VoxelLattice::new([1, 1, 1], [-1.0, 0.0, 2.5], 0.5).unwrap();
    let grid = GridSpec::Icosahedral { subdivisions: 0 }.build().unwrap();
    let cells: Vec<f32> = (0..12).map(|k| if k % 3 == 0 { f32::NAN } else { k as f32 / 16.0 }).collect();
    let volume = Volume::new(lattice, VolumeKind::Spherical, Payload::Spherical(cells.clone()), Some(grid), provenance()).unwrap();
    let mut e = Le(Vec::new());
    header(&mut e, 4, [1, 1, 1], (2, 0), PROVENANCE_JSON);
    for c in &cells {
        e.f32(*c);
    }
    let bytes = io::encode_volume(&volume);
    assert_eq!(bytes, e.0);
    check_golden("spherical.csvol", &bytes);
    let back = io::decode_volume(&bytes).unwrap();
    assert_eq!(io::encode_volume(&back), bytes);
    assert!(back.cells(0).unwrap()[0].is_nan());

    let short = &bytes[..bytes.len() - 4];
    assert!(matches!(io::decode_volume(short), Err(IoError::Format(_)) | Err(IoError::TruncatedFile)));
}

fn gradient_volume() -> Volume {
    let lattice = VoxelLattice::new([4, 3, 1], [0.0, 0.0, 0.0], 1.0).unwrap();
    let payload = Payload::Scalar(
        (0..12)
            .map(|i| ScalarVoxel::from_option((i != 5).then_some(i as f64 / 11.0)))
            .collect(),
    );
    Volume::new(lattice, VolumeKind::ScalarMean, payload, None, Provenance::default()).unwrap()
}

#[test]
fn pgm_bytes() {
    let volume = gradient_volume();
    let plane = SlicePlane::axial(&volume.lattice, 0).unwrap();
    let image = render::extract_slice(&volume, &plane, SliceMode::Mean).unwrap();
    let pgm = image.to_pnm(false);
    let mut expected = b"P5\n4 3\n255\n".to_vec();
    expected.extend((0..12).map(|i| if i == 5 { 0 } else { (i as f64 / 11.0 * 255.0).round() as u8 }));
    assert_eq!(pgm, expected);
    check_golden("gradient.pgm", &pgm);
}

#[test]
fn ppm_bytes() {
    let lattice = VoxelLattice::new([3, 1, 2], [0.0, 0.0, 0.0], 1.0).unwrap();
    let grid = GridSpec::Icosahedral { subdivisions: 0 }.build().unwrap();
    let mut cells = vec![f32::NAN; 6 * 12];
    for v in 0..6 {
        if v != 4 {
            cells[v * 12 + (v * 5) % 12] = 0.2 + 0.1 * v as f32;
        }
    }
    let volume = Volume::new(lattice, VolumeKind::Spherical, Payload::Spherical(cells), Some(grid), Provenance::default()).unwrap();
    let plane = SlicePlane::lateral(&volume.lattice, 0).unwrap();
    let frame = ColorFrame::with_main(Vec3::z());
    let image = render::extract_slice_with(&volume, &plane, SliceMode::NormalColor, &frame, Default::default()).unwrap();
    let ppm = image.to_pnm(false);
    assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
    assert_eq!(ppm.len(), 11 + 18);
    let masked = 11 + 3 * 4;
    assert_eq!(&ppm[masked..masked + 3], &[0, 0, 0]);
    check_golden("normal_color.ppm", &ppm);
}
