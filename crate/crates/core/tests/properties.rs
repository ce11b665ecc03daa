use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sonocs::evaluate::{self, VarianceAxis};
use sonocs::grids::{self, GridSpec};
use sonocs::reconstruct::{self, Reducer};
use sonocs::render::{self, SliceMode, SlicePlane};
use sonocs::selection::{select_samples, SampleIndex, SampleSubset, SelectionParams};
use sonocs::simulate::{self, Occluder, Primitive, Scene, Shape};
use sonocs::types::Payload;
use sonocs::{
    io, Frame, FrameGeometry, Mat3, Method, Pose, ReconstructionConfig, Sample, SelectionEllipsoid, Sweep,
    SymmetricTensor, Vec3, Volume, VolumeKind, VoxelLattice,
};

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter_map("non-zero", |(x, y, z)| Vec3::new(x, y, z).try_normalize(1e-3))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    any::<u64>().prop_map(|s| simulate::random_rotation(&mut ChaCha8Rng::seed_from_u64(s)))
}

fn tensor6() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(-1.0f64..1.0)
}

/// Small sweep with random poses around the origin and random intensities.
fn random_sweep(seed: u64, frames: usize, width: usize, height: usize) -> Sweep {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = FrameGeometry {
        width,
        height,
        lateral_spacing: 0.3,
        axial_spacing: 0.25,
    };
    let frames = (0..frames)
        .map(|_| {
            let r = simulate::random_rotation(&mut rng);
            let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            Frame {
                pixels: (0..width * height).map(|_| rng.random::<f32>()).collect(),
                pose: Pose::new(r, t).unwrap(),
            }
        })
        .collect();
    Sweep::new("random", geometry, frames).unwrap()
}

fn oracle_cell(points: &[Vec3], d: &Vec3) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in points.iter().enumerate() {
        if p.dot(d) > best.1 {
            best = (k, p.dot(d));
        }
    }
    best.0
}

fn all_grids() -> Vec<GridSpec> {
    vec![
        GridSpec::Fibonacci { n_cells: 1 },
        GridSpec::Fibonacci { n_cells: 12 },
        GridSpec::Fibonacci { n_cells: 42 },
        GridSpec::Fibonacci { n_cells: 84 },
        GridSpec::Fibonacci { n_cells: 512 },
        GridSpec::Icosahedral { subdivisions: 0 },
        GridSpec::Icosahedral { subdivisions: 1 },
        GridSpec::Icosahedral { subdivisions: 2 },
        GridSpec::lat_long_deg(30.0).unwrap(),
        GridSpec::lat_long_deg(45.0).unwrap(),
        GridSpec::lat_long_deg(90.0).unwrap(),
    ]
}

#[test]
fn ray_ids_are_injective() {
    let sweep = random_sweep(1, 7, 9, 4);
    let mut seen = HashSet::new();
    for f in 0..sweep.frames.len() {
        for ix in 0..sweep.geometry.width {
            assert!(seen.insert(sonocs::types::ray_id(&sweep.geometry, f as u32, ix)));
        }
    }
    let per_ray: HashSet<(u64, u32)> = sweep.samples().map(|s| (s.ray_id, s.frame_id)).collect();
    assert_eq!(per_ray.len(), 7 * 9);
}

#[test]
fn cell_of_matches_oracle_on_seeded_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dirs: Vec<Vec3> = (0..100_000).map(|_| grids::random_direction(&mut rng)).collect();
    for spec in [
        GridSpec::Fibonacci { n_cells: 12 },
        GridSpec::Fibonacci { n_cells: 84 },
        GridSpec::lat_long_deg(45.0).unwrap(),
    ] {
        let grid = spec.build().unwrap();
        for d in &dirs {
            assert_eq!(grid.cell_of(d).unwrap(), oracle_cell(grid.points(), d), "{spec} {d:?}");
        }
    }
}

#[test]
fn grid_points_map_to_themselves() {
    for spec in all_grids() {
        let grid = spec.build().unwrap();
        for k in 0..grid.n_cells() {
            assert_eq!(grid.cell_of(&grid.direction_of(k).unwrap()).unwrap(), k, "{spec}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_round_trip(r in rotation(), t in prop::array::uniform3(-50.0f64..50.0), ix in 0usize..20, iy in 0usize..30) {
        let geometry = FrameGeometry { width: 20, height: 30, lateral_spacing: 0.2, axial_spacing: 0.15 };
        let frame = Frame { pixels: vec![0.5; 600], pose: Pose::new(r, Vec3::from(t)).unwrap() };
        let s = sonocs::types::sample_of_pixel(&frame, &geometry, 3, ix, iy).unwrap();
        let back = frame.pose.apply_inverse(&s.position);
        let expected = sonocs::types::pixel_plane_position(&geometry, ix, iy);
        prop_assert!((back - expected).norm() < 1e-9);
        prop_assert!((s.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cell_of_matches_oracle(d in unit()) {
        for spec in all_grids() {
            let grid = spec.build().unwrap();
            prop_assert_eq!(grid.cell_of(&d).unwrap(), oracle_cell(grid.points(), &d));
        }
    }

    #[test]
    fn spherical_variance_rotation_invariant(dirs in prop::collection::vec(unit(), 1..40), r in rotation()) {
        let a = grids::spherical_variance(&dirs).unwrap();
        let rotated: Vec<Vec3> = dirs.iter().map(|d| r * d).collect();
        let b = grids::spherical_variance(&rotated).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=2.0).contains(&a));
    }

    #[test]
    fn tensor_fit_is_exact(t in tensor6(), seed in any::<u64>(), n in 6usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<Vec3> = (0..n).map(|_| grids::random_direction(&mut rng)).collect();
        let truth = SymmetricTensor::new(t);
        let fit = reconstruct::fit_tensor_observations(dirs.iter().map(|d| (d, truth.project(d))), 6, false);
        prop_assume!(fit.valid);
        prop_assert!(fit.frobenius_distance(&truth) < 1e-6);
    }

    #[test]
    fn reducers_are_permutation_invariant_and_in_range(
        values in prop::collection::vec(0.0f64..=1.0, 1..60),
        dirs_seed in any::<u64>(),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(dirs_seed);
        let samples: Vec<Sample> = values
            .iter()
            .enumerate()
            .map(|(i, v)| Sample {
                intensity: *v,
                position: Vec3::zeros(),
                direction: grids::random_direction(&mut rng),
                ray_id: i as u64,
                frame_id: i as u32,
            })
            .collect();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = SampleSubset { voxel_index: 0, samples };
        let b = SampleSubset { voxel_index: 0, samples: shuffled };
        let grid = GridSpec::Fibonacci { n_cells: 12 }.build().unwrap();

        let mean = reconstruct::compound_mean(&a).unwrap();
        prop_assert!((mean - reconstruct::compound_mean(&b).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&mean));
        let median = reconstruct::compound_median(&a).unwrap();
        prop_assert_eq!(median, reconstruct::compound_median(&b).unwrap());
        prop_assert!((0.0..=1.0).contains(&median));
        for reducer in [Reducer::Mean, Reducer::Median] {
            let ma = reconstruct::fit_spherical(&a, &grid, reducer);
            let mb = reconstruct::fit_spherical(&b, &grid, reducer);
            for (x, y) in ma.cells.iter().zip(&mb.cells) {
                prop_assert!(x.is_nan() && y.is_nan() || (x - y).abs() < 1e-6);
                prop_assert!(x.is_nan() || (-1e-9..=1.0 + 1e-9).contains(&f64::from(*x)));
            }
        }
        let t = reconstruct::fit_tensor(&a, &ReconstructionConfig::new(Method::Tensor));
        if t.valid {
            prop_assert!(t.coeffs.iter().all(|c| c.is_finite()));
        }
    }

    #[test]
    fn subset_size_is_bounded(seed in any::<u64>(), cap in 1usize..40, r in 0.3f64..2.0, c in prop::array::uniform3(-1.5f64..1.5)) {
        let sweep = random_sweep(seed, 6, 8, 10);
        let params = SelectionParams::new(SelectionEllipsoid::sphere(r), cap, 5, "random");
        let center = Vec3::from(c);
        let subset = select_samples(&center, 0, &sweep, &params);
        let rays: HashSet<u64> = sweep
            .samples()
            .filter(|s| (s.position - center).norm() <= r)
            .map(|s| s.ray_id)
            .collect();
        prop_assert!(subset.len() <= cap.min(rays.len()));
        let ids: HashSet<u64> = subset.samples.iter().map(|s| s.ray_id).collect();
        prop_assert_eq!(ids.len(), subset.len());
        prop_assert!(subset.samples.windows(2).all(|w| w[0].ray_id < w[1].ray_id));
    }

    #[test]
    fn shrinking_the_ellipsoid_never_adds_samples(
        seed in any::<u64>(),
        axes in prop::array::uniform3(0.4f64..2.0),
        shrink in prop::array::uniform3(0.2f64..1.0),
        c in prop::array::uniform3(-1.5f64..1.5),
    ) {
        let sweep = random_sweep(seed, 5, 8, 10);
        let big = SelectionEllipsoid::new(axes[0], axes[1], axes[2]).unwrap();
        let small = SelectionEllipsoid::new(axes[0] * shrink[0], axes[1] * shrink[1], axes[2] * shrink[2]).unwrap();
        let center = Vec3::from(c);
        let a = select_samples(&center, 0, &sweep, &SelectionParams::new(big, usize::MAX, 0, "random"));
        let b = select_samples(&center, 0, &sweep, &SelectionParams::new(small, usize::MAX, 0, "random"));
        let rays: HashSet<u64> = a.samples.iter().map(|s| s.ray_id).collect();
        prop_assert!(b.samples.iter().all(|s| rays.contains(&s.ray_id)));
        prop_assert!(b.len() <= a.len());
    }

    #[test]
    fn index_matches_linear_scan(seed in any::<u64>(), cap in 1usize..30, axes in prop::array::uniform3(0.3f64..1.5)) {
        let sweep = random_sweep(seed, 5, 7, 9);
        let e = SelectionEllipsoid::new(axes[0], axes[1], axes[2]).unwrap();
        let params = SelectionParams::new(e, cap, seed, "random");
        let index = SampleIndex::build(&sweep, params.clone());
        let lattice = VoxelLattice::new([6, 6, 6], [-2.5, -2.5, -2.5], 1.0).unwrap();
        for v in 0..lattice.voxel_count() {
            let center = lattice.center_of(v);
            prop_assert_eq!(index.select(&center, v), select_samples(&center, v, &sweep, &params));
        }
    }

    #[test]
    fn open_scenes_are_point_symmetric(
        normal in unit(),
        alpha in 0.0f64..0.5,
        beta in 0.0f64..0.5,
        p in 1.0f64..10.0,
        point in prop::array::uniform3(-3.0f64..3.0),
        d in unit(),
    ) {
        let scene = Scene {
            primitives: vec![
                Primitive::new(Shape::Plane { point: [0.0; 3], normal: normal.into() }, alpha, beta, p).with_capture(10.0),
                Primitive::new(Shape::Sphere { center: [1.0, 0.0, 0.0], radius: 1.0 }, alpha, beta, p),
            ],
            occluders: vec![],
            noise_sigma: 0.0,
        };
        scene.validate().unwrap();
        let x = Vec3::from(point);
        let a = scene.directional_intensity(&x, &d);
        prop_assert!((a - scene.directional_intensity(&x, &-d)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn lipschitz_free_view(t in tensor6(), d1 in unit(), d2 in unit()) {
        let tensor = SymmetricTensor::new(t);
        let volume = Volume::new(
            VoxelLattice::new([1, 1, 1], [0.0; 3], 1.0).unwrap(),
            VolumeKind::Tensor,
            Payload::Tensor(vec![tensor]),
            None,
            Default::default(),
        ).unwrap();
        let plane = SlicePlane::new(Vec3::zeros(), [Vec3::x(), Vec3::y()], 1, 1, 1.0).unwrap();
        let a = render::free_view_image(&volume, &plane, &d1).unwrap().data[0];
        let b = render::free_view_image(&volume, &plane, &d2).unwrap().data[0];
        let angle = d1.dot(&d2).clamp(-1.0, 1.0).acos();
        prop_assert!((a - b).abs() <= 2.0 * tensor.frobenius_norm() * angle + 1e-12);
    }

    #[test]
    fn slice_has_plane_extent(w in 1usize..30, h in 1usize..30, px in 0.1f64..2.0, r in rotation()) {
        let lattice = VoxelLattice::new([4, 5, 6], [-1.0, -1.0, -1.0], 0.5).unwrap();
        let volume = Volume::new(
            lattice,
            VolumeKind::ScalarMean,
            Payload::Scalar(vec![sonocs::types::ScalarVoxel::from_option(Some(0.5)); lattice.voxel_count()]),
            None,
            Default::default(),
        ).unwrap();
        let plane = SlicePlane::new(Vec3::zeros(), [r.column(0).into(), r.column(1).into()], w, h, px).unwrap();
        let image = render::extract_slice(&volume, &plane, SliceMode::Mean).unwrap();
        prop_assert_eq!((image.width, image.height, image.channels), (w, h, 1));
        prop_assert_eq!(image.data.len(), w * h);
        prop_assert_eq!(image.mask.len(), w * h);
    }

    #[test]
    fn sweep_files_round_trip(seed in any::<u64>(), frames in 1usize..4, w in 1usize..6, h in 1usize..6) {
        let sweep = random_sweep(seed, frames, w, h);
        let bytes = io::encode_sweep(&sweep);
        let back = io::decode_sweep(&bytes, "random").unwrap();
        prop_assert_eq!(&back, &sweep);
        prop_assert_eq!(io::encode_sweep(&back), bytes);
    }
}

fn small_volume(kind: VolumeKind, seed: u64) -> Volume {
    let sweep = random_sweep(seed, 10, 8, 8);
    let lattice = VoxelLattice::new([4, 3, 5], [-1.0, -1.0, -1.0], 0.5).unwrap();
    let method = match kind {
        VolumeKind::ScalarMean => Method::Mean,
        VolumeKind::ScalarMedian => Method::Median,
        VolumeKind::Tensor => Method::Tensor,
        VolumeKind::Spherical => Method::Spherical,
    };
    let cfg = ReconstructionConfig::new(method).with_grid(GridSpec::Icosahedral { subdivisions: 1 });
    reconstruct::reconstruct_volume(&sweep, &lattice, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn volume_files_round_trip(seed in any::<u64>()) {
        for kind in [VolumeKind::ScalarMean, VolumeKind::ScalarMedian, VolumeKind::Tensor, VolumeKind::Spherical] {
            let volume = small_volume(kind, seed);
            let bytes = io::encode_volume(&volume);
            let back = io::decode_volume(&bytes).unwrap();
            prop_assert_eq!(io::encode_volume(&back), bytes);
            prop_assert_eq!(back.kind, kind);
            prop_assert_eq!(&back.provenance, &volume.provenance);
        }
    }

    #[test]
    fn error_report_invariants(seed in any::<u64>(), bins in 2usize..8) {
        let sweep = random_sweep(seed, 10, 8, 8);
        let lattice = VoxelLattice::new([4, 3, 5], [-1.0, -1.0, -1.0], 0.5).unwrap();
        for method in Method::ALL {
            let volume = reconstruct::reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(method)).unwrap();
            let skip = evaluate::representation_error(&volume, &sweep, true);
            let count = evaluate::representation_error(&volume, &sweep, false);
            prop_assert!(skip.mse >= 0.0 && count.mse >= 0.0);
            prop_assert!(skip.sample_count <= count.sample_count);
            prop_assert_eq!(skip.mse == 0.0, skip.evaluated_errors().all(|e| e == 0.0));
            for (axis, report) in [(VarianceAxis::IntensityVar, &skip), (VarianceAxis::SphericalVar, &count)] {
                let series = evaluate::binned_error(&volume, &sweep, axis, bins, report.skip_missing).unwrap();
                let binned: usize = series.bins.iter().map(|b| b.count).sum();
                let weighted: f64 = series.bins.iter().map(|b| b.mse * b.count as f64).sum();
                prop_assert_eq!(binned + series.unbinned, report.sample_count);
                if series.unbinned == 0 && binned > 0 {
                    prop_assert!((weighted / binned as f64 - report.mse).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn noiseless_intensities_stay_in_range() {
    let scene = Scene {
        primitives: vec![
            Primitive::new(Shape::Plane { point: [0.0; 3], normal: [0.0, 0.0, 1.0] }, 0.3, 0.7, 1.0).with_capture(50.0),
            Primitive::new(Shape::Wire { point: [0.0; 3], axis: [1.0, 0.0, 0.0], radius: 0.1 }, 0.0, 1.0, 20.0),
        ],
        occluders: vec![Occluder { point: [0.0, 0.0, -2.0], normal: [0.0, 0.0, 1.0], radius: None }],
        noise_sigma: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let d = grids::random_direction(&mut rng);
        let x = grids::random_direction(&mut rng) * 3.0;
        let v = scene.directional_intensity(&x, &d);
        assert!((0.0..=1.0).contains(&v));
    }
}
