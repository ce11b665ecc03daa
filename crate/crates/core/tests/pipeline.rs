use sonocs::evaluate::{self, VarianceAxis};
use sonocs::grids::GridSpec;
use sonocs::par::Exec;
use sonocs::reconstruct::{reconstruct_volume, reconstruct_volume_exec};
use sonocs::render::{self, ColorFrame, SliceMode, SlicePlane};
use sonocs::selection::{select_samples, SampleIndex};
use sonocs::simulate::{self, presets, SimulationConfig};
use sonocs::{Method, ReconstructionConfig, Sweep, Vec3, VoxelLattice};

fn small_orbit(noise: f64) -> SimulationConfig {
    let mut cfg = presets::shadowed_orbit();
    cfg.probe.width = 16;
    cfg.probe.height = 24;
    cfg.trajectory.frame_count = 40;
    cfg.trajectory.distance = 3.0;
    cfg.scene.noise_sigma = noise;
    cfg
}

fn lattice(sweep: &Sweep) -> VoxelLattice {
    VoxelLattice::covering_sweep(sweep, 0.5).unwrap()
}

#[test]
fn refinement_does_not_increase_error() {
    let sweep = small_orbit(0.0).generate("orbit").unwrap();
    let lattice = lattice(&sweep);
    let mut previous = f64::INFINITY;
    for grid in [
        GridSpec::Fibonacci { n_cells: 1 },
        GridSpec::Icosahedral { subdivisions: 1 },
        GridSpec::Icosahedral { subdivisions: 2 },
        GridSpec::Fibonacci { n_cells: 512 },
    ] {
        let cfg = ReconstructionConfig::new(Method::Spherical).with_grid(grid);
        let volume = reconstruct_volume(&sweep, &lattice, &cfg).unwrap();
        let mse = evaluate::representation_error(&volume, &sweep, true).mse;
        assert!(mse <= previous, "{grid}: {mse} > {previous}");
        previous = mse;
    }
}

#[test]
fn free_view_matches_reprojection_at_voxel_centers() {
    let sweep = small_orbit(0.02).generate("orbit").unwrap();
    let lattice = lattice(&sweep);
    let d = sweep.frames[7].direction();
    for method in [Method::Tensor, Method::Spherical] {
        let volume = reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(method)).unwrap();
        let mut compared = 0;
        for iz in [lattice.dims[2] / 3, lattice.dims[2] / 2] {
            let plane = SlicePlane::axial(&lattice, iz).unwrap();
            let image = render::free_view_image(&volume, &plane, &d).unwrap();
            for j in 0..plane.height {
                for i in 0..plane.width {
                    let center = lattice.center(i, j, iz);
                    let expected = evaluate::reproject_at(&volume, &center, &d);
                    let p = j * plane.width + i;
                    assert_eq!(image.mask[p], expected.is_some());
                    if let Some(v) = expected {
                        let v = if method == Method::Tensor { v.clamp(0.0, 1.0) } else { v };
                        assert!((image.data[p] - v).abs() < 1e-12);
                        compared += 1;
                    }
                }
            }
        }
        assert!(compared > 50, "{method}: {compared}");
    }
}

#[test]
fn spherical_beats_mean_on_noiseless_orbit() {
    let sweep = small_orbit(0.0).generate("orbit").unwrap();
    let lattice = lattice(&sweep);
    let volume = reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(Method::Spherical)).unwrap();
    let report = evaluate::representation_error(&volume, &sweep, true);
    let mean = reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(Method::Mean)).unwrap();
    let mean_report = evaluate::representation_error(&mean, &sweep, true);
    assert!(report.mse < mean_report.mse);
}

#[test]
fn sequential_and_parallel_agree() {
    let cfg = small_orbit(0.02);
    let seq = simulate::generate_sweep_exec(&cfg.scene, &cfg.trajectory, &cfg.probe, cfg.seed, "orbit", Exec::Sequential).unwrap();
    let par = simulate::generate_sweep_exec(&cfg.scene, &cfg.trajectory, &cfg.probe, cfg.seed, "orbit", Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    let lattice = lattice(&seq);
    for method in Method::ALL {
        let rc = ReconstructionConfig::new(method);
        let a = reconstruct_volume_exec(&seq, &lattice, &rc, Exec::Sequential).unwrap();
        let b = reconstruct_volume_exec(&seq, &lattice, &rc, Exec::Parallel).unwrap();
        assert_eq!(sonocs::io::encode_volume(&a), sonocs::io::encode_volume(&b), "{method}");

        let ea = evaluate::representation_error_exec(&a, &seq, false, Exec::Sequential);
        let eb = evaluate::representation_error_exec(&a, &seq, false, Exec::Parallel);
        assert_eq!(ea, eb);
        let ba = evaluate::binned_error_exec(&a, &seq, VarianceAxis::SphericalVar, 6, false, Exec::Sequential).unwrap();
        let bb = evaluate::binned_error_exec(&a, &seq, VarianceAxis::SphericalVar, 6, false, Exec::Parallel).unwrap();
        assert_eq!(ba, bb);

        let plane = SlicePlane::lateral(&lattice, lattice.dims[1] / 2).unwrap();
        let mode = render::SliceMode::default_for(a.kind);
        let frame = ColorFrame::for_volume(&a);
        assert_eq!(
            render::extract_slice_with(&a, &plane, mode, &frame, Exec::Sequential).unwrap(),
            render::extract_slice_with(&a, &plane, mode, &frame, Exec::Parallel).unwrap()
        );
        if !a.kind.is_scalar() {
            let d = Vec3::new(0.3, -0.2, 1.0);
            assert_eq!(
                render::free_view_image_exec(&a, &plane, &d, Exec::Sequential).unwrap(),
                render::free_view_image_exec(&a, &plane, &d, Exec::Parallel).unwrap()
            );
        }
    }
}

#[test]
fn index_selection_matches_linear_scan_on_simulated_sweep() {
    let sweep = small_orbit(0.02).generate("orbit").unwrap();
    let lattice = lattice(&sweep);
    let params = ReconstructionConfig {
        sample_cap: 40,
        ..ReconstructionConfig::new(Method::Mean)
    }
    .selection(&sweep.id);
    let index = SampleIndex::build(&sweep, params.clone());
    for v in (0..lattice.voxel_count()).step_by(37) {
        let c = lattice.center_of(v);
        assert_eq!(index.select(&c, v), select_samples(&c, v, &sweep, &params));
    }
}

#[test]
fn single_direction_sweep_lands_in_first_bin() {
    let mut cfg = presets::constant_linear();
    cfg.trajectory.angular_span = 0.0;
    cfg.scene.noise_sigma = 0.05;
    let sweep = cfg.generate("flat").unwrap();
    let lattice = lattice(&sweep);
    let volume = reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(Method::Mean)).unwrap();
    let series = evaluate::binned_error(&volume, &sweep, VarianceAxis::SphericalVar, 4, true).unwrap();
    let total: usize = series.bins.iter().map(|b| b.count).sum();
    assert!(total > 0);
    assert_eq!(series.bins[0].count, total);
}

#[test]
fn slice_modes_cover_every_kind() {
    let sweep = small_orbit(0.02).generate("orbit").unwrap();
    let lattice = lattice(&sweep);
    let plane = SlicePlane::axial(&lattice, lattice.dims[2] / 2).unwrap();
    for method in Method::ALL {
        let volume = reconstruct_volume(&sweep, &lattice, &ReconstructionConfig::new(method)).unwrap();
        for mode in SliceMode::ALL {
            let result = render::extract_slice(&volume, &plane, mode);
            assert_eq!(result.is_ok(), mode.supports(volume.kind), "{method} {mode}");
            if let Ok(image) = result {
                assert!(image.mask.iter().any(|m| *m), "{method} {mode}");
            }
        }
    }
}
