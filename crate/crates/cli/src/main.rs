use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sonocs::evaluate::{self, ReportSummary, VarianceAxis};
use sonocs::reconstruct::{self, Reducer};
use sonocs::render::{self, SliceMode, SlicePlane};
use sonocs::simulate::{presets, SimulationConfig, TrajectoryKind};
use sonocs::{io, par, GridSpec, Method, ReconstructionConfig, SelectionEllipsoid, Vec3, VoxelLattice};

/// Direction-preserving compounding of tracked freehand ultrasound sweeps.
#[derive(Debug, Parser)]
#[command(name = "sonocs", version, propagate_version = true, max_term_width = 100)]
struct Cli {
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true, env = "CS_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic tracked sweep
    Simulate(SimulateArgs),
    /// Reconstruct a volume from a sweep
    Reconstruct(ReconstructArgs),
    /// Reprojection error of a volume against a sweep
    Evaluate(EvaluateArgs),
    /// Render a volume slice or a free-view image
    Slice(SliceArgs),
    /// Serve volumes over HTTP for the free-view client
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    LinearSweep,
    FanTilt,
    Orbit,
}

impl From<TrajectoryArg> for TrajectoryKind {
    fn from(t: TrajectoryArg) -> Self {
        match t {
            TrajectoryArg::LinearSweep => TrajectoryKind::LinearSweep,
            TrajectoryArg::FanTilt => TrajectoryKind::FanTilt,
            TrajectoryArg::Orbit => TrajectoryKind::Orbit,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene and trajectory TOML file
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scene: fan-plane, shadowed-orbit, constant-linear or wire
    #[arg(long, default_value = "fan-plane")]
    preset: String,
    /// Override the trajectory kind
    #[arg(long, value_enum)]
    trajectory: Option<TrajectoryArg>,
    /// Override the number of frames
    #[arg(long)]
    frames: Option<usize>,
    /// Override the angular span (degrees)
    #[arg(long)]
    span: Option<f64>,
    /// Override the noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    /// Override the noise seed
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the effective configuration as TOML
    #[arg(long)]
    write_config: Option<PathBuf>,
    /// Output sweep file; its stem becomes the sweep id
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Input sweep file
    #[arg(long = "in")]
    input: PathBuf,
    /// mean, median, tensor or spherical
    #[arg(long, default_value = "spherical")]
    method: Method,
    /// Spherical grid: latlong:<deg>, ico:<s> or fib:<n>
    #[arg(long, default_value = "fib:512", value_parser = parse_grid)]
    grid: GridSpec,
    /// Per-cell reducer of spherical models: mean or median
    #[arg(long, default_value = "mean")]
    cell_reducer: Reducer,
    /// Voxel spacing (mm)
    #[arg(long, default_value_t = 0.5)]
    spacing: f64,
    /// Selection ellipsoid semi-axes a,b,c (mm)
    #[arg(long, default_value = "1,1,1", value_parser = parse_ellipsoid)]
    ellipsoid: SelectionEllipsoid,
    /// Maximum samples per voxel
    #[arg(long, default_value_t = 500)]
    cap: usize,
    /// Minimum samples for a tensor fit
    #[arg(long, default_value_t = ReconstructionConfig::MIN_TENSOR_SAMPLES)]
    min_tensor_samples: usize,
    /// Project tensors onto the positive semidefinite cone
    #[arg(long)]
    spd_clamp: bool,
    /// Seed of the per-voxel subsampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output volume file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Intensity,
    Spherical,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Volume file
    #[arg(long)]
    volume: PathBuf,
    /// Sweep whose samples are reprojected
    #[arg(long)]
    sweep: PathBuf,
    /// Leave samples without a model value out of the MSE instead of counting them as zero
    #[arg(long)]
    skip_missing: bool,
    /// Number of variance bins
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(2..))]
    bins: u32,
    /// Variance attributed to each sample
    #[arg(long, value_enum, default_value = "spherical")]
    axis: AxisArg,
    /// Report path; <stem>.csv (bins) and <stem>.json (summary) are written
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum PlaneArg {
    Axial,
    Lateral,
    Custom,
}

#[derive(Debug, Args)]
struct SliceArgs {
    /// Volume file
    #[arg(long)]
    volume: PathBuf,
    /// Lattice plane or a custom plane
    #[arg(long, value_enum, default_value = "axial")]
    plane: PlaneArg,
    /// Lattice index of axial or lateral planes
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Custom plane origin x,y,z (mm)
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    origin: Option<Vec3>,
    /// Custom plane row axis x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    u: Option<Vec3>,
    /// Custom plane column axis x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    v: Option<Vec3>,
    /// Custom plane extent in pixels, w,h
    #[arg(long, value_parser = parse_extent)]
    extent: Option<(usize, usize)>,
    /// Custom plane pixel size (mm) [default: lattice spacing]
    #[arg(long)]
    pixel_size: Option<f64>,
    /// Scalar mode [default: mean, median, trace or cell_mean by volume kind]
    #[arg(long, conflicts_with = "direction")]
    mode: Option<SliceMode>,
    /// Render the free-view image seen from direction x,y,z instead of a scalar mode
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    direction: Option<Vec3>,
    /// Output image (.pgm, .ppm or .png)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Volume files to serve; ids are file stems
    #[arg(long, required = true, num_args = 1..)]
    volume: Vec<PathBuf>,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory with the browser client
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let spec: GridSpec = s.parse().map_err(|e: sonocs::grids::GridError| e.to_string())?;
    spec.build().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected {n} comma separated numbers, got '{s}'"))?;
    if v.len() != n || !v.iter().all(|x| x.is_finite()) {
        return Err(format!("expected {n} comma separated numbers, got '{s}'"));
    }
    Ok(v)
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v = parse_floats(s, 3)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn parse_ellipsoid(s: &str) -> Result<SelectionEllipsoid, String> {
    let v = parse_floats(s, 3)?;
    SelectionEllipsoid::new(v[0], v[1], v[2]).ok_or_else(|| "semi-axes must be positive".to_owned())
}

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(',').ok_or_else(|| format!("expected w,h, got '{s}'"))?;
    let parse = |x: &str| x.trim().parse::<usize>().ok().filter(|v| *v > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected two positive integers, got '{s}'")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn at<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(path) => SimulationConfig::from_toml(&std::fs::read_to_string(path).map_err(at(path))?)
            .map_err(at(path))?,
        None => presets::by_name(&a.preset).ok_or_else(|| {
            usage(format!(
                "unknown preset '{}'; use one of {}",
                a.preset,
                presets::NAMES.join(", ")
            ))
        })?,
    };
    if let Some(t) = a.trajectory {
        cfg.trajectory.kind = t.into();
    }
    if let Some(n) = a.frames {
        cfg.trajectory.frame_count = n;
    }
    if let Some(s) = a.span {
        cfg.trajectory.angular_span = s;
    }
    if let Some(s) = a.noise {
        cfg.scene.noise_sigma = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let id = stem(&a.out);
    let sweep = cfg.generate(&id)?;
    io::write_sweep(&sweep, &a.out).map_err(at(&a.out))?;
    if let Some(path) = &a.write_config {
        std::fs::write(path, cfg.to_toml()).map_err(at(path))?;
    }
    log::info!("wrote {} frames to {}", sweep.frames.len(), a.out.display());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> CmdResult {
    if a.spacing.is_nan() || a.spacing <= 0.0 {
        return Err(usage("--spacing must be positive"));
    }
    let sweep = io::read_sweep(&a.input).map_err(at(&a.input))?;
    let cfg = ReconstructionConfig {
        method: a.method,
        grid: Some(a.grid),
        cell_reducer: a.cell_reducer,
        min_tensor_samples: a.min_tensor_samples,
        sample_cap: a.cap,
        spd_clamp: a.spd_clamp,
        ellipsoid: a.ellipsoid,
        seed: a.seed,
    };
    let lattice = VoxelLattice::covering_sweep(&sweep, a.spacing)?;
    let volume = reconstruct::reconstruct_volume(&sweep, &lattice, &cfg).map_err(|e| match e {
        reconstruct::ReconstructError::InvalidMinSamples(_) => usage(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    })?;
    io::write_volume(&volume, &a.out).map_err(at(&a.out))?;
    log::info!("wrote {} voxels to {}", lattice.voxel_count(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let volume = io::read_volume(&a.volume).map_err(at(&a.volume))?;
    let sweep = io::read_sweep(&a.sweep).map_err(at(&a.sweep))?;
    let axis = match a.axis {
        AxisArg::Intensity => VarianceAxis::IntensityVar,
        AxisArg::Spherical => VarianceAxis::SphericalVar,
    };
    let report = evaluate::representation_error(&volume, &sweep, a.skip_missing);
    let binned = evaluate::binned_error(&volume, &sweep, axis, a.bins as usize, a.skip_missing).ok();
    let base = a.out.with_extension("");
    if let Some(b) = &binned {
        let csv = base.with_extension("csv");
        std::fs::write(&csv, b.to_csv()).map_err(at(&csv))?;
    }
    let summary = ReportSummary::new(&volume, &report, binned);
    let json = base.with_extension("json");
    std::fs::write(&json, summary.to_json() + "\n").map_err(at(&json))?;
    println!(
        "{} mse {:.6} over {} samples ({} missing)",
        volume.kind.name(),
        report.mse,
        report.sample_count,
        report.missing_count
    );
    Ok(())
}

fn cmd_slice(a: SliceArgs) -> CmdResult {
    let volume = io::read_volume(&a.volume).map_err(at(&a.volume))?;
    let plane = match a.plane {
        PlaneArg::Axial => SlicePlane::axial(&volume.lattice, a.index).map_err(|e| usage(e.to_string()))?,
        PlaneArg::Lateral => SlicePlane::lateral(&volume.lattice, a.index).map_err(|e| usage(e.to_string()))?,
        PlaneArg::Custom => {
            let (Some(origin), Some(u), Some(v), Some((w, h))) = (a.origin, a.u, a.v, a.extent) else {
                return Err(usage("--plane custom needs --origin, --u, --v and --extent"));
            };
            let px = a.pixel_size.unwrap_or(volume.lattice.spacing);
            SlicePlane::new(origin, [u, v], w, h, px).map_err(|e| usage(e.to_string()))?
        }
    };
    let (image, normalize) = match a.direction {
        Some(d) => (render::free_view_image(&volume, &plane, &d).map_err(|e| usage(e.to_string()))?, false),
        None => {
            let mode = a.mode.unwrap_or(SliceMode::default_for(volume.kind));
            let image = render::extract_slice(&volume, &plane, mode).map_err(|e| usage(e.to_string()))?;
            (image, mode.normalized_for_display())
        }
    };
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match (ext.as_str(), image.channels) {
        ("png", _) => sonocs_service::png_bytes(&image, normalize),
        ("pgm", 1) | ("ppm", 3) => image.to_pnm(normalize),
        ("pgm", _) => return Err(usage("color images need a .ppm or .png output")),
        ("ppm", _) => return Err(usage("grayscale images need a .pgm or .png output")),
        _ => return Err(usage("--out must end in .pgm, .ppm or .png")),
    };
    std::fs::write(&a.out, bytes).map_err(at(&a.out))?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CmdResult {
    let catalog = sonocs_service::Catalog::load(&a.volume)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(sonocs_service::serve(catalog, a.bind, a.static_dir))?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        par::configure_threads(n.into());
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
