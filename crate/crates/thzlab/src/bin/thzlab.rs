//! Command-line front end: one binary with subcommands wiring phantom
//! generation, scan simulation, feature extraction, tomographic and
//! compressive reconstruction, holography, restoration training, and a
//! reproducible end-to-end demo pipeline.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use thzlab::cs::{self, LinearOperator, MatrixKind};
use thzlab::holo::{self, ComplexField2D};
use thzlab::metrics;
use thzlab::nn::{self, Sarnet, SarnetConfig, TrainConfig};
use thzlab::phantom::{make_primitive, csg_union, Phantom, Primitive};
use thzlab::physics::{MaterialSpec, WaterVaporModel, reference_pulse};
use thzlab::sim::{augment_flip, simulate_scan, ScanConfig, ScanCube};
use thzlab::spectral::{fft_trace, feature_stack, select_water_bands, FeatureStack};
use thzlab::tensorio::{
    export_pgm, load_image, load_volume, read_thzt, save_image, save_volume, read_sidecar,
    write_sidecar, Image2D, Volume3D,
};
use thzlab::tomo::{fbp, reconstruct_volume, sart_with_history, FbpFilter, Sinogram};
use thzlab::{Error, Result};

// ---------------------------------------------------------------------------
// argument surface

#[derive(Parser)]
#[command(name = "thzlab", version, about = "Desk-scale THz computational imaging laboratory")]
struct Cli {
    /// Worker thread cap (default: THZLAB_THREADS env var, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Key-value config file (`flag = value` per line, # comments);
    /// explicit CLI flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxel phantom construction and clean projections
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Forward scan simulation
    Simulate {
        #[command(subcommand)]
        cmd: SimulateCmd,
    },
    /// Spectral feature extraction
    Extract {
        #[command(subcommand)]
        cmd: ExtractCmd,
    },
    /// Slice reconstruction from a sinogram
    Reconstruct {
        #[command(subcommand)]
        cmd: ReconstructCmd,
    },
    /// Assemble a 3-D volume from per-view projection images
    Volume(VolumeArgs),
    /// Compressive-sensing solvers
    Cs {
        #[command(subcommand)]
        cmd: CsCmd,
    },
    /// Off-axis holography
    Holo {
        #[command(subcommand)]
        cmd: HoloCmd,
    },
    /// Restoration network training and inference
    Restore {
        #[command(subcommand)]
        cmd: RestoreCmd,
    },
    /// Image and volume quality metrics
    Metrics(MetricsArgs),
    /// End-to-end experiments
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Rasterize a geometric phantom onto a voxel grid
    Gen(PhantomGenArgs),
    /// Write clean path-length projections of a phantom
    Project(PhantomProjectArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Output THZT path
    #[arg(long)]
    out: PathBuf,
    /// Grid size as nz,ny,nx
    #[arg(long, default_value = "16,64,64")]
    size: String,
    /// sphere | box | cylinder | glyph | demo
    #[arg(long, default_value = "sphere")]
    kind: String,
    /// Radius in voxels (sphere/cylinder); default scales with the grid
    #[arg(long)]
    radius: Option<f64>,
    /// Glyph character for --kind glyph
    #[arg(long)]
    glyph: Option<char>,
    /// Voxel pitch in mm
    #[arg(long)]
    pitch: Option<f64>,
}

#[derive(Args)]
struct PhantomProjectArgs {
    #[arg(long)]
    phantom: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of evenly spaced views over 180 degrees
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Subcommand)]
enum SimulateCmd {
    /// Multi-view raster-scanned THz-TDS CT acquisition
    Ct(SimulateCtArgs),
}

#[derive(Args)]
struct SimulateCtArgs {
    #[arg(long)]
    phantom: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// RNG seed for the detector noise streams
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    angle_step: Option<f64>,
    /// Horizontal scan range in mm
    #[arg(long)]
    x_range: Option<f64>,
    /// Peak-to-noise-floor ratio in dB
    #[arg(long)]
    dynamic_range: Option<f64>,
    /// Skip Fresnel interface losses
    #[arg(long)]
    no_fresnel: bool,
    /// Append horizontally flipped views at 180 - theta
    #[arg(long)]
    flip_augment: bool,
}

#[derive(Subcommand)]
enum ExtractCmd {
    /// Time-max plus 12 amplitude and 12 phase band images per view
    Features(ExtractFeaturesArgs),
}

#[derive(Args)]
struct ExtractFeaturesArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum ReconstructCmd {
    /// Filtered back-projection
    Fbp(ReconstructFbpArgs),
    /// Simultaneous algebraic reconstruction
    Sart(ReconstructSartArgs),
}

#[derive(Args)]
struct ReconstructFbpArgs {
    /// Sinogram THZT (alternatively use --projections with --row)
    #[arg(long)]
    sinogram: Option<PathBuf>,
    /// Projection-image directory to take one detector row from
    #[arg(long)]
    projections: Option<PathBuf>,
    /// Detector row (z slice) when reading --projections
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// ram-lak | shepp-logan | hann
    #[arg(long)]
    filter: Option<String>,
    /// Also export an 8-bit PGM preview here
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructSartArgs {
    #[arg(long)]
    sinogram: Option<PathBuf>,
    #[arg(long)]
    projections: Option<PathBuf>,
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    relax: Option<f64>,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct VolumeArgs {
    /// Directory of projection images plus an angles.txt manifest
    #[arg(long)]
    projections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    filter: Option<String>,
    /// Threshold the normalized volume at 0.5
    #[arg(long)]
    binarize: bool,
}

#[derive(Subcommand)]
enum CsCmd {
    /// Recover a synthetic sparse vector from Bernoulli measurements
    Solve(CsSolveArgs),
}

#[derive(Args)]
struct CsSolveArgs {
    #[arg(long)]
    seed: u64,
    /// Signal length
    #[arg(long)]
    n: Option<usize>,
    /// Non-zero count
    #[arg(long)]
    k: Option<usize>,
    /// Measurement count
    #[arg(long)]
    m: Option<usize>,
    /// Final L1 weight
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output THZT for the recovered vector
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of the objective history
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Subcommand)]
enum HoloCmd {
    /// Synthesize an off-axis hologram of a band-limited test object
    Sim(HoloSimArgs),
    /// Recover the object field from a hologram
    Reconstruct(HoloReconstructArgs),
}

#[derive(Args)]
struct HoloSimArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    /// Carrier frequency in THz
    #[arg(long)]
    freq: Option<f64>,
    /// Reference tilt in degrees
    #[arg(long)]
    tilt: Option<f64>,
    /// Propagation distance in mm
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct HoloReconstructArgs {
    #[arg(long)]
    hologram: PathBuf,
    /// Output THZT for the recovered amplitude image
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tilt: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    freq: Option<f64>,
}

#[derive(Subcommand)]
enum RestoreCmd {
    /// Train the restoration network on feature stacks and clean targets
    Train(RestoreTrainArgs),
    /// Run a trained network over feature stacks
    Infer(RestoreInferArgs),
}

#[derive(Args)]
struct RestoreTrainArgs {
    /// Directory of feature stacks written by `extract features`
    #[arg(long)]
    features: PathBuf,
    /// Directory of clean target images with matching indices
    #[arg(long)]
    targets: PathBuf,
    /// Output weight directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    max_channels: Option<usize>,
    #[arg(long)]
    subspace_dim: Option<usize>,
    #[arg(long)]
    cam_reduction: Option<usize>,
    /// Stop early once the epoch MSE drops below this value
    #[arg(long)]
    stop_at_loss: Option<f64>,
}

#[derive(Args)]
struct RestoreInferArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference THZT (2-D image or 3-D volume)
    #[arg(long)]
    truth: PathBuf,
    /// Test THZT of the same rank
    #[arg(long)]
    test: PathBuf,
    /// Data range for PSNR/SSIM on images
    #[arg(long)]
    range: Option<f64>,
    /// Optional CSV output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Seeded end-to-end run: phantom, scan, features, toy restoration,
    /// volumes from raw and restored projections, metrics CSV
    Demo(PipelineDemoArgs),
}

#[derive(Args)]
struct PipelineDemoArgs {
    #[arg(long)]
    seed: u64,
    /// Lateral grid size in voxels (divisible by 16)
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

// ---------------------------------------------------------------------------
// error classification and config plumbing

enum CliError {
    Usage(String),
    Data(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Key-value defaults loaded from --config; CLI flags override these.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {}", path.display(), e))
            })?;
            for line in text.lines() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("bad config line (want key = value): {:?}", line))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    /// CLI value if present, else config-file value, else default.
    fn get<T: std::str::FromStr>(&self, cli: Option<T>, key: &str, default: T) -> CliResult<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(s) => s.parse::<T>().map_err(|_| {
                CliError::Usage(format!("bad value {:?} for config key {}", s, key))
            }),
            None => Ok(default),
        }
    }
}

fn parse_filter(name: &str) -> CliResult<FbpFilter> {
    name.parse::<FbpFilter>()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// projection-directory conventions shared by extract/restore/volume

/// Read `angles.txt` (`name = angle_deg` per line, ascending file order).
fn read_angles(dir: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, v) in read_sidecar(dir.join("angles.txt"))? {
        let a = v.parse::<f64>().map_err(|_| {
            Error::InvalidArgument(format!("bad angle {:?} for view {}", v, name))
        })?;
        out.push((name, a));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no views listed in {}/angles.txt",
            dir.display()
        )));
    }
    Ok(out)
}

fn write_angles(dir: &Path, entries: &[(String, f64)]) -> Result<()> {
    let pairs: Vec<(String, String)> = entries
        .iter()
        .map(|(n, a)| (n.clone(), format!("{}", a)))
        .collect();
    write_sidecar(&pairs, dir.join("angles.txt"))
}

// ---------------------------------------------------------------------------
// subcommand implementations

fn run_phantom_gen(a: &PhantomGenArgs, cfg: &FileConfig) -> CliResult<()> {
    let dims: Vec<usize> = a
        .size
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --size {:?}, want nz,ny,nx", a.size)))?;
    if dims.len() != 3 {
        return Err(CliError::Usage(format!(
            "bad --size {:?}, want nz,ny,nx",
            a.size
        )));
    }
    let shape = (dims[0], dims[1], dims[2]);
    let pitch = cfg.get(a.pitch, "pitch", thzlab::phantom::DEFAULT_PITCH_MM)?;
    let ph = build_phantom(shape, &a.kind, a.radius, a.glyph, pitch)?;
    ph.save(&a.out)?;
    println!(
        "phantom {}x{}x{} kind={} -> {}",
        shape.0,
        shape.1,
        shape.2,
        a.kind,
        a.out.display()
    );
    Ok(())
}

fn build_phantom(
    shape: (usize, usize, usize),
    kind: &str,
    radius: Option<f64>,
    glyph: Option<char>,
    pitch: f64,
) -> CliResult<Phantom> {
    let (nz, ny, nx) = shape;
    let (cz, cy, cx) = (
        (nz as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nx as f64 - 1.0) / 2.0,
    );
    let min_dim = nz.min(ny).min(nx) as f64;
    let r = radius.unwrap_or(min_dim / 3.0);
    let material = MaterialSpec::hips();
    let prim = match kind {
        "sphere" => Primitive::Sphere {
            center: [cz, cy, cx],
            radius: r,
        },
        "box" => Primitive::Box {
            min: [cz - r, cy - r, cx - r],
            max: [cz + r, cy + r, cx + r],
        },
        "cylinder" => Primitive::Cylinder {
            center_xy: [cy, cx],
            radius: r,
            z_min: 0.0,
            z_max: nz as f64 - 1.0,
        },
        "glyph" => {
            let ch = glyph
                .ok_or_else(|| CliError::Usage("--kind glyph needs --glyph".into()))?;
            let scale = (nx as f64 / 8.0).max(1.0);
            Primitive::ExtrudedGlyph {
                ch,
                origin: [cz - 3.5 * scale / 2.0, cy - r / 2.0, cx - 2.5 * scale / 2.0],
                scale: scale / 2.0,
                thickness: r,
            }
        }
        "demo" => {
            // off-center sphere plus a vertical cylinder, so projections
            // vary with angle
            let s = make_primitive(
                shape,
                &Primitive::Sphere {
                    center: [cz, cy - 0.15 * ny as f64, cx - 0.15 * nx as f64],
                    // the z extent is the binding constraint on a flat grid
                    radius: (0.35 * nz as f64).min(0.2 * nx.min(ny) as f64),
                },
                material.clone(),
                pitch,
            )?;
            let c = make_primitive(
                shape,
                &Primitive::Cylinder {
                    center_xy: [cy + 0.18 * ny as f64, cx + 0.18 * nx as f64],
                    radius: 0.10 * nx.min(ny) as f64,
                    z_min: 0.0,
                    z_max: nz as f64 - 1.0,
                },
                material,
                pitch,
            )?;
            return Ok(csg_union(&s, &c)?);
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown phantom kind {:?} (sphere|box|cylinder|glyph|demo)",
                other
            )))
        }
    };
    Ok(make_primitive(shape, &prim, material, pitch)?)
}

fn run_phantom_project(a: &PhantomProjectArgs, cfg: &FileConfig) -> CliResult<()> {
    let ph = Phantom::load(&a.phantom)?;
    let views = cfg.get(a.views, "views", 12usize)?;
    if views == 0 {
        return Err(CliError::Usage("--views must be >= 1".into()));
    }
    ensure_dir(&a.out_dir)?;
    let mut entries = Vec::new();
    for v in 0..views {
        let angle = 180.0 * v as f64 / views as f64;
        let img = ph.ground_truth_projection(angle)?;
        let name = format!("proj_{:03}", v);
        save_image(&img, a.out_dir.join(format!("{}.thzt", name)))?;
        entries.push((name, angle));
    }
    write_angles(&a.out_dir, &entries)?;
    println!("{} clean projections -> {}", views, a.out_dir.display());
    Ok(())
}

fn run_simulate_ct(a: &SimulateCtArgs, cfg: &FileConfig) -> CliResult<()> {
    let ph = Phantom::load(&a.phantom)?;
    let mut sc = ScanConfig::default();
    sc.rng_seed = a.seed;
    sc.n_views = cfg.get(a.views, "views", sc.n_views)?;
    sc.angle_step_deg = cfg.get(
        a.angle_step,
        "angle-step",
        sc.angular_range_deg / sc.n_views as f64,
    )?;
    sc.x_range_mm = cfg.get(a.x_range, "x-range", sc.x_range_mm)?;
    sc.noise_dynamic_range_db = cfg.get(a.dynamic_range, "dynamic-range", sc.noise_dynamic_range_db)?;
    sc.include_fresnel = !a.no_fresnel;
    let mut cube = simulate_scan(&ph, &sc)?;
    if a.flip_augment {
        cube = augment_flip(&cube);
    }
    cube.save(&a.out)?;
    println!(
        "scan cube {} views x {}x{} pixels -> {}",
        cube.n_views(),
        cube.traces.dim().1,
        cube.traces.dim().2,
        a.out.display()
    );
    Ok(())
}

/// Water bands shared by feature extraction everywhere: 12 ascending
/// absorption-line frequencies in 0.3-1.3 THz.
fn default_bands(water: &WaterVaporModel) -> Result<Vec<f64>> {
    select_water_bands(water, 0.3, 1.3, 12)
}

fn extract_features_impl(cube: &ScanCube, out_dir: &Path) -> Result<usize> {
    ensure_dir(out_dir)?;
    let reference = fft_trace(&reference_pulse(&cube.config.pulse)?)?;
    let bands = default_bands(&cube.config.water)?;
    let mut entries = Vec::new();
    for v in 0..cube.n_views() {
        let stack = feature_stack(
            cube.view(v),
            cube.config.pulse.dt_ps,
            cube.pitch_mm,
            &bands,
            &reference,
        )?;
        let name = format!("view_{:03}", v);
        stack.save(out_dir.join(format!("{}.thzt", name)))?;
        // normalized Time-max channel doubles as the raw projection image
        let tm = Image2D::new(
            stack.channels.index_axis(Axis(0), 0).to_owned(),
            cube.pitch_mm,
        )?;
        save_image(&tm, out_dir.join(format!("tm_{:03}.thzt", v)))?;
        entries.push((name, cube.angles_deg[v]));
    }
    write_angles(out_dir, &entries)?;
    Ok(cube.n_views())
}

fn run_extract_features(a: &ExtractFeaturesArgs) -> CliResult<()> {
    let cube = ScanCube::load(&a.cube)?;
    let n = extract_features_impl(&cube, &a.out_dir)?;
    println!("{} feature stacks -> {}", n, a.out_dir.display());
    Ok(())
}

/// Load a sinogram directly, or assemble one from a single detector row
/// of a projection-image directory.
fn sinogram_input(
    sinogram: Option<&Path>,
    projections: Option<&Path>,
    row: Option<usize>,
) -> CliResult<Sinogram> {
    match (sinogram, projections) {
        (Some(p), None) => Ok(Sinogram::load(p)?),
        (None, Some(dir)) => {
            let entries = read_angles(dir)?;
            let row = row.unwrap_or(0);
            let mut rows = Vec::new();
            let mut angles = Vec::new();
            let mut pitch = 0.0;
            for (name, angle) in &entries {
                let img = load_image(dir.join(format!("{}.thzt", name)))?;
                if row >= img.height() {
                    return Err(CliError::Usage(format!(
                        "--row {} out of range for {}-row projections",
                        row,
                        img.height()
                    )));
                }
                rows.push(img.data.row(row).to_owned());
                angles.push(*angle);
                pitch = img.pitch_mm;
            }
            let n = rows[0].len();
            let mut data = Array2::<f32>::zeros((rows.len(), n));
            for (i, r) in rows.iter().enumerate() {
                data.row_mut(i).assign(r);
            }
            Ok(Sinogram::new(data, angles, pitch)?)
        }
        _ => Err(CliError::Usage(
            "provide exactly one of --sinogram or --projections".into(),
        )),
    }
}

fn run_reconstruct_fbp(a: &ReconstructFbpArgs, cfg: &FileConfig) -> CliResult<()> {
    let s = sinogram_input(a.sinogram.as_deref(), a.projections.as_deref(), a.row)?;
    let filter = parse_filter(&cfg.get(a.filter.clone(), "filter", "ram-lak".to_string())?)?;
    let img = fbp(&s, filter)?;
    save_image(&img, &a.out)?;
    if let Some(p) = &a.pgm {
        export_pgm(&img, p)?;
    }
    println!(
        "fbp {} angles -> {} ({}x{})",
        s.n_angles(),
        a.out.display(),
        img.height(),
        img.width()
    );
    Ok(())
}

fn run_reconstruct_sart(a: &ReconstructSartArgs, cfg: &FileConfig) -> CliResult<()> {
    let s = sinogram_input(a.sinogram.as_deref(), a.projections.as_deref(), a.row)?;
    let iters = cfg.get(a.iters, "iters", 10usize)?;
    let relax = cfg.get(a.relax, "relax", 0.25f64)?;
    let (img, residuals) = sart_with_history(&s, iters, relax, None)?;
    save_image(&img, &a.out)?;
    if let Some(p) = &a.pgm {
        export_pgm(&img, p)?;
    }
    println!(
        "sart {} iters, final residual {:.6e} -> {}",
        iters,
        residuals.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn run_volume(a: &VolumeArgs, cfg: &FileConfig) -> CliResult<()> {
    let entries = read_angles(&a.projections)?;
    let filter = parse_filter(&cfg.get(a.filter.clone(), "filter", "ram-lak".to_string())?)?;
    let mut projections = Vec::new();
    let mut angles = Vec::new();
    for (name, angle) in &entries {
        projections.push(load_image(a.projections.join(format!("{}.thzt", name)))?);
        angles.push(*angle);
    }
    let vol = reconstruct_volume(&projections, &angles, filter, a.binarize)?;
    save_volume(&vol, &a.out)?;
    let (nz, ny, nx) = vol.data.dim();
    println!(
        "volume {}x{}x{} from {} views -> {}",
        nz,
        ny,
        nx,
        angles.len(),
        a.out.display()
    );
    Ok(())
}

/// Warm-started regularization continuation down to the target lambda.
fn solve_sparse(
    op: &dyn LinearOperator,
    s: &Array1<f64>,
    lambda: f64,
    iters: usize,
) -> Result<cs::SolveResult> {
    let s_max = s.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut lam = (s_max * 0.5).max(lambda);
    let mut x = Array1::<f64>::zeros(op.cols());
    loop {
        let r = cs::fista_warm(op, s, lam, iters, 1e-12, x)?;
        x = r.x;
        if lam <= lambda {
            return cs::fista_warm(op, s, lambda, iters, 1e-14, x);
        }
        lam = (lam * 0.1).max(lambda);
    }
}

fn run_cs_solve(a: &CsSolveArgs, cfg: &FileConfig) -> CliResult<()> {
    let n = cfg.get(a.n, "n", 256usize)?;
    let k = cfg.get(a.k, "k", 8usize)?;
    let m = cfg.get(a.m, "m", 128usize)?;
    let lambda = cfg.get(a.lambda, "lambda", 1e-6f64)?;
    let iters = cfg.get(a.iters, "iters", 400usize)?;
    if k >= n || m > n {
        return Err(CliError::Usage(format!(
            "need k < n and m <= n, got n={} k={} m={}",
            n, k, m
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mat = cs::make_sensing_matrix(MatrixKind::BernoulliPm1, m, n, a.seed ^ 0x5eed)?;
    // ground-truth sparse vector with well-separated support
    let mut x_true = Array1::<f64>::zeros(n);
    let mut placed = 0;
    while placed < k {
        let i = rng.gen_range(0..n);
        if x_true[i] == 0.0 {
            let mag = rng.gen_range(0.5..1.5);
            x_true[i] = if rng.gen_bool(0.5) { mag } else { -mag };
            placed += 1;
        }
    }
    let s = mat.apply(&x_true);
    let r = solve_sparse(&mat, &s, lambda, iters)?;
    let rel_err = (&r.x - &x_true).mapv(|v| v * v).sum().sqrt()
        / x_true.mapv(|v| v * v).sum().sqrt();
    let thresh = 1e-4 * x_true.iter().fold(0.0f64, |mx, &v| mx.max(v.abs()));
    let support_ok = (0..n).all(|i| (x_true[i] != 0.0) == (r.x[i].abs() > thresh));
    let flat: Vec<f32> = r.x.iter().map(|&v| v as f32).collect();
    thzlab::tensorio::write_thzt(&thzlab::tensorio::Tensor::from_real(&[n], flat)?, &a.out)?;
    if let Some(h) = &a.history {
        let mut csv = String::from("iter,objective\n");
        for (i, obj) in r.history.iter().enumerate() {
            csv.push_str(&format!("{},{:.12e}\n", i, obj));
        }
        write_text(h, &csv)?;
    }
    println!(
        "cs solve n={} k={} m={}: rel_err={:.3e} support_exact={}",
        n, k, m, rel_err, support_ok
    );
    Ok(())
}

/// Smooth band-limited amplitude object for holography experiments.
fn holo_test_object(size: usize, pitch: f64, freq: f64, seed: u64) -> Result<ComplexField2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.3..0.7) * size as f64,
                rng.gen_range(0.3..0.7) * size as f64,
                rng.gen_range(0.08..0.15) * size as f64,
                rng.gen_range(0.4..1.0),
            )
        })
        .collect();
    let data = Array2::from_shape_fn((size, size), |(i, j)| {
        let mut v = 0.15f64;
        for &(ci, cj, sig, amp) in &blobs {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            v += amp * (-d2 / (2.0 * sig * sig)).exp();
        }
        num_complex::Complex::new(v, 0.0)
    });
    ComplexField2D::new(data, pitch, freq)
}

fn run_holo_sim(a: &HoloSimArgs, cfg: &FileConfig) -> CliResult<()> {
    let size = cfg.get(a.size, "size", 128usize)?;
    let freq = cfg.get(a.freq, "freq", 0.5f64)?;
    let tilt = cfg.get(a.tilt, "tilt", 8.0f64)?;
    let z = cfg.get(a.z, "z", 20.0f64)?;
    let seed = cfg.get(a.seed, "seed", 0u64)?;
    let pitch = 0.25;
    let obj = holo_test_object(size, pitch, freq, seed)?;
    let at_sensor = holo::angular_spectrum_propagate(&obj, z);
    let h = holo::synthesize_hologram(&at_sensor, tilt, 1.0)?;
    save_image(&h, &a.out)?;
    write_sidecar(
        &[
            ("tilt_deg".into(), format!("{}", tilt)),
            ("z_mm".into(), format!("{}", z)),
            ("freq_thz".into(), format!("{}", freq)),
        ],
        a.out.with_extension("params"),
    )?;
    println!(
        "hologram {}x{} tilt={} deg z={} mm -> {}",
        size,
        size,
        tilt,
        z,
        a.out.display()
    );
    Ok(())
}

fn run_holo_reconstruct(a: &HoloReconstructArgs, cfg: &FileConfig) -> CliResult<()> {
    let h = load_image(&a.hologram)?;
    // fall back to the sidecar written by `holo sim` when flags are absent
    let params: HashMap<String, String> = read_sidecar(a.hologram.with_extension("params"))
        .map(|v| v.into_iter().collect())
        .unwrap_or_default();
    let from_params = |key: &str| params.get(key).and_then(|s| s.parse::<f64>().ok());
    let tilt = cfg.get(a.tilt.or_else(|| from_params("tilt_deg")), "tilt", 8.0)?;
    let z = cfg.get(a.z.or_else(|| from_params("z_mm")), "z", 20.0)?;
    let freq = cfg.get(a.freq.or_else(|| from_params("freq_thz")), "freq", 0.5)?;
    let field = holo::reconstruct_offaxis(&h, tilt, 1.0, z, freq)?;
    let amp = Image2D::new(field.data.mapv(|c| c.norm() as f32), field.pitch_mm)?;
    save_image(&amp, &a.out)?;
    field.save(a.out.with_extension("field.thzt"))?;
    println!("recovered amplitude -> {}", a.out.display());
    Ok(())
}

fn load_feature_dataset(dir: &Path) -> Result<Vec<(String, f64, FeatureStack)>> {
    let mut out = Vec::new();
    for (name, angle) in read_angles(dir)? {
        let stack = FeatureStack::load(dir.join(format!("{}.thzt", name)))?;
        out.push((name, angle, stack));
    }
    Ok(out)
}

fn toy_restore_config(a: &RestoreTrainArgs, cfg: &FileConfig) -> CliResult<SarnetConfig> {
    Ok(SarnetConfig {
        base_channels: cfg.get(a.base_channels, "base-channels", 4)?,
        max_channels: cfg.get(a.max_channels, "max-channels", 8)?,
        subspace_dim: cfg.get(a.subspace_dim, "subspace-dim", 2)?,
        cam_reduction: cfg.get(a.cam_reduction, "cam-reduction", 2)?,
        stem_kernel: 3,
    })
}

fn save_net(net: &Sarnet, dir: &Path, seed: u64) -> Result<()> {
    net.params.save(dir)?;
    write_sidecar(
        &[
            ("base_channels".into(), format!("{}", net.cfg.base_channels)),
            ("max_channels".into(), format!("{}", net.cfg.max_channels)),
            ("subspace_dim".into(), format!("{}", net.cfg.subspace_dim)),
            ("cam_reduction".into(), format!("{}", net.cfg.cam_reduction)),
            ("stem_kernel".into(), format!("{}", net.cfg.stem_kernel)),
            ("seed".into(), format!("{}", seed)),
        ],
        dir.join("netconfig.txt"),
    )
}

fn load_net(dir: &Path) -> Result<Sarnet> {
    let kv: HashMap<String, String> = read_sidecar(dir.join("netconfig.txt"))?
        .into_iter()
        .collect();
    let get = |key: &str| -> Result<usize> {
        kv.get(key)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("missing/bad {} in netconfig", key)))
    };
    let cfg = SarnetConfig {
        base_channels: get("base_channels")?,
        max_channels: get("max_channels")?,
        subspace_dim: get("subspace_dim")?,
        cam_reduction: get("cam_reduction")?,
        stem_kernel: get("stem_kernel")?,
    };
    let mut net = Sarnet::new(cfg, 0)?;
    net.params.load_into(dir)?;
    Ok(net)
}

fn run_restore_train(a: &RestoreTrainArgs, cfg: &FileConfig) -> CliResult<()> {
    let dataset = load_feature_dataset(&a.features)?;
    let mut targets = Vec::new();
    for (i, _) in dataset.iter().enumerate() {
        targets.push(load_image(a.targets.join(format!("target_{:03}.thzt", i)))?);
    }
    let net_cfg = toy_restore_config(a, cfg)?;
    let mut net = Sarnet::new(net_cfg, a.seed)?;
    let pairs: Vec<(&FeatureStack, &Image2D)> = dataset
        .iter()
        .zip(targets.iter())
        .map(|((_, _, s), t)| (s, t))
        .collect();
    let mut tc = TrainConfig::new(
        cfg.get(a.epochs, "epochs", 200usize)?,
        cfg.get(a.lr, "lr", 3e-3f64)?,
    );
    tc.stop_at_loss = a.stop_at_loss;
    let history = nn::train(&mut net, &pairs, &tc)?;
    ensure_dir(&a.out)?;
    save_net(&net, &a.out, a.seed)?;
    let mut csv = String::from("epoch,mse\n");
    for (i, l) in history.iter().enumerate() {
        csv.push_str(&format!("{},{:.12e}\n", i, l));
    }
    write_text(&a.out.join("loss.csv"), &csv)?;
    println!(
        "trained {} epochs, final mse {:.6e} -> {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn run_restore_infer(a: &RestoreInferArgs) -> CliResult<()> {
    let mut net = load_net(&a.weights)?;
    let dataset = load_feature_dataset(&a.features)?;
    ensure_dir(&a.out_dir)?;
    let mut entries = Vec::new();
    for (i, (_, angle, stack)) in dataset.iter().enumerate() {
        let img = nn::sarnet_forward(&mut net, stack)?;
        let name = format!("restored_{:03}", i);
        save_image(&img, a.out_dir.join(format!("{}.thzt", name)))?;
        entries.push((name, *angle));
    }
    write_angles(&a.out_dir, &entries)?;
    println!("{} restored projections -> {}", entries.len(), a.out_dir.display());
    Ok(())
}

fn run_metrics(a: &MetricsArgs, cfg: &FileConfig) -> CliResult<()> {
    let rank = read_thzt(&a.truth)?.shape().len();
    let mut csv = String::new();
    match rank {
        2 => {
            let truth = load_image(&a.truth)?;
            let test = load_image(&a.test)?;
            let range = cfg.get(a.range, "range", 1.0f64)?;
            let p = metrics::psnr(&truth, &test, range)?;
            let s = metrics::ssim(&truth, &test, range)?;
            csv.push_str("metric,value\n");
            csv.push_str(&format!("psnr_db,{:.6}\nssim,{:.6}\n", p, s));
            println!("psnr {:.3} dB, ssim {:.4}", p, s);
        }
        3 => {
            let truth = load_volume(&a.truth)?;
            let test = load_volume(&a.test)?;
            let m = metrics::mse_cross_sections(&truth, &test)?;
            csv.push_str("metric,value\n");
            csv.push_str(&format!("mse_cross_sections,{:.6e}\n", m));
            println!("cross-section mse {:.6e}", m);
        }
        r => {
            return Err(CliError::Data(format!(
                "expected a 2-D or 3-D tensor, got rank {}",
                r
            )))
        }
    }
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// end-to-end demo

/// Outcome of one seeded end-to-end run, reused by the acceptance tests.
pub struct DemoOutcome {
    pub mse_raw: f64,
    pub mse_restored: f64,
}

fn demo_scan_config(size: usize, pitch: f64, seed: u64, n_views: usize) -> ScanConfig {
    let mut sc = ScanConfig::default();
    sc.n_views = n_views;
    sc.angle_step_deg = sc.angular_range_deg / n_views as f64;
    sc.x_range_mm = size as f64 * pitch;
    sc.rng_seed = seed;
    sc
}

fn run_pipeline_demo(a: &PipelineDemoArgs, cfg: &FileConfig) -> CliResult<()> {
    let size = cfg.get(a.size, "size", 64usize)?;
    if size % 16 != 0 || size < 32 {
        return Err(CliError::Usage(format!(
            "--size must be a multiple of 16 and >= 32, got {}",
            size
        )));
    }
    let epochs = cfg.get(a.epochs, "epochs", 150usize)?;
    let dir = &a.out_dir;
    ensure_dir(dir)?;
    let pitch = thzlab::phantom::DEFAULT_PITCH_MM;
    let n_views = 12;

    // 1. phantom
    let ph = build_phantom((16, size, size), "demo", None, None, pitch)?;
    let phantom_path = dir.join("phantom.thzt");
    ph.save(&phantom_path)?;

    // 2. seeded simulation
    let sc = demo_scan_config(size, pitch, a.seed, n_views);
    let cube = simulate_scan(&ph, &sc)?;

    // 3. features (also writes the raw Time-max projections)
    let feat_dir = dir.join("features");
    extract_features_impl(&cube, &feat_dir)?;
    let dataset = load_feature_dataset(&feat_dir)?;

    // 4. clean targets: normalized path-length projections
    let mut targets = Vec::new();
    let mut peak = 0.0f32;
    for (_, angle, _) in &dataset {
        let img = ph.ground_truth_projection(*angle)?;
        peak = img.data.iter().fold(peak, |m, &v| m.max(v));
        targets.push(img);
    }
    if peak <= 0.0 {
        return Err(CliError::Data("empty phantom produced blank projections".into()));
    }
    let target_dir = dir.join("targets");
    ensure_dir(&target_dir)?;
    for (i, t) in targets.iter_mut().enumerate() {
        t.data.mapv_inplace(|v| v / peak);
        save_image(t, target_dir.join(format!("target_{:03}.thzt", i)))?;
    }

    // 5. toy restoration training
    let net_cfg = SarnetConfig {
        base_channels: 4,
        max_channels: 8,
        subspace_dim: 2,
        cam_reduction: 2,
        stem_kernel: 3,
    };
    let mut net = Sarnet::new(net_cfg, a.seed)?;
    let pairs: Vec<(&FeatureStack, &Image2D)> = dataset
        .iter()
        .zip(targets.iter())
        .map(|((_, _, s), t)| (s, t))
        .collect();
    let history = nn::train(&mut net, &pairs, &TrainConfig::new(epochs, 3e-3))?;
    let weights_dir = dir.join("weights");
    ensure_dir(&weights_dir)?;
    save_net(&net, &weights_dir, a.seed)?;

    // 6. restored projections and volumes
    let restored_dir = dir.join("restored");
    ensure_dir(&restored_dir)?;
    let mut restored = Vec::new();
    let mut raw = Vec::new();
    let mut angles = Vec::new();
    let mut entries = Vec::new();
    for (i, (_, angle, stack)) in dataset.iter().enumerate() {
        let img = nn::sarnet_forward(&mut net, stack)?;
        let name = format!("restored_{:03}", i);
        save_image(&img, restored_dir.join(format!("{}.thzt", name)))?;
        entries.push((name, *angle));
        restored.push(img);
        raw.push(load_image(feat_dir.join(format!("tm_{:03}.thzt", i)))?);
        angles.push(*angle);
    }
    write_angles(&restored_dir, &entries)?;
    let vol_restored = reconstruct_volume(&restored, &angles, FbpFilter::RamLak, false)?;
    let vol_raw = reconstruct_volume(&raw, &angles, FbpFilter::RamLak, false)?;
    save_volume(&vol_restored, dir.join("volume_restored.thzt"))?;
    save_volume(&vol_raw, dir.join("volume_raw.thzt"))?;
    let truth = Volume3D::new(ph.grid.data.clone(), pitch)?;
    save_volume(&truth, dir.join("volume_truth.thzt"))?;

    // 7. metrics CSV
    let mse_restored = metrics::mse_cross_sections(&vol_restored, &truth)?;
    let mse_raw = metrics::mse_cross_sections(&vol_raw, &truth)?;
    let slice = |v: &Volume3D| {
        Image2D::new(v.data.index_axis(Axis(0), 8).to_owned(), pitch).expect("slice")
    };
    let p_restored = metrics::psnr(&slice(&truth), &slice(&vol_restored), 1.0)?;
    let p_raw = metrics::psnr(&slice(&truth), &slice(&vol_raw), 1.0)?;
    let mut csv = String::from("variant,mse_cross_sections,psnr_mid_slice_db\n");
    csv.push_str(&format!("raw,{:.9e},{:.6}\n", mse_raw, p_raw));
    csv.push_str(&format!("restored,{:.9e},{:.6}\n", mse_restored, p_restored));
    write_text(&dir.join("metrics.csv"), &csv)?;
    export_pgm(&slice(&vol_restored), &dir.join("mid_slice_restored.pgm"))?;
    export_pgm(&slice(&vol_raw), &dir.join("mid_slice_raw.pgm"))?;

    // 8. run manifest: seeds, sizes, and content hashes
    let mut manifest = vec![
        ("tool_version".into(), env!("CARGO_PKG_VERSION").to_string()),
        ("seed".into(), format!("{}", a.seed)),
        ("size".into(), format!("{}", size)),
        ("views".into(), format!("{}", n_views)),
        ("epochs".into(), format!("{}", epochs)),
        (
            "final_train_mse".into(),
            format!("{:.12e}", history.last().copied().unwrap_or(f64::NAN)),
        ),
    ];
    for name in [
        "phantom.thzt",
        "volume_raw.thzt",
        "volume_restored.thzt",
        "volume_truth.thzt",
        "metrics.csv",
    ] {
        manifest.push((format!("sha256:{}", name), sha256_file(&dir.join(name))?));
    }
    write_sidecar(&manifest, dir.join("manifest.txt"))?;
    println!(
        "demo seed={} mse raw {:.4e} vs restored {:.4e} -> {}",
        a.seed,
        mse_raw,
        mse_restored,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// entry point

fn init_threads(cli_threads: Option<usize>) -> CliResult<()> {
    let n = match cli_threads {
        Some(n) => Some(n),
        None => match std::env::var("THZLAB_THREADS") {
            Ok(s) => Some(s.parse::<usize>().map_err(|_| {
                CliError::Usage(format!("bad THZLAB_THREADS value {:?}", s))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {}", e)))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &FileConfig) -> CliResult<()> {
    match &cli.cmd {
        Command::Phantom { cmd } => match cmd {
            PhantomCmd::Gen(a) => run_phantom_gen(a, cfg),
            PhantomCmd::Project(a) => run_phantom_project(a, cfg),
        },
        Command::Simulate { cmd } => match cmd {
            SimulateCmd::Ct(a) => run_simulate_ct(a, cfg),
        },
        Command::Extract { cmd } => match cmd {
            ExtractCmd::Features(a) => run_extract_features(a),
        },
        Command::Reconstruct { cmd } => match cmd {
            ReconstructCmd::Fbp(a) => run_reconstruct_fbp(a, cfg),
            ReconstructCmd::Sart(a) => run_reconstruct_sart(a, cfg),
        },
        Command::Volume(a) => run_volume(a, cfg),
        Command::Cs { cmd } => match cmd {
            CsCmd::Solve(a) => run_cs_solve(a, cfg),
        },
        Command::Holo { cmd } => match cmd {
            HoloCmd::Sim(a) => run_holo_sim(a, cfg),
            HoloCmd::Reconstruct(a) => run_holo_reconstruct(a, cfg),
        },
        Command::Restore { cmd } => match cmd {
            RestoreCmd::Train(a) => run_restore_train(a, cfg),
            RestoreCmd::Infer(a) => run_restore_infer(a),
        },
        Command::Metrics(a) => run_metrics(a, cfg),
        Command::Pipeline { cmd } => match cmd {
            PipelineCmd::Demo(a) => run_pipeline_demo(a, cfg),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = (|| {
        init_threads(cli.threads)?;
        let cfg = FileConfig::load(cli.config.as_deref())?;
        dispatch(&cli, &cfg)
    })();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {}", msg);
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("data error: {}", msg);
            ExitCode::from(2)
        }
    }
}
