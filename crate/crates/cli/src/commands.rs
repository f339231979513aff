//! Subcommand arguments and their implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use svfreg::integrate::{exp_ss, integrate, invert};
use svfreg::metrics::{
    dice, inverse_consistency, jacobian_stats, DiceReport, InverseConsistency, JacobianStats,
    INVERSE_CONSISTENCY_MARGIN,
};
use svfreg::optimize::{register, RegistrationConfig};
use svfreg::synth::{
    cshape_registration_config, make_cshape, make_disk, random_smooth_velocity, CShapeSpec,
    DEFAULT_OPENING_DEG,
};
use svfreg::transform::{warp_image, warp_labels};
use svfreg::{
    CovarianceMode, GridSpec, IntegrationMethod, IntegratorConfig, SegmentationMap, SurfaceData,
    SurfaceDistance, VectorField,
};

use crate::error::{CliError, CliResult};
use crate::report::{read_config, write_json, ReportFile, RunInputs, Timings, TOOL, VERSION};
use crate::volume_file::{Kind, VolumeFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PosteriorArg {
    Diagonal,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Default,
    Cshape,
}

/// Registration settings; each flag overrides the preset or `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Start from this config (a bare config or a previous report).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma_image_sq: Option<f64>,
    #[arg(long)]
    pub sigma_surface_sq: Option<f64>,
    /// Posterior samples per iteration.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of squarings.
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub posterior: Option<PosteriorArg>,
    /// Width of the posterior smoothing kernel (smoothed posterior only).
    #[arg(long)]
    pub sigma_c: Option<f64>,
    #[arg(long)]
    pub velocity_downsample: Option<usize>,
    #[arg(long)]
    pub init_var: Option<f64>,
    #[arg(long)]
    pub surface_distance: Option<SurfaceDistance>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RegistrationConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("--config and --preset are exclusive".into()))
            }
            (Some(path), None) => read_config(path)?,
            (None, Some(PresetArg::Cshape)) => cshape_registration_config(0),
            (None, _) => RegistrationConfig::default(),
        };
        if let Some(v) = self.lambda {
            cfg.prior.lambda = v;
        }
        if let Some(v) = self.sigma_image_sq {
            cfg.hyper.sigma_image_sq = v;
        }
        if let Some(v) = self.sigma_surface_sq {
            cfg.hyper.sigma_surface_sq = v;
        }
        if let Some(v) = self.samples {
            cfg.hyper.samples = v;
        }
        if let Some(v) = self.steps {
            cfg.integrator.steps = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.velocity_downsample {
            cfg.velocity_downsample = v;
        }
        if let Some(v) = self.init_var {
            cfg.init_var = v;
        }
        if let Some(v) = self.surface_distance {
            cfg.surface_distance = v;
        }
        match (self.posterior, self.sigma_c) {
            (Some(PosteriorArg::Diagonal), Some(_)) => {
                return Err(CliError::Usage("--sigma-c needs --posterior smoothed".into()))
            }
            (Some(PosteriorArg::Diagonal), None) => cfg.posterior_mode = CovarianceMode::Diagonal,
            (Some(PosteriorArg::Smoothed), sigma) => {
                let sigma_c = match (sigma, cfg.posterior_mode) {
                    (Some(s), _) => s,
                    (None, CovarianceMode::Smoothed { sigma_c }) => sigma_c,
                    (None, CovarianceMode::Diagonal) => {
                        svfreg::prob::sigma_c_from_lambda(cfg.prior.lambda)?
                    }
                };
                cfg.posterior_mode = CovarianceMode::Smoothed { sigma_c };
            }
            (None, Some(s)) => match cfg.posterior_mode {
                CovarianceMode::Smoothed { .. } => {
                    cfg.posterior_mode = CovarianceMode::Smoothed { sigma_c: s }
                }
                CovarianceMode::Diagonal => {
                    return Err(CliError::Usage("--sigma-c needs --posterior smoothed".into()))
                }
            },
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, requires = "moving_seg")]
    pub fixed_seg: Option<PathBuf>,
    #[arg(long, requires = "fixed_seg")]
    pub moving_seg: Option<PathBuf>,
    /// Structure for the surface term; also restricts Dice to this label.
    #[arg(long, requires = "fixed_seg")]
    pub label: Option<u32>,
    /// Points sampled per surface (default scales with the boundary size).
    #[arg(long, requires = "label")]
    pub surface_points: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn read_image(path: &Path) -> CliResult<svfreg::Volume> {
    VolumeFile::read(path)?.to_volume(path)
}

fn read_labels(path: &Path) -> CliResult<SegmentationMap> {
    VolumeFile::read(path)?.to_labels(path)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn dice_labels(a: &SegmentationMap, b: &SegmentationMap, only: Option<u32>) -> Vec<u32> {
    match only {
        Some(l) => vec![l],
        None => {
            let mut labels = a.present_labels();
            labels.extend(b.present_labels());
            labels.sort_unstable();
            labels.dedup();
            labels.retain(|&l| l != 0);
            labels
        }
    }
}

pub fn cmd_register(args: &RegisterArgs) -> CliResult<()> {
    let cfg = args.config.resolve()?;
    let mut timings = Timings::new();
    let start = Instant::now();
    let fixed = read_image(&args.fixed)?;
    let moving = read_image(&args.moving)?;
    let segs = match (&args.fixed_seg, &args.moving_seg) {
        (Some(f), Some(m)) => Some((read_labels(f)?, read_labels(m)?)),
        _ => None,
    };
    check_grid(fixed.grid(), moving.grid())?;
    if let Some((fs, ms)) = &segs {
        check_grid(fixed.grid(), fs.grid())?;
        check_grid(fixed.grid(), ms.grid())?;
    }
    timings.record("load", start.elapsed());

    let start = Instant::now();
    let surface = match (&segs, args.label) {
        (Some((fs, ms)), Some(label)) => Some(SurfaceData::from_segmentations(
            fs,
            ms,
            label,
            args.surface_points,
            cfg.seed,
        )?),
        _ => None,
    };
    timings.record("surface", start.elapsed());

    info!(
        "registering {} -> {} on {:?}, {} iterations",
        args.moving.display(),
        args.fixed.display(),
        fixed.grid().dims,
        cfg.iterations
    );
    let start = Instant::now();
    let result = register(&fixed, &moving, surface.as_ref(), &cfg, |it, loss| {
        if it % 25 == 0 {
            info!(
                "iter {it:4}  total {:.6e}  data {:.6e}  kl {:.6e}  surface {:.6e}",
                loss.total, loss.data, loss.kl, loss.surface
            );
        }
    })?;
    timings.record("optimize", start.elapsed());

    let start = Instant::now();
    let mut metrics = result.report.metrics.clone();
    let warped_seg = match &segs {
        Some((fs, ms)) => {
            let warped = warp_labels(ms, &result.phi)?;
            metrics.dice = Some(dice(fs, &warped, &dice_labels(fs, ms, args.label))?);
            Some(warped)
        }
        None => None,
    };
    let warped = warp_image(&moving, &result.phi)?;
    timings.record("evaluate", start.elapsed());

    let start = Instant::now();
    let out = &args.out_dir;
    create_dir(out)?;
    VolumeFile::from_field(&result.posterior.mu, Kind::Velocity).write(&out.join("mean_velocity.svf"))?;
    VolumeFile::from_field(&result.posterior.log_var, Kind::Velocity)
        .write(&out.join("log_var.svf"))?;
    VolumeFile::from_field(&result.phi, Kind::Displacement).write(&out.join("phi.svf"))?;
    VolumeFile::from_field(&result.phi_inv, Kind::Displacement).write(&out.join("phi_inv.svf"))?;
    VolumeFile::from_image(&warped).write(&out.join("warped.svf"))?;
    if let Some(seg) = &warped_seg {
        VolumeFile::from_labels(seg)
            .map_err(|r| CliError::format(&out.join("warped_seg.svf"), r))?
            .write(&out.join("warped_seg.svf"))?;
    }
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let report = ReportFile {
        tool: TOOL.into(),
        version: VERSION.into(),
        config: cfg,
        inputs: RunInputs {
            fixed: args.fixed.display().to_string(),
            moving: args.moving.display().to_string(),
            fixed_seg: path_str(&args.fixed_seg),
            moving_seg: path_str(&args.moving_seg),
            label: args.label,
            surface_points: surface.as_ref().map(|s| s.fixed_points.len()),
        },
        loss_trace: result.report.trace,
        metrics,
    };
    write_json(&out.join("report.json"), &report)?;
    timings.record("write", start.elapsed());
    write_json(&out.join("timings.json"), &timings)?;
    info!(
        "done: folding {}, mean det {:.4}, inverse consistency {:.4}",
        report.metrics.jacobian.folding,
        report.metrics.jacobian.mean_det,
        report.metrics.inverse_consistency.mean
    );
    Ok(())
}

fn check_grid(a: &GridSpec, b: &GridSpec) -> CliResult<()> {
    if a == b {
        Ok(())
    } else {
        Err(svfreg::Error::GridMismatch { left: *a, right: *b }.into())
    }
}

#[derive(Debug, Clone, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Displacement field `φ − Id`.
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Nearest-neighbour warping of a label map.
    #[arg(long)]
    pub labels: bool,
}

pub fn cmd_warp(args: &WarpArgs) -> CliResult<()> {
    let file = VolumeFile::read(&args.image)?;
    let field = VolumeFile::read(&args.field)?.to_field(&args.field, &[Kind::Displacement])?;
    let out = if args.labels {
        let seg = file.to_labels(&args.image)?;
        let warped = warp_labels(&seg, &field)?;
        VolumeFile::from_labels(&warped).map_err(|r| CliError::format(&args.out, r))?
    } else {
        if file.header.kind == Kind::Labels {
            return Err(CliError::format(&args.image, "label maps need --labels"));
        }
        let vol = file.to_volume(&args.image)?;
        VolumeFile::from_scalar(&warp_image(&vol, &field)?, file.header.kind)
    };
    out.write(&args.out)
}

#[derive(Debug, Clone, Args)]
pub struct InvertArgs {
    /// Velocity field.
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub steps: u32,
}

pub fn cmd_invert(args: &InvertArgs) -> CliResult<()> {
    let v = VolumeFile::read(&args.field)?.to_field(&args.field, &[Kind::Velocity])?;
    let cfg = IntegratorConfig::new(IntegrationMethod::ScalingSquaring, args.steps)?;
    VolumeFile::from_field(&invert(&v, &cfg)?, Kind::Displacement).write(&args.out)
}

#[derive(Debug, Clone, Args)]
pub struct ExpArgs {
    #[arg(long)]
    pub velocity: PathBuf,
    #[arg(long, default_value = "scaling_squaring")]
    pub method: IntegrationMethod,
    /// Squarings for scaling and squaring, steps for Euler and RK4.
    #[arg(long, default_value_t = 7)]
    pub steps: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Also integrate with this method and report the difference.
    #[arg(long, requires = "compare_report")]
    pub compare_method: Option<IntegrationMethod>,
    #[arg(long, default_value_t = 64)]
    pub compare_steps: u32,
    #[arg(long)]
    pub compare_report: Option<PathBuf>,
    /// Write scaling-and-squaring runtimes for 1..=timing_max_steps squarings.
    #[arg(long)]
    pub timing_table: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub timing_max_steps: u32,
    #[arg(long, default_value_t = 3)]
    pub timing_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: IntegrationMethod,
    pub steps: u32,
    pub reference_method: IntegrationMethod,
    pub reference_steps: u32,
    pub max_diff: f64,
    /// Maximum over voxels at least two voxels from the border.
    pub max_diff_interior: f64,
}

/// Largest per-voxel vector difference, over all voxels and over the
/// interior.
pub fn max_difference(a: &VectorField, b: &VectorField) -> (f64, f64) {
    let grid = *a.grid();
    let (mut all, mut interior) = (0.0f64, 0.0f64);
    for (i, (p, q)) in a.vectors().iter().zip(b.vectors()).enumerate() {
        let d = svfreg::grid::norm(&[p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        all = all.max(d);
        if grid.in_interior(i, INVERSE_CONSISTENCY_MARGIN) {
            interior = interior.max(d);
        }
    }
    (all, interior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub steps: u32,
    pub ms: f64,
}

/// Runtime of scaling and squaring against the number of squarings with a
/// least-squares line through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub dims: [usize; 3],
    pub repeats: usize,
    pub rows: Vec<TimingRow>,
    pub slope_ms: f64,
    pub intercept_ms: f64,
    pub r_squared: f64,
}

/// Times `exp_ss(v, T)` for `T = 1..=max_steps`, keeping the fastest of
/// `repeats` runs at each `T`.
pub fn timing_table(v: &VectorField, max_steps: u32, repeats: usize) -> CliResult<TimingTable> {
    if max_steps < 2 || repeats == 0 {
        return Err(CliError::Usage("timing needs at least 2 steps and 1 repeat".into()));
    }
    let mut rows = Vec::new();
    for t in 1..=max_steps {
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            let phi = exp_ss(v, t)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(phi);
        }
        rows.push(TimingRow { steps: t, ms: best });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (f64::from(r.steps), r.ms)).unzip();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(TimingTable {
        dims: v.grid().dims,
        repeats,
        rows,
        slope_ms: slope,
        intercept_ms: my - slope * mx,
        r_squared,
    })
}

pub fn cmd_exp(args: &ExpArgs) -> CliResult<()> {
    let v = VolumeFile::read(&args.velocity)?.to_field(&args.velocity, &[Kind::Velocity])?;
    let cfg = IntegratorConfig::new(args.method, args.steps)?;
    let phi = integrate(&v, &cfg)?;
    VolumeFile::from_field(&phi, Kind::Displacement).write(&args.out)?;
    if let (Some(method), Some(path)) = (args.compare_method, &args.compare_report) {
        let other = integrate(&v, &IntegratorConfig::new(method, args.compare_steps)?)?;
        let (max_diff, max_diff_interior) = max_difference(&phi, &other);
        info!("max difference to {method} ({} steps): {max_diff:.3e}", args.compare_steps);
        write_json(
            path,
            &Comparison {
                method: args.method,
                steps: args.steps,
                reference_method: method,
                reference_steps: args.compare_steps,
                max_diff,
                max_diff_interior,
            },
        )?;
    }
    if let Some(path) = &args.timing_table {
        let table = timing_table(&v, args.timing_max_steps, args.timing_repeats)?;
        info!("timing slope {:.3} ms per squaring, R² {:.4}", table.slope_ms, table.r_squared);
        write_json(path, &table)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// Label map compared against `--b`.
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Restrict Dice to these labels (default: every non-zero label present).
    #[arg(long = "label")]
    pub labels: Vec<u32>,
    /// Displacement field for Jacobian statistics.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Inverse displacement for the inverse-consistency check.
    #[arg(long, requires = "field")]
    pub inverse: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: Option<DiceReport>,
    pub jacobian: Option<JacobianStats>,
    pub inverse_consistency: Option<InverseConsistency>,
}

pub fn cmd_metrics(args: &MetricsArgs) -> CliResult<()> {
    let mut report = MetricsReport {
        dice: None,
        jacobian: None,
        inverse_consistency: None,
    };
    if let (Some(pa), Some(pb)) = (&args.a, &args.b) {
        let (a, b) = (read_labels(pa)?, read_labels(pb)?);
        let labels = if args.labels.is_empty() {
            dice_labels(&a, &b, None)
        } else {
            args.labels.clone()
        };
        report.dice = Some(dice(&a, &b, &labels)?);
    }
    if let Some(pf) = &args.field {
        let phi = VolumeFile::read(pf)?.to_field(pf, &[Kind::Displacement])?;
        report.jacobian = Some(jacobian_stats(&phi));
        if let Some(pi) = &args.inverse {
            let inv = VolumeFile::read(pi)?.to_field(pi, &[Kind::Displacement])?;
            report.inverse_consistency = Some(inverse_consistency(&phi, &inv)?);
        }
    }
    if report.dice.is_none() && report.jacobian.is_none() {
        return Err(CliError::Usage("nothing to measure: pass --a/--b or --field".into()));
    }
    write_json(&args.out, &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthPreset {
    Disk,
    Cshape,
    Velocity,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub preset: SynthPreset,
    /// Grid size as `x,y,z`; use a z extent of 1 for pseudo-2D shapes.
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Disk radius as a fraction of the smallest extent (cshape: defaults to
    /// the radius whose volume matches the C).
    #[arg(long)]
    pub radius_fraction: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OPENING_DEG)]
    pub opening_deg: f64,
    #[arg(long, default_value_t = 2.0)]
    pub max_magnitude: f64,
    #[arg(long, default_value_t = 4.0)]
    pub smoothness: f64,
}

/// Geometry and suggested registration settings written with a C-shape pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CShapeRecord {
    pub seed: u64,
    pub shape: CShapeSpec,
    pub disk_fraction: f64,
    pub config: RegistrationConfig,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let dims: [usize; 3] = args
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--dims takes exactly three sizes".into()))?;
    let grid = GridSpec::new(dims)?;
    let out = &args.out_dir;
    create_dir(out)?;
    let labels = |seg: &SegmentationMap, name: &str| -> CliResult<()> {
        let path = out.join(name);
        VolumeFile::from_labels(seg)
            .map_err(|r| CliError::format(&path, r))?
            .write(&path)
    };
    match args.preset {
        SynthPreset::Disk => {
            let (img, seg) = make_disk(grid, args.radius_fraction.unwrap_or(1.0 / 3.0))?;
            VolumeFile::from_image(&img).write(&out.join("image.svf"))?;
            labels(&seg, "labels.svf")?;
        }
        SynthPreset::Cshape => {
            let shape = CShapeSpec::sample(args.seed, args.opening_deg);
            let disk_fraction = args
                .radius_fraction
                .unwrap_or_else(|| shape.matching_disk_fraction(&grid));
            let (c_img, c_seg) = make_cshape(grid, &shape)?;
            let (d_img, d_seg) = make_disk(grid, disk_fraction)?;
            VolumeFile::from_image(&c_img).write(&out.join("fixed.svf"))?;
            labels(&c_seg, "fixed_seg.svf")?;
            VolumeFile::from_image(&d_img).write(&out.join("moving.svf"))?;
            labels(&d_seg, "moving_seg.svf")?;
            write_json(
                &out.join("synth.json"),
                &CShapeRecord {
                    seed: args.seed,
                    shape,
                    disk_fraction,
                    config: cshape_registration_config(args.seed),
                },
            )?;
        }
        SynthPreset::Velocity => {
            let v = random_smooth_velocity(grid, args.max_magnitude, args.smoothness, args.seed)?;
            VolumeFile::from_field(&v, Kind::Velocity).write(&out.join("velocity.svf"))?;
        }
    }
    Ok(())
}
