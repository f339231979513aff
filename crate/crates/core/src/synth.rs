//! Synthetic shapes for the disk/C-shape experiment and smooth random
//! velocity fields for integrator tests.
//!
//! Shapes are centred at `(n − 1) / 2` on every axis and sized relative to
//! the smallest non-degenerate grid extent. On a grid with one z-slice they
//! become 2D disks and annuli.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SegmentationMap, Vec3, VectorField, Volume};
use crate::optimize::RegistrationConfig;
use crate::prob::gaussian_convolve;

/// Label written for the foreground of every synthetic shape.
pub const SHAPE_LABEL: u32 = 1;

pub const OUTER_FRACTION_RANGE: (f64, f64) = (1.0 / 3.5, 1.0 / 2.5);
pub const INNER_FRACTION_RANGE: (f64, f64) = (1.0 / 6.5, 1.0 / 5.5);
pub const DISK_FRACTION_RANGE: (f64, f64) = (1.0 / 5.0, 1.0 / 3.0);
pub const DEFAULT_OPENING_DEG: f64 = 60.0;
/// Image noise standard deviation used for the disk/C-shape experiment.
pub const CSHAPE_SIGMA_IMAGE: f64 = 0.06;

fn reference_size(grid: &GridSpec) -> f64 {
    grid.dims
        .iter()
        .copied()
        .filter(|&n| n > 1)
        .min()
        .unwrap_or(1) as f64
}

fn center(grid: &GridSpec) -> Vec3 {
    grid.dims.map(|n| (n as f64 - 1.0) / 2.0)
}

/// Renders a shape given its signed distance (negative inside): intensity
/// falls from 1 to 0 across a Gaussian ramp of width one voxel, and the label
/// marks voxels with negative distance.
fn render(grid: GridSpec, sdf: impl Fn(Vec3) -> f64 + Sync) -> (Volume, SegmentationMap) {
    let image = Volume::from_fn(grid, |[x, y, z]| {
        let d = sdf([x as f64, y as f64, z as f64]);
        0.5 * libm::erfc(d / std::f64::consts::SQRT_2)
    });
    let labels = (0..grid.len())
        .map(|i| u32::from(sdf(grid.point(i)) < 0.0) * SHAPE_LABEL)
        .collect();
    let seg = SegmentationMap::new(grid, labels).expect("label count matches grid");
    (image, seg)
}

/// A ball (a disk on single-slice grids) of radius
/// `radius_fraction · min(dims)` voxels.
pub fn make_disk(grid: GridSpec, radius_fraction: f64) -> Result<(Volume, SegmentationMap)> {
    if !(radius_fraction > 0.0 && radius_fraction < 0.5) {
        return Err(Error::param("radius_fraction", "must lie in (0, 0.5)"));
    }
    let r = radius_fraction * reference_size(&grid);
    if r < 1.0 {
        return Err(Error::param("radius_fraction", format!("radius {r:.3} is below one voxel")));
    }
    let c = center(&grid);
    Ok(render(grid, move |p| {
        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
        d2.sqrt() - r
    }))
}

/// Geometry of a C shape: a spherical shell (annulus in 2D) with a wedge
/// around the +x axis removed. The wedge spans all z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CShapeSpec {
    pub outer_fraction: f64,
    pub inner_fraction: f64,
    pub opening_deg: f64,
}

impl CShapeSpec {
    /// Radii drawn uniformly from the experiment's ranges.
    pub fn sample(seed: u64, opening_deg: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (olo, ohi) = OUTER_FRACTION_RANGE;
        let (ilo, ihi) = INNER_FRACTION_RANGE;
        CShapeSpec {
            outer_fraction: rng.random_range(olo..=ohi),
            inner_fraction: rng.random_range(ilo..=ihi),
            opening_deg,
        }
    }

    fn radii(&self, grid: &GridSpec) -> Result<(f64, f64)> {
        if !(0.0..360.0).contains(&self.opening_deg) {
            return Err(Error::param("opening_deg", "must lie in [0, 360)"));
        }
        if !(self.inner_fraction > 0.0 && self.outer_fraction < 0.5) {
            return Err(Error::param("radius fraction", "must lie in (0, 0.5)"));
        }
        let size = reference_size(grid);
        let (outer, inner) = (self.outer_fraction * size, self.inner_fraction * size);
        if outer - inner < 1.0 {
            return Err(Error::param(
                "inner_fraction",
                format!("inner radius {inner:.3} must be at least one voxel below outer {outer:.3}"),
            ));
        }
        Ok((outer, inner))
    }
}

impl CShapeSpec {
    /// Disk radius fraction whose ball (or disk, on single-slice grids) has
    /// the same volume as this C shape, clamped to the experiment's range.
    pub fn matching_disk_fraction(&self, grid: &GridSpec) -> f64 {
        let keep = 1.0 - self.opening_deg / 360.0;
        let planar = grid.dims.iter().filter(|&&n| n > 1).count() < 3;
        let (o, i) = (self.outer_fraction, self.inner_fraction);
        let r = if planar {
            (keep * (o * o - i * i)).sqrt()
        } else {
            // the wedge removes `opening/360` of every shell
            (keep * (o.powi(3) - i.powi(3))).cbrt()
        };
        r.clamp(DISK_FRACTION_RANGE.0, DISK_FRACTION_RANGE.1)
    }
}

/// Registration settings for the disk/C-shape experiment: the default prior
/// and integrator, `σ_I = 0.06`, a half-resolution velocity grid and a
/// larger step than the generic default.
pub fn cshape_registration_config(seed: u64) -> RegistrationConfig {
    let mut cfg = RegistrationConfig {
        iterations: 500,
        step_size: 0.1,
        velocity_downsample: 2,
        seed,
        ..Default::default()
    };
    cfg.hyper.sigma_image_sq = CSHAPE_SIGMA_IMAGE * CSHAPE_SIGMA_IMAGE;
    cfg
}

/// Signed distance to the wedge `|angle from +x| < half` in the xy plane.
fn wedge_distance(dx: f64, dy: f64, half: f64) -> f64 {
    if half <= 0.0 {
        return f64::INFINITY;
    }
    let rho = dx.hypot(dy);
    let off = dy.atan2(dx).abs() - half;
    let reach = |angle: f64| {
        if angle.abs() < std::f64::consts::FRAC_PI_2 {
            rho * angle.sin()
        } else {
            rho * angle.signum()
        }
    };
    reach(off)
}

pub fn make_cshape(grid: GridSpec, spec: &CShapeSpec) -> Result<(Volume, SegmentationMap)> {
    let (outer, inner) = spec.radii(&grid)?;
    let half = spec.opening_deg.to_radians() / 2.0;
    let c = center(&grid);
    Ok(render(grid, move |p| {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let shell = (r - outer).max(inner - r);
        shell.max(-wedge_distance(d[0], d[1], half))
    }))
}

/// Gaussian-smoothed white noise rescaled so that the largest vector norm is
/// exactly `max_magnitude`.
pub fn random_smooth_velocity(
    grid: GridSpec,
    max_magnitude: f64,
    smoothness_sigma: f64,
    seed: u64,
) -> Result<VectorField> {
    if !(max_magnitude.is_finite() && max_magnitude >= 0.0) {
        return Err(Error::param("max_magnitude", "must be non-negative"));
    }
    if max_magnitude == 0.0 {
        return Ok(VectorField::zeros(grid));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec3> = (0..grid.len())
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect();
    let smooth = gaussian_convolve(&VectorField::new(grid, noise)?, smoothness_sigma)?;
    let peak = smooth.max_norm();
    if peak == 0.0 {
        return Ok(VectorField::zeros(grid));
    }
    Ok(smooth.scaled(max_magnitude / peak))
}
