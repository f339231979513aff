//! Negative variational lower bound.
//!
//! ```text
//! L = 1/(2σ_I² K) Σ_k ‖f − m ∘ φ_k‖²
//!   + ½ [ tr(λ D Σ) − log|Σ| + μᵀ λL μ ]
//!   + 1/(2σ_s² K) Σ_k ½ (mean_n sd(fixed→moving)² + mean_n sd(moving→fixed)²)
//! ```
//!
//! Dropped constants: `log 2πσ²` terms of both likelihoods, `log|Λ⁻¹|` and the
//! `−3d` of the Gaussian KL, and (smoothed mode) `log|C|²`. Values are
//! therefore comparable between runs of this crate only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{VectorField, Volume};
use crate::interp::Stencil;
use crate::prob::{
    degrees, prior_energy, smoothed_trace_weights, CovarianceMode, Hyperparams, PosteriorParams,
    PriorParams,
};
use crate::surface::{clamp_to_grid, SurfaceData};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub kl: f64,
    pub surface: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(data: f64, kl: f64, surface: f64) -> Self {
        LossBreakdown {
            data,
            kl,
            surface,
            total: data + kl + surface,
        }
    }
}

/// How a surface distance enters the surface likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceDistance {
    /// `sd²`, consistent with the Gaussian point likelihood.
    #[default]
    Squared,
    /// Plain `sd`.
    Linear,
}

impl fmt::Display for SurfaceDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurfaceDistance::Squared => "squared",
            SurfaceDistance::Linear => "linear",
        })
    }
}

impl FromStr for SurfaceDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(SurfaceDistance::Squared),
            "linear" => Ok(SurfaceDistance::Linear),
            other => Err(Error::param("surface distance", format!("unknown mode {other:?}"))),
        }
    }
}

impl SurfaceDistance {
    #[inline]
    pub(crate) fn apply(self, d: f64) -> f64 {
        match self {
            SurfaceDistance::Squared => d * d,
            SurfaceDistance::Linear => d,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, d: f64) -> f64 {
        match self {
            SurfaceDistance::Squared => 2.0 * d,
            SurfaceDistance::Linear => 1.0,
        }
    }
}

/// `1/(2σ²K) Σ_k Σ_p (f(p) − (m ∘ φ_k)(p))²`, with `K = phis.len()`.
pub fn data_term(f: &Volume, m: &Volume, phis: &[VectorField], sigma_image_sq: f64) -> Result<f64> {
    ensure_same_grid(f.grid(), m.grid())?;
    if phis.is_empty() {
        return Err(Error::param("phis", "need at least one sample"));
    }
    if !(sigma_image_sq > 0.0) {
        return Err(Error::param("sigma_image_sq", "must be positive"));
    }
    let grid = *f.grid();
    let (fv, mv) = (f.values(), m.values());
    let mut sum = 0.0;
    for phi in phis {
        ensure_same_grid(&grid, phi.grid())?;
        for (i, u) in phi.vectors().iter().enumerate() {
            let p = grid.point(i);
            let w = Stencil::new(grid.dims, [p[0] + u[0], p[1] + u[1], p[2] + u[2]]).sample(mv);
            let r = fv[i] - w;
            sum += r * r;
        }
    }
    Ok(sum / (2.0 * sigma_image_sq * phis.len() as f64))
}

/// Per-voxel, per-component weight of `var` in `tr(λ D Σ)`.
pub(crate) fn trace_weights(post: &PosteriorParams, prior: &PriorParams) -> Vec<f64> {
    match post.mode {
        CovarianceMode::Diagonal => {
            let mut d = degrees(post.grid());
            d.iter_mut().for_each(|x| *x *= prior.lambda);
            d
        }
        CovarianceMode::Smoothed { sigma_c } => {
            smoothed_trace_weights(post.grid(), prior.lambda, sigma_c)
        }
    }
}

/// `½ [Σ_p Σ_c (w(p) var(p,c) − log var(p,c)) + μᵀ λL μ]` where
/// `w = λ deg` in diagonal mode. In smoothed mode `var` is the diagonal of
/// `G²` and `w` accounts for the smoothing so that the first sum is still
/// `tr(λ D Σ)`.
pub fn kl_term(post: &PosteriorParams, prior: &PriorParams) -> f64 {
    let w = trace_weights(post, prior);
    let mut trace = 0.0;
    for (lv, wp) in post.log_var.vectors().iter().zip(&w) {
        for &l in lv {
            trace += wp * l.exp() - l;
        }
    }
    0.5 * (trace + prior_energy(prior, &post.mu))
}

/// Per-point composite distances in both directions: fixed points pushed by
/// `phi` and measured against the moving surface, and moving points pushed
/// by `phi_inv` and measured against the fixed surface.
pub fn surface_composites(
    surf: &SurfaceData,
    phi: &VectorField,
    phi_inv: &VectorField,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_same_grid(surf.grid(), phi.grid())?;
    ensure_same_grid(surf.grid(), phi_inv.grid())?;
    let grid = *phi.grid();
    let push = |p: &[f64; 3], field: &VectorField| {
        let u = field.sample(*p);
        clamp_to_grid(&grid, [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
    };
    let fixed_to_moving = surf
        .fixed_points
        .points()
        .iter()
        .map(|p| surf.moving_distance.sample(push(p, phi)))
        .collect();
    let moving_to_fixed = surf
        .moving_points
        .points()
        .iter()
        .map(|p| surf.fixed_distance.sample(push(p, phi_inv)))
        .collect();
    Ok((fixed_to_moving, moving_to_fixed))
}

/// Bidirectional surface term for one deformation sample, using the
/// per-point mean in each direction.
pub fn surface_term(
    surf: &SurfaceData,
    phi: &VectorField,
    phi_inv: &VectorField,
    sigma_surface_sq: f64,
    mode: SurfaceDistance,
) -> Result<f64> {
    if surf.fixed_points.is_empty() || surf.moving_points.is_empty() {
        return Err(Error::EmptyPointSet("surface term"));
    }
    let (a, b) = surface_composites(surf, phi, phi_inv)?;
    let mean = |v: &[f64]| v.iter().map(|&d| mode.apply(d)).sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&a) + mean(&b)) / (2.0 * sigma_surface_sq))
}

/// Surface inputs for [`total_loss`]: one inverse field per forward sample.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceLossInputs<'a> {
    pub data: &'a SurfaceData,
    pub phi_invs: &'a [VectorField],
    pub mode: SurfaceDistance,
}

#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
    /// Forward displacement for each posterior sample.
    pub phis: &'a [VectorField],
    pub posterior: &'a PosteriorParams,
    pub prior: &'a PriorParams,
    pub hyper: &'a Hyperparams,
    pub surface: Option<SurfaceLossInputs<'a>>,
}

pub fn total_loss(inputs: &LossInputs<'_>) -> Result<LossBreakdown> {
    inputs.hyper.validate()?;
    let data = data_term(inputs.fixed, inputs.moving, inputs.phis, inputs.hyper.sigma_image_sq)?;
    let kl = kl_term(inputs.posterior, inputs.prior);
    let surface = match &inputs.surface {
        None => 0.0,
        Some(s) => {
            if s.phi_invs.len() != inputs.phis.len() {
                return Err(Error::SurfaceConfig(format!(
                    "{} forward fields but {} inverse fields",
                    inputs.phis.len(),
                    s.phi_invs.len()
                )));
            }
            let mut acc = 0.0;
            for (phi, inv) in inputs.phis.iter().zip(s.phi_invs) {
                acc += surface_term(s.data, phi, inv, inputs.hyper.sigma_surface_sq, s.mode)?;
            }
            acc / inputs.phis.len() as f64
        }
    };
    Ok(LossBreakdown::new(data, kl, surface))
}
