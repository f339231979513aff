//! Per-pair registration by direct minimization of the variational loss over
//! the posterior parameters `(μ, log_var)`.
//!
//! Each iteration draws `K` reparameterized velocity samples, integrates
//! them by scaling and squaring (optionally on a half-resolution velocity
//! grid), warps the moving image, and back-propagates the loss through every
//! step of that chain. The evaluation deformation integrates `μ` itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{resample_field, resample_field_adjoint, GridSpec, Vec3, VectorField, Volume};
use crate::integrate::{
    exp_ss, exp_ss_backward, exp_ss_tape, scaled_step_magnitude, IntegrationMethod,
    IntegratorConfig,
};
use crate::interp::Stencil;
use crate::loss::{kl_term, trace_weights, LossBreakdown, SurfaceDistance};
use crate::metrics::{
    inverse_consistency, jacobian_stats, surface_distance_stats, DiceReport, InverseConsistency,
    JacobianStats, SurfaceDistanceStats,
};
use crate::prob::{
    convolve_with, gaussian_kernel, laplacian_apply, scaled_noise, standard_normal_field,
    CovarianceMode, Hyperparams, PosteriorParams, PriorParams,
};
use crate::surface::SurfaceData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub prior: PriorParams,
    pub hyper: Hyperparams,
    pub integrator: IntegratorConfig,
    pub iterations: usize,
    pub step_size: f64,
    pub seed: u64,
    pub posterior_mode: CovarianceMode,
    /// Velocity grid spacing in image voxels (1 or 2).
    pub velocity_downsample: usize,
    /// Initial posterior variance.
    pub init_var: f64,
    pub surface_distance: SurfaceDistance,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            prior: PriorParams::default(),
            hyper: Hyperparams::default(),
            integrator: IntegratorConfig::default(),
            iterations: 500,
            step_size: 0.01,
            seed: 0,
            posterior_mode: CovarianceMode::Diagonal,
            velocity_downsample: 1,
            init_var: 0.1,
            surface_distance: SurfaceDistance::Squared,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.hyper.validate()?;
        self.integrator.validate()?;
        if self.integrator.method != IntegrationMethod::ScalingSquaring {
            return Err(Error::param(
                "integrator",
                "registration differentiates through scaling and squaring only",
            ));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::param("step_size", "must be positive"));
        }
        if !matches!(self.velocity_downsample, 1 | 2) {
            return Err(Error::param("velocity_downsample", "must be 1 or 2"));
        }
        if !(self.init_var.is_finite() && self.init_var > 0.0) {
            return Err(Error::param("init_var", "must be positive"));
        }
        if let CovarianceMode::Smoothed { sigma_c } = self.posterior_mode {
            if !(sigma_c.is_finite() && sigma_c > 0.0) {
                return Err(Error::param("sigma_c", "must be positive"));
            }
        }
        Ok(())
    }

    /// Grid on which the velocity field lives for images on `image_grid`.
    pub fn velocity_grid(&self, image_grid: &GridSpec) -> Result<GridSpec> {
        image_grid.downsampled(self.velocity_downsample)
    }
}

/// Gradients of the total loss with respect to the posterior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub mu: VectorField,
    pub log_var: VectorField,
}

fn add_into(acc: &mut [Vec3], other: &[Vec3], scale: f64) {
    for (a, b) in acc.iter_mut().zip(other) {
        a[0] += scale * b[0];
        a[1] += scale * b[1];
        a[2] += scale * b[2];
    }
}

/// Scatters point gradients through `p + interp(field, p)` back onto the
/// field's lattice. Returns the summed composite loss.
fn surface_direction(
    points: &[Vec3],
    field: &VectorField,
    distance: &crate::surface::DistanceMap,
    mode: SurfaceDistance,
    coef: f64,
    grad: &mut [Vec3],
) -> f64 {
    let grid = *field.grid();
    let scale = coef / points.len() as f64;
    let mut total = 0.0;
    for p in points {
        let stencil = Stencil::new(grid.dims, *p);
        let u = stencil.sample_vec(field.vectors());
        let raw = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
        let mut y = raw;
        let mut clamped = [false; 3];
        for a in 0..3 {
            let max = (grid.dims[a] - 1) as f64;
            if raw[a] < 0.0 || raw[a] > max {
                clamped[a] = true;
                y[a] = raw[a].clamp(0.0, max);
            }
        }
        let (d, mut g) = distance.sample_with_gradient(y);
        total += mode.apply(d);
        let outer = scale * mode.derivative(d);
        for a in 0..3 {
            g[a] = if clamped[a] { 0.0 } else { outer * g[a] };
        }
        if g == [0.0; 3] {
            continue;
        }
        for (k, w) in stencil.corners() {
            if w != 0.0 {
                grad[k][0] += w * g[0];
                grad[k][1] += w * g[1];
                grad[k][2] += w * g[2];
            }
        }
    }
    total * scale
}

/// Loss and exact reverse-mode gradients for one set of noise draws.
///
/// `noise` holds one standard-normal field per posterior sample on the
/// velocity grid; `K = noise.len()`.
pub fn loss_and_grad(
    fixed: &Volume,
    moving: &Volume,
    post: &PosteriorParams,
    cfg: &RegistrationConfig,
    noise: &[VectorField],
    surface: Option<&SurfaceData>,
) -> Result<(LossBreakdown, Gradients)> {
    ensure_same_grid(fixed.grid(), moving.grid())?;
    let image_grid = *fixed.grid();
    let vgrid = cfg.velocity_grid(&image_grid)?;
    ensure_same_grid(post.grid(), &vgrid)?;
    if let Some(s) = surface {
        ensure_same_grid(s.grid(), &image_grid)?;
    }
    if noise.is_empty() {
        return Err(Error::param("noise", "need at least one sample"));
    }
    let squarings = cfg.integrator.steps;
    let k_inv = 1.0 / noise.len() as f64;
    let sigma_sq = cfg.hyper.sigma_image_sq;
    let surf_coef = 0.5 / (2.0 * cfg.hyper.sigma_surface_sq) * k_inv;

    let smoothing = match post.mode {
        CovarianceMode::Diagonal => None,
        CovarianceMode::Smoothed { sigma_c } => Some(gaussian_kernel(sigma_c)),
    };

    let (fv, mv) = (fixed.values(), moving.values());
    let mut data = 0.0;
    let mut surface_loss = 0.0;
    let mut grad_mu = vec![[0.0; 3]; vgrid.len()];
    let mut grad_lv = vec![[0.0; 3]; vgrid.len()];
    let std: Vec<Vec3> = post
        .log_var
        .vectors()
        .iter()
        .map(|lv| [(0.5 * lv[0]).exp(), (0.5 * lv[1]).exp(), (0.5 * lv[2]).exp()])
        .collect();

    for r in noise {
        ensure_same_grid(r.grid(), &vgrid)?;
        let mut noise_term = scaled_noise(post, r);
        if let Some(taps) = &smoothing {
            noise_term = convolve_with(&noise_term, taps);
        }
        let mut z = post.mu.clone();
        add_into(z.vectors_mut(), noise_term.vectors(), 1.0);

        // forward deformation and image term
        let tape = exp_ss_tape(&z, squarings);
        let phi = resample_field(tape.last().unwrap(), &image_grid)?;
        let mut g_phi = vec![[0.0; 3]; image_grid.len()];
        let mut sample_data = 0.0;
        for (i, u) in phi.vectors().iter().enumerate() {
            let p = image_grid.point(i);
            let s = Stencil::new(image_grid.dims, [p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
            let residual = s.sample(mv) - fv[i];
            sample_data += residual * residual;
            if residual != 0.0 {
                let d = s.gradient(mv);
                let w = residual / sigma_sq * k_inv;
                g_phi[i] = [w * d[0], w * d[1], w * d[2]];
            }
        }
        data += sample_data / (2.0 * sigma_sq) * k_inv;

        let mut g_inv = None;
        if let Some(s) = surface {
            let neg = z.scaled(-1.0);
            let inv_tape = exp_ss_tape(&neg, squarings);
            let phi_inv = resample_field(inv_tape.last().unwrap(), &image_grid)?;
            let mut g_phi_inv = vec![[0.0; 3]; image_grid.len()];
            surface_loss += surface_direction(
                s.fixed_points.points(),
                &phi,
                &s.moving_distance,
                cfg.surface_distance,
                surf_coef,
                &mut g_phi,
            );
            surface_loss += surface_direction(
                s.moving_points.points(),
                &phi_inv,
                &s.fixed_distance,
                cfg.surface_distance,
                surf_coef,
                &mut g_phi_inv,
            );
            g_inv = Some((inv_tape, g_phi_inv));
        }

        let g_low = resample_field_adjoint(&VectorField::from_raw(image_grid, g_phi), &vgrid);
        let mut g_z = exp_ss_backward(&tape, g_low);
        if let Some((inv_tape, g_phi_inv)) = g_inv {
            let g_low = resample_field_adjoint(&VectorField::from_raw(image_grid, g_phi_inv), &vgrid);
            let g_neg = exp_ss_backward(&inv_tape, g_low);
            add_into(g_z.vectors_mut(), g_neg.vectors(), -1.0);
        }

        add_into(&mut grad_mu, g_z.vectors(), 1.0);
        // ∂z/∂log_var = ½ std ⊙ r, routed through the (self-adjoint) smoothing
        let g_noise = match &smoothing {
            Some(taps) => convolve_with(&g_z, taps),
            None => g_z,
        };
        for ((gl, gn), (sd, rr)) in grad_lv
            .iter_mut()
            .zip(g_noise.vectors())
            .zip(std.iter().zip(r.vectors()))
        {
            for c in 0..3 {
                gl[c] += 0.5 * sd[c] * rr[c] * gn[c];
            }
        }
    }

    // KL: ½ [Σ w var − log var] + ½ μᵀΛμ
    let kl = kl_term(post, &cfg.prior);
    add_into(&mut grad_mu, laplacian_apply(&cfg.prior, &post.mu).vectors(), 1.0);
    let w = trace_weights(post, &cfg.prior);
    for ((gl, lv), wp) in grad_lv.iter_mut().zip(post.log_var.vectors()).zip(&w) {
        for c in 0..3 {
            gl[c] += 0.5 * (wp * lv[c].exp() - 1.0);
        }
    }

    Ok((
        LossBreakdown::new(data, kl, surface_loss),
        Gradients {
            mu: VectorField::from_raw(vgrid, grad_mu),
            log_var: VectorField::from_raw(vgrid, grad_lv),
        },
    ))
}

/// MAP deformation and its inverse on the image grid: `exp(±μ)`.
pub fn map_deformation(
    post: &PosteriorParams,
    cfg: &RegistrationConfig,
    image_grid: &GridSpec,
) -> Result<(VectorField, VectorField)> {
    let squarings = cfg.integrator.steps;
    let phi = exp_ss(&post.mu, squarings)?;
    let phi_inv = exp_ss(&post.mu.scaled(-1.0), squarings)?;
    Ok((
        resample_field(&phi, image_grid)?,
        resample_field(&phi_inv, image_grid)?,
    ))
}

/// Final metrics of a registration. `dice` is filled in by callers that
/// hold label maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub dice: Option<DiceReport>,
    pub jacobian: JacobianStats,
    pub inverse_consistency: InverseConsistency,
    pub surface: Option<SurfaceDistanceStats>,
    /// `max |μ| / 2^T` on the velocity grid.
    pub max_scaled_step: f64,
    /// Mean `|μ|` converted to image voxels.
    pub mean_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub trace: Vec<LossBreakdown>,
    pub metrics: MetricBundle,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub posterior: PosteriorParams,
    pub phi: VectorField,
    pub phi_inv: VectorField,
    pub report: RegistrationReport,
}

/// Computes the metric bundle for a MAP deformation pair.
pub fn evaluate(
    post: &PosteriorParams,
    cfg: &RegistrationConfig,
    phi: &VectorField,
    phi_inv: &VectorField,
    surface: Option<&SurfaceData>,
) -> Result<MetricBundle> {
    let factor = cfg.velocity_downsample as f64;
    let mean_velocity = post
        .mu
        .vectors()
        .iter()
        .map(|v| crate::grid::norm(v) * factor)
        .sum::<f64>()
        / post.grid().len() as f64;
    Ok(MetricBundle {
        dice: None,
        jacobian: jacobian_stats(phi),
        inverse_consistency: inverse_consistency(phi, phi_inv)?,
        surface: surface
            .map(|s| surface_distance_stats(s, phi, phi_inv))
            .transpose()?,
        max_scaled_step: scaled_step_magnitude(&post.mu, cfg.integrator.steps),
        mean_velocity,
    })
}

/// Runs the optimizer from `μ = 0`, `var = init_var`. `progress` is called
/// after every iteration with the loss of that iteration's sample.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    surface: Option<&SurfaceData>,
    cfg: &RegistrationConfig,
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<Registration> {
    cfg.validate()?;
    ensure_same_grid(fixed.grid(), moving.grid())?;
    let image_grid = *fixed.grid();
    let vgrid = cfg.velocity_grid(&image_grid)?;
    let mut post = PosteriorParams::initial(vgrid, cfg.init_var, cfg.posterior_mode)?;
    let n = vgrid.len() * 3;
    let mut opt_mu = Adam::new(cfg.step_size, n);
    let mut opt_lv = Adam::new(cfg.step_size, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let noise: Vec<VectorField> = (0..cfg.hyper.samples)
            .map(|_| standard_normal_field(vgrid, &mut rng))
            .collect();
        let (loss, grads) = loss_and_grad(fixed, moving, &post, cfg, &noise, surface)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: loss.total,
            });
        }
        progress(it, &loss);
        trace.push(loss);
        opt_mu.update(
            post.mu.vectors_mut().as_flattened_mut(),
            grads.mu.vectors().as_flattened(),
        );
        opt_lv.update(
            post.log_var.vectors_mut().as_flattened_mut(),
            grads.log_var.vectors().as_flattened(),
        );
        if !post.mu.is_finite() || !post.log_var.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }
    }

    let (phi, phi_inv) = map_deformation(&post, cfg, &image_grid)?;
    let metrics = evaluate(&post, cfg, &phi, &phi_inv, surface)?;
    Ok(Registration {
        posterior: post,
        phi,
        phi_inv,
        report: RegistrationReport { trace, metrics },
    })
}
