//! The generative model's parameters: the Laplacian smoothness prior on the
//! velocity field, the Gaussian variational posterior, and reparameterized
//! sampling from it.
//!
//! The prior precision is `λ L` with `L = D − A` the graph Laplacian of the
//! 6-connected voxel grid. Boundary voxels have fewer neighbours, so every row
//! of `L` sums to zero and constants span its null space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{GridSpec, Vec3, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub lambda: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams { lambda: 20.0 }
    }
}

impl PriorParams {
    pub fn new(lambda: f64) -> Result<Self> {
        let p = PriorParams { lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_finite() && self.lambda > 0.0 {
            Ok(())
        } else {
            Err(Error::param("lambda", format!("must be positive, got {}", self.lambda)))
        }
    }
}

/// Posterior covariance structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CovarianceMode {
    /// `Σ = diag(exp(log_var))`.
    Diagonal,
    /// `Σ = C G Gᵀ Cᵀ` with `G = diag(exp(log_var / 2))` and `C` a Gaussian
    /// smoothing of width `sigma_c` voxels.
    Smoothed { sigma_c: f64 },
}

/// Image and surface noise levels, and the number of posterior samples per
/// loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma_image_sq: f64,
    pub sigma_surface_sq: f64,
    pub samples: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            sigma_image_sq: 0.02,
            sigma_surface_sq: 4.0,
            samples: 1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_image_sq", self.sigma_image_sq),
            ("sigma_surface_sq", self.sigma_surface_sq),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.samples == 0 {
            return Err(Error::param("samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// Variational posterior `N(mu, Σ)` over the velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: VectorField,
    /// Per-voxel, per-component log-variance of `G²` (or of `Σ` in diagonal mode).
    pub log_var: VectorField,
    pub mode: CovarianceMode,
}

impl PosteriorParams {
    pub fn new(mu: VectorField, log_var: VectorField, mode: CovarianceMode) -> Result<Self> {
        ensure_same_grid(mu.grid(), log_var.grid())?;
        if !mu.is_finite() || !log_var.is_finite() {
            return Err(Error::NonFinite("posterior parameters"));
        }
        if let CovarianceMode::Smoothed { sigma_c } = mode {
            if !(sigma_c.is_finite() && sigma_c > 0.0) {
                return Err(Error::param("sigma_c", format!("must be positive, got {sigma_c}")));
            }
        }
        Ok(PosteriorParams { mu, log_var, mode })
    }

    /// `mu = 0`, `var = init_var` everywhere.
    pub fn initial(grid: GridSpec, init_var: f64, mode: CovarianceMode) -> Result<Self> {
        if !(init_var.is_finite() && init_var > 0.0) {
            return Err(Error::param("init_var", "must be positive"));
        }
        Self::new(
            VectorField::zeros(grid),
            VectorField::constant(grid, [init_var.ln(); 3]),
            mode,
        )
    }

    pub fn grid(&self) -> &GridSpec {
        self.mu.grid()
    }
}

fn forward_neighbors(grid: &GridSpec, i: usize) -> impl Iterator<Item = usize> + '_ {
    let c = grid.coords(i);
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    (0..3).filter_map(move |a| (c[a] + 1 < grid.dims[a]).then_some(i + strides[a]))
}

/// Number of in-bounds 6-neighbours of each voxel.
pub fn degrees(grid: &GridSpec) -> Vec<f64> {
    (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            (0..3)
                .map(|a| {
                    let n = grid.dims[a];
                    usize::from(c[a] > 0) + usize::from(c[a] + 1 < n)
                })
                .sum::<usize>() as f64
        })
        .collect()
}

/// `λ L field`, componentwise.
pub fn laplacian_apply(prior: &PriorParams, field: &VectorField) -> VectorField {
    let grid = *field.grid();
    let v = field.vectors();
    let mut out = vec![[0.0; 3]; grid.len()];
    for i in 0..grid.len() {
        for j in forward_neighbors(&grid, i) {
            for c in 0..3 {
                let d = v[i][c] - v[j][c];
                out[i][c] += d;
                out[j][c] -= d;
            }
        }
    }
    for o in &mut out {
        for x in o.iter_mut() {
            *x *= prior.lambda;
        }
    }
    VectorField::from_raw(grid, out)
}

/// `μᵀ (λ L) μ` summed over components, evaluated as
/// `(λ/2) Σ_i Σ_{j ∈ N(i)} |μ_i − μ_j|²` (ordered neighbour pairs).
pub fn prior_energy(prior: &PriorParams, mu: &VectorField) -> f64 {
    let grid = *mu.grid();
    let v = mu.vectors();
    let mut ordered = 0.0;
    for i in 0..grid.len() {
        for j in forward_neighbors(&grid, i) {
            let d2: f64 = (0..3).map(|c| (v[i][c] - v[j][c]).powi(2)).sum();
            // each unordered edge appears twice among ordered pairs
            ordered += 2.0 * d2;
        }
    }
    0.5 * prior.lambda * ordered
}

/// Smoothing width matched to the prior scale: solves
/// `1 / sqrt(2π σ_c^{3/2}) = 1 / (6λ)` for `σ_c`.
pub fn sigma_c_from_lambda(lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::param("lambda", "must be positive"));
    }
    let six_lambda = 6.0 * lambda;
    Ok((six_lambda * six_lambda / (2.0 * std::f64::consts::PI)).powf(2.0 / 3.0))
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Applies a 1D symmetric kernel along every axis of length > 1, with zero
/// padding outside the grid. The resulting operator is symmetric, so it is
/// its own adjoint.
pub(crate) fn separable_filter(grid: &GridSpec, data: &mut [f64], taps: &[f64]) {
    let radius = (taps.len() / 2) as i64;
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut line = Vec::new();
    let mut filtered = Vec::new();
    for axis in 0..3 {
        let n = grid.dims[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        for start in 0..grid.len() {
            if grid.coords(start)[axis] != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| data[start + k * stride]));
            filtered.clear();
            filtered.extend((0..n as i64).map(|x| {
                let lo = (x - radius).max(0);
                let hi = (x + radius).min(n as i64 - 1);
                (lo..=hi)
                    .map(|y| taps[(y - x + radius) as usize] * line[y as usize])
                    .sum::<f64>()
            }));
            for (k, v) in filtered.iter().enumerate() {
                data[start + k * stride] = *v;
            }
        }
    }
}

/// Gaussian smoothing of each component (zero padding, kernel truncated at
/// `3σ` and renormalized to unit sum).
pub fn gaussian_convolve(field: &VectorField, sigma: f64) -> Result<VectorField> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param("sigma", "must be positive"));
    }
    Ok(convolve_with(field, &gaussian_kernel(sigma)))
}

pub(crate) fn convolve_with(field: &VectorField, taps: &[f64]) -> VectorField {
    let grid = *field.grid();
    let mut out = vec![[0.0; 3]; grid.len()];
    let mut comp = vec![0.0; grid.len()];
    for c in 0..3 {
        for (dst, v) in comp.iter_mut().zip(field.vectors()) {
            *dst = v[c];
        }
        separable_filter(&grid, &mut comp, taps);
        for (o, v) in out.iter_mut().zip(&comp) {
            o[c] = *v;
        }
    }
    VectorField::from_raw(grid, out)
}

/// Per-voxel weights `w_q = λ Σ_p deg(p) C[p,q]²`, so that in smoothed mode
/// `tr(λ D Σ) = Σ_q w_q g_q²`.
pub(crate) fn smoothed_trace_weights(grid: &GridSpec, lambda: f64, sigma_c: f64) -> Vec<f64> {
    let squared: Vec<f64> = gaussian_kernel(sigma_c).iter().map(|t| t * t).collect();
    let mut w = degrees(grid);
    separable_filter(grid, &mut w, &squared);
    w.iter_mut().for_each(|x| *x *= lambda);
    w
}

/// Standard-normal noise field from the caller's RNG.
pub fn standard_normal_field<R: Rng + ?Sized>(grid: GridSpec, rng: &mut R) -> VectorField {
    let vectors = (0..grid.len())
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect();
    VectorField::from_raw(grid, vectors)
}

/// Reparameterized posterior sample: `z = μ + exp(log_var/2) ⊙ r`, with the
/// noise term Gaussian-smoothed in smoothed mode.
pub fn sample_posterior(post: &PosteriorParams, noise: &VectorField) -> Result<VectorField> {
    ensure_same_grid(post.grid(), noise.grid())?;
    let scaled = scaled_noise(post, noise);
    let noise_term = match post.mode {
        CovarianceMode::Diagonal => scaled,
        CovarianceMode::Smoothed { sigma_c } => gaussian_convolve(&scaled, sigma_c)?,
    };
    let grid = *post.grid();
    let z = post
        .mu
        .vectors()
        .iter()
        .zip(noise_term.vectors())
        .map(|(m, n)| [m[0] + n[0], m[1] + n[1], m[2] + n[2]])
        .collect();
    Ok(VectorField::from_raw(grid, z))
}

pub(crate) fn scaled_noise(post: &PosteriorParams, noise: &VectorField) -> VectorField {
    let vectors = post
        .log_var
        .vectors()
        .iter()
        .zip(noise.vectors())
        .map(|(lv, r)| {
            let mut out: Vec3 = [0.0; 3];
            for c in 0..3 {
                out[c] = (0.5 * lv[c]).exp() * r[c];
            }
            out
        })
        .collect();
    VectorField::from_raw(*post.grid(), vectors)
}

fn path_laplacian_basis(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Eigenpairs of the path-graph Laplacian: DCT-II vectors.
    let mut basis = vec![0.0; n * n];
    let mut eig = vec![0.0; n];
    let nf = n as f64;
    for k in 0..n {
        eig[k] = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / nf).cos();
        let norm = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            basis[k * n + i] =
                norm * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / nf).cos();
        }
    }
    (basis, eig)
}

/// Draws a velocity field from the prior `N(0, (λL)⁺)` restricted to the
/// complement of the constant null space.
pub fn sample_prior<R: Rng + ?Sized>(
    prior: &PriorParams,
    grid: GridSpec,
    rng: &mut R,
) -> Result<VectorField> {
    prior.validate()?;
    let bases: Vec<(Vec<f64>, Vec<f64>)> =
        grid.dims.iter().map(|&n| path_laplacian_basis(n)).collect();
    let mut out = vec![[0.0; 3]; grid.len()];
    let mut coeffs = vec![0.0; grid.len()];
    for c in 0..3 {
        for (k, coef) in coeffs.iter_mut().enumerate() {
            let [kx, ky, kz] = grid.coords(k);
            let e = bases[0].1[kx] + bases[1].1[ky] + bases[2].1[kz];
            let r: f64 = rng.sample(StandardNormal);
            *coef = if e > 1e-12 { r / (prior.lambda * e).sqrt() } else { 0.0 };
        }
        // synthesis: field = Σ_k coef_k ψ_kx ⊗ ψ_ky ⊗ ψ_kz, one axis at a time
        for axis in 0..3 {
            let n = grid.dims[axis];
            let basis = &bases[axis].0;
            let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]][axis];
            let mut line = vec![0.0; n];
            for start in 0..grid.len() {
                if grid.coords(start)[axis] != 0 {
                    continue;
                }
                for (k, l) in line.iter_mut().enumerate() {
                    *l = coeffs[start + k * stride];
                }
                for i in 0..n {
                    coeffs[start + i * stride] =
                        (0..n).map(|k| basis[k * n + i] * line[k]).sum();
                }
            }
        }
        for (o, v) in out.iter_mut().zip(&coeffs) {
            o[c] = *v;
        }
    }
    Ok(VectorField::from_raw(grid, out))
}
