//! Integration of stationary velocity fields into displacement fields.
//!
//! `exp(v)` is the time-1 flow of `dφ/dt = v(φ)`. Scaling and squaring
//! computes it as `(Id + v / 2^T)` composed with itself `T` times; Euler and
//! RK4 follow each voxel's trajectory with fixed steps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Vec3, VectorField};
use crate::interp::Stencil;
use crate::transform::{compose_adjoint, compose_unchecked};

/// Upper bound on squaring steps (a `2^16` scaling).
pub const MAX_SQUARINGS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMethod {
    ScalingSquaring,
    Euler,
    Rk4,
}

impl fmt::Display for IntegrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrationMethod::ScalingSquaring => "scaling_squaring",
            IntegrationMethod::Euler => "euler",
            IntegrationMethod::Rk4 => "rk4",
        })
    }
}

impl FromStr for IntegrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaling_squaring" | "ss" => Ok(IntegrationMethod::ScalingSquaring),
            "euler" => Ok(IntegrationMethod::Euler),
            "rk4" => Ok(IntegrationMethod::Rk4),
            other => Err(Error::param("method", format!("unknown integrator {other:?}"))),
        }
    }
}

/// `steps` is the number of squarings for scaling and squaring, and the
/// number of fixed substeps for Euler / RK4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: IntegrationMethod,
    pub steps: u32,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: IntegrationMethod::ScalingSquaring,
            steps: 7,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: IntegrationMethod, steps: u32) -> Result<Self> {
        let cfg = IntegratorConfig { method, steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if self.method == IntegrationMethod::ScalingSquaring && self.steps > MAX_SQUARINGS {
            return Err(Error::param(
                "steps",
                format!("at most {MAX_SQUARINGS} squarings, got {}", self.steps),
            ));
        }
        Ok(())
    }
}

fn check_input(v: &VectorField) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("velocity field"))
    }
}

/// Largest per-voxel step of the initial scaled field, `max |v| / 2^T`.
pub fn scaled_step_magnitude(v: &VectorField, squarings: u32) -> f64 {
    v.max_norm() / f64::from(1u32 << squarings.min(MAX_SQUARINGS))
}

/// Scaling and squaring. `squarings = 0` returns `v` itself (the first-order
/// map `Id + v`).
pub fn exp_ss(v: &VectorField, squarings: u32) -> Result<VectorField> {
    check_input(v)?;
    if squarings > MAX_SQUARINGS {
        return Err(Error::param("steps", format!("at most {MAX_SQUARINGS} squarings")));
    }
    let mut u = v.scaled(1.0 / f64::from(1u32 << squarings));
    for _ in 0..squarings {
        u = compose_unchecked(&u, &u);
    }
    Ok(u)
}

/// Forward pass of scaling and squaring that keeps every intermediate field
/// so that [`exp_ss_backward`] can run.
pub(crate) fn exp_ss_tape(v: &VectorField, squarings: u32) -> Vec<VectorField> {
    let mut tape = Vec::with_capacity(squarings as usize + 1);
    tape.push(v.scaled(1.0 / f64::from(1u32 << squarings)));
    for t in 0..squarings as usize {
        let next = compose_unchecked(&tape[t], &tape[t]);
        tape.push(next);
    }
    tape
}

/// Pulls `∂L/∂exp(v)` back to `∂L/∂v` through a recorded squaring tape.
pub(crate) fn exp_ss_backward(tape: &[VectorField], upstream: VectorField) -> VectorField {
    let squarings = tape.len() - 1;
    let mut g = upstream;
    for t in (0..squarings).rev() {
        let (ga, gb) = compose_adjoint(&tape[t], &tape[t], &g);
        let mut sum = ga;
        for (s, b) in sum.vectors_mut().iter_mut().zip(gb.vectors()) {
            s[0] += b[0];
            s[1] += b[1];
            s[2] += b[2];
        }
        g = sum;
    }
    g.scaled(1.0 / f64::from(1u32 << squarings))
}

fn trajectory_integrate(
    v: &VectorField,
    substeps: u32,
    step: impl Fn(&dyn Fn(Vec3) -> Vec3, Vec3, f64) -> Vec3 + Sync,
) -> Result<VectorField> {
    check_input(v)?;
    if substeps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let grid = *v.grid();
    let data = v.vectors();
    let field = |x: Vec3| Stencil::new(grid.dims, x).sample_vec(data);
    let h = 1.0 / f64::from(substeps);
    let out = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.point(i);
            let mut x = p;
            for _ in 0..substeps {
                x = step(&field, x, h);
            }
            [x[0] - p[0], x[1] - p[1], x[2] - p[2]]
        })
        .collect();
    Ok(VectorField::from_raw(grid, out))
}

#[inline]
fn axpy(x: Vec3, a: f64, y: Vec3) -> Vec3 {
    [x[0] + a * y[0], x[1] + a * y[1], x[2] + a * y[2]]
}

/// Forward Euler with `n` equal steps along each voxel's trajectory.
pub fn exp_euler(v: &VectorField, n: u32) -> Result<VectorField> {
    trajectory_integrate(v, n, |f, x, h| axpy(x, h, f(x)))
}

/// Classical fourth-order Runge–Kutta with `n` equal steps.
pub fn exp_rk4(v: &VectorField, n: u32) -> Result<VectorField> {
    trajectory_integrate(v, n, |f, x, h| {
        let k1 = f(x);
        let k2 = f(axpy(x, 0.5 * h, k1));
        let k3 = f(axpy(x, 0.5 * h, k2));
        let k4 = f(axpy(x, h, k3));
        let mut out = x;
        for c in 0..3 {
            out[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        out
    })
}

/// Displacement of `exp(v)` under the configured integrator.
pub fn integrate(v: &VectorField, cfg: &IntegratorConfig) -> Result<VectorField> {
    cfg.validate()?;
    match cfg.method {
        IntegrationMethod::ScalingSquaring => exp_ss(v, cfg.steps),
        IntegrationMethod::Euler => exp_euler(v, cfg.steps),
        IntegrationMethod::Rk4 => exp_rk4(v, cfg.steps),
    }
}

/// Displacement of the inverse deformation, `exp(-v)`.
pub fn invert(v: &VectorField, cfg: &IntegratorConfig) -> Result<VectorField> {
    check_input(v)?;
    integrate(&v.scaled(-1.0), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    #[test]
    fn zero_velocity_is_identity_for_all_methods() {
        let g = GridSpec::cube(5).unwrap();
        let z = VectorField::zeros(g);
        for t in 0..=10 {
            assert_eq!(exp_ss(&z, t).unwrap(), z);
        }
        assert_eq!(exp_euler(&z, 7).unwrap(), z);
        assert_eq!(exp_rk4(&z, 3).unwrap(), z);
        assert_eq!(invert(&z, &IntegratorConfig::default()).unwrap(), z);
    }

    #[test]
    fn constant_velocity_is_exact_translation() {
        let g = GridSpec::cube(8).unwrap();
        let v = VectorField::constant(g, [2.0, 0.0, 0.0]);
        let u = exp_ss(&v, 7).unwrap();
        assert!(u.vectors().iter().all(|x| *x == [2.0, 0.0, 0.0]));

        let w = VectorField::constant(g, [0.5, -0.25, 0.75]);
        for n in [1, 3, 16] {
            for u in [exp_euler(&w, n).unwrap(), exp_rk4(&w, n).unwrap()] {
                for i in 0..g.len() {
                    if g.in_interior(i, 2) {
                        for c in 0..3 {
                            assert!((u.vectors()[i][c] - w.vectors()[i][c]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn inverse_of_constant_is_negated() {
        let g = GridSpec::cube(6).unwrap();
        let v = VectorField::constant(g, [1.0, 0.0, 0.0]);
        let inv = invert(&v, &IntegratorConfig::default()).unwrap();
        assert!(inv.vectors().iter().all(|x| *x == [-1.0, 0.0, 0.0]));
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::new(IntegrationMethod::ScalingSquaring, 0).is_err());
        assert!(IntegratorConfig::new(IntegrationMethod::ScalingSquaring, 17).is_err());
        assert!(IntegratorConfig::new(IntegrationMethod::Euler, 1024).is_ok());
        assert_eq!(IntegratorConfig::default().steps, 7);
        assert_eq!("rk4".parse::<IntegrationMethod>().unwrap(), IntegrationMethod::Rk4);
        assert!("heun".parse::<IntegrationMethod>().is_err());
    }

    #[test]
    fn rejects_non_finite_velocity() {
        let g = GridSpec::cube(3).unwrap();
        let mut v = VectorField::zeros(g);
        v.vectors_mut()[4] = [f64::NAN, 0.0, 0.0];
        assert!(exp_ss(&v, 3).is_err());
        assert!(exp_euler(&v, 3).is_err());
        assert!(exp_rk4(&v, 3).is_err());
    }

    #[test]
    fn scaled_step_reports_ratio() {
        let g = GridSpec::cube(3).unwrap();
        let v = VectorField::constant(g, [3.0, 4.0, 0.0]);
        assert_eq!(scaled_step_magnitude(&v, 2), 1.25);
    }
}
