//! Spatial transforms: trilinear sampling, image warping and composition of
//! displacement fields, together with the adjoints the optimizer needs.
//!
//! Out-of-bounds coordinates are clamped to the grid (edge extension). The
//! derivative of the clamp is zero outside the domain.

use rayon::prelude::*;

use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{SegmentationMap, Vec3, VectorField, Volume};
use crate::interp::Stencil;

#[inline]
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Trilinear interpolation of `vol` at a continuous voxel coordinate.
pub fn sample_trilinear(vol: &Volume, point: Vec3) -> Result<f64> {
    if !point.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("sample point"));
    }
    Ok(Stencil::new(vol.grid().dims, point).sample(vol.values()))
}

/// `out(p) = m(p + phi(p))`.
pub fn warp_image(m: &Volume, phi: &VectorField) -> Result<Volume> {
    ensure_same_grid(m.grid(), phi.grid())?;
    let grid = *m.grid();
    let values = m.values();
    let out = phi
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let q = add(grid.point(i), *u);
            Stencil::new(grid.dims, q).sample(values)
        })
        .collect();
    Ok(Volume::from_raw(grid, out))
}

/// Nearest-neighbour warp of a label map, `out(p) = labels(round(p + phi(p)))`.
pub fn warp_labels(seg: &SegmentationMap, phi: &VectorField) -> Result<SegmentationMap> {
    ensure_same_grid(seg.grid(), phi.grid())?;
    let grid = *seg.grid();
    let labels = seg.labels();
    let out = phi
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let q = add(grid.point(i), *u);
            let mut c = [0usize; 3];
            for a in 0..3 {
                let max = (grid.dims[a] - 1) as f64;
                c[a] = q[a].round().clamp(0.0, max) as usize;
            }
            labels[grid.index(c[0], c[1], c[2])]
        })
        .collect();
    SegmentationMap::new(grid, out)
}

/// Displacement of `(Id + a) ∘ (Id + b)`: `c(p) = b(p) + a(p + b(p))`.
pub fn compose(a: &VectorField, b: &VectorField) -> Result<VectorField> {
    ensure_same_grid(a.grid(), b.grid())?;
    Ok(compose_unchecked(a, b))
}

pub(crate) fn compose_unchecked(a: &VectorField, b: &VectorField) -> VectorField {
    let grid = *a.grid();
    let av = a.vectors();
    let out = b
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, bv)| {
            let q = add(grid.point(i), *bv);
            add(*bv, Stencil::new(grid.dims, q).sample_vec(av))
        })
        .collect();
    VectorField::from_raw(grid, out)
}

/// Gradient of `Σ_p upstream(p) · warp_image(m, phi)(p)` with respect to `phi`.
pub fn grad_warp_image(m: &Volume, phi: &VectorField, upstream: &Volume) -> Result<VectorField> {
    ensure_same_grid(m.grid(), phi.grid())?;
    ensure_same_grid(m.grid(), upstream.grid())?;
    let grid = *m.grid();
    let mv = m.values();
    let up = upstream.values();
    let out = phi
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let g = up[i];
            if g == 0.0 {
                return [0.0; 3];
            }
            let q = add(grid.point(i), *u);
            let d = Stencil::new(grid.dims, q).gradient(mv);
            [g * d[0], g * d[1], g * d[2]]
        })
        .collect();
    Ok(VectorField::from_raw(grid, out))
}

/// Adjoint of [`compose`] given `upstream = ∂L/∂c`; returns `(∂L/∂a, ∂L/∂b)`.
pub(crate) fn compose_adjoint(
    a: &VectorField,
    b: &VectorField,
    upstream: &VectorField,
) -> (VectorField, VectorField) {
    let grid = *a.grid();
    let av = a.vectors();
    let bv = b.vectors();
    let gv = upstream.vectors();

    let stencils: Vec<Stencil> = bv
        .par_iter()
        .enumerate()
        .map(|(i, u)| Stencil::new(grid.dims, add(grid.point(i), *u)))
        .collect();

    let gb = stencils
        .par_iter()
        .zip(gv.par_iter())
        .map(|(s, g)| {
            let j = s.jacobian(av);
            let mut out = *g;
            for axis in 0..3 {
                out[axis] += j[0][axis] * g[0] + j[1][axis] * g[1] + j[2][axis] * g[2];
            }
            out
        })
        .collect();

    let mut ga = vec![[0.0; 3]; grid.len()];
    for (s, g) in stencils.iter().zip(gv) {
        if *g == [0.0; 3] {
            continue;
        }
        for (k, w) in s.corners() {
            if w != 0.0 {
                let o = &mut ga[k];
                o[0] += w * g[0];
                o[1] += w * g[1];
                o[2] += w * g[2];
            }
        }
    }
    (
        VectorField::from_raw(grid, ga),
        VectorField::from_raw(grid, gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{identity_map, GridSpec};

    fn grid(n: [usize; 3]) -> GridSpec {
        GridSpec::new(n).unwrap()
    }

    fn ramp_x(g: GridSpec) -> Volume {
        Volume::from_fn(g, |[x, _, _]| x as f64)
    }

    #[test]
    fn sample_on_lattice_and_midpoint() {
        let g = grid([3, 4, 5]);
        let v = Volume::from_fn(g, |[x, y, z]| (x * 100 + y * 10 + z) as f64);
        assert_eq!(sample_trilinear(&v, [1.0, 2.0, 3.0]).unwrap(), 123.0);

        let two = Volume::new(grid([2, 1, 1]), vec![3.0, 8.0]).unwrap();
        assert_eq!(sample_trilinear(&two, [0.5, 0.0, 0.0]).unwrap(), 5.5);
    }

    #[test]
    fn sample_clamps_out_of_bounds() {
        let g = grid([4, 4, 4]);
        let v = Volume::from_fn(g, |[x, y, z]| (x + 2 * y + 3 * z) as f64 + 0.5);
        assert_eq!(
            sample_trilinear(&v, [-5.0, 0.0, 0.0]).unwrap(),
            sample_trilinear(&v, [0.0, 0.0, 0.0]).unwrap()
        );
        assert!(sample_trilinear(&v, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_warp_is_bitwise() {
        let g = grid([5, 4, 3]);
        let m = Volume::from_fn(g, |[x, y, z]| ((x * 7 + y * 3 + z) as f64).sin() - 0.0);
        let out = warp_image(&m, &identity_map(g)).unwrap();
        assert_eq!(out.values(), m.values());
    }

    #[test]
    fn integer_shift_hits_lattice() {
        let g = grid([6, 6, 6]);
        let m = Volume::from_fn(g, |[x, y, z]| ((x * 13 + y * 5 + z * 2) % 7) as f64);
        let phi = VectorField::constant(g, [-1.0, 0.0, 0.0]);
        let out = warp_image(&m, &phi).unwrap();
        for x in 1..6 {
            for y in 0..6 {
                for z in 0..6 {
                    assert_eq!(out.get(x, y, z), m.get(x - 1, y, z));
                }
            }
        }
    }

    #[test]
    fn half_shift_on_ramp() {
        let g = grid([8, 3, 3]);
        let out = warp_image(&ramp_x(g), &VectorField::constant(g, [0.5, 0.0, 0.0])).unwrap();
        for x in 0..7 {
            assert!((out.get(x, 1, 1) - (x as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_grid_mismatch() {
        let m = Volume::zeros(grid([3, 3, 3]));
        let phi = VectorField::zeros(grid([3, 3, 4]));
        assert!(matches!(warp_image(&m, &phi), Err(Error::GridMismatch { .. })));
        assert!(compose(&phi, &VectorField::zeros(grid([3, 3, 3]))).is_err());
    }

    #[test]
    fn compose_identity_laws() {
        let g = grid([6, 6, 6]);
        let b = VectorField::from_fn(g, |p| [0.3 * (p[1] * 0.5).sin(), -0.2, 0.1 * p[0] / 6.0]);
        let id = identity_map(g);
        assert_eq!(compose(&id, &b).unwrap(), b);
        assert_eq!(compose(&b, &id).unwrap(), b);
    }

    #[test]
    fn translations_add_in_interior() {
        let g = grid([8, 8, 8]);
        let u = VectorField::constant(g, [0.75, -0.5, 0.25]);
        let v = VectorField::constant(g, [-0.25, 1.0, 0.5]);
        let c1 = compose(&u, &v).unwrap();
        let c2 = compose(&v, &u).unwrap();
        for i in 0..g.len() {
            if g.in_interior(i, 2) {
                for k in 0..3 {
                    let want = u.vectors()[i][k] + v.vectors()[i][k];
                    assert!((c1.vectors()[i][k] - want).abs() < 1e-12);
                    assert!((c2.vectors()[i][k] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_warp_gradient_is_zero() {
        let g = grid([5, 5, 5]);
        let m = Volume::filled(g, 2.5);
        let phi = VectorField::constant(g, [0.3, -0.2, 0.1]);
        let up = Volume::filled(g, 1.0);
        let grad = grad_warp_image(&m, &phi, &up).unwrap();
        assert!(grad.vectors().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn ramp_warp_gradient_one_hot() {
        let g = grid([6, 6, 6]);
        let phi = VectorField::constant(g, [0.25, 0.25, 0.25]);
        let mut up = vec![0.0; g.len()];
        let p = g.index(2, 3, 2);
        up[p] = 1.0;
        let up = Volume::new(g, up).unwrap();
        let grad = grad_warp_image(&ramp_x(g), &phi, &up).unwrap();
        assert_eq!(grad.vectors()[p], [1.0, 0.0, 0.0]);
        assert_eq!(grad.vectors()[g.index(1, 1, 1)], [0.0; 3]);
    }

    #[test]
    fn warp_labels_nearest() {
        let g = grid([4, 1, 1]);
        let seg = SegmentationMap::new(g, vec![1, 2, 3, 4]).unwrap();
        let out = warp_labels(&seg, &VectorField::constant(g, [0.6, 0.0, 0.0])).unwrap();
        assert_eq!(out.labels(), &[2, 3, 4, 4]);
    }
}
