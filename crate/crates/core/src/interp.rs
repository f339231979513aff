//! Trilinear stencils with clamp-to-edge boundary handling.
//!
//! Every sampler in the crate goes through [`Stencil`], so value, spatial
//! derivative and adjoint (scatter) all agree on the same piecewise-linear
//! interpolant.

use crate::grid::Vec3;

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    t: f64,
    /// Cell used for the spatial derivative; differs from `lo`/`hi` only on
    /// the upper boundary sample.
    dlo: usize,
    dhi: usize,
    /// False when the coordinate was clamped (derivative is zero there).
    inside: bool,
}

impl Axis {
    #[inline]
    fn new(n: usize, x: f64) -> Self {
        let max = (n - 1) as f64;
        let inside = n > 1 && (0.0..=max).contains(&x);
        let xc = x.clamp(0.0, max);
        // xc is non-negative, so truncation is floor
        let lo = (xc as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let t = if hi == lo { 0.0 } else { xc - lo as f64 };
        let (dlo, dhi) = if n > 1 {
            let d = lo.min(n - 2);
            (d, d + 1)
        } else {
            (0, 0)
        };
        Axis {
            lo,
            hi,
            t,
            dlo,
            dhi,
            inside,
        }
    }

    /// Interior cell whose derivative cell coincides with its value cell.
    #[inline]
    fn regular(&self) -> bool {
        self.inside && self.hi == self.lo + 1 && self.dlo == self.lo
    }

    #[inline]
    fn weights(&self) -> [f64; 2] {
        [1.0 - self.t, self.t]
    }

    #[inline]
    fn value_index(&self, k: usize) -> usize {
        if k == 0 {
            self.lo
        } else {
            self.hi
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

#[inline]
fn lerp3(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    if t == 0.0 {
        a
    } else {
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    }
}

/// Trilinear stencil of a continuous voxel coordinate on a lattice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    axes: [Axis; 3],
    nx: usize,
    nxy: usize,
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: [usize; 3], p: Vec3) -> Self {
        Stencil {
            axes: [
                Axis::new(dims[0], p[0]),
                Axis::new(dims[1], p[1]),
                Axis::new(dims[2], p[2]),
            ],
            nx: dims[0],
            nxy: dims[0] * dims[1],
        }
    }

    #[inline]
    fn flat(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * y + self.nxy * z
    }

    /// The 8 corner indices with their interpolation weights.
    #[inline]
    pub(crate) fn corners(&self) -> [(usize, f64); 8] {
        let [ax, ay, az] = &self.axes;
        let (wx, wy, wz) = (ax.weights(), ay.weights(), az.weights());
        let mut out = [(0usize, 0.0f64); 8];
        let mut k = 0;
        for (kz, &wzk) in wz.iter().enumerate() {
            for (ky, &wyk) in wy.iter().enumerate() {
                for (kx, &wxk) in wx.iter().enumerate() {
                    out[k] = (
                        self.flat(ax.value_index(kx), ay.value_index(ky), az.value_index(kz)),
                        wxk * wyk * wzk,
                    );
                    k += 1;
                }
            }
        }
        out
    }

    #[inline]
    pub(crate) fn sample(&self, v: &[f64]) -> f64 {
        let [ax, ay, az] = &self.axes;
        let row = |y: usize, z: usize| {
            lerp(
                v[self.flat(ax.lo, y, z)],
                v[self.flat(ax.hi, y, z)],
                ax.t,
            )
        };
        let plane = |z: usize| lerp(row(ay.lo, z), row(ay.hi, z), ay.t);
        lerp(plane(az.lo), plane(az.hi), az.t)
    }

    #[inline]
    pub(crate) fn sample_vec(&self, v: &[Vec3]) -> Vec3 {
        let [ax, ay, az] = &self.axes;
        let row = |y: usize, z: usize| {
            lerp3(
                v[self.flat(ax.lo, y, z)],
                v[self.flat(ax.hi, y, z)],
                ax.t,
            )
        };
        let plane = |z: usize| lerp3(row(ay.lo, z), row(ay.hi, z), ay.t);
        lerp3(plane(az.lo), plane(az.hi), az.t)
    }

    /// Spatial gradient of the interpolated scalar field at the stencil point.
    #[inline]
    pub(crate) fn gradient(&self, v: &[f64]) -> Vec3 {
        let mut g = [0.0; 3];
        for (axis, gk) in g.iter_mut().enumerate() {
            if !self.axes[axis].inside {
                continue;
            }
            *gk = self.directional(axis, |i| v[i]);
        }
        g
    }

    /// Spatial Jacobian of an interpolated vector field: `jac[c][axis]`.
    #[inline]
    pub(crate) fn jacobian(&self, v: &[Vec3]) -> [Vec3; 3] {
        let [ax, ay, az] = &self.axes;
        if ax.regular() && ay.regular() && az.regular() {
            let c = |x: usize, y: usize, z: usize| v[self.flat(x, y, z)];
            let (x0, x1, y0, y1, z0, z1) = (ax.lo, ax.hi, ay.lo, ay.hi, az.lo, az.hi);
            let corner = [
                [[c(x0, y0, z0), c(x1, y0, z0)], [c(x0, y1, z0), c(x1, y1, z0)]],
                [[c(x0, y0, z1), c(x1, y0, z1)], [c(x0, y1, z1), c(x1, y1, z1)]],
            ];
            let (tx, ty, tz) = (ax.t, ay.t, az.t);
            let bilerp = |a: f64, b: f64, c: f64, d: f64, s: f64, t: f64| {
                let lo = a + s * (b - a);
                let hi = c + s * (d - c);
                lo + t * (hi - lo)
            };
            let mut jac = [[0.0; 3]; 3];
            for (k, row) in jac.iter_mut().enumerate() {
                let q = |z: usize, y: usize, x: usize| corner[z][y][x][k];
                row[0] = bilerp(
                    q(0, 0, 1) - q(0, 0, 0),
                    q(0, 1, 1) - q(0, 1, 0),
                    q(1, 0, 1) - q(1, 0, 0),
                    q(1, 1, 1) - q(1, 1, 0),
                    ty,
                    tz,
                );
                row[1] = bilerp(
                    q(0, 1, 0) - q(0, 0, 0),
                    q(0, 1, 1) - q(0, 0, 1),
                    q(1, 1, 0) - q(1, 0, 0),
                    q(1, 1, 1) - q(1, 0, 1),
                    tx,
                    tz,
                );
                row[2] = bilerp(
                    q(1, 0, 0) - q(0, 0, 0),
                    q(1, 0, 1) - q(0, 0, 1),
                    q(1, 1, 0) - q(0, 1, 0),
                    q(1, 1, 1) - q(0, 1, 1),
                    tx,
                    ty,
                );
            }
            return jac;
        }
        let mut jac = [[0.0; 3]; 3];
        for axis in 0..3 {
            if !self.axes[axis].inside {
                continue;
            }
            for (c, row) in jac.iter_mut().enumerate() {
                row[axis] = self.directional(axis, |i| v[i][c]);
            }
        }
        jac
    }

    #[inline]
    fn directional(&self, axis: usize, get: impl Fn(usize) -> f64) -> f64 {
        let a = &self.axes;
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (w1, w2) = (a[o1].weights(), a[o2].weights());
        let mut acc = 0.0;
        for k2 in 0..2 {
            for k1 in 0..2 {
                let w = w1[k1] * w2[k2];
                if w == 0.0 {
                    continue;
                }
                let mut lo = [0usize; 3];
                lo[o1] = a[o1].value_index(k1);
                lo[o2] = a[o2].value_index(k2);
                let mut hi = lo;
                lo[axis] = a[axis].dlo;
                hi[axis] = a[axis].dhi;
                acc += w * (get(self.flat(hi[0], hi[1], hi[2])) - get(self.flat(lo[0], lo[1], lo[2])));
            }
        }
        acc
    }
}
