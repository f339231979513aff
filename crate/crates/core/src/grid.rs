//! Lattice geometry and the dense field containers.
//!
//! Voxels are stored x-fastest: the flat index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Vectors are expressed in voxel units of the grid
//! they live on; physical spacing only enters through [`resample_field`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Stencil;

/// A 3-component vector in voxel units.
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    /// Grid with unit spacing.
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3])
    }

    /// Axes of extent 1 are accepted and treated as degenerate (constant
    /// along that axis); this is how thin pseudo-2D volumes are represented.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(GridSpec { dims, spacing })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n; 3])
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Voxel position as a continuous coordinate.
    #[inline]
    pub fn point(&self, i: usize) -> Vec3 {
        let [x, y, z] = self.coords(i);
        [x as f64, y as f64, z as f64]
    }

    /// True when the voxel lies at least `margin` voxels away from every
    /// border. Axes too short to carry the margin are not restricted.
    pub fn in_interior(&self, i: usize, margin: usize) -> bool {
        let c = self.coords(i);
        (0..3).all(|a| {
            let n = self.dims[a];
            n <= 2 * margin || (c[a] >= margin && c[a] + margin < n)
        })
    }

    /// Grid for a velocity field sampled every `factor` voxels that still
    /// covers every voxel of `self`.
    pub fn downsampled(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 {
            return Err(Error::param("factor", "must be positive"));
        }
        let mut dims = [0; 3];
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            dims[a] = if n == 1 { 1 } else { (n - 1).div_ceil(factor) + 1 };
            spacing[a] = self.spacing[a] * factor as f64;
        }
        GridSpec::with_spacing(dims, spacing)
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &'static str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Dense scalar lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        check_finite(values.iter().copied(), "volume")?;
        Ok(Volume { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        Volume {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> f64 + Sync) -> Self {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| f(grid.coords(i)))
            .collect();
        Volume { grid, values }
    }

    pub(crate) fn from_raw(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Volume { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.grid.index(x, y, z)]
    }
}

/// Dense 3-vector lattice; used both for velocities and displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    vectors: Vec<Vec3>,
}

impl VectorField {
    pub fn new(grid: GridSpec, vectors: Vec<Vec3>) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                actual: vectors.len(),
            });
        }
        check_finite(vectors.iter().flatten().copied(), "vector field")?;
        Ok(VectorField { grid, vectors })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, [0.0; 3])
    }

    pub fn constant(grid: GridSpec, v: Vec3) -> Self {
        VectorField {
            grid,
            vectors: vec![v; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(Vec3) -> Vec3 + Sync) -> Self {
        let vectors = (0..grid.len())
            .into_par_iter()
            .map(|i| f(grid.point(i)))
            .collect();
        VectorField { grid, vectors }
    }

    pub(crate) fn from_raw(grid: GridSpec, vectors: Vec<Vec3>) -> Self {
        debug_assert_eq!(vectors.len(), grid.len());
        VectorField { grid, vectors }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [Vec3] {
        &mut self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vec3> {
        self.vectors
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().flatten().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        self.map(|v| [v[0] * s, v[1] * s, v[2] * s])
    }

    pub fn map(&self, f: impl Fn(Vec3) -> Vec3 + Sync) -> VectorField {
        let vectors = self.vectors.par_iter().map(|&v| f(v)).collect();
        VectorField {
            grid: self.grid,
            vectors,
        }
    }

    /// Largest Euclidean norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(norm).fold(0.0, f64::max)
    }

    /// Trilinear sample with clamp-to-edge.
    pub fn sample(&self, p: Vec3) -> Vec3 {
        Stencil::new(self.grid.dims, p).sample_vec(&self.vectors)
    }
}

/// Integer label lattice; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    grid: GridSpec,
    labels: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(grid: GridSpec, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                actual: labels.len(),
            });
        }
        Ok(SegmentationMap { grid, labels })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct non-zero labels in increasing order.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

#[inline]
pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// The identity deformation, i.e. the zero displacement field.
pub fn identity_map(grid: GridSpec) -> VectorField {
    VectorField::zeros(grid)
}

fn resample_plan(src: &GridSpec, target: &GridSpec) -> (Vec3, Vec3) {
    let mut coord_scale = [0.0; 3];
    let mut vec_scale = [0.0; 3];
    for a in 0..3 {
        coord_scale[a] = target.spacing[a] / src.spacing[a];
        vec_scale[a] = src.spacing[a] / target.spacing[a];
    }
    (coord_scale, vec_scale)
}

/// Linearly resamples a field onto `target`, converting vector components so
/// that displacements keep their physical length. Both grids share the
/// origin at voxel `(0, 0, 0)`.
pub fn resample_field(field: &VectorField, target: &GridSpec) -> Result<VectorField> {
    if !field.is_finite() {
        return Err(Error::NonFinite("resample input"));
    }
    if field.grid() == target {
        return Ok(field.clone());
    }
    let src = *field.grid();
    let (cs, vs) = resample_plan(&src, target);
    let data = field.vectors();
    let vectors = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let p = target.point(i);
            let q = [p[0] * cs[0], p[1] * cs[1], p[2] * cs[2]];
            let v = Stencil::new(src.dims, q).sample_vec(data);
            [v[0] * vs[0], v[1] * vs[1], v[2] * vs[2]]
        })
        .collect();
    Ok(VectorField::from_raw(*target, vectors))
}

/// Adjoint of [`resample_field`]: maps a gradient on the target grid back to
/// the source grid.
pub(crate) fn resample_field_adjoint(
    upstream: &VectorField,
    src: &GridSpec,
) -> VectorField {
    let target = *upstream.grid();
    if &target == src {
        return upstream.clone();
    }
    let (cs, vs) = resample_plan(src, &target);
    let mut out = vec![[0.0; 3]; src.len()];
    for (i, g) in upstream.vectors().iter().enumerate() {
        let p = target.point(i);
        let q = [p[0] * cs[0], p[1] * cs[1], p[2] * cs[2]];
        let gs = [g[0] * vs[0], g[1] * vs[1], g[2] * vs[2]];
        for (j, w) in Stencil::new(src.dims, q).corners() {
            if w != 0.0 {
                let o = &mut out[j];
                o[0] += w * gs[0];
                o[1] += w * gs[1];
                o[2] += w * gs[2];
            }
        }
    }
    VectorField::from_raw(*src, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let g = GridSpec::new([3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 2, 3), 1 + 3 * (2 + 4 * 3));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new([0, 2, 2]).is_err());
        assert!(GridSpec::with_spacing([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        assert!(GridSpec::with_spacing([2, 2, 2], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn identity_is_zero() {
        let g = GridSpec::cube(4).unwrap();
        let id = identity_map(g);
        assert_eq!(id.vectors().len(), 64);
        assert!(id.vectors().iter().all(|v| *v == [0.0; 3]));
        let g2 = GridSpec::cube(2).unwrap();
        assert!(identity_map(g2).vectors().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn volume_rejects_nan_and_wrong_len() {
        let g = GridSpec::cube(2).unwrap();
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        assert!(matches!(Volume::new(g, v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn resample_converts_units() {
        let coarse = GridSpec::with_spacing([8; 3], [2.0; 3]).unwrap();
        let fine = GridSpec::cube(16).unwrap();
        let v = VectorField::constant(coarse, [1.0, 0.0, 0.0]);
        let up = resample_field(&v, &fine).unwrap();
        assert!(up.vectors().iter().all(|x| *x == [2.0, 0.0, 0.0]));
    }

    #[test]
    fn resample_same_grid_is_bitwise() {
        let g = GridSpec::cube(5).unwrap();
        let v = VectorField::from_fn(g, |p| [p[0].sin(), p[1] * 0.3, -p[2]]);
        assert_eq!(resample_field(&v, &g).unwrap(), v);
    }

    #[test]
    fn ramp_down_up_is_exact_in_interior() {
        let fine = GridSpec::cube(17).unwrap();
        let coarse = fine.downsampled(2).unwrap();
        assert_eq!(coarse.dims, [9; 3]);
        let ramp = |p: Vec3| [0.1 * p[0] + 0.2 * p[1], -0.05 * p[2] + 1.0, 0.3 * p[0] - 0.1 * p[1] + 0.07 * p[2]];
        let v = VectorField::from_fn(fine, ramp);
        let down = resample_field(&v, &coarse).unwrap();
        let back = resample_field(&down, &fine).unwrap();
        for i in 0..fine.len() {
            if !fine.in_interior(i, 1) {
                continue;
            }
            for c in 0..3 {
                assert!((back.vectors()[i][c] - v.vectors()[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resample_rejects_non_finite() {
        let g = GridSpec::cube(2).unwrap();
        let mut v = VectorField::zeros(g);
        v.vectors_mut()[0][1] = f64::INFINITY;
        assert!(resample_field(&v, &GridSpec::cube(3).unwrap()).is_err());
    }

    #[test]
    fn resample_adjoint_matches_inner_products() {
        let fine = GridSpec::cube(7).unwrap();
        let coarse = fine.downsampled(2).unwrap();
        let a = VectorField::from_fn(coarse, |p| [p[0].cos(), (p[1] * 0.7).sin(), p[2] * p[0] * 0.1]);
        let b = VectorField::from_fn(fine, |p| [(p[2] * 0.4).sin(), p[0] - p[1], (p[1] * 0.2).cos()]);
        let ra = resample_field(&a, &fine).unwrap();
        let rb = resample_field_adjoint(&b, &coarse);
        let dot = |x: &VectorField, y: &VectorField| -> f64 {
            x.vectors()
                .iter()
                .zip(y.vectors())
                .map(|(u, v)| u[0] * v[0] + u[1] * v[1] + u[2] * v[2])
                .sum()
        };
        let lhs = dot(&ra, &b);
        let rhs = dot(&a, &rb);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
