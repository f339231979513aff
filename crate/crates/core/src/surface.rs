//! Surface extraction, exact Euclidean distance transforms and surface point
//! sampling.
//!
//! A surface is the set of boundary voxel centres of one label. Distances to
//! it are precomputed on the image grid and read back with trilinear
//! interpolation at warped point locations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{GridSpec, SegmentationMap, Vec3, VectorField, Volume};
use crate::interp::Stencil;

/// Upper bound on sampled surface points per surface.
pub const MAX_SURFACE_POINTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoints {
    points: Vec<Vec3>,
    source_label: u32,
}

impl SurfacePoints {
    pub fn new(points: Vec<Vec3>, source_label: u32, grid: &GridSpec) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet("surface points"));
        }
        for p in &points {
            for a in 0..3 {
                let max = (grid.dims[a] - 1) as f64;
                if !(p[a].is_finite() && (0.0..=max).contains(&p[a])) {
                    return Err(Error::param(
                        "points",
                        format!("{p:?} lies outside the grid bounding box"),
                    ));
                }
            }
        }
        Ok(SurfacePoints {
            points,
            source_label,
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn source_label(&self) -> u32 {
        self.source_label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-voxel Euclidean distance (voxel units) to the nearest surface voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(Volume);

impl DistanceMap {
    pub fn grid(&self) -> &GridSpec {
        self.0.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    /// Wraps a precomputed distance volume (e.g. read from disk).
    pub fn from_volume(vol: Volume) -> Result<Self> {
        if vol.values().iter().any(|&v| v < 0.0) {
            return Err(Error::param("distance map", "values must be non-negative"));
        }
        Ok(DistanceMap(vol))
    }

    /// Trilinearly interpolated distance at a continuous location.
    pub fn sample(&self, p: Vec3) -> f64 {
        Stencil::new(self.grid().dims, p).sample(self.values())
    }

    pub(crate) fn sample_with_gradient(&self, p: Vec3) -> (f64, Vec3) {
        let s = Stencil::new(self.grid().dims, p);
        (s.sample(self.values()), s.gradient(self.values()))
    }
}

/// Marks voxels of `label` that touch a different label through a face, or
/// touch the grid border. Axes of extent 1 have no border.
pub fn boundary_mask(seg: &SegmentationMap, label: u32) -> Result<Volume> {
    let grid = *seg.grid();
    let labels = seg.labels();
    if !labels.contains(&label) {
        return Err(Error::LabelAbsent(label));
    }
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let values = (0..grid.len())
        .map(|i| {
            if labels[i] != label {
                return 0.0;
            }
            let c = grid.coords(i);
            let on_boundary = (0..3).any(|a| {
                let n = grid.dims[a];
                if n == 1 {
                    return false;
                }
                let below = c[a] == 0 || labels[i - strides[a]] != label;
                let above = c[a] + 1 == n || labels[i + strides[a]] != label;
                below || above
            });
            if on_boundary {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume::from_raw(grid, values))
}

/// Lower envelope of parabolas: `out[q] = min_p (q - p)² + f[p]`.
fn squared_distance_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&last) = v.last() else { break };
            let pf = last as f64;
            let s = ((f[q] + qf * qf) - (f[last] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance transform of a binary mask (non-zero = set),
/// via three separable lower-envelope passes on squared distances.
pub fn distance_transform(mask: &Volume) -> Result<DistanceMap> {
    let grid = *mask.grid();
    let mut sq: Vec<f64> = mask
        .values()
        .iter()
        .map(|&m| if m != 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    if sq.iter().all(|x| x.is_infinite()) {
        return Err(Error::EmptyMask);
    }
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let (mut line, mut out) = (Vec::new(), Vec::new());
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = grid.dims[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in 0..grid.len() {
            if grid.coords(start)[axis] != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = sq[start + k * stride];
            }
            squared_distance_1d(&line, &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                sq[start + k * stride] = *o;
            }
        }
    }
    let values = sq.into_iter().map(f64::sqrt).collect();
    Ok(DistanceMap(Volume::from_raw(grid, values)))
}

/// Default number of sampled points for a surface with `boundary_voxels`
/// voxels: `min(100000, 20 × count)`.
pub fn default_sample_count(boundary_voxels: usize) -> usize {
    MAX_SURFACE_POINTS.min(20 * boundary_voxels).max(1)
}

/// Uniform sampling (with replacement) of set-voxel centres.
pub fn sample_surface_points(mask: &Volume, n: usize, seed: u64) -> Result<SurfacePoints> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let grid = *mask.grid();
    let candidates: Vec<usize> = mask
        .values()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (m != 0.0).then_some(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| grid.point(candidates[rng.random_range(0..candidates.len())]))
        .collect();
    Ok(SurfacePoints {
        points,
        source_label: 1,
    })
}

pub(crate) fn clamp_to_grid(grid: &GridSpec, p: Vec3) -> Vec3 {
    let mut q = p;
    for a in 0..3 {
        q[a] = q[a].clamp(0.0, (grid.dims[a] - 1) as f64);
    }
    q
}

/// Moves each point by the interpolated displacement, `p + phi(p)`; results
/// are clamped to the grid bounding box.
pub fn warp_points(pts: &SurfacePoints, phi: &VectorField) -> SurfacePoints {
    let grid = *phi.grid();
    let points = pts
        .points
        .iter()
        .map(|p| {
            let u = phi.sample(*p);
            clamp_to_grid(&grid, [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
        })
        .collect();
    SurfacePoints {
        points,
        source_label: pts.source_label,
    }
}

/// Everything the surface loss needs for one structure: sampled points on
/// both surfaces and the distance transform of each.
#[derive(Debug, Clone)]
pub struct SurfaceData {
    pub fixed_points: SurfacePoints,
    pub moving_points: SurfacePoints,
    pub fixed_distance: DistanceMap,
    pub moving_distance: DistanceMap,
}

impl SurfaceData {
    pub fn new(
        fixed_points: SurfacePoints,
        moving_points: SurfacePoints,
        fixed_distance: DistanceMap,
        moving_distance: DistanceMap,
    ) -> Result<Self> {
        ensure_same_grid(fixed_distance.grid(), moving_distance.grid())?;
        Ok(SurfaceData {
            fixed_points,
            moving_points,
            fixed_distance,
            moving_distance,
        })
    }

    /// Extracts `label` from both maps, samples points and computes distance
    /// transforms. `points = None` uses [`default_sample_count`].
    pub fn from_segmentations(
        fixed: &SegmentationMap,
        moving: &SegmentationMap,
        label: u32,
        points: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        ensure_same_grid(fixed.grid(), moving.grid())?;
        let extract = |seg: &SegmentationMap, stream: u64| -> Result<(SurfacePoints, DistanceMap)> {
            let mask = boundary_mask(seg, label)?;
            let count = mask.values().iter().filter(|&&m| m != 0.0).count();
            let n = points.unwrap_or_else(|| default_sample_count(count));
            let mut pts = sample_surface_points(&mask, n, seed.wrapping_add(stream))?;
            pts.source_label = label;
            Ok((pts, distance_transform(&mask)?))
        };
        let (fp, fd) = extract(fixed, 0)?;
        let (mp, md) = extract(moving, 1)?;
        SurfaceData::new(fp, mp, fd, md)
    }

    pub fn grid(&self) -> &GridSpec {
        self.fixed_distance.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg_from(grid: GridSpec, f: impl Fn([usize; 3]) -> bool) -> SegmentationMap {
        let labels = (0..grid.len()).map(|i| u32::from(f(grid.coords(i)))).collect();
        SegmentationMap::new(grid, labels).unwrap()
    }

    fn count(v: &Volume) -> usize {
        v.values().iter().filter(|&&x| x != 0.0).count()
    }

    #[test]
    fn full_grid_marks_only_border() {
        let g = GridSpec::cube(6).unwrap();
        let mask = boundary_mask(&seg_from(g, |_| true), 1).unwrap();
        assert_eq!(count(&mask), 6 * 6 * 6 - 4 * 4 * 4);
    }

    #[test]
    fn single_voxel_is_boundary() {
        let g = GridSpec::cube(5).unwrap();
        let mask = boundary_mask(&seg_from(g, |c| c == [2, 2, 2]), 1).unwrap();
        assert_eq!(count(&mask), 1);
        assert_eq!(mask.get(2, 2, 2), 1.0);
    }

    #[test]
    fn cube_shell_count() {
        let g = GridSpec::cube(16).unwrap();
        let seg = seg_from(g, |c| c.iter().all(|&x| (5..10).contains(&x)));
        assert_eq!(count(&boundary_mask(&seg, 1).unwrap()), 98);
    }

    #[test]
    fn absent_label_errors() {
        let g = GridSpec::cube(3).unwrap();
        assert!(matches!(boundary_mask(&seg_from(g, |_| true), 4), Err(Error::LabelAbsent(4))));
    }

    #[test]
    fn single_point_distance_is_euclidean() {
        let g = GridSpec::new([7, 5, 6]).unwrap();
        let c = [2usize, 4, 1];
        let mask = Volume::from_fn(g, |p| if p == c { 1.0 } else { 0.0 });
        let dt = distance_transform(&mask).unwrap();
        for i in 0..g.len() {
            let p = g.coords(i);
            let d2: usize = (0..3).map(|a| p[a].abs_diff(c[a]).pow(2)).sum();
            assert_eq!(dt.values()[i], (d2 as f64).sqrt());
        }
    }

    #[test]
    fn full_mask_is_zero_and_empty_mask_errors() {
        let g = GridSpec::cube(4).unwrap();
        let dt = distance_transform(&Volume::filled(g, 1.0)).unwrap();
        assert!(dt.values().iter().all(|&d| d == 0.0));
        assert!(matches!(distance_transform(&Volume::zeros(g)), Err(Error::EmptyMask)));
    }

    #[test]
    fn sampling_single_voxel_and_determinism() {
        let g = GridSpec::cube(4).unwrap();
        let mask = Volume::from_fn(g, |p| if p == [1, 2, 3] { 1.0 } else { 0.0 });
        let pts = sample_surface_points(&mask, 1, 9).unwrap();
        assert_eq!(pts.points(), &[[1.0, 2.0, 3.0]]);

        let mask = Volume::from_fn(g, |p| if p[0] == 0 { 1.0 } else { 0.0 });
        let a = sample_surface_points(&mask, 50, 11).unwrap();
        let b = sample_surface_points(&mask, 50, 11).unwrap();
        assert_eq!(a, b);
        assert!(sample_surface_points(&Volume::zeros(g), 3, 0).is_err());
    }

    #[test]
    fn default_count_rule() {
        assert_eq!(default_sample_count(10), 200);
        assert_eq!(default_sample_count(1_000_000), 100_000);
    }

    #[test]
    fn warp_points_translation() {
        let g = GridSpec::cube(6).unwrap();
        let pts = SurfacePoints::new(vec![[1.0, 2.0, 3.0], [2.5, 1.5, 0.5]], 1, &g).unwrap();
        assert_eq!(warp_points(&pts, &VectorField::zeros(g)), pts);
        let moved = warp_points(&pts, &VectorField::constant(g, [1.0, 0.0, 0.0]));
        assert_eq!(moved.points(), &[[2.0, 2.0, 3.0], [3.5, 1.5, 0.5]]);
    }

    #[test]
    fn surface_points_validate_bbox() {
        let g = GridSpec::cube(3).unwrap();
        assert!(SurfacePoints::new(vec![], 1, &g).is_err());
        assert!(SurfacePoints::new(vec![[2.5, 0.0, 0.0]], 1, &g).is_err());
    }

    #[test]
    fn pseudo_2d_boundary_ignores_thin_axis() {
        let g = GridSpec::new([6, 6, 1]).unwrap();
        let seg = seg_from(g, |c| (1..5).contains(&c[0]) && (1..5).contains(&c[1]));
        assert_eq!(count(&boundary_mask(&seg, 1).unwrap()), 12);
    }
}
