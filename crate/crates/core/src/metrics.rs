//! Registration quality and deformation regularity measures.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_grid, Error, Result};
use crate::grid::{norm, SegmentationMap, VectorField, Volume};
use crate::loss::surface_composites;
use crate::surface::SurfaceData;
use crate::transform::compose;

/// Border width excluded from inverse-consistency statistics.
pub const INVERSE_CONSISTENCY_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDice {
    pub label: u32,
    /// `None` when the label is absent from both maps.
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: Vec<LabelDice>,
    pub mean: Option<f64>,
}

/// Per-label Dice overlap `2|A∩B| / (|A|+|B|)`.
pub fn dice(a: &SegmentationMap, b: &SegmentationMap, labels: &[u32]) -> Result<DiceReport> {
    ensure_same_grid(a.grid(), b.grid())?;
    let per_label: Vec<LabelDice> = labels
        .iter()
        .map(|&label| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels().iter().zip(b.labels()) {
                let (ia, ib) = (x == label, y == label);
                na += usize::from(ia);
                nb += usize::from(ib);
                both += usize::from(ia && ib);
            }
            let dice = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
            LabelDice { label, dice }
        })
        .collect();
    let defined: Vec<f64> = per_label.iter().filter_map(|d| d.dice).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(DiceReport { per_label, mean })
}

/// `det ∇(Id + u)` per voxel, central differences inside and one-sided
/// differences on the border. Axes of extent 1 contribute `∂u/∂x = 0`.
pub fn jacobian_determinant(phi: &VectorField) -> Volume {
    let grid = *phi.grid();
    let u = phi.vectors();
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let values = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let mut j = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            for a in 0..3 {
                let n = grid.dims[a];
                if n == 1 {
                    continue;
                }
                let s = strides[a];
                let (lo, hi, h) = if c[a] == 0 {
                    (i, i + s, 1.0)
                } else if c[a] + 1 == n {
                    (i - s, i, 1.0)
                } else {
                    (i - s, i + s, 2.0)
                };
                for (k, row) in j.iter_mut().enumerate() {
                    row[a] += (u[hi][k] - u[lo][k]) / h;
                }
            }
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        })
        .collect();
    Volume::from_raw(grid, values)
}

/// Number of voxels with a non-positive Jacobian determinant.
pub fn count_folding(phi: &VectorField) -> usize {
    jacobian_determinant(phi)
        .values()
        .iter()
        .filter(|&&d| d <= 0.0)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub mean_det: f64,
    pub fraction_nonpositive: f64,
    pub folding: usize,
}

pub fn jacobian_stats(phi: &VectorField) -> JacobianStats {
    let det = jacobian_determinant(phi);
    let n = det.values().len();
    let folding = det.values().iter().filter(|&&d| d <= 0.0).count();
    JacobianStats {
        mean_det: det.values().iter().sum::<f64>() / n as f64,
        fraction_nonpositive: folding as f64 / n as f64,
        folding,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub max: f64,
    pub median: f64,
    pub mean: f64,
}

impl DistanceStats {
    fn of(values: &[f64]) -> DistanceStats {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        DistanceStats {
            max: sorted[n - 1],
            median,
            mean: values.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Surface distances in both directions. `symmetric` takes the larger max,
/// the median of the pooled distances and the average of the two means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistanceStats {
    pub fixed_to_moving: DistanceStats,
    pub moving_to_fixed: DistanceStats,
    pub symmetric: DistanceStats,
}

pub fn surface_distance_stats(
    surf: &SurfaceData,
    phi: &VectorField,
    phi_inv: &VectorField,
) -> Result<SurfaceDistanceStats> {
    if surf.fixed_points.is_empty() || surf.moving_points.is_empty() {
        return Err(Error::EmptyPointSet("surface distance"));
    }
    let (a, b) = surface_composites(surf, phi, phi_inv)?;
    let (fm, mf) = (DistanceStats::of(&a), DistanceStats::of(&b));
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    Ok(SurfaceDistanceStats {
        fixed_to_moving: fm,
        moving_to_fixed: mf,
        symmetric: DistanceStats {
            max: fm.max.max(mf.max),
            median: DistanceStats::of(&pooled).median,
            mean: 0.5 * (fm.mean + mf.mean),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseConsistency {
    pub mean: f64,
    pub max: f64,
}

/// Statistics of `|φ ∘ φ⁻¹ − Id|` away from a 2-voxel border.
pub fn inverse_consistency(phi: &VectorField, phi_inv: &VectorField) -> Result<InverseConsistency> {
    let residual = compose(phi, phi_inv)?;
    let grid = *phi.grid();
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for (i, r) in residual.vectors().iter().enumerate() {
        if !grid.in_interior(i, INVERSE_CONSISTENCY_MARGIN) {
            continue;
        }
        let e = norm(r);
        sum += e;
        max = max.max(e);
        n += 1;
    }
    Ok(InverseConsistency {
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn seg(labels: Vec<u32>) -> SegmentationMap {
        let n = labels.len();
        SegmentationMap::new(GridSpec::new([n, 1, 1]).unwrap(), labels).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = seg(vec![1, 1, 1, 1, 0, 0, 2, 0]);
        let r = dice(&a, &a, &[1, 2, 3]).unwrap();
        assert_eq!(r.per_label[0].dice, Some(1.0));
        assert_eq!(r.per_label[1].dice, Some(1.0));
        assert_eq!(r.per_label[2].dice, None);
        assert_eq!(r.mean, Some(1.0));

        let b = seg(vec![0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &b, &[1]).unwrap().per_label[0].dice, Some(0.5));
        let c = seg(vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &c, &[1]).unwrap().mean, Some(0.0));
    }

    #[test]
    fn jacobian_of_identity_and_dilation() {
        let g = GridSpec::cube(6).unwrap();
        let id = VectorField::zeros(g);
        assert!(jacobian_determinant(&id).values().iter().all(|&d| d == 1.0));
        let s = jacobian_stats(&id);
        assert_eq!((s.mean_det, s.fraction_nonpositive, s.folding), (1.0, 0.0, 0));

        let dil = VectorField::from_fn(g, |p| [0.1 * p[0], 0.1 * p[1], 0.1 * p[2]]);
        for d in jacobian_determinant(&dil).values() {
            assert!((d - 1.331).abs() < 1e-12);
        }
        assert!((jacobian_stats(&dil).mean_det - 1.331).abs() < 1e-12);
    }

    #[test]
    fn constructed_fold_is_detected() {
        let g = GridSpec::cube(9).unwrap();
        let fold = VectorField::from_fn(g, |p| {
            let x = p[0] - 4.0;
            if x.abs() <= 2.0 {
                [-2.0 * x, 0.0, 0.0]
            } else {
                [-4.0 * x.signum(), 0.0, 0.0]
            }
        });
        let det = jacobian_determinant(&fold);
        assert!(det.get(4, 4, 4) < 0.0);
        assert!(count_folding(&fold) >= 1);
        assert_eq!(count_folding(&VectorField::zeros(g)), 0);
    }

    #[test]
    fn inverse_consistency_of_translations() {
        let g = GridSpec::cube(8).unwrap();
        let id = VectorField::zeros(g);
        let ic = inverse_consistency(&id, &id).unwrap();
        assert_eq!((ic.mean, ic.max), (0.0, 0.0));
        let fwd = VectorField::constant(g, [1.0, -0.5, 0.25]);
        let inv = VectorField::constant(g, [-1.0, 0.5, -0.25]);
        let ic = inverse_consistency(&fwd, &inv).unwrap();
        assert!(ic.max < 1e-12);
    }
}
