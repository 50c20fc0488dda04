//! Convex-hull vertex identification for high-dimensional load shapes.
//!
//! Load shapes live in 24 to 48 dimensions with only a handful of points,
//! so vertices are found by per-point redundancy tests instead of facet
//! enumeration: a point is redundant when its Euclidean distance to the
//! convex hull of the other kept points is at most `tol`.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::LoadShapePair;
use crate::error::{Error, Result};
use crate::lsq::{self, Region};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Proof that a removed point lies in the hull of the kept vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Index of the removed point in the input.
    pub point: usize,
    /// Convex weights aligned with [`HullResult::vertex_indices`].
    pub weights: Vec<f64>,
    /// Euclidean reconstruction error.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HullResult {
    /// Kept points, ascending.
    pub vertex_indices: Vec<usize>,
    /// One entry per removed point, ascending by point index.
    pub certificates: Vec<Certificate>,
}

impl HullResult {
    pub fn len(&self) -> usize {
        self.vertex_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex_indices.is_empty()
    }
}

fn check_dims<V: AsRef<[f64]>>(points: &[V]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::Validation("hull of an empty point set".into()))?;
    let d = first.as_ref().len();
    for p in points {
        if p.as_ref().len() != d {
            return Err(Error::dimension("hull point", d, p.as_ref().len()));
        }
    }
    Ok(d)
}

fn columns<V: AsRef<[f64]>>(points: &[V], idx: &[usize], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, idx.len(), |r, c| points[idx[c]].as_ref()[r])
}

/// Distance from `target` to the convex hull of `points[idx]` and the
/// minimizing convex weights.
pub fn hull_distance<V: AsRef<[f64]>>(
    points: &[V],
    idx: &[usize],
    target: &[f64],
) -> (f64, Vec<f64>) {
    let d = target.len();
    let a = columns(points, idx, d);
    let b = DVector::from_column_slice(target);
    let sol = lsq::solve(&a, &b, Region::Simplex);
    (sol.residual, sol.weights.iter().copied().collect())
}

/// Reduces a point set to the vertices of its convex hull.
///
/// Points are visited in index order and dropped when within `tol` of the
/// hull of the points still kept. Duplicates keep their highest index.
pub fn reduce_to_hull<V: AsRef<[f64]>>(means: &[V], tol: f64) -> Result<HullResult> {
    check_dims(means)?;
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::Validation(format!(
            "hull tolerance must be non-negative, got {tol}"
        )));
    }
    let n = means.len();
    let mut kept: Vec<bool> = vec![true; n];
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i && kept[j]).collect();
        if others.is_empty() {
            continue;
        }
        let (dist, _) = hull_distance(means, &others, means[i].as_ref());
        if dist <= tol {
            kept[i] = false;
        }
    }

    let vertex_indices: Vec<usize> = (0..n).filter(|&i| kept[i]).collect();
    let certificates = (0..n)
        .filter(|&i| !kept[i])
        .map(|i| {
            let (residual, weights) = hull_distance(means, &vertex_indices, means[i].as_ref());
            Certificate {
                point: i,
                weights,
                residual,
            }
        })
        .collect();
    Ok(HullResult {
        vertex_indices,
        certificates,
    })
}

/// Pairs at the hull vertices, in vertex order. Variances are carried
/// verbatim; they are never interpolated.
pub fn carry_variance(pairs: &[LoadShapePair], hull: &HullResult) -> Result<Vec<LoadShapePair>> {
    hull.vertex_indices
        .iter()
        .map(|&i| {
            pairs.get(i).cloned().ok_or_else(|| {
                Error::Internal(format!(
                    "hull vertex {i} out of range for {} pairs",
                    pairs.len()
                ))
            })
        })
        .collect()
}

/// Hull reduction of an ensemble followed by variance carry-over.
pub fn reduce_pairs(pairs: &[LoadShapePair], tol: f64) -> Result<(HullResult, Vec<LoadShapePair>)> {
    let means: Vec<&[f64]> = pairs.iter().map(|p| p.mean.as_slice()).collect();
    let hull = reduce_to_hull(&means, tol)?;
    let reduced = carry_variance(pairs, &hull)?;
    Ok((hull, reduced))
}

/// All pairwise sums `a_i + b_j`, ordered with `j` varying fastest.
pub fn minkowski_sum<V: AsRef<[f64]>>(a: &[V], b: &[V]) -> Result<Vec<Vec<f64>>> {
    let da = check_dims(a)?;
    let db = check_dims(b)?;
    if da != db {
        return Err(Error::dimension("minkowski operand", da, db));
    }
    Ok(a.iter()
        .flat_map(|p| {
            b.iter().map(move |q| {
                p.as_ref()
                    .iter()
                    .zip(q.as_ref())
                    .map(|(x, y)| x + y)
                    .collect()
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ConditionKey;

    #[test]
    fn interior_point_removed() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.25, 0.25],
        ];
        let hull = reduce_to_hull(&pts, DEFAULT_TOL).unwrap();
        assert_eq!(hull.vertex_indices, vec![0, 1, 2]);
        assert_eq!(hull.certificates.len(), 1);
        let cert = &hull.certificates[0];
        assert_eq!(cert.point, 3);
        assert!(cert.residual <= 1e-12);
        assert!((cert.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_keep_one() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 5];
        let hull = reduce_to_hull(&pts, DEFAULT_TOL).unwrap();
        assert_eq!(hull.vertex_indices.len(), 1);
    }

    #[test]
    fn boundary_point_is_removed() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
        ];
        let hull = reduce_to_hull(&pts, DEFAULT_TOL).unwrap();
        assert_eq!(hull.vertex_indices, vec![0, 1, 3]);
    }

    #[test]
    fn dimension_exceeding_point_count() {
        let pts: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..24).map(|k| ((i * 7 + k) as f64).sin()).collect())
            .collect();
        let hull = reduce_to_hull(&pts, DEFAULT_TOL).unwrap();
        assert_eq!(hull.vertex_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_and_ragged_inputs() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            reduce_to_hull(&empty, 1e-9),
            Err(Error::Validation(_))
        ));
        let ragged = vec![vec![0.0], vec![0.0, 1.0]];
        assert!(matches!(
            reduce_to_hull(&ragged, 1e-9),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn carry_variance_selects_verbatim() {
        let cond = ConditionKey::default();
        let pairs: Vec<LoadShapePair> = (0..3)
            .map(|i| {
                LoadShapePair::new(
                    format!("s{i}"),
                    cond.clone(),
                    vec![i as f64],
                    vec![10.0 + i as f64],
                )
                .unwrap()
            })
            .collect();
        let hull = HullResult {
            vertex_indices: vec![0, 2],
            certificates: vec![],
        };
        let out = carry_variance(&pairs, &hull).unwrap();
        assert_eq!(out, vec![pairs[0].clone(), pairs[2].clone()]);

        let all = HullResult {
            vertex_indices: vec![0, 1, 2],
            certificates: vec![],
        };
        assert_eq!(carry_variance(&pairs, &all).unwrap(), pairs);

        let single = reduce_pairs(&pairs[..1], DEFAULT_TOL).unwrap().1;
        assert_eq!(single, vec![pairs[0].clone()]);

        let bad = HullResult {
            vertex_indices: vec![5],
            certificates: vec![],
        };
        assert!(matches!(
            carry_variance(&pairs, &bad),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn minkowski_cases() {
        let b = vec![vec![0.5, -1.0], vec![2.0, 3.0]];
        assert_eq!(minkowski_sum(&[vec![0.0, 0.0]], &b).unwrap(), b);
        let out = minkowski_sum(&[vec![1.0, 0.0]], &[vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(out, vec![vec![1.0, 1.0], vec![3.0, 2.0]]);
        let a3 = vec![vec![0.0, 0.0]; 3];
        let b4 = vec![vec![1.0, 1.0]; 4];
        assert_eq!(minkowski_sum(&a3, &b4).unwrap().len(), 12);
        assert!(matches!(
            minkowski_sum(&[vec![0.0]], &[vec![0.0, 1.0]]),
            Err(Error::Dimension { .. })
        ));
    }
}
