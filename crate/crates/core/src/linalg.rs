//! Small dense decompositions by Jacobi rotations.
//!
//! Problem sizes here are at most a few dozen rows and columns and are
//! often exactly rank deficient (convex combinations of other columns).
//! nalgebra's bidiagonal SVD can return a factorization that does not
//! reconstruct such matrices, so the solvers use these instead.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 80;

/// `A = U diag(σ) Vᵀ` with `σ` descending, `U` of size `m × n` and `V`
/// square `n × n`. Columns of `U` with `σ = 0` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    /// One-sided (Hestenes) Jacobi SVD; works for any shape.
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut w = a.clone();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_columns(&mut w, p, q, c, s);
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
        let u = DMatrix::from_fn(m, n, |r, c| {
            let j = order[c];
            if norms[j] > 0.0 {
                w[(r, j)] / norms[j]
            } else {
                0.0
            }
        });
        Svd {
            u,
            singular_values: DVector::from_iterator(n, order.iter().map(|&j| norms[j])),
            v: DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]),
        }
    }

    fn cutoff(&self, rel_tol: f64) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max) * rel_tol
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        let cut = self.cutoff(rel_tol);
        self.singular_values
            .iter()
            .filter(|&&s| s > cut && s > 0.0)
            .count()
    }

    /// Minimum-norm least-squares solution of `A x = b`, ignoring singular
    /// values at or below `rel_tol · σ_max`.
    pub fn solve(&self, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
        let n = self.v.nrows();
        let mut x = DVector::zeros(n);
        for k in 0..self.rank(rel_tol) {
            let coef = self.u.column(k).dot(b) / self.singular_values[k];
            x.axpy(coef, &self.v.column(k), 1.0);
        }
        x
    }

    /// Orthonormal basis of the null space of `A`, as columns.
    pub fn null_space(&self, rel_tol: f64) -> DMatrix<f64> {
        let r = self.rank(rel_tol);
        self.v.columns(r, self.v.ncols() - r).into_owned()
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, p)], m[(r, q)]);
        m[(r, p)] = c * x - s * y;
        m[(r, q)] = s * x + c * y;
    }
}

/// Eigenvalues (ascending) and eigenvectors of a symmetric matrix by
/// cyclic Jacobi rotations. Only the upper triangle is read.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let mut s = DMatrix::from_fn(n, n, |r, c| if r <= c { a[(r, c)] } else { a[(c, r)] });
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = s.norm();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| s[(p, q)] * s[(p, q)])
            .sum();
        if off.sqrt() <= f64::EPSILON * scale * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // S ← Jᵀ S J, touching rows and columns p and q only.
                rotate_columns(&mut s, p, q, c, sn);
                for k in 0..n {
                    let (x, y) = (s[(p, k)], s[(q, k)]);
                    s[(p, k)] = c * x - sn * y;
                    s[(q, k)] = sn * x + c * y;
                }
                rotate_columns(&mut v, p, q, c, sn);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]).then(i.cmp(&j)));
    (
        DVector::from_iterator(n, order.iter().map(|&i| s[(i, i)])),
        DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// Columns beyond `rank` are combinations of the first `rank`.
    fn deficient(m: usize, n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let base = DMatrix::from_fn(m, rank, |_, _| lcg(&mut s));
        let mix = DMatrix::from_fn(rank, n - rank, |_, _| lcg(&mut s).abs());
        let mut a = DMatrix::zeros(m, n);
        a.columns_mut(0, rank).copy_from(&base);
        a.columns_mut(rank, n - rank).copy_from(&(&base * mix));
        a
    }

    #[test]
    fn reconstructs_rank_deficient_shapes() {
        for (m, n, r) in [(24, 7, 6), (7, 24, 5), (5, 5, 2), (48, 30, 12), (3, 9, 3)] {
            let a = deficient(m, n, r, (m * 100 + n) as u64);
            let svd = Svd::new(&a);
            let rec = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * svd.v.transpose();
            assert!((rec - &a).norm() <= 1e-13 * a.norm(), "{m}x{n}");
            assert!((svd.v.transpose() * &svd.v - DMatrix::identity(n, n)).norm() < 1e-13);
            assert_eq!(svd.rank(1e-12), r, "{m}x{n}");
            let z = svd.null_space(1e-12);
            assert_eq!(z.ncols(), n - r);
            assert!((&a * &z).norm() <= 1e-13 * a.norm());
        }
    }

    #[test]
    fn min_norm_solution_of_consistent_system() {
        let a = deficient(24, 7, 6, 9);
        let mut s = 4;
        let x0 = DVector::from_fn(7, |_, _| lcg(&mut s));
        let b = &a * &x0;
        let x = Svd::new(&a).solve(&b, 1e-12);
        assert!((&a * &x - &b).norm() <= 1e-13 * b.norm());
        assert!(x.norm() <= x0.norm() + 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let svd = Svd::new(&DMatrix::zeros(3, 2));
        assert_eq!(svd.rank(1e-12), 0);
        assert_eq!(svd.null_space(1e-12).ncols(), 2);
        assert_eq!(
            svd.solve(&DVector::from_element(3, 1.0), 1e-12),
            DVector::zeros(2)
        );
    }

    #[test]
    fn eigen_of_symmetric_matrix() {
        let mut s = 11;
        let b = DMatrix::from_fn(6, 4, |_, _| lcg(&mut s));
        let a = &b * b.transpose();
        let (vals, vecs) = symmetric_eigen(&a);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - &a).norm() <= 1e-13 * a.norm());
        assert!(vals[0].abs() < 1e-13 && vals[1].abs() < 1e-13);
        assert!(vals.iter().zip(vals.iter().skip(1)).all(|(x, y)| x <= y));
    }
}
