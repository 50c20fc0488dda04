//! Sign- and simplex-constrained linear least squares.
//!
//! All solvers minimize `‖A w − b‖₂` over the columns of `A`. The active-set
//! iteration follows Lawson and Hanson; in simplex mode the passive
//! subproblem keeps `Σ w = 1` by eliminating one variable, so each inner
//! solve works on `A` directly rather than on its Gram matrix. That keeps
//! residuals of exactly representable targets at rounding level, which the
//! hull membership test depends on.

use nalgebra::{DMatrix, DVector};

use crate::linalg::Svd;

/// Feasible region of the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `w ≥ 0`.
    NonNegative,
    /// `w ≥ 0`, `Σ w = 1`.
    Simplex,
    /// `w ≥ 0`, `Σ w ≤ 1`.
    CappedSimplex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub weights: DVector<f64>,
    /// `‖A w − b‖₂` at the returned weights.
    pub residual: f64,
    pub iterations: usize,
}

/// Minimizes `‖A w − b‖₂` over `region`.
///
/// An `A` with zero columns returns empty weights; in simplex mode that is
/// reported with an infinite residual since no point is feasible.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, region: Region) -> LsqSolution {
    assert_eq!(a.nrows(), b.len(), "row count of A must match b");
    match region {
        Region::NonNegative => active_set(a, b, false),
        Region::Simplex => active_set(a, b, true),
        Region::CappedSimplex => {
            let free = active_set(a, b, false);
            if free.weights.sum() <= 1.0 + 1e-12 {
                free
            } else {
                // Some optimum has Σ w = 1 whenever the sign-only optimum
                // overshoots, so the equality version is optimal here.
                let mut on_face = active_set(a, b, true);
                on_face.iterations += free.iterations;
                on_face
            }
        }
    }
}

/// Minimum-norm unconstrained least squares. Returns the solution and the
/// numerical rank of `A`.
pub fn min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    if a.ncols() == 0 {
        return (DVector::zeros(0), 0);
    }
    let svd = Svd::new(a);
    let tol = 1e-12 * a.nrows().max(a.ncols()) as f64;
    (svd.solve(b, tol), svd.rank(tol))
}

fn residual_norm(a: &DMatrix<f64>, w: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a * w - b).norm()
}

/// Least squares over the passive columns, honoring `Σ z = 1` when
/// `simplex` is set. Returns values aligned with `passive`.
fn passive_solve(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[usize], simplex: bool) -> Vec<f64> {
    let d = a.nrows();
    if !simplex {
        let cols = DMatrix::from_fn(d, passive.len(), |r, c| a[(r, passive[c])]);
        return min_norm(&cols, b).0.iter().copied().collect();
    }
    if passive.len() == 1 {
        return vec![1.0];
    }
    let (&last, rest) = passive.split_last().expect("nonempty passive set");
    let anchor = a.column(last);
    let cols = DMatrix::from_fn(d, rest.len(), |r, c| a[(r, rest[c])] - anchor[r]);
    let rhs = b - anchor;
    let y = min_norm(&cols, &rhs).0;
    let mut z: Vec<f64> = y.iter().copied().collect();
    z.push(1.0 - y.sum());
    z
}

fn active_set(a: &DMatrix<f64>, b: &DVector<f64>, simplex: bool) -> LsqSolution {
    let m = a.ncols();
    let mut w = DVector::zeros(m);
    if m == 0 {
        let residual = if simplex { f64::INFINITY } else { b.norm() };
        return LsqSolution {
            weights: w,
            residual,
            iterations: 0,
        };
    }

    let col_scale = (0..m).map(|j| a.column(j).norm()).fold(0.0_f64, f64::max);
    let scale = (col_scale + b.norm()).max(f64::MIN_POSITIVE);
    let drop_tol = 1e-15;

    let mut passive: Vec<usize> = Vec::new();
    if simplex {
        let start = (0..m)
            .min_by(|&i, &j| {
                let di = (a.column(i) - b).norm();
                let dj = (a.column(j) - b).norm();
                di.total_cmp(&dj).then(i.cmp(&j))
            })
            .expect("m > 0");
        passive.push(start);
        w[start] = 1.0;
    }

    let mut blocked: Option<usize> = None;
    let max_outer = 3 * m + 10;
    let mut iterations = 0;
    while iterations < max_outer {
        iterations += 1;
        let r = a * &w - b;
        let grad = a.transpose() * &r;
        let shift = if simplex && !passive.is_empty() {
            -passive.iter().map(|&i| grad[i]).sum::<f64>() / passive.len() as f64
        } else {
            0.0
        };
        // The residual carries rounding error near ε·scale, so gradients
        // below ε·scale² are noise even when the residual is exactly zero.
        let dual_tol = 1e-12 * scale * r.norm() + 1e3 * f64::EPSILON * scale * scale;
        let entering = (0..m)
            .filter(|j| !passive.contains(j) && Some(*j) != blocked)
            .map(|j| (j, grad[j] + shift))
            .filter(|&(_, g)| g < -dual_tol)
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        let Some((j, _)) = entering else {
            break;
        };
        passive.push(j);

        let mut first_inner = true;
        loop {
            let z = passive_solve(a, b, &passive, simplex);
            if z.iter().all(|&v| v > 0.0) {
                for (&i, &v) in passive.iter().zip(&z) {
                    w[i] = v;
                }
                blocked = None;
                break;
            }
            let newcomer = passive.iter().position(|&i| i == j);
            if first_inner && newcomer.is_some_and(|p| z[p] <= 0.0) {
                // Rounding made the entering column look useful; skip it
                // until some other column enters.
                passive.retain(|&i| i != j);
                w[j] = 0.0;
                blocked = Some(j);
                break;
            }
            first_inner = false;

            let mut alpha = 1.0_f64;
            for (&i, &v) in passive.iter().zip(&z) {
                if v <= 0.0 {
                    let denom = w[i] - v;
                    if denom > 0.0 {
                        alpha = alpha.min(w[i] / denom);
                    }
                }
            }
            for (&i, &v) in passive.iter().zip(&z) {
                w[i] += alpha * (v - w[i]);
            }
            let before = passive.len();
            passive.retain(|&i| w[i] > drop_tol);
            for i in 0..m {
                if !passive.contains(&i) {
                    w[i] = 0.0;
                }
            }
            if passive.len() == before {
                // alpha hit no bound numerically; drop the smallest weight.
                if let Some((pos, _)) = passive
                    .iter()
                    .enumerate()
                    .min_by(|x, y| w[*x.1].total_cmp(&w[*y.1]))
                {
                    let i = passive.remove(pos);
                    w[i] = 0.0;
                }
            }
            if passive.is_empty() {
                break;
            }
            if simplex {
                let total = w.sum();
                if total > 0.0 {
                    w /= total;
                }
            }
        }
    }

    LsqSolution {
        residual: residual_norm(a, &w, b),
        weights: w,
        iterations,
    }
}

/// Optimality residuals of a constrained least-squares solution, scaled by
/// `‖A‖²` so they are comparable across problem magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub primal: f64,
    pub dual: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.primal
            .max(self.dual)
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

/// Checks first-order optimality of `w` for `min ½‖A w − b‖²` over `region`.
pub fn kkt_report(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    w: &DVector<f64>,
    region: Region,
) -> KktReport {
    let grad = a.transpose() * (a * w - b);
    let norm2 = (a.norm().powi(2) + a.norm() * b.norm()).max(f64::MIN_POSITIVE);
    let total = w.sum();
    let neg = w.iter().fold(0.0_f64, |acc, &v| acc.max(-v));
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();

    // Multiplier of the sum constraint, estimated from the support.
    let mu = match region {
        Region::NonNegative => 0.0,
        _ if support.is_empty() => {
            if region == Region::CappedSimplex {
                0.0
            } else {
                -grad.min()
            }
        }
        _ => -support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64,
    };
    let mu = if region == Region::CappedSimplex {
        mu.max(0.0)
    } else {
        mu
    };

    let primal = match region {
        Region::NonNegative => neg,
        Region::Simplex => neg.max((total - 1.0).abs()),
        Region::CappedSimplex => neg.max(total - 1.0),
    };
    let reduced: Vec<f64> = grad.iter().map(|g| g + mu).collect();
    let dual = reduced.iter().fold(0.0_f64, |acc, &g| acc.max(-g)) / norm2;
    let stationarity = support
        .iter()
        .fold(0.0_f64, |acc, &i| acc.max(reduced[i].abs()))
        / norm2;
    let complementarity = match region {
        Region::CappedSimplex => (mu * (1.0 - total)).abs() / norm2,
        _ => 0.0,
    };
    KktReport {
        primal,
        dual,
        stationarity,
        complementarity,
    }
}
