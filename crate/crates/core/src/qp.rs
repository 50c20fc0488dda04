//! Dense convex quadratic programming by a primal active-set method.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ xᵀ H x + cᵀ x
//!     subject to  aᵢ x  = bᵢ   (equality rows)
//!                 aᵢ x <= bᵢ   (inequality rows)
//! ```
//!
//! for symmetric positive semidefinite `H`, including `H = 0`. Each
//! iteration minimizes over the null space of the working set. When the
//! reduced Hessian is singular and the reduced gradient has a component in
//! its kernel, the step follows that zero-curvature ray to the nearest
//! blocking constraint, which is how linear pieces of the objective are
//! handled. The feasible region must be bounded along every such ray.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Svd};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eq,
    Le,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub coeffs: DVector<f64>,
    pub rhs: f64,
    pub kind: RowKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub rows: Vec<Row>,
}

/// First-order optimality residuals, all in absolute units.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per row; zero for rows outside the final working set.
    pub multipliers: Vec<f64>,
    /// Rows in the final working set.
    pub working: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

/// Maximum row violation tolerated after phase one.
pub const INFEASIBILITY_TOL: f64 = 1e-6;

impl ConvexQp {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn violation(&self, i: usize, x: &DVector<f64>) -> f64 {
        let row = &self.rows[i];
        let r = row.coeffs.dot(x) - row.rhs;
        match row.kind {
            RowKind::Eq => r.abs(),
            RowKind::Le => r.max(0.0),
        }
    }

    /// Residuals of `(x, y)` against the optimality conditions.
    pub fn kkt(&self, x: &DVector<f64>, y: &[f64]) -> KktResiduals {
        let mut grad = &self.hessian * x + &self.linear;
        let mut out = KktResiduals::default();
        for (row, &yi) in self.rows.iter().zip(y) {
            grad.axpy(yi, &row.coeffs, 1.0);
            let slack = row.coeffs.dot(x) - row.rhs;
            match row.kind {
                RowKind::Eq => out.primal = out.primal.max(slack.abs()),
                RowKind::Le => {
                    out.primal = out.primal.max(slack.max(0.0));
                    out.dual = out.dual.max(-yi);
                    out.complementarity = out.complementarity.max((yi * slack).abs());
                }
            }
        }
        out.stationarity = grad.amax();
        out
    }
}

/// Solves `qp` from `start`, which must satisfy every equality row.
/// Violated inequality rows are repaired by an elastic phase one.
pub fn solve(qp: &ConvexQp, start: &DVector<f64>) -> Result<QpSolution> {
    let n = qp.dim();
    if qp.hessian.nrows() != n || qp.hessian.ncols() != n {
        return Err(Error::dimension("hessian", n, qp.hessian.nrows()));
    }
    if start.len() != n {
        return Err(Error::dimension("start point", n, start.len()));
    }
    for row in &qp.rows {
        if row.coeffs.len() != n {
            return Err(Error::dimension(
                format!("row `{}`", row.label),
                n,
                row.coeffs.len(),
            ));
        }
    }
    let scale = 1.0 + start.amax();
    for (i, row) in qp.rows.iter().enumerate() {
        if row.kind == RowKind::Eq {
            let v = qp.violation(i, start);
            if v > 1e-9 * scale.max(row.rhs.abs()) {
                return Err(Error::Infeasible {
                    group: row.label.clone(),
                    violation: v,
                });
            }
        }
    }

    let worst = (0..qp.rows.len())
        .map(|i| (i, qp.violation(i, start)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let x0 = match worst {
        Some((_, v)) if v > 0.0 => phase_one(qp, start, v)?,
        _ => start.clone(),
    };
    active_set(qp, x0)
}

/// Minimizes a uniform slack `t` on the inequality rows to find a feasible
/// point.
fn phase_one(qp: &ConvexQp, start: &DVector<f64>, t0: f64) -> Result<DVector<f64>> {
    let n = qp.dim();
    let mut rows: Vec<Row> = qp
        .rows
        .iter()
        .map(|row| {
            let mut coeffs = row.coeffs.clone().resize_vertically(n + 1, 0.0);
            if row.kind == RowKind::Le {
                coeffs[n] = -1.0;
            }
            Row {
                label: row.label.clone(),
                coeffs,
                rhs: row.rhs,
                kind: row.kind,
            }
        })
        .collect();
    let mut t_row = DVector::zeros(n + 1);
    t_row[n] = -1.0;
    rows.push(Row {
        label: "phase-one slack".into(),
        coeffs: t_row,
        rhs: 0.0,
        kind: RowKind::Le,
    });
    let mut linear = DVector::zeros(n + 1);
    linear[n] = 1.0;
    let aux = ConvexQp {
        hessian: DMatrix::zeros(n + 1, n + 1),
        linear,
        rows,
    };
    let mut x = start.clone().resize_vertically(n + 1, 0.0);
    x[n] = t0;
    let sol = active_set(&aux, x)?;
    let x = sol.x.rows(0, n).into_owned();
    if sol.x[n] > INFEASIBILITY_TOL {
        let (i, v) = (0..qp.rows.len())
            .map(|i| (i, qp.violation(i, &x)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("a violated row exists");
        return Err(Error::Infeasible {
            group: qp.rows[i].label.clone(),
            violation: v,
        });
    }
    Ok(x)
}

/// Numerical rank of the given rows.
fn rank_of(rows: &[&DVector<f64>], n: usize) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    Svd::new(&m).rank(1e-10)
}

/// Orthonormal basis of `{p : A_W p = 0}` as matrix columns.
fn null_space(rows: &[&DVector<f64>], n: usize) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(n, n);
    }
    let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    Svd::new(&a).null_space(1e-10)
}

fn active_set(qp: &ConvexQp, mut x: DVector<f64>) -> Result<QpSolution> {
    let n = qp.dim();
    let m = qp.rows.len();
    let h_scale = qp.hessian.amax().max(1e-300);
    let c_scale = qp.linear.amax();

    let act_tol = |i: usize, x: &DVector<f64>| 1e-10 * (1.0 + qp.rows[i].rhs.abs() + x.amax());

    // Equality rows first, then rows active at the start, keeping
    // the working set linearly independent.
    let mut working: Vec<usize> = Vec::new();
    let order = (0..m)
        .filter(|&i| qp.rows[i].kind == RowKind::Eq)
        .chain((0..m).filter(|&i| qp.rows[i].kind == RowKind::Le));
    for i in order {
        let row = &qp.rows[i];
        let is_active = match row.kind {
            RowKind::Eq => true,
            RowKind::Le => (row.coeffs.dot(&x) - row.rhs).abs() <= act_tol(i, &x),
        };
        if !is_active {
            continue;
        }
        let mut trial: Vec<&DVector<f64>> = working.iter().map(|&j| &qp.rows[j].coeffs).collect();
        trial.push(&row.coeffs);
        if rank_of(&trial, n) == trial.len() {
            working.push(i);
        }
    }

    let max_iter = 1000 + 50 * (n + m);
    let mut at_subspace_min = false;
    for iteration in 1..=max_iter {
        let grad = &qp.hessian * &x + &qp.linear;
        let g_scale = grad.amax().max(c_scale).max(1.0);

        let step = if at_subspace_min {
            None
        } else {
            let rows: Vec<&DVector<f64>> = working.iter().map(|&j| &qp.rows[j].coeffs).collect();
            let z = null_space(&rows, n);
            if z.ncols() == 0 {
                None
            } else {
                let reduced_h = z.transpose() * &qp.hessian * &z;
                let reduced_g = z.transpose() * &grad;
                let (eigenvalues, eigenvectors) = symmetric_eigen(&reduced_h);
                let curv_tol = 1e-11 * h_scale.max(g_scale / (1.0 + x.amax()));
                let gu = eigenvectors.transpose() * &reduced_g;
                let flat: Vec<usize> = (0..gu.len())
                    .filter(|&k| eigenvalues[k] <= curv_tol)
                    .collect();
                let flat_grad: f64 = flat.iter().map(|&k| gu[k] * gu[k]).sum::<f64>().sqrt();
                let mut du = DVector::zeros(gu.len());
                let is_ray = flat_grad > 1e-12 * g_scale;
                if is_ray {
                    for &k in &flat {
                        du[k] = -gu[k];
                    }
                } else {
                    for k in 0..gu.len() {
                        if eigenvalues[k] > curv_tol {
                            du[k] = -gu[k] / eigenvalues[k];
                        }
                    }
                }
                let p = &z * (&eigenvectors * du);
                if p.amax() <= 1e-14 * (1.0 + x.amax()) {
                    None
                } else {
                    Some((p, is_ray))
                }
            }
        };

        let Some((p, is_ray)) = step else {
            // Stationary on the working set: check multiplier signs.
            let y = working_multipliers(qp, &working, &grad, n);
            let dual_tol = 1e-11 * g_scale;
            let leaving = working
                .iter()
                .zip(&y)
                .filter(|(&i, _)| qp.rows[i].kind == RowKind::Le)
                .filter(|(_, &yi)| yi < -dual_tol)
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
                .map(|(&i, _)| i);
            match leaving {
                Some(i) => {
                    working.retain(|&j| j != i);
                    at_subspace_min = false;
                    continue;
                }
                None => {
                    let mut multipliers = vec![0.0; m];
                    for (&i, &yi) in working.iter().zip(&y) {
                        multipliers[i] = yi;
                    }
                    let kkt = qp.kkt(&x, &multipliers);
                    return Ok(QpSolution {
                        objective: qp.objective(&x),
                        x,
                        multipliers,
                        working,
                        iterations: iteration,
                        kkt,
                    });
                }
            }
        };

        let mut alpha = if is_ray { f64::INFINITY } else { 1.0 };
        let mut blocking: Option<usize> = None;
        let p_norm = p.norm();
        for i in 0..m {
            let row = &qp.rows[i];
            if row.kind == RowKind::Eq || working.contains(&i) {
                continue;
            }
            let ap = row.coeffs.dot(&p);
            if ap <= 1e-13 * row.coeffs.norm() * p_norm {
                continue;
            }
            let ai = ((row.rhs - row.coeffs.dot(&x)) / ap).max(0.0);
            if ai < alpha {
                alpha = ai;
                blocking = Some(i);
            }
        }
        if !alpha.is_finite() {
            return Err(Error::Internal(
                "quadratic program is unbounded along a feasible ray".into(),
            ));
        }
        x.axpy(alpha, &p, 1.0);
        match blocking {
            Some(i) => {
                working.push(i);
                at_subspace_min = false;
            }
            None => at_subspace_min = true,
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
    })
}

/// Least-squares multipliers `y` with `∇f + Σ yᵢ aᵢ ≈ 0` over the working set.
fn working_multipliers(
    qp: &ConvexQp,
    working: &[usize],
    grad: &DVector<f64>,
    n: usize,
) -> Vec<f64> {
    if working.is_empty() {
        return Vec::new();
    }
    let at = DMatrix::from_fn(n, working.len(), |r, c| qp.rows[working[c]].coeffs[r]);
    Svd::new(&at)
        .solve(&(-grad), 1e-12)
        .iter()
        .copied()
        .collect()
}
