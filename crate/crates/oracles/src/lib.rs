//! Slow, independent reference computations for tests.
//!
//! Nothing here shares code with `vpp-core`: the variance oracle sums a full
//! covariance matrix, hull membership is a tableau simplex, and small QPs
//! are solved by enumerating active sets.

use nalgebra::{DMatrix, DVector};

/// Variance of a sum of `n` devices with common variance `sigma2` and
/// pairwise correlation `rho`, by summing every covariance entry.
pub fn covariance_sum(n: usize, rho: f64, sigma2: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += if i == j { sigma2 } else { rho * sigma2 };
        }
    }
    total
}

/// L1 infeasibility of `Σ w_i p_i = target, Σ w_i = 1, w ≥ 0`, from phase
/// one of a Bland-rule tableau simplex. Zero means `target` lies in the
/// convex hull of `points`.
pub fn hull_membership_gap(points: &[Vec<f64>], target: &[f64]) -> f64 {
    let m = points.len();
    let d = target.len();
    let rows = d + 1;
    // Columns: m weights, `rows` artificials, rhs.
    let cols = m + rows + 1;
    let mut t = vec![vec![0.0; cols]; rows + 1];
    for r in 0..rows {
        let rhs = if r < d { target[r] } else { 1.0 };
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        for (j, p) in points.iter().enumerate() {
            t[r][j] = sign * if r < d { p[r] } else { 1.0 };
        }
        t[r][m + r] = 1.0;
        t[r][cols - 1] = sign * rhs;
    }
    // Objective row: minimize the artificial sum, priced out.
    for c in 0..cols {
        let s: f64 = (0..rows).map(|r| t[r][c]).sum();
        t[rows][c] = if (m..m + rows).contains(&c) { 0.0 } else { -s };
    }
    let mut basis: Vec<usize> = (m..m + rows).collect();
    let eps = 1e-12;
    for _ in 0..10_000 {
        let Some(enter) = (0..cols - 1).find(|&c| t[rows][c] < -eps) else {
            break;
        };
        let mut leave = None;
        let mut best = f64::INFINITY;
        for r in 0..rows {
            if t[r][enter] > eps {
                let ratio = t[r][cols - 1] / t[r][enter];
                let better = ratio < best - 1e-15
                    || (ratio <= best + 1e-15 && leave.is_some_and(|l: usize| basis[r] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(r);
                }
            }
        }
        let Some(pr) = leave else { break };
        let piv = t[pr][enter];
        for v in t[pr].iter_mut() {
            *v /= piv;
        }
        for r in 0..=rows {
            if r != pr {
                let f = t[r][enter];
                if f != 0.0 {
                    for c in 0..cols {
                        t[r][c] -= f * t[pr][c];
                    }
                }
            }
        }
        basis[pr] = enter;
    }
    -t[rows][cols - 1]
}

/// A separating direction proves `target` is outside the hull when
/// `w·target > max_i w·p_i`; returns that margin.
pub fn separation_margin(points: &[Vec<f64>], target: &[f64], w: &[f64]) -> f64 {
    let dot = |a: &[f64]| a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
    let best = points
        .iter()
        .map(|p| dot(p))
        .fold(f64::NEG_INFINITY, f64::max);
    dot(target) - best
}

/// Minimizes `Σ l_j x_j + q_j x_j²` subject to `eq` rows holding with
/// equality and `le` rows as `a·x ≤ b`, by trying every subset of the
/// inequality rows as the active set.
pub fn qp_by_enumeration(
    linear: &[f64],
    quad: &[f64],
    eq: &[(Vec<f64>, f64)],
    le: &[(Vec<f64>, f64)],
) -> Option<(Vec<f64>, f64)> {
    let n = linear.len();
    let m = le.len();
    assert!(m < 24, "enumeration is exponential");
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<&(Vec<f64>, f64)> = eq
            .iter()
            .chain((0..m).filter(|i| mask & (1 << i) != 0).map(|i| &le[i]))
            .collect();
        let k = active.len();
        if k > n {
            continue;
        }
        let size = n + k;
        let mut kkt = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        for j in 0..n {
            kkt[(j, j)] = 2.0 * quad[j];
            rhs[j] = -linear[j];
        }
        for (r, (a, b)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[j];
                kkt[(j, n + r)] = a[j];
            }
            rhs[n + r] = *b;
        }
        let lu = kkt.full_piv_lu();
        // Full pivoting puts the pivots on U's diagonal in decreasing size.
        let pivots = lu.u().diagonal().abs();
        if pivots.min() <= 1e-11 * pivots.max().max(1.0) {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x: Vec<f64> = sol.iter().take(n).copied().collect();
        let scale = x.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        let feasible = le
            .iter()
            .all(|(a, b)| dot(a, &x) <= b + 1e-9 * scale.max(b.abs()))
            && eq
                .iter()
                .all(|(a, b)| (dot(a, &x) - b).abs() <= 1e-9 * scale.max(b.abs()));
        if !feasible {
            continue;
        }
        let obj = objective(linear, quad, &x);
        if best.as_ref().is_none_or(|(_, o)| obj < *o) {
            best = Some((x, obj));
        }
    }
    best
}

pub fn objective(linear: &[f64], quad: &[f64], x: &[f64]) -> f64 {
    x.iter()
        .zip(linear)
        .zip(quad)
        .map(|((x, l), q)| l * x + q * x * x)
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-step response of `y[i] = a y[i−1] + b (x[i] + x[i−1])` with zero
/// initial state and `x` switching to 1 at day 0, in closed form.
pub fn bilinear_step_response(tau: f64, day: usize) -> f64 {
    let a = (2.0 * tau - 1.0) / (2.0 * tau + 1.0);
    let b = 1.0 / (2.0 * tau + 1.0);
    1.0 - (1.0 - b) * a.powi(day as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_sum_small_cases() {
        assert_eq!(covariance_sum(1, 0.3, 2.0), 2.0);
        assert_eq!(covariance_sum(2, 0.5, 1.0), 3.0);
    }

    #[test]
    fn membership_of_square() {
        let sq = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ];
        assert!(hull_membership_gap(&sq, &[0.5, 0.25]) < 1e-12);
        assert!(hull_membership_gap(&sq, &[1.0, 1.0]) < 1e-12);
        assert!(hull_membership_gap(&sq, &[1.5, 0.5]) > 0.1);
        assert!(hull_membership_gap(&sq, &[-0.5, -0.5]) > 0.1);
    }

    #[test]
    fn enumeration_on_box_qp() {
        // min (x−2)² + (y+1)² on x + y ≤ 1, x, y ≥ 0  →  (1, 0).
        let (x, _) = qp_by_enumeration(
            &[-4.0, 2.0],
            &[1.0, 1.0],
            &[],
            &[
                (vec![1.0, 1.0], 1.0),
                (vec![-1.0, 0.0], 0.0),
                (vec![0.0, -1.0], 0.0),
            ],
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn step_response_tau_seven() {
        assert!((bilinear_step_response(7.0, 0) - 1.0 / 15.0).abs() < 1e-15);
        assert!(bilinear_step_response(7.0, 7) > 0.63);
        assert!(bilinear_step_response(7.0, 6) < 0.63);
    }
}
