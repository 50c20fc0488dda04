//! Mean-variance dispatch of device partitions across hull vertices.
//!
//! For one step `k` of the period, `n_j` devices of a class follow the
//! control sequence of hull vertex `j`. The aggregate mean is
//! `Σ n_j μ_j[k]`; devices sharing a sequence are correlated with
//! coefficient `ρ`, so partition `j` contributes
//! `(n_j² ρ + n_j (1 − ρ)) σ²_j[k]` of variance and partitions are
//! independent of each other. Minimizing `Bound · mean + λ · variance`
//! therefore becomes the quadratic program `min L n + nᵀ Q n` with a
//! diagonal `Q`, sized subject to fleet totals and dispatch budgets.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{ControlSequenceId, DerClass, LoadShapePair};
use crate::error::{Error, Result};
use crate::qp::{self, ConvexQp, KktResiduals, Row, RowKind};

pub const DEFAULT_SOLVER_TOL: f64 = 1e-8;

/// Direction of the technical potential being optimized.
///
/// `Up` is Bound = −1 (most load increase), `Down` is Bound = +1 (most
/// load reduction or export).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Up,
    Down,
}

impl Bound {
    pub const BOTH: [Bound; 2] = [Bound::Up, Bound::Down];

    /// Multiplier applied to the mean in the objective.
    pub fn sign(self) -> f64 {
        match self {
            Bound::Up => -1.0,
            Bound::Down => 1.0,
        }
    }

    pub fn from_sign(sign: f64) -> Option<Self> {
        if sign == -1.0 {
            Some(Bound::Up)
        } else if sign == 1.0 {
            Some(Bound::Down)
        } else {
            None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bound::Up => "up",
            Bound::Down => "down",
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub bound: Bound,
    /// Weight of the variance against the mean.
    pub lambda: f64,
    pub time_index: usize,
    pub confidence_z: f64,
}

impl ObjectiveParams {
    pub fn new(bound: Bound, lambda: f64, time_index: usize) -> Self {
        ObjectiveParams {
            bound,
            lambda,
            time_index,
            confidence_z: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Validation(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.confidence_z.is_finite() && self.confidence_z >= 0.0) {
            return Err(Error::Validation(format!(
                "confidence z must be non-negative, got {}",
                self.confidence_z
            )));
        }
        Ok(())
    }
}

/// What one decision variable stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub class: usize,
    pub class_name: String,
    pub vertex: usize,
    pub control: ControlSequenceId,
    /// Vertex mean at the step, kW per device.
    pub mean_kw: f64,
    /// Vertex variance at the step, kW² per device.
    pub sigma2_kw2: f64,
    pub rho: f64,
    /// False for the null-control vertex, which costs nothing to dispatch.
    pub chargeable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Every device is allocated.
    Equality,
    /// Devices may be left undispatched.
    AtMost,
}

/// Sum of one class's partition counts against its fleet size.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConstraint {
    pub label: String,
    pub vars: Range<usize>,
    pub rhs: f64,
    pub mode: GroupMode,
}

/// `coeffs · n <= rhs`, in USD.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub label: String,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub linear: Vec<f64>,
    pub quadratic_diag: Vec<f64>,
    pub groups: Vec<GroupConstraint>,
    pub budget_rows: Vec<BudgetRow>,
    pub vars: Vec<Variable>,
    pub params: ObjectiveParams,
}

impl QpProblem {
    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    /// `L·n + nᵀQn`.
    pub fn objective(&self, n: &[f64]) -> f64 {
        self.linear
            .iter()
            .zip(&self.quadratic_diag)
            .zip(n)
            .map(|((l, q), x)| l * x + q * x * x)
            .sum()
    }

    pub fn mean_kw(&self, n: &[f64]) -> f64 {
        self.vars.iter().zip(n).map(|(v, x)| v.mean_kw * x).sum()
    }

    pub fn variance_kw2(&self, n: &[f64]) -> f64 {
        self.vars
            .iter()
            .zip(n)
            .map(|(v, &x)| partition_variance(x, v.rho, v.sigma2_kw2))
            .sum()
    }

    fn class_count(&self) -> usize {
        self.vars.iter().map(|v| v.class + 1).max().unwrap_or(0)
    }

    /// Whole-device version of a continuous allocation. Counts are rounded
    /// half to even and the result is checked against every group and
    /// budget row again, since rounding can push a tight row over.
    pub fn round_counts(&self, n: &[f64]) -> Result<RoundedPlan> {
        if n.len() != self.len() {
            return Err(Error::dimension("device counts", self.len(), n.len()));
        }
        let rounded: Vec<f64> = n.iter().map(|x| x.round_ties_even().max(0.0)).collect();
        let mut violated = Vec::new();
        for g in &self.groups {
            let sum: f64 = rounded[g.vars.clone()].iter().sum();
            let excess = match g.mode {
                GroupMode::Equality => (sum - g.rhs).abs(),
                GroupMode::AtMost => sum - g.rhs,
            };
            if excess > qp::INFEASIBILITY_TOL {
                violated.push(g.label.clone());
            }
        }
        for b in &self.budget_rows {
            let spend: f64 = b.coeffs.iter().zip(&rounded).map(|(c, x)| c * x).sum();
            if spend - b.rhs > qp::INFEASIBILITY_TOL {
                violated.push(b.label.clone());
            }
        }
        Ok(RoundedPlan {
            objective: self.objective(&rounded),
            mean_kw: self.mean_kw(&rounded),
            n: rounded,
            violated,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundedPlan {
    pub n: Vec<f64>,
    pub objective: f64,
    pub mean_kw: f64,
    /// Labels of rows the rounded counts break.
    pub violated: Vec<String>,
}

impl RoundedPlan {
    pub fn feasible(&self) -> bool {
        self.violated.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    /// Devices per variable, aligned with [`QpProblem::vars`].
    pub n: Vec<f64>,
    pub objective: f64,
    pub mean_kw: f64,
    pub variance_kw2: f64,
    /// Labels of group and budget rows that bind at the optimum.
    pub active_constraints: Vec<String>,
    /// Dispatched chargeable devices per class.
    pub dispatched_by_class: Vec<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

fn check_len(context: &str, n: &[f64], vertices: &[LoadShapePair]) -> Result<()> {
    if n.len() != vertices.len() {
        return Err(Error::dimension(context, vertices.len(), n.len()));
    }
    Ok(())
}

fn step_of<'a>(vertex: &'a LoadShapePair, k: usize) -> Result<(&'a f64, &'a f64)> {
    match (vertex.mean.get(k), vertex.variance.get(k)) {
        (Some(m), Some(v)) => Ok((m, v)),
        _ => Err(Error::dimension(
            format!("step index into `{}`", vertex.control),
            k + 1,
            vertex.len(),
        )),
    }
}

/// Aggregate mean at step `k`, kW.
pub fn aggregate_mean(n: &[f64], vertices: &[LoadShapePair], k: usize) -> Result<f64> {
    check_len("partition counts", n, vertices)?;
    let mut total = 0.0;
    for (x, v) in n.iter().zip(vertices) {
        total += x * step_of(v, k)?.0;
    }
    Ok(total)
}

/// Variance of `n_j` equicorrelated devices with per-device variance
/// `sigma2_k`, kW².
pub fn partition_variance(n_j: f64, rho: f64, sigma2_k: f64) -> f64 {
    (n_j * n_j * rho + n_j * (1.0 - rho)) * sigma2_k
}

/// Sum of partition variances at step `k`, partitions independent.
pub fn total_variance(n: &[f64], vertices: &[LoadShapePair], rho: f64, k: usize) -> Result<f64> {
    check_len("partition counts", n, vertices)?;
    let mut total = 0.0;
    for (&x, v) in n.iter().zip(vertices) {
        total += partition_variance(x, rho, *step_of(v, k)?.1);
    }
    Ok(total)
}

/// Linear and diagonal quadratic objective terms for one class.
pub fn build_objective(
    vertices: &[LoadShapePair],
    params: &ObjectiveParams,
    rho: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Validation(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let k = params.time_index;
    let mut linear = Vec::with_capacity(vertices.len());
    let mut quad = Vec::with_capacity(vertices.len());
    for v in vertices {
        let (&mean, &sigma2) = step_of(v, k)?;
        linear.push(params.bound.sign() * mean + params.lambda * (1.0 - rho) * sigma2);
        quad.push(params.lambda * rho * sigma2);
    }
    Ok((linear, quad))
}

/// Quadratic program allocating one class's full fleet across its vertices.
pub fn build_single_type_qp(
    der: &DerClass,
    vertices: &[LoadShapePair],
    params: &ObjectiveParams,
) -> Result<QpProblem> {
    if vertices.is_empty() {
        return Err(Error::Validation(format!("{}: empty vertex set", der.name)));
    }
    build_multi_type_qp(std::slice::from_ref(der), &[vertices.to_vec()], params)
}

/// Block quadratic program over several independent classes, variables
/// concatenated class by class.
pub fn build_multi_type_qp(
    classes: &[DerClass],
    vertices: &[Vec<LoadShapePair>],
    params: &ObjectiveParams,
) -> Result<QpProblem> {
    if classes.len() != vertices.len() {
        return Err(Error::dimension(
            "vertex sets per class",
            classes.len(),
            vertices.len(),
        ));
    }
    params.validate()?;
    let mut problem = QpProblem {
        linear: Vec::new(),
        quadratic_diag: Vec::new(),
        groups: Vec::with_capacity(classes.len()),
        budget_rows: Vec::new(),
        vars: Vec::new(),
        params: *params,
    };
    for (c, (class, verts)) in classes.iter().zip(vertices).enumerate() {
        class.validate()?;
        if verts.is_empty() {
            return Err(Error::Validation(format!(
                "{}: empty vertex set",
                class.name
            )));
        }
        let (linear, quad) = build_objective(verts, params, class.rho)?;
        let start = problem.linear.len();
        for (j, v) in verts.iter().enumerate() {
            let (&mean, &sigma2) = step_of(v, params.time_index)?;
            problem.vars.push(Variable {
                class: c,
                class_name: class.name.clone(),
                vertex: j,
                control: v.control.clone(),
                mean_kw: mean,
                sigma2_kw2: sigma2,
                rho: class.rho,
                chargeable: !v.is_null_control(),
            });
        }
        problem.linear.extend(linear);
        problem.quadratic_diag.extend(quad);
        problem.groups.push(GroupConstraint {
            label: format!("fleet:{}", class.name),
            vars: start..problem.linear.len(),
            rhs: class.n_total,
            mode: GroupMode::Equality,
        });
    }
    Ok(problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One aggregator per class, each with its own budget share.
    Layered,
    /// One aggregator over all classes with a shared budget.
    Centralized,
}

impl Architecture {
    pub fn label(self) -> &'static str {
        match self {
            Architecture::Layered => "layered",
            Architecture::Centralized => "centralized",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Tolerance on `Σ β = 1`.
pub const BETA_TOL: f64 = 1e-9;

/// Budget shares proportional to each class's full-fleet dispatch cost,
/// falling back to an equal split when every class is free.
pub fn default_beta(classes: &[DerClass]) -> Vec<f64> {
    let spend: Vec<f64> = classes
        .iter()
        .map(|c| c.n_total * c.unit_dispatch_cost)
        .collect();
    let total: f64 = spend.iter().sum();
    if total > 0.0 {
        spend.iter().map(|s| s / total).collect()
    } else if classes.is_empty() {
        Vec::new()
    } else {
        vec![1.0 / classes.len() as f64; classes.len()]
    }
}

pub fn validate_beta(beta: &[f64], classes: usize) -> Result<()> {
    if beta.len() != classes {
        return Err(Error::dimension("budget shares", classes, beta.len()));
    }
    if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::Constraint(
            "budget shares must be non-negative".into(),
        ));
    }
    let total: f64 = beta.iter().sum();
    if classes > 0 && (total - 1.0).abs() > BETA_TOL {
        return Err(Error::Constraint(format!(
            "budget shares sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Relaxes fleet totals to upper limits and adds the architecture's budget
/// rows. An infinite `budget` adds no budget rows.
pub fn apply_architecture(
    problem: &QpProblem,
    arch: Architecture,
    budget: f64,
    beta: Option<&[f64]>,
    costs: &[f64],
) -> Result<QpProblem> {
    let classes = problem.groups.len().max(problem.class_count());
    if costs.len() != classes {
        return Err(Error::dimension(
            "unit dispatch costs",
            classes,
            costs.len(),
        ));
    }
    if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Validation(
            "unit dispatch costs must be non-negative".into(),
        ));
    }
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::Validation(format!(
            "budget must be non-negative, got {budget}"
        )));
    }
    if arch == Architecture::Layered {
        let beta = beta
            .ok_or_else(|| Error::Constraint("layered aggregation needs budget shares".into()))?;
        validate_beta(beta, classes)?;
    }

    let mut out = problem.clone();
    for g in &mut out.groups {
        g.mode = GroupMode::AtMost;
    }
    out.budget_rows.clear();
    if budget.is_infinite() {
        return Ok(out);
    }
    let coeff = |v: &Variable| if v.chargeable { costs[v.class] } else { 0.0 };
    match arch {
        Architecture::Centralized => out.budget_rows.push(BudgetRow {
            label: "budget:shared".into(),
            coeffs: out.vars.iter().map(coeff).collect(),
            rhs: budget,
        }),
        Architecture::Layered => {
            let beta = beta.expect("checked above");
            for (c, group) in problem.groups.iter().enumerate() {
                let name = out
                    .vars
                    .get(group.vars.start)
                    .map_or("", |v| v.class_name.as_str());
                out.budget_rows.push(BudgetRow {
                    label: format!("budget:{name}"),
                    coeffs: out
                        .vars
                        .iter()
                        .map(|v| if v.class == c { coeff(v) } else { 0.0 })
                        .collect(),
                    rhs: beta[c] * budget,
                });
            }
        }
    }
    Ok(out)
}

/// Row-form view of the problem for the generic solver, with the
/// objective's `nᵀQn` expressed as `½ nᵀ(2Q)n`.
fn to_convex_qp(problem: &QpProblem) -> ConvexQp {
    let n = problem.len();
    let mut rows = Vec::with_capacity(problem.groups.len() + problem.budget_rows.len() + n);
    for g in &problem.groups {
        let mut coeffs = DVector::zeros(n);
        for j in g.vars.clone() {
            coeffs[j] = 1.0;
        }
        rows.push(Row {
            label: g.label.clone(),
            coeffs,
            rhs: g.rhs,
            kind: match g.mode {
                GroupMode::Equality => RowKind::Eq,
                GroupMode::AtMost => RowKind::Le,
            },
        });
    }
    for b in &problem.budget_rows {
        rows.push(Row {
            label: b.label.clone(),
            coeffs: DVector::from_column_slice(&b.coeffs),
            rhs: b.rhs,
            kind: RowKind::Le,
        });
    }
    for (j, v) in problem.vars.iter().enumerate() {
        let mut coeffs = DVector::zeros(n);
        coeffs[j] = -1.0;
        rows.push(Row {
            label: format!("nonneg:{}/{}", v.class_name, v.control),
            coeffs,
            rhs: 0.0,
            kind: RowKind::Le,
        });
    }
    ConvexQp {
        hessian: DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            problem.quadratic_diag.iter().map(|q| 2.0 * q),
        )),
        linear: DVector::from_column_slice(&problem.linear),
        rows,
    }
}

fn validate_problem(problem: &QpProblem) -> Result<()> {
    let n = problem.len();
    if problem.quadratic_diag.len() != n {
        return Err(Error::dimension(
            "quadratic diagonal",
            n,
            problem.quadratic_diag.len(),
        ));
    }
    if problem.vars.len() != n {
        return Err(Error::dimension(
            "variable descriptors",
            n,
            problem.vars.len(),
        ));
    }
    if let Some((index, &value)) = problem
        .quadratic_diag
        .iter()
        .enumerate()
        .find(|(_, q)| !(q.is_finite() && **q >= 0.0))
    {
        return Err(Error::NonConvex { index, value });
    }
    if problem.linear.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation("non-finite linear term".into()));
    }
    let mut owner = vec![None; n];
    for (gi, g) in problem.groups.iter().enumerate() {
        if g.vars.end > n {
            return Err(Error::dimension(
                format!("group `{}`", g.label),
                n,
                g.vars.end,
            ));
        }
        for j in g.vars.clone() {
            if owner[j].replace(gi).is_some() {
                return Err(Error::Validation(format!(
                    "variable {j} belongs to two groups"
                )));
            }
        }
        if !(g.rhs.is_finite() && g.rhs >= 0.0) {
            return Err(Error::Infeasible {
                group: g.label.clone(),
                violation: -g.rhs,
            });
        }
        if g.vars.is_empty() && g.mode == GroupMode::Equality && g.rhs > 0.0 {
            return Err(Error::Infeasible {
                group: g.label.clone(),
                violation: g.rhs,
            });
        }
    }
    if let Some(j) = owner.iter().position(Option::is_none) {
        return Err(Error::Validation(format!(
            "variable {j} belongs to no group"
        )));
    }
    for b in &problem.budget_rows {
        if b.coeffs.len() != n {
            return Err(Error::dimension(
                format!("budget row `{}`", b.label),
                n,
                b.coeffs.len(),
            ));
        }
    }
    Ok(())
}

/// Solves the dispatch program and certifies the result.
///
/// Equality groups start from an even split and inequality groups from
/// zero; budget rows violated by that start are repaired by the solver's
/// phase one, which reports the offending row when none is feasible.
pub fn solve_qp(problem: &QpProblem, tol: f64) -> Result<DispatchPlan> {
    validate_problem(problem)?;
    let n = problem.len();
    let mut start = DVector::zeros(n);
    for g in &problem.groups {
        if g.mode == GroupMode::Equality && !g.vars.is_empty() {
            let share = g.rhs / g.vars.len() as f64;
            for j in g.vars.clone() {
                start[j] = share;
            }
        }
    }
    let cqp = to_convex_qp(problem);
    let sol = qp::solve(&cqp, &start)?;

    // Clean rounding-level negatives so reported counts respect n >= 0.
    let counts: Vec<f64> = sol
        .x
        .iter()
        .map(|&x| if x < 0.0 { 0.0 } else { x })
        .collect();
    if sol.kkt.max() > tol {
        log::warn!(
            "dispatch KKT residual {:.3e} exceeds tolerance {tol:.1e}",
            sol.kkt.max()
        );
    }

    let row_tol = |rhs: f64| 1e-9 * (1.0 + rhs.abs());
    let mut active = Vec::new();
    for (i, g) in problem.groups.iter().enumerate() {
        let sum: f64 = counts[g.vars.clone()].iter().sum();
        if g.mode == GroupMode::Equality
            || sol.working.contains(&i)
            || (sum - g.rhs).abs() <= row_tol(g.rhs)
        {
            active.push(g.label.clone());
        }
    }
    for b in &problem.budget_rows {
        let spend: f64 = b.coeffs.iter().zip(&counts).map(|(c, x)| c * x).sum();
        if (spend - b.rhs).abs() <= row_tol(b.rhs) {
            active.push(b.label.clone());
        }
    }

    let mut dispatched = vec![0.0; problem.groups.len().max(problem.class_count())];
    for (v, &x) in problem.vars.iter().zip(&counts) {
        if v.chargeable {
            dispatched[v.class] += x;
        }
    }

    Ok(DispatchPlan {
        objective: problem.objective(&counts),
        mean_kw: problem.mean_kw(&counts),
        variance_kw2: problem.variance_kw2(&counts),
        n: counts,
        active_constraints: active,
        dispatched_by_class: dispatched,
        kkt: sol.kkt,
        iterations: sol.iterations,
    })
}
