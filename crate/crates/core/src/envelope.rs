//! Hourly performance envelopes and the layered-vs-centralized comparison.

use std::io::Write;

use crate::dispatch::{
    self, apply_architecture, build_multi_type_qp, default_beta, solve_qp, Architecture, Bound,
    DispatchPlan, ObjectiveParams,
};
use crate::ensemble::{DerClass, LoadShapePair, TimeGrid};
use crate::error::{Error, Result};
use crate::hull::{self, HullResult};

/// One-sided 95% normal quantile.
pub const DEFAULT_CONFIDENCE_Z: f64 = 1.645;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub classes: Vec<DerClass>,
    pub grid: TimeGrid,
    pub lambda: f64,
    /// USD per day; `f64::INFINITY` disables budget rows.
    pub budget: f64,
    /// Layered budget shares; `None` uses [`default_beta`].
    pub beta: Option<Vec<f64>>,
    pub confidence_z: f64,
    pub architecture: Architecture,
    pub hull_tol: f64,
    pub solver_tol: f64,
}

impl Scenario {
    pub fn new(classes: Vec<DerClass>, grid: TimeGrid) -> Self {
        Scenario {
            classes,
            grid,
            lambda: 0.1,
            budget: f64::INFINITY,
            beta: None,
            confidence_z: DEFAULT_CONFIDENCE_Z,
            architecture: Architecture::Centralized,
            hull_tol: hull::DEFAULT_TOL,
            solver_tol: dispatch::DEFAULT_SOLVER_TOL,
        }
    }

    pub fn with_architecture(&self, architecture: Architecture) -> Self {
        Scenario {
            architecture,
            ..self.clone()
        }
    }

    /// Budget shares used when the scenario runs layered.
    pub fn effective_beta(&self) -> Vec<f64> {
        self.beta
            .clone()
            .unwrap_or_else(|| default_beta(&self.classes))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Validation(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.budget.is_nan() || self.budget < 0.0 {
            return Err(Error::Validation(format!(
                "budget must be non-negative, got {}",
                self.budget
            )));
        }
        if !(self.confidence_z.is_finite() && self.confidence_z >= 0.0) {
            return Err(Error::Validation(format!(
                "confidence z must be non-negative, got {}",
                self.confidence_z
            )));
        }
        for class in &self.classes {
            class.validate()?;
            if class.steps() != self.grid.steps_per_period {
                return Err(Error::dimension(
                    format!("load shapes of `{}`", class.name),
                    self.grid.steps_per_period,
                    class.steps(),
                ));
            }
        }
        if self.architecture == Architecture::Layered {
            dispatch::validate_beta(&self.effective_beta(), self.classes.len())?;
        }
        Ok(())
    }
}

/// Classes with their hull-reduced ensembles.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedFleet {
    pub classes: Vec<DerClass>,
    pub hulls: Vec<HullResult>,
    pub vertices: Vec<Vec<LoadShapePair>>,
}

impl ReducedFleet {
    pub fn new(classes: &[DerClass], tol: f64) -> Result<Self> {
        let mut hulls = Vec::with_capacity(classes.len());
        let mut vertices = Vec::with_capacity(classes.len());
        for class in classes {
            let (h, v) = hull::reduce_pairs(&class.pairs, tol)?;
            hulls.push(h);
            vertices.push(v);
        }
        Ok(ReducedFleet {
            classes: classes.to_vec(),
            hulls,
            vertices,
        })
    }

    pub fn costs(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.unit_dispatch_cost).collect()
    }

    /// Builds and solves the dispatch program for one step and bound.
    pub fn dispatch(
        &self,
        scenario: &Scenario,
        arch: Architecture,
        beta: &[f64],
        step: usize,
        bound: Bound,
    ) -> Result<(dispatch::QpProblem, DispatchPlan)> {
        let annotate = |source: Error| Error::AtStep {
            step,
            bound,
            source: Box::new(source),
        };
        let params = ObjectiveParams {
            bound,
            lambda: scenario.lambda,
            time_index: step,
            confidence_z: scenario.confidence_z,
        };
        let base = build_multi_type_qp(&self.classes, &self.vertices, &params).map_err(annotate)?;
        let problem = apply_architecture(&base, arch, scenario.budget, Some(beta), &self.costs())
            .map_err(annotate)?;
        let plan = solve_qp(&problem, scenario.solver_tol).map_err(annotate)?;
        Ok((problem, plan))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePoint {
    pub bound: Bound,
    pub mean_kw: f64,
    pub variance_kw2: f64,
    /// Mean pulled toward zero by `z` standard deviations.
    pub conf_kw: f64,
    pub objective: f64,
    pub binding: Vec<String>,
    pub dispatched_by_class: Vec<f64>,
    pub kkt_residual: f64,
    /// Objective with whole-device counts.
    pub rounded_objective: f64,
    /// Rows the whole-device counts break; empty when they still fit.
    pub rounded_violations: Vec<String>,
}

impl EnvelopePoint {
    fn from_plan(
        bound: Bound,
        problem: &dispatch::QpProblem,
        plan: &DispatchPlan,
        z: f64,
    ) -> Result<Self> {
        let rounded = problem.round_counts(&plan.n)?;
        let sd = plan.variance_kw2.max(0.0).sqrt();
        let conf_kw = match bound {
            Bound::Up => plan.mean_kw - z * sd,
            Bound::Down => plan.mean_kw + z * sd,
        };
        Ok(EnvelopePoint {
            bound,
            mean_kw: plan.mean_kw,
            variance_kw2: plan.variance_kw2,
            conf_kw,
            objective: plan.objective,
            binding: plan.active_constraints.clone(),
            dispatched_by_class: plan.dispatched_by_class.clone(),
            kkt_residual: plan.kkt.max(),
            rounded_objective: rounded.objective,
            rounded_violations: rounded.violated,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeStep {
    pub step: usize,
    /// Hours after midnight of the first day.
    pub hour: f64,
    /// Most load increase (positive kW).
    pub up: EnvelopePoint,
    /// Most load reduction or export (negative kW).
    pub down: EnvelopePoint,
}

impl EnvelopeStep {
    pub fn point(&self, bound: Bound) -> &EnvelopePoint {
        match bound {
            Bound::Up => &self.up,
            Bound::Down => &self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub architecture: Architecture,
    pub confidence_z: f64,
    pub beta: Vec<f64>,
    /// Hull size per class name.
    pub vertex_counts: Vec<(String, usize)>,
    pub steps: Vec<EnvelopeStep>,
}

/// Envelope of the scenario's architecture at every step of the period.
pub fn compute_envelope(scenario: &Scenario) -> Result<EnvelopeReport> {
    scenario.validate()?;
    let fleet = ReducedFleet::new(&scenario.classes, scenario.hull_tol)?;
    envelope_for(
        &fleet,
        scenario,
        scenario.architecture,
        &scenario.effective_beta(),
    )
}

/// Envelope for an already reduced fleet under an explicit architecture.
pub fn envelope_for(
    fleet: &ReducedFleet,
    scenario: &Scenario,
    arch: Architecture,
    beta: &[f64],
) -> Result<EnvelopeReport> {
    let mut steps = Vec::with_capacity(scenario.grid.steps_per_period);
    for k in 0..scenario.grid.steps_per_period {
        let (up_problem, up) = fleet.dispatch(scenario, arch, beta, k, Bound::Up)?;
        let (down_problem, down) = fleet.dispatch(scenario, arch, beta, k, Bound::Down)?;
        steps.push(EnvelopeStep {
            step: k,
            hour: scenario.grid.hour_offset(k),
            up: EnvelopePoint::from_plan(Bound::Up, &up_problem, &up, scenario.confidence_z)?,
            down: EnvelopePoint::from_plan(
                Bound::Down,
                &down_problem,
                &down,
                scenario.confidence_z,
            )?,
        });
    }
    Ok(EnvelopeReport {
        architecture: arch,
        confidence_z: scenario.confidence_z,
        beta: beta.to_vec(),
        vertex_counts: fleet
            .classes
            .iter()
            .zip(&fleet.vertices)
            .map(|(c, v)| (c.name.clone(), v.len()))
            .collect(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub step: usize,
    pub hour: f64,
    pub bound: Bound,
    pub centralized: EnvelopePoint,
    pub layered: EnvelopePoint,
    /// Layered minus centralized objective; non-negative up to tolerance.
    pub objective_delta: f64,
    pub centralized_dominates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub centralized: EnvelopeReport,
    pub layered: EnvelopeReport,
    pub rows: Vec<ComparisonRow>,
    /// Slack allowed in the dominance check, absolute.
    pub tolerance: f64,
}

impl Comparison {
    pub fn all_dominate(&self) -> bool {
        self.rows.iter().all(|r| r.centralized_dominates)
    }

    pub fn max_delta(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.objective_delta)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_delta(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.objective_delta)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn verdict(&self) -> &'static str {
        if self.all_dominate() {
            "centralized dominates"
        } else {
            "dominance violated"
        }
    }
}

/// Runs both architectures on the same reduced fleet and compares them
/// step by step.
pub fn compare_architectures(base: &Scenario) -> Result<Comparison> {
    base.with_architecture(Architecture::Layered).validate()?;
    let fleet = ReducedFleet::new(&base.classes, base.hull_tol)?;
    let beta = base.effective_beta();
    let centralized = envelope_for(&fleet, base, Architecture::Centralized, &beta)?;
    let layered = envelope_for(&fleet, base, Architecture::Layered, &beta)?;
    let tolerance = 2.0 * base.solver_tol;

    let mut rows = Vec::with_capacity(2 * centralized.steps.len());
    for (c, l) in centralized.steps.iter().zip(&layered.steps) {
        for bound in Bound::BOTH {
            let (cp, lp) = (c.point(bound), l.point(bound));
            let delta = lp.objective - cp.objective;
            let slack = tolerance * (1.0 + cp.objective.abs().max(lp.objective.abs()));
            rows.push(ComparisonRow {
                step: c.step,
                hour: c.hour,
                bound,
                centralized: cp.clone(),
                layered: lp.clone(),
                objective_delta: delta,
                centralized_dominates: delta >= -slack,
            });
        }
    }
    Ok(Comparison {
        centralized,
        layered,
        rows,
        tolerance,
    })
}

pub const ENVELOPE_CSV_HEADER: &str = "hour,arch,bound,mean_kw,conf_kw,objective,binding";

fn write_point<W: Write>(
    out: &mut W,
    hour: f64,
    arch: Architecture,
    p: &EnvelopePoint,
) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        hour,
        arch,
        p.bound,
        p.mean_kw,
        p.conf_kw,
        p.objective,
        p.binding.join(";")
    )?;
    Ok(())
}

pub fn write_envelope_csv<W: Write>(mut out: W, report: &EnvelopeReport) -> Result<()> {
    writeln!(out, "{ENVELOPE_CSV_HEADER}")?;
    for s in &report.steps {
        write_point(&mut out, s.hour, report.architecture, &s.up)?;
        write_point(&mut out, s.hour, report.architecture, &s.down)?;
    }
    Ok(())
}

pub fn write_comparison_csv<W: Write>(mut out: W, cmp: &Comparison) -> Result<()> {
    writeln!(out, "{ENVELOPE_CSV_HEADER}")?;
    for (c, l) in cmp.centralized.steps.iter().zip(&cmp.layered.steps) {
        for (step, arch) in [(c, Architecture::Centralized), (l, Architecture::Layered)] {
            write_point(&mut out, step.hour, arch, &step.up)?;
            write_point(&mut out, step.hour, arch, &step.down)?;
        }
    }
    Ok(())
}

/// Wide per-hour table for plotting both envelopes on one chart.
pub fn write_comparison_plot<W: Write>(mut out: W, cmp: &Comparison) -> Result<()> {
    writeln!(
        out,
        "hour,centralized_up_mean_kw,centralized_up_conf_kw,centralized_down_mean_kw,centralized_down_conf_kw,\
layered_up_mean_kw,layered_up_conf_kw,layered_down_mean_kw,layered_down_conf_kw,up_objective_delta,down_objective_delta"
    )?;
    for (c, l) in cmp.centralized.steps.iter().zip(&cmp.layered.steps) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.hour,
            c.up.mean_kw,
            c.up.conf_kw,
            c.down.mean_kw,
            c.down.conf_kw,
            l.up.mean_kw,
            l.up.conf_kw,
            l.down.mean_kw,
            l.down.conf_kw,
            l.up.objective - c.up.objective,
            l.down.objective - c.down.objective,
        )?;
    }
    Ok(())
}
