//! Day-ahead power tracking with an adaptive fleet response model.
//!
//! Each day the partition weights Λ are fitted so that `Λ Ŷ` follows the
//! reference, the fleet responds with its true matrix `Y`, and per-partition
//! telemetry `diag(Λ) Y + ε` is observed. Measurements and weights pass
//! through the same first-order bilinear low-pass filter, and the ratio of
//! the two filtered quantities re-estimates `Ŷ` row by row.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::envelope::ReducedFleet;
use crate::error::{Error, Result};
use crate::lsq::{self, Region};

/// Weights at or below this are treated as undispatched.
pub const REDUCED_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_COND_FLOOR: f64 = 1e-3;

/// Partition responses: row `q` is the aggregate daily shape, kW, of the
/// fleet when every device follows portfolio sequence `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix(DMatrix<f64>);

impl ResponseMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Validation(
                "response matrix needs at least one row and step".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "response matrix has non-finite entries".into(),
            ));
        }
        Ok(ResponseMatrix(matrix))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Validation("response matrix needs at least one row".into()))?;
        for r in rows {
            if r.len() != first.len() {
                return Err(Error::dimension("response row", first.len(), r.len()));
            }
        }
        Self::new(DMatrix::from_fn(rows.len(), first.len(), |q, k| rows[q][k]))
    }

    pub fn partitions(&self) -> usize {
        self.0.nrows()
    }

    pub fn steps(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn row(&self, q: usize) -> Vec<f64> {
        self.0.row(q).iter().copied().collect()
    }

    /// `Λ Y`, the delivered aggregate shape.
    pub fn combine(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.partitions() {
            return Err(Error::dimension(
                "partition weights",
                self.partitions(),
                weights.len(),
            ));
        }
        let w = DVector::from_column_slice(weights);
        Ok((self.0.transpose() * w).iter().copied().collect())
    }

    /// `‖self − other‖_F / ‖other‖_F`.
    pub fn relative_error(&self, truth: &ResponseMatrix) -> f64 {
        let denom = truth.0.norm();
        let diff = (&self.0 - &truth.0).norm();
        if denom > 0.0 {
            diff / denom
        } else {
            diff
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionWeights {
    pub lambdas: Vec<f64>,
    /// Fitted with `Λ ≥ 0, ΣΛ ≤ 1`.
    pub simplex: bool,
    /// Unconstrained fit fell back to the minimum-norm solution.
    pub rank_deficient: bool,
}

/// Least-squares weights so that `Λ Y` tracks `y_ref`.
pub fn fit_partition(y: &ResponseMatrix, y_ref: &[f64], simplex: bool) -> Result<PartitionWeights> {
    fit_partition_with_floor(y, y_ref, simplex, 0.0)
}

/// As [`fit_partition`], with every simplex weight held at or above
/// `floor` so that each partition keeps producing telemetry. Ignored by
/// the unconstrained fit.
pub fn fit_partition_with_floor(
    y: &ResponseMatrix,
    y_ref: &[f64],
    simplex: bool,
    floor: f64,
) -> Result<PartitionWeights> {
    if y_ref.len() != y.steps() {
        return Err(Error::dimension("reference signal", y.steps(), y_ref.len()));
    }
    let q = y.partitions();
    let a = y.0.transpose();
    let b = DVector::from_column_slice(y_ref);
    if !simplex {
        let (x, rank) = lsq::min_norm(&a, &b);
        return Ok(PartitionWeights {
            lambdas: x.iter().copied().collect(),
            simplex: false,
            rank_deficient: rank < q,
        });
    }
    if !(floor.is_finite() && floor >= 0.0 && floor * q as f64 <= 1.0) {
        return Err(Error::Validation(format!(
            "excitation floor {floor} is infeasible for {q} partitions"
        )));
    }
    // Λ = floor + s·ν with ν in the capped simplex and s = 1 − Q·floor.
    let spare = 1.0 - floor * q as f64;
    let lambdas = if spare <= 0.0 {
        vec![floor; q]
    } else {
        let shifted = &b - &a * DVector::from_element(q, floor);
        let sol = lsq::solve(&(&a * spare), &shifted, Region::CappedSimplex);
        sol.weights.iter().map(|v| floor + spare * v).collect()
    };
    Ok(PartitionWeights {
        lambdas,
        simplex: true,
        rank_deficient: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    /// Noise standard deviation relative to each partition's RMS response.
    pub epsilon_rel: f64,
    pub seed: u64,
}

impl Default for MeasurementModel {
    fn default() -> Self {
        MeasurementModel {
            epsilon_rel: 0.02,
            seed: 0,
        }
    }
}

/// Telemetry of the dispatched partitions on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Partition indices with `λ > REDUCED_THRESHOLD`.
    pub rows: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// One measured row per entry of `rows`.
    pub z: DMatrix<f64>,
}

impl Measurement {
    /// Full-size measurement and weight vectors; undispatched partitions
    /// contribute zero to both.
    pub fn expand(&self, partitions: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut z = DMatrix::zeros(partitions, self.z.ncols());
        let mut lam = DVector::zeros(partitions);
        for (i, &q) in self.rows.iter().enumerate() {
            z.set_row(q, &self.z.row(i));
            lam[q] = self.lambdas[i];
        }
        (z, lam)
    }
}

fn day_rng(seed: u64, day: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(day as u64);
    rng
}

fn row_rms(m: &DMatrix<f64>, q: usize) -> f64 {
    (m.row(q).norm_squared() / m.ncols() as f64).sqrt()
}

/// Noisy scaled responses of the dispatched partitions on `day`.
///
/// Noise for every partition is drawn whether or not it is dispatched, so
/// a partition's noise on a given day does not depend on the others.
pub fn simulate_measurement(
    y_actual: &ResponseMatrix,
    weights: &PartitionWeights,
    model: &MeasurementModel,
    day: usize,
) -> Result<Measurement> {
    let (qn, n) = (y_actual.partitions(), y_actual.steps());
    if weights.lambdas.len() != qn {
        return Err(Error::dimension(
            "partition weights",
            qn,
            weights.lambdas.len(),
        ));
    }
    if !(model.epsilon_rel.is_finite() && model.epsilon_rel >= 0.0) {
        return Err(Error::Validation(format!(
            "epsilon_rel must be non-negative, got {}",
            model.epsilon_rel
        )));
    }
    let mut rng = day_rng(model.seed, day);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = DMatrix::from_fn(qn, n, |_, _| unit.sample(&mut rng));

    let rows: Vec<usize> = (0..qn)
        .filter(|&q| weights.lambdas[q] > REDUCED_THRESHOLD)
        .collect();
    let y = y_actual.matrix();
    let z = DMatrix::from_fn(rows.len(), n, |i, k| {
        let q = rows[i];
        let sd = model.epsilon_rel * row_rms(y, q);
        weights.lambdas[q] * y[(q, k)] + sd * noise[(q, k)]
    });
    Ok(Measurement {
        lambdas: rows.iter().map(|&q| weights.lambdas[q]).collect(),
        rows,
        z,
    })
}

/// Coefficients of `y[i] = a·y[i−1] + b·(x[i] + x[i−1])`, the bilinear
/// discretization of a first-order lag with time constant `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterCoefficients {
    pub a: f64,
    pub b: f64,
}

impl FilterCoefficients {
    pub fn new(tau: f64, t_s: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Validation(format!(
                "adaptation time constant must be positive, got {tau}"
            )));
        }
        if !(t_s.is_finite() && t_s > 0.0) {
            return Err(Error::Validation(format!(
                "sampling period must be positive, got {t_s}"
            )));
        }
        let r = 2.0 * tau / t_s;
        Ok(FilterCoefficients {
            a: (r - 1.0) / (r + 1.0),
            b: 1.0 / (r + 1.0),
        })
    }

    pub fn apply(&self, prev_out: f64, input: f64, prev_input: f64) -> f64 {
        self.a * prev_out + self.b * (input + prev_input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingState {
    pub z_filt: DMatrix<f64>,
    pub lam_filt: DVector<f64>,
    /// Previous day's raw inputs, needed by the two-tap filter.
    pub z_prev: DMatrix<f64>,
    pub lam_prev: DVector<f64>,
    pub y_hat: ResponseMatrix,
    pub tau_adapt: f64,
    pub t_s: f64,
    pub day_index: usize,
}

impl TrackingState {
    /// State at rest on `prior`: every partition weighted `1/Q`, with
    /// matching filtered measurements, so the first estimate is `prior`.
    pub fn new(prior: &ResponseMatrix, tau_adapt: f64) -> Result<Self> {
        FilterCoefficients::new(tau_adapt, 1.0)?;
        let q = prior.partitions();
        let w = 1.0 / q as f64;
        let lam = DVector::from_element(q, w);
        let z = prior.matrix() * w;
        Ok(TrackingState {
            z_filt: z.clone(),
            lam_filt: lam.clone(),
            z_prev: z,
            lam_prev: lam,
            y_hat: prior.clone(),
            tau_adapt,
            t_s: 1.0,
            day_index: 0,
        })
    }

    /// State with all filter memory at zero.
    pub fn zeroed(prior: &ResponseMatrix, tau_adapt: f64) -> Result<Self> {
        FilterCoefficients::new(tau_adapt, 1.0)?;
        let (q, n) = (prior.partitions(), prior.steps());
        Ok(TrackingState {
            z_filt: DMatrix::zeros(q, n),
            lam_filt: DVector::zeros(q),
            z_prev: DMatrix::zeros(q, n),
            lam_prev: DVector::zeros(q),
            y_hat: prior.clone(),
            tau_adapt,
            t_s: 1.0,
            day_index: 0,
        })
    }

    pub fn coefficients(&self) -> FilterCoefficients {
        FilterCoefficients::new(self.tau_adapt, self.t_s).expect("validated at construction")
    }
}

/// Advances both filters by one day.
pub fn filter_step(
    state: &TrackingState,
    z_new: &DMatrix<f64>,
    lam_new: &DVector<f64>,
) -> Result<TrackingState> {
    if z_new.shape() != state.z_filt.shape() {
        return Err(Error::dimension(
            "measurement rows",
            state.z_filt.nrows(),
            z_new.nrows(),
        ));
    }
    if lam_new.len() != state.lam_filt.len() {
        return Err(Error::dimension(
            "weight diagonal",
            state.lam_filt.len(),
            lam_new.len(),
        ));
    }
    let c = state.coefficients();
    let z_filt = state
        .z_filt
        .zip_zip_map(z_new, &state.z_prev, |y, x, xp| c.apply(y, x, xp));
    let lam_filt = state
        .lam_filt
        .zip_zip_map(lam_new, &state.lam_prev, |y, x, xp| c.apply(y, x, xp));
    Ok(TrackingState {
        z_filt,
        lam_filt,
        z_prev: z_new.clone(),
        lam_prev: lam_new.clone(),
        y_hat: state.y_hat.clone(),
        tau_adapt: state.tau_adapt,
        t_s: state.t_s,
        day_index: state.day_index + 1,
    })
}

/// Re-estimated response matrix and the partitions left unchanged because
/// their filtered weight is below `cond_floor`.
pub fn estimate_actual(state: &TrackingState, cond_floor: f64) -> (ResponseMatrix, Vec<usize>) {
    let mut y = state.y_hat.matrix().clone();
    let mut skipped = Vec::new();
    for q in 0..y.nrows() {
        let lam = state.lam_filt[q];
        if lam >= cond_floor && lam.is_finite() {
            let row = state.z_filt.row(q) / lam;
            if row.iter().all(|v| v.is_finite()) {
                y.set_row(q, &row);
                continue;
            }
        }
        log::debug!(
            "day {}: partition {q} kept previous estimate (filtered weight {lam:.3e})",
            state.day_index
        );
        skipped.push(q);
    }
    (ResponseMatrix(y), skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub day: usize,
    pub new_y: ResponseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub initial_y: ResponseMatrix,
    /// One reference per day.
    pub schedule: Vec<Vec<f64>>,
    pub days: usize,
    pub tau_adapt: f64,
    pub disturbance: Option<Disturbance>,
    pub model: MeasurementModel,
    pub simplex: bool,
    /// Minimum simplex weight per partition.
    pub excitation_floor: f64,
    pub cond_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayRecord {
    pub day: usize,
    /// RMS of `Λ Y_true − y_ref`, kW.
    pub tracking_rmse_kw: f64,
    /// `‖Ŷ − Y_true‖_F / ‖Y_true‖_F` after the day's update.
    pub model_error_rel: f64,
    pub min_lam_filt: f64,
    pub disturbed: bool,
    pub lambdas: Vec<f64>,
    pub reference: Vec<f64>,
    pub delivered: Vec<f64>,
    pub skipped_partitions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationLog {
    pub days: Vec<DayRecord>,
    pub simplex: bool,
    pub rank_deficient_days: Vec<usize>,
    pub final_state: TrackingState,
}

impl AdaptationLog {
    pub fn record(&self, day: usize) -> Option<&DayRecord> {
        self.days.get(day)
    }

    /// Error and tracking figures `lag` days after a change on `day`,
    /// against the change-day error and the last undisturbed day's RMSE.
    pub fn recovery(&self, day: usize, lag: usize) -> Option<Recovery> {
        let before = self.days.get(day.checked_sub(1)?)?;
        let peak = self.days.get(day)?;
        let after = self.days.get(day + lag)?;
        Some(Recovery {
            change_day: day,
            check_day: day + lag,
            peak_error: peak.model_error_rel,
            error_after: after.model_error_rel,
            error_ratio: after.model_error_rel / peak.model_error_rel,
            rmse_before_kw: before.tracking_rmse_kw,
            rmse_after_kw: after.tracking_rmse_kw,
            rmse_ratio: after.tracking_rmse_kw / before.tracking_rmse_kw,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub change_day: usize,
    pub check_day: usize,
    pub peak_error: f64,
    pub error_after: f64,
    pub error_ratio: f64,
    pub rmse_before_kw: f64,
    pub rmse_after_kw: f64,
    pub rmse_ratio: f64,
}

pub const LOG_CSV_HEADER: &str = "day,tracking_rmse_kw,model_error_rel,min_lam_filt,disturbed";

pub fn write_log_csv<W: Write>(mut out: W, log: &AdaptationLog) -> Result<()> {
    writeln!(out, "{LOG_CSV_HEADER}")?;
    for r in &log.days {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.day,
            r.tracking_rmse_kw,
            r.model_error_rel,
            r.min_lam_filt,
            u8::from(r.disturbed)
        )?;
    }
    Ok(())
}

/// Long-form reference and delivered power per day and step, with the
/// day's partition weights, for plotting.
pub fn write_plot_csv<W: Write>(mut out: W, log: &AdaptationLog) -> Result<()> {
    let q = log.days.first().map_or(0, |r| r.lambdas.len());
    let weights: String = (0..q).map(|i| format!(",lambda_{i}")).collect();
    writeln!(out, "day,step,reference_kw,delivered_kw{weights}")?;
    for r in &log.days {
        let lams: String = r.lambdas.iter().map(|l| format!(",{l}")).collect();
        for (k, (re, de)) in r.reference.iter().zip(&r.delivered).enumerate() {
            writeln!(out, "{},{k},{re},{de}{lams}", r.day)?;
        }
    }
    Ok(())
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Closed-loop tracking simulation over `days` days.
pub fn run_adaptation(cfg: &AdaptationConfig) -> Result<AdaptationLog> {
    if cfg.schedule.len() < cfg.days {
        return Err(Error::dimension(
            "reference schedule days",
            cfg.days,
            cfg.schedule.len(),
        ));
    }
    if let Some(d) = &cfg.disturbance {
        if d.day >= cfg.days {
            return Err(Error::Validation(format!(
                "disturbance day {} outside the {}-day horizon",
                d.day, cfg.days
            )));
        }
        if d.new_y.matrix().shape() != cfg.initial_y.matrix().shape() {
            return Err(Error::dimension(
                "disturbed response rows",
                cfg.initial_y.partitions(),
                d.new_y.partitions(),
            ));
        }
    }
    let mut state = TrackingState::new(&cfg.initial_y, cfg.tau_adapt)?;
    let mut records = Vec::with_capacity(cfg.days);
    let mut rank_deficient_days = Vec::new();
    for day in 0..cfg.days {
        let (y_true, disturbed) = match &cfg.disturbance {
            Some(d) if day >= d.day => (&d.new_y, true),
            _ => (&cfg.initial_y, false),
        };
        let reference = &cfg.schedule[day];
        let weights =
            fit_partition_with_floor(&state.y_hat, reference, cfg.simplex, cfg.excitation_floor)?;
        if weights.rank_deficient {
            rank_deficient_days.push(day);
        }
        let delivered = y_true.combine(&weights.lambdas)?;
        let errors: Vec<f64> = delivered
            .iter()
            .zip(reference)
            .map(|(d, r)| d - r)
            .collect();

        let meas = simulate_measurement(y_true, &weights, &cfg.model, day)?;
        let (z, lam) = meas.expand(y_true.partitions());
        state = filter_step(&state, &z, &lam)?;
        let (y_hat, skipped) = estimate_actual(&state, cfg.cond_floor);
        state.y_hat = y_hat;

        records.push(DayRecord {
            day,
            tracking_rmse_kw: rms(&errors),
            model_error_rel: state.y_hat.relative_error(y_true),
            min_lam_filt: state.lam_filt.min(),
            disturbed,
            lambdas: weights.lambdas,
            reference: reference.clone(),
            delivered,
            skipped_partitions: skipped,
        });
    }
    Ok(AdaptationLog {
        days: records,
        simplex: cfg.simplex,
        rank_deficient_days,
        final_state: state,
    })
}

/// Daily references inside the reachable set: a rotating convex mix of the
/// true response rows (half the free mass on partition `day mod Q`) with
/// every weight at least `floor` and total weight `fill`, plus Gaussian
/// perturbation with standard deviation `perturbation_rel` times the mean
/// row RMS.
pub fn reference_schedule(
    before: &ResponseMatrix,
    after: Option<&Disturbance>,
    days: usize,
    fill: f64,
    floor: f64,
    perturbation_rel: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let q = before.partitions();
    let free = fill - floor * q as f64;
    if !(fill <= 1.0 && floor >= 0.0 && free >= 0.0) {
        return Err(Error::Validation(format!(
            "reference fill {fill} must lie in [{}, 1] for floor {floor}",
            floor * q as f64
        )));
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(days);
    for day in 0..days {
        let y = match after {
            Some(d) if day >= d.day => &d.new_y,
            _ => before,
        };
        let mut rng = day_rng(seed ^ 0x5EED_F00D, day);
        let raw: Vec<f64> = (0..q).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| floor + free * (0.5 * r / total + if i == day % q { 0.5 } else { 0.0 }))
            .collect();
        let mut reference = y.combine(&weights)?;
        let scale =
            perturbation_rel * (0..q).map(|r| row_rms(y.matrix(), r)).sum::<f64>() / q as f64;
        for v in &mut reference {
            *v += scale * unit.sample(&mut rng);
        }
        out.push(reference);
    }
    Ok(out)
}

/// Portfolio response rows for the centralized fleet: row `q` dispatches
/// every class in full to its hull vertex `(q·(c+1)) mod D_c`, a point of
/// the Minkowski sum of the scaled class hulls.
pub fn portfolio_rows(fleet: &ReducedFleet, partitions: usize) -> Result<ResponseMatrix> {
    let steps = fleet.classes.first().map_or(0, |c| c.steps());
    if partitions == 0 || fleet.classes.is_empty() {
        return Err(Error::Config(
            "tracking needs at least one class and one partition".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..partitions)
        .map(|q| {
            let mut row = vec![0.0; steps];
            for (c, (class, verts)) in fleet.classes.iter().zip(&fleet.vertices).enumerate() {
                let v = &verts[(q * (c + 1)) % verts.len()];
                for (r, m) in row.iter_mut().zip(&v.mean) {
                    *r += class.n_total * m;
                }
            }
            row
        })
        .collect();
    ResponseMatrix::from_rows(&rows)
}

/// A behavior change: every response scaled by `scale` and delayed
/// cyclically by `shift` steps.
pub fn disturb(y: &ResponseMatrix, scale: f64, shift: usize) -> ResponseMatrix {
    let n = y.steps();
    let m = y.matrix();
    ResponseMatrix(DMatrix::from_fn(m.nrows(), n, |q, k| {
        scale * m[(q, (k + n - shift % n) % n)]
    }))
}
