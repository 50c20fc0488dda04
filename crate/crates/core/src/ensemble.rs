//! Periodic (mean, variance) load-shape ensembles.
//!
//! A DER class is described by one [`LoadShapePair`] per control sequence:
//! the per-device mean power deviation from baseline over one period and the
//! per-device variance around it. Positive power is load increase, negative
//! power is load reduction or export, both in kW per device.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights passed to [`mix`] must sum to one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Discretization of one periodic interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub steps_per_period: usize,
    pub step_hours: f64,
    pub reset_hour: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            steps_per_period: 24,
            step_hours: 1.0,
            reset_hour: 0.0,
        }
    }
}

impl TimeGrid {
    pub fn new(steps_per_period: usize, step_hours: f64, reset_hour: f64) -> Result<Self> {
        let grid = TimeGrid {
            steps_per_period,
            step_hours,
            reset_hour,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A two-day period of hourly steps.
    pub fn two_day() -> Self {
        TimeGrid {
            steps_per_period: 48,
            ..TimeGrid::default()
        }
    }

    pub fn period_hours(&self) -> f64 {
        self.steps_per_period as f64 * self.step_hours
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_period == 0 {
            return Err(Error::Validation(
                "steps_per_period must be positive".into(),
            ));
        }
        if !(self.step_hours.is_finite() && self.step_hours > 0.0) {
            return Err(Error::Validation(format!(
                "step_hours must be positive, got {}",
                self.step_hours
            )));
        }
        if !(0.0..24.0).contains(&self.reset_hour) {
            return Err(Error::Validation(format!(
                "reset_hour must lie in [0, 24), got {}",
                self.reset_hour
            )));
        }
        let period = self.period_hours();
        let per_day = 24.0 / period;
        let divides_day = (per_day - per_day.round()).abs() < 1e-9 && per_day.round() >= 1.0;
        if !(divides_day || (period - 48.0).abs() < 1e-9) {
            return Err(Error::Validation(format!(
                "period of {period} h neither divides 24 h nor equals 48 h"
            )));
        }
        Ok(())
    }

    /// Hour of day at the start of step `k`.
    pub fn hour_of_day(&self, k: usize) -> f64 {
        (self.reset_hour + k as f64 * self.step_hours).rem_euclid(24.0)
    }

    /// Hours since the reset at the start of step `k`.
    pub fn hour_offset(&self, k: usize) -> f64 {
        self.reset_hour + k as f64 * self.step_hours
    }

    /// Steps whose start time of day falls in `[start, start + duration)`,
    /// wrapping around midnight.
    fn window(&self, start_hour: f64, duration_hours: f64) -> Vec<usize> {
        (0..self.steps_per_period)
            .filter(|&k| {
                let since = (self.hour_of_day(k) - start_hour).rem_euclid(24.0);
                since < duration_hours - 1e-9
            })
            .collect()
    }
}

/// Reset state and weather condition shared by every pair in one analysis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionKey {
    pub reset_state: String,
    pub weather: String,
}

impl ConditionKey {
    pub fn new(reset_state: impl Into<String>, weather: impl Into<String>) -> Self {
        ConditionKey {
            reset_state: reset_state.into(),
            weather: weather.into(),
        }
    }

    /// Parses the `reset/weather` form used in ensemble files.
    pub fn parse(label: &str) -> Self {
        match label.split_once('/') {
            Some((reset, weather)) => ConditionKey::new(reset, weather),
            None => ConditionKey::new(label, ""),
        }
    }
}

impl Default for ConditionKey {
    fn default() -> Self {
        ConditionKey::new("nominal", "typical")
    }
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.weather.is_empty() {
            f.write_str(&self.reset_state)
        } else {
            write!(f, "{}/{}", self.reset_state, self.weather)
        }
    }
}

/// Names one daily control sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ControlSequenceId(pub String);

impl fmt::Display for ControlSequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ControlSequenceId {
    fn from(s: &str) -> Self {
        ControlSequenceId(s.to_owned())
    }
}

/// Mean and variance load shape of one device under one control sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadShapePair {
    pub control: ControlSequenceId,
    pub condition: ConditionKey,
    /// kW per device relative to baseline.
    pub mean: Vec<f64>,
    /// kW² per device.
    pub variance: Vec<f64>,
}

impl LoadShapePair {
    pub fn new(
        control: impl Into<ControlSequenceId>,
        condition: ConditionKey,
        mean: Vec<f64>,
        variance: Vec<f64>,
    ) -> Result<Self> {
        let pair = LoadShapePair {
            control: control.into(),
            condition,
            mean,
            variance,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// True for the do-nothing sequence, which costs nothing to dispatch.
    pub fn is_null_control(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.variance.len() {
            return Err(Error::dimension(
                format!("variance of `{}`", self.control),
                self.mean.len(),
                self.variance.len(),
            ));
        }
        if let Some(k) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite mean at step {k} of `{}`",
                self.control
            )));
        }
        if let Some(k) = self
            .variance
            .iter()
            .position(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Validation(format!(
                "variance {} at step {k} of `{}` must be finite and non-negative",
                self.variance[k], self.control
            )));
        }
        Ok(())
    }
}

impl From<String> for ControlSequenceId {
    fn from(s: String) -> Self {
        ControlSequenceId(s)
    }
}

/// A homogeneous DER type and its flexibility ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DerClass {
    pub name: String,
    /// Device count; continuous because partitions are sized as reals.
    pub n_total: f64,
    /// USD per dispatched device per event.
    pub unit_dispatch_cost: f64,
    /// Pearson correlation between devices following the same sequence.
    pub rho: f64,
    pub pairs: Vec<LoadShapePair>,
}

impl DerClass {
    pub fn new(
        name: impl Into<String>,
        n_total: f64,
        unit_dispatch_cost: f64,
        rho: f64,
        pairs: Vec<LoadShapePair>,
    ) -> Result<Self> {
        let class = DerClass {
            name: name.into(),
            n_total,
            unit_dispatch_cost,
            rho,
            pairs,
        };
        class.validate()?;
        Ok(class)
    }

    pub fn steps(&self) -> usize {
        self.pairs.first().map_or(0, LoadShapePair::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_total.is_finite() && self.n_total >= 0.0) {
            return Err(Error::Validation(format!(
                "{}: n_total must be non-negative, got {}",
                self.name, self.n_total
            )));
        }
        if !(self.unit_dispatch_cost.is_finite() && self.unit_dispatch_cost >= 0.0) {
            return Err(Error::Validation(format!(
                "{}: unit_dispatch_cost must be non-negative, got {}",
                self.name, self.unit_dispatch_cost
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Validation(format!(
                "{}: rho must lie in [0, 1], got {}",
                self.name, self.rho
            )));
        }
        validate_pairs(&self.pairs)
    }
}

/// Checks an ensemble is nonempty, uniform in length and condition, and
/// free of duplicate control ids.
pub fn validate_pairs(pairs: &[LoadShapePair]) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Validation("ensemble must contain at least one pair".into()))?;
    let mut seen = HashSet::new();
    for pair in pairs {
        pair.validate()?;
        if pair.len() != first.len() {
            return Err(Error::dimension(
                format!("load shape `{}`", pair.control),
                first.len(),
                pair.len(),
            ));
        }
        if pair.condition != first.condition {
            return Err(Error::Validation(format!(
                "pair `{}` has condition `{}`, expected `{}`",
                pair.control, pair.condition, first.condition
            )));
        }
        if !seen.insert(&pair.control) {
            return Err(Error::Validation(format!(
                "duplicate control sequence `{}`",
                pair.control
            )));
        }
    }
    Ok(())
}

/// Mean response of a randomly sampled fraction `alpha` of the devices.
pub fn scale_mean(pair: &LoadShapePair, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Constraint(format!(
            "scale fraction must be non-negative, got {alpha}"
        )));
    }
    Ok(pair.mean.iter().map(|m| alpha * m).collect())
}

/// Convex combination of the pair means.
pub fn mix(pairs: &[LoadShapePair], weights: &[f64]) -> Result<Vec<f64>> {
    if pairs.len() != weights.len() {
        return Err(Error::dimension("mix weights", pairs.len(), weights.len()));
    }
    let first = pairs
        .first()
        .ok_or_else(|| Error::Validation("mix requires at least one pair".into()))?;
    for pair in pairs {
        if pair.len() != first.len() {
            return Err(Error::dimension("mix load shape", first.len(), pair.len()));
        }
        if pair.condition != first.condition {
            return Err(Error::Validation(format!(
                "mix across conditions `{}` and `{}`",
                first.condition, pair.condition
            )));
        }
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Constraint("mix weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Constraint(format!(
            "mix weights sum to {total}, expected 1"
        )));
    }
    let mut out = vec![0.0; first.len()];
    for (pair, &w) in pairs.iter().zip(weights) {
        for (o, m) in out.iter_mut().zip(&pair.mean) {
            *o += w * m;
        }
    }
    Ok(out)
}

/// Device families the synthetic generator knows how to shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Thermostat,
    WaterHeater,
    /// Evening home charging.
    EvCharging,
    /// Morning arrival charging at work.
    EvWorkplace,
    Battery,
}

impl Archetype {
    pub fn label(self) -> &'static str {
        match self {
            Archetype::Thermostat => "thermostat",
            Archetype::WaterHeater => "water_heater",
            Archetype::EvCharging => "ev_charging",
            Archetype::EvWorkplace => "ev_workplace",
            Archetype::Battery => "battery",
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thermostat" => Ok(Archetype::Thermostat),
            "water_heater" => Ok(Archetype::WaterHeater),
            "ev_charging" => Ok(Archetype::EvCharging),
            "ev_workplace" => Ok(Archetype::EvWorkplace),
            "battery" => Ok(Archetype::Battery),
            other => Err(Error::Config(format!("unknown archetype `{other}`"))),
        }
    }
}

/// Parameters of a synthetic ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub archetype: Archetype,
    pub n_sequences: usize,
    /// Per-device standard deviation relative to the local shape magnitude.
    pub noise_scale: f64,
    pub seed: u64,
    pub condition: ConditionKey,
}

impl SyntheticSpec {
    pub fn new(archetype: Archetype, n_sequences: usize, noise_scale: f64, seed: u64) -> Self {
        SyntheticSpec {
            archetype,
            n_sequences,
            noise_scale,
            seed,
            condition: ConditionKey::default(),
        }
    }
}

/// Generates a deterministic ensemble of plausible control responses.
///
/// Returned class has `n_total = 0`, zero cost and zero correlation; the
/// caller fills those in from its fleet description.
pub fn generate_synthetic(spec: &SyntheticSpec, grid: &TimeGrid) -> Result<DerClass> {
    grid.validate()?;
    if spec.n_sequences == 0 {
        return Err(Error::Config("n_sequences must be at least 1".into()));
    }
    if !(spec.noise_scale.is_finite() && spec.noise_scale >= 0.0) {
        return Err(Error::Config(format!(
            "noise_scale must be non-negative, got {}",
            spec.noise_scale
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let mean = match spec.archetype {
            Archetype::Thermostat => {
                shed_with_rebound(grid, &mut rng, (12, 19), (1, 4), (0.6, 1.4), (0.5, 0.9))
            }
            Archetype::WaterHeater => {
                shed_with_rebound(grid, &mut rng, (6, 20), (2, 5), (0.3, 0.6), (0.3, 0.7))
            }
            Archetype::EvCharging => ev_shift(grid, &mut rng, (16, 21)),
            Archetype::EvWorkplace => ev_shift(grid, &mut rng, (7, 10)),
            Archetype::Battery => battery_cycle(grid, &mut rng),
        };
        let peak = mean.iter().fold(0.0_f64, |acc, m| acc.max(m.abs()));
        let variance = mean
            .iter()
            .map(|m| {
                let jitter = 1.0 + 0.2 * rng.random::<f64>();
                let sigma = spec.noise_scale * (m.abs() + 0.05 * peak) * jitter;
                sigma * sigma
            })
            .collect();
        pairs.push(LoadShapePair {
            control: ControlSequenceId(format!("{}-{:02}", spec.archetype.label(), i)),
            condition: spec.condition.clone(),
            mean,
            variance,
        });
    }
    DerClass::new(spec.archetype.label(), 0.0, 0.0, 0.0, pairs)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn hour_in(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)) -> f64 {
    f64::from(rng.random_range(lo..=hi))
}

/// Curtailment followed by a decaying payback of opposite sign.
fn shed_with_rebound(
    grid: &TimeGrid,
    rng: &mut ChaCha8Rng,
    start: (u32, u32),
    duration: (u32, u32),
    depth: (f64, f64),
    payback: (f64, f64),
) -> Vec<f64> {
    let start = hour_in(rng, start);
    let duration = hour_in(rng, duration);
    let depth = uniform(rng, depth);
    let fraction = uniform(rng, payback);
    let rebound_hours = duration + 2.0;

    let mut mean = vec![0.0; grid.steps_per_period];
    let shed = grid.window(start, duration);
    for &k in &shed {
        mean[k] = -depth;
    }
    let rebound = grid.window(start + duration, rebound_hours);
    let weights: Vec<f64> = (0..rebound.len())
        .map(|i| (-(i as f64) * grid.step_hours / 2.0).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let energy = fraction * depth * shed.len() as f64;
    for (&k, w) in rebound.iter().zip(&weights) {
        mean[k] += energy * w / total;
    }
    mean
}

/// Evening charging deferred to later hours with the daily energy conserved.
fn ev_shift(grid: &TimeGrid, rng: &mut ChaCha8Rng, arrival: (u32, u32)) -> Vec<f64> {
    let start = hour_in(rng, arrival);
    let duration = hour_in(rng, (2, 4));
    let depth = uniform(rng, (3.0, 6.6));
    let gap = hour_in(rng, (0, 4));
    let shifted_hours = duration + hour_in(rng, (0, 3));

    let mut mean = vec![0.0; grid.steps_per_period];
    let shed = grid.window(start, duration);
    let moved = grid.window(start + duration + gap, shifted_hours);
    for &k in &shed {
        mean[k] -= depth;
    }
    let level = depth * shed.len() as f64 / moved.len() as f64;
    for &k in &moved {
        mean[k] += level;
    }
    mean
}

/// Evening export paid back by midday charging; zero net energy.
fn battery_cycle(grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let discharge_start = hour_in(rng, (16, 19));
    let discharge_hours = hour_in(rng, (2, 4));
    let power = uniform(rng, (2.0, 5.0));
    let charge_start = hour_in(rng, (9, 12));
    let charge_hours = hour_in(rng, (3, 5));

    let mut mean = vec![0.0; grid.steps_per_period];
    let discharge = grid.window(discharge_start, discharge_hours);
    let charge = grid.window(charge_start, charge_hours);
    for &k in &discharge {
        mean[k] -= power;
    }
    let level = power * discharge.len() as f64 / charge.len() as f64;
    for &k in &charge {
        mean[k] += level;
    }
    mean
}

pub const CSV_HEADER: [&str; 5] = ["control_id", "condition", "step", "mean_kw", "variance_kw2"];

/// Reads an ensemble file into validated pairs.
pub fn read_ensemble<R: Read>(reader: R) -> Result<Vec<LoadShapePair>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = csv.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            row: 1,
            column: "header".into(),
            message: format!("expected `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut pairs: Vec<LoadShapePair> = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let row = i + 2;
        let record = record?;
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!(
                    "expected {} fields, found {}",
                    CSV_HEADER.len(),
                    record.len()
                ),
            });
        }
        let control = &record[0];
        if control.is_empty() {
            return Err(Error::Parse {
                row,
                column: CSV_HEADER[0].into(),
                message: "empty control id".into(),
            });
        }
        let condition = ConditionKey::parse(&record[1]);
        let step: usize = parse_field(&record, 2, row)?;
        let mean: f64 = parse_field(&record, 3, row)?;
        let variance: f64 = parse_field(&record, 4, row)?;

        let pair = match pairs.last_mut() {
            Some(last) if last.control.0 == control => last,
            _ => {
                if pairs.iter().any(|p| p.control.0 == control) {
                    return Err(Error::Parse {
                        row,
                        column: CSV_HEADER[0].into(),
                        message: format!("rows of `{control}` are not contiguous"),
                    });
                }
                pairs.push(LoadShapePair {
                    control: ControlSequenceId(control.to_owned()),
                    condition: condition.clone(),
                    mean: Vec::new(),
                    variance: Vec::new(),
                });
                pairs.last_mut().expect("just pushed")
            }
        };
        if pair.condition != condition {
            return Err(Error::Parse {
                row,
                column: CSV_HEADER[1].into(),
                message: format!("condition changes within `{control}`"),
            });
        }
        if step != pair.mean.len() {
            return Err(Error::Parse {
                row,
                column: CSV_HEADER[2].into(),
                message: format!("expected step {}, found {step}", pair.mean.len()),
            });
        }
        pair.mean.push(mean);
        pair.variance.push(variance);
    }
    validate_pairs(&pairs)?;
    Ok(pairs)
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    row: usize,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    record[idx].parse().map_err(|e: T::Err| Error::Parse {
        row,
        column: CSV_HEADER[idx].into(),
        message: format!("`{}`: {e}", &record[idx]),
    })
}

/// Writes pairs in the ensemble file layout; floats use shortest
/// round-trip formatting so reading back is bit-exact.
pub fn write_ensemble<W: Write>(writer: W, pairs: &[LoadShapePair]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(CSV_HEADER)?;
    for pair in pairs {
        let condition = pair.condition.to_string();
        for (k, (m, v)) in pair.mean.iter().zip(&pair.variance).enumerate() {
            csv.write_record([
                pair.control.0.as_str(),
                condition.as_str(),
                &k.to_string(),
                &m.to_string(),
                &v.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Loads an ensemble file as a class named after the file stem.
///
/// Fleet size, cost and correlation are not part of the file; they come
/// back as zero and must be set by the caller.
pub fn load_ensemble(path: &Path) -> Result<DerClass> {
    let file = std::fs::File::open(path)?;
    let pairs = read_ensemble(std::io::BufReader::new(file))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ensemble".into());
    DerClass::new(name, 0.0, 0.0, 0.0, pairs)
}

pub fn save_ensemble(path: &Path, pairs: &[LoadShapePair]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_ensemble(std::io::BufWriter::new(file), pairs)
}
