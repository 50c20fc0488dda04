//! TOML scenario files: fleet description, objective settings and the
//! tracking experiment, plus `key=value` overrides and resolution into a
//! runnable [`Scenario`].

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dispatch::{Architecture, DEFAULT_SOLVER_TOL};
use crate::ensemble::{self, Archetype, ConditionKey, DerClass, SyntheticSpec, TimeGrid};
use crate::envelope::{ReducedFleet, Scenario, DEFAULT_CONFIDENCE_Z};
use crate::error::{Error, Result};
use crate::hull;
use crate::tracking::{self, AdaptationConfig, Disturbance, MeasurementModel, DEFAULT_COND_FLOOR};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: TimeGrid,
    #[serde(default)]
    pub condition: ConditionKey,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub hull: HullConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub costs: CostConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    pub classes: Vec<ClassConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Default intra-class correlation for classes that do not set one.
    pub rho: f64,
    pub confidence_z: f64,
    /// USD per day; `inf` disables the budget.
    pub budget: f64,
    pub architecture: Architecture,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.1,
            rho: 0.1,
            confidence_z: DEFAULT_CONFIDENCE_Z,
            budget: f64::INFINITY,
            architecture: Architecture::Centralized,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HullConfig {
    pub tol: f64,
}

impl Default for HullConfig {
    fn default() -> Self {
        HullConfig {
            tol: hull::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: DEFAULT_SOLVER_TOL,
        }
    }
}

/// Range for per-device event costs of classes without an explicit cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub min: f64,
    pub max: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            min: 0.15,
            max: 0.50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub days: usize,
    pub tau_days: f64,
    pub noise_rel: f64,
    /// Day the fleet changes behavior; omit for a static fleet.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disturbance_day: Option<usize>,
    pub disturbance_scale: f64,
    pub disturbance_shift: usize,
    pub partitions: usize,
    /// Fraction of the reachable set used by references.
    pub reference_fill: f64,
    /// Reference noise relative to the mean partition RMS.
    pub reference_perturbation: f64,
    /// Minimum weight of every partition in the daily dispatch.
    pub excitation_floor: f64,
    pub cond_floor: f64,
    pub unconstrained: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            days: 60,
            tau_days: 7.0,
            noise_rel: 0.02,
            disturbance_day: None,
            disturbance_scale: 0.7,
            disturbance_shift: 0,
            partitions: 3,
            reference_fill: 0.9,
            reference_perturbation: 0.01,
            excitation_floor: 0.05,
            cond_floor: DEFAULT_COND_FLOOR,
            unconstrained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    pub n_total: f64,
    /// Synthetic archetype; exclusive with `ensemble`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<Archetype>,
    /// Ensemble CSV, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<PathBuf>,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_dispatch_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

fn default_sequences() -> usize {
    8
}

fn default_noise() -> f64 {
    0.3
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: ScenarioConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a scenario file and applies `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("serializing config: {e}")))
    }

    /// Makes every sampled or defaulted per-class setting explicit and
    /// anchors ensemble paths at `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<ScenarioConfig> {
        self.validate()?;
        let (lo, hi) = (self.costs.min, self.costs.max);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let mut out = self.clone();
        for (i, class) in out.classes.iter_mut().enumerate() {
            let sampled = lo + (hi - lo) * rng.random::<f64>();
            class.unit_dispatch_cost.get_or_insert(sampled);
            class.rho.get_or_insert(self.objective.rho);
            match (&class.archetype, &mut class.ensemble) {
                (Some(_), None) => {
                    class.seed.get_or_insert(derive_seed(self.seed, i));
                }
                (None, Some(path)) => {
                    if path.is_relative() {
                        *path = base_dir.join(&*path);
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "class `{}` needs exactly one of `archetype` or `ensemble`",
                        class.name
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Range checks on every scalar setting, so that each command rejects
    /// the same files whatever parts of the scenario it uses.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: &dyn std::fmt::Display| {
            Err(Error::Config(format!("{what} is invalid: {v}")))
        };
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let o = &self.objective;
        if !nonneg(o.lambda) {
            return bad("objective.lambda", &o.lambda);
        }
        if !(0.0..=1.0).contains(&o.rho) {
            return bad("objective.rho", &o.rho);
        }
        if !nonneg(o.confidence_z) {
            return bad("objective.confidence_z", &o.confidence_z);
        }
        if o.budget.is_nan() || o.budget < 0.0 {
            return bad("objective.budget", &o.budget);
        }
        if !nonneg(self.hull.tol) {
            return bad("hull.tol", &self.hull.tol);
        }
        if !(self.solver.tol.is_finite() && self.solver.tol > 0.0) {
            return bad("solver.tol", &self.solver.tol);
        }
        let (lo, hi) = (self.costs.min, self.costs.max);
        if !(nonneg(lo) && nonneg(hi) && lo <= hi) {
            return Err(Error::Config(format!("cost range [{lo}, {hi}] is invalid")));
        }
        let t = &self.tracking;
        if t.days == 0 {
            return bad("tracking.days", &t.days);
        }
        if !(t.tau_days.is_finite() && t.tau_days > 0.0) {
            return bad("tracking.tau_days", &t.tau_days);
        }
        if !nonneg(t.noise_rel) {
            return bad("tracking.noise_rel", &t.noise_rel);
        }
        if let Some(d) = t.disturbance_day {
            if d >= t.days {
                return bad(
                    "tracking.disturbance_day",
                    &format!("{d} (horizon {} days)", t.days),
                );
            }
        }
        if !nonneg(t.disturbance_scale) {
            return bad("tracking.disturbance_scale", &t.disturbance_scale);
        }
        if t.partitions == 0 {
            return bad("tracking.partitions", &t.partitions);
        }
        if !nonneg(t.excitation_floor)
            || t.excitation_floor * t.partitions as f64 > t.reference_fill
        {
            return bad("tracking.excitation_floor", &t.excitation_floor);
        }
        if !(t.reference_fill > 0.0 && t.reference_fill <= 1.0) {
            return bad("tracking.reference_fill", &t.reference_fill);
        }
        if !nonneg(t.reference_perturbation) {
            return bad("tracking.reference_perturbation", &t.reference_perturbation);
        }
        if !nonneg(t.cond_floor) {
            return bad("tracking.cond_floor", &t.cond_floor);
        }
        if self.classes.is_empty() {
            return Err(Error::Config("scenario has no classes".into()));
        }
        for c in &self.classes {
            if !nonneg(c.n_total) {
                return bad(&format!("classes.{}.n_total", c.name), &c.n_total);
            }
            if c.rho.is_some_and(|r| !(0.0..=1.0).contains(&r)) {
                return bad(
                    &format!("classes.{}.rho", c.name),
                    &c.rho.unwrap_or_default(),
                );
            }
            if c.unit_dispatch_cost.is_some_and(|x| !nonneg(x)) {
                return bad(
                    &format!("classes.{}.unit_dispatch_cost", c.name),
                    &c.unit_dispatch_cost.unwrap_or_default(),
                );
            }
        }
        Ok(())
    }

    /// Builds the classes of a resolved config.
    pub fn build_classes(&self) -> Result<Vec<DerClass>> {
        self.grid.validate()?;
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut class = match (&c.archetype, &c.ensemble) {
                    (Some(a), None) => {
                        let spec = SyntheticSpec {
                            archetype: *a,
                            n_sequences: c.n_sequences,
                            noise_scale: c.noise_scale,
                            seed: c.seed.unwrap_or_else(|| derive_seed(self.seed, i)),
                            condition: self.condition.clone(),
                        };
                        ensemble::generate_synthetic(&spec, &self.grid)?
                    }
                    (None, Some(path)) => ensemble::load_ensemble(path)?,
                    _ => {
                        return Err(Error::Config(format!(
                            "class `{}` needs exactly one of `archetype` or `ensemble`",
                            c.name
                        )))
                    }
                };
                class.name = c.name.clone();
                class.n_total = c.n_total;
                class.unit_dispatch_cost = c.unit_dispatch_cost.unwrap_or(0.0);
                class.rho = c.rho.unwrap_or(self.objective.rho);
                class.validate()?;
                Ok(class)
            })
            .collect()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let mut s = Scenario::new(self.build_classes()?, self.grid.clone());
        s.lambda = self.objective.lambda;
        s.budget = self.objective.budget;
        s.beta = self.objective.beta.clone();
        s.confidence_z = self.objective.confidence_z;
        s.architecture = self.objective.architecture;
        s.hull_tol = self.hull.tol;
        s.solver_tol = self.solver.tol;
        s.validate()?;
        Ok(s)
    }

    /// The tracking experiment on the fleet's portfolio responses.
    pub fn adaptation(&self, fleet: &ReducedFleet) -> Result<AdaptationConfig> {
        let t = &self.tracking;
        let initial_y = tracking::portfolio_rows(fleet, t.partitions)?;
        let disturbance = t.disturbance_day.map(|day| Disturbance {
            day,
            new_y: tracking::disturb(&initial_y, t.disturbance_scale, t.disturbance_shift),
        });
        let schedule = tracking::reference_schedule(
            &initial_y,
            disturbance.as_ref(),
            t.days,
            t.reference_fill,
            t.excitation_floor,
            t.reference_perturbation,
            self.seed,
        )?;
        Ok(AdaptationConfig {
            initial_y,
            schedule,
            days: t.days,
            tau_adapt: t.tau_days,
            disturbance,
            model: MeasurementModel {
                epsilon_rel: t.noise_rel,
                seed: self.seed,
            },
            simplex: !t.unconstrained,
            excitation_floor: t.excitation_floor,
            cond_floor: t.cond_floor,
        })
    }
}

/// Per-class seed: SplitMix64 of the scenario seed and class index, kept
/// below 2^63 so it fits a TOML integer.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

/// Applies `dotted.path=value` overrides. Values are parsed as TOML and
/// fall back to a bare string; numeric segments index arrays.
pub fn apply_overrides(root: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let segments: Vec<&str> = key.trim().split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("override key `{key}` is malformed")));
        }
        set_path(root, &segments, value)
            .map_err(|msg| Error::Config(format!("override `{key}`: {msg}")))?;
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(
    node: &mut toml::Value,
    path: &[&str],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let (head, rest) = path.split_first().expect("non-empty path");
    match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value);
                return Ok(());
            }
            let child = t
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            set_path(child, rest, value)
        }
        toml::Value::Array(a) => {
            let i: usize = head
                .parse()
                .map_err(|_| format!("`{head}` is not an array index"))?;
            let len = a.len();
            let slot = a
                .get_mut(i)
                .ok_or_else(|| format!("index {i} out of range for {len} entries"))?;
            if rest.is_empty() {
                *slot = value;
                Ok(())
            } else {
                set_path(slot, rest, value)
            }
        }
        _ => Err(format!("`{head}` is below a scalar")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "tiny"
seed = 3

[objective]
budget = 40.0

[[classes]]
name = "tstat"
n_total = 100
archetype = "thermostat"
n_sequences = 4

[[classes]]
name = "bat"
n_total = 10
archetype = "battery"
unit_dispatch_cost = 0.2
"#;

    #[test]
    fn parse_and_resolve() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.objective.lambda, 0.1);
        let resolved = cfg.resolve(Path::new(".")).unwrap();
        let c0 = resolved.classes[0].unit_dispatch_cost.unwrap();
        assert!((0.15..=0.5).contains(&c0));
        assert_eq!(resolved.classes[1].unit_dispatch_cost, Some(0.2));
        assert!(resolved
            .classes
            .iter()
            .all(|c| c.seed.is_some() && c.rho == Some(0.1)));
        let again = ScenarioConfig::parse(&resolved.to_toml().unwrap()).unwrap();
        assert_eq!(again, resolved);
        assert_eq!(again.resolve(Path::new(".")).unwrap(), resolved);
        assert_eq!(resolved.scenario().unwrap(), again.scenario().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("budget = 40.0", "budget = 40.0\nbudgett = 1");
        assert!(matches!(ScenarioConfig::parse(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(ScenarioConfig::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_settings_rejected() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.tracking.disturbance_day, None);
        assert!(cfg.validate().is_ok());
        for (key, value) in [
            ("objective.lambda", "-0.1"),
            ("objective.rho", "1.5"),
            ("objective.budget", "nan"),
            ("solver.tol", "0.0"),
            ("costs.min", "0.9"),
            ("tracking.days", "0"),
            ("tracking.disturbance_day", "60"),
            ("tracking.excitation_floor", "0.5"),
            ("classes.0.rho", "-1.0"),
        ] {
            let mut v: toml::Value = toml::from_str(MINIMAL).unwrap();
            apply_overrides(&mut v, &[format!("{key}={value}")]).unwrap();
            let cfg = ScenarioConfig::from_value(v).unwrap();
            assert!(
                matches!(cfg.resolve(Path::new(".")), Err(Error::Config(_))),
                "{key}={value}"
            );
        }
    }

    #[test]
    fn infinite_budget_round_trips() {
        let text = MINIMAL.replace("budget = 40.0", "budget = inf");
        let cfg = ScenarioConfig::parse(&text).unwrap();
        assert!(cfg.objective.budget.is_infinite());
        let back = ScenarioConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert!(back.objective.budget.is_infinite());
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let mut v: toml::Value = toml::from_str(MINIMAL).unwrap();
        apply_overrides(
            &mut v,
            &[
                "objective.lambda=0.5".into(),
                "classes.1.n_total=20".into(),
                "objective.architecture=layered".into(),
                "tracking.days=10".into(),
            ],
        )
        .unwrap();
        let cfg = ScenarioConfig::from_value(v).unwrap();
        assert_eq!(cfg.objective.lambda, 0.5);
        assert_eq!(cfg.classes[1].n_total, 20.0);
        assert_eq!(cfg.objective.architecture, Architecture::Layered);
        assert_eq!(cfg.tracking.days, 10);

        let mut v: toml::Value = toml::from_str(MINIMAL).unwrap();
        assert!(apply_overrides(&mut v, &["classes.7.n_total=1".into()]).is_err());
        assert!(apply_overrides(&mut v, &["noequals".into()]).is_err());
        apply_overrides(&mut v, &["objective.typo=1".into()]).unwrap();
        assert!(ScenarioConfig::from_value(v).is_err());
    }

    #[test]
    fn class_source_must_be_unique() {
        let text = MINIMAL.replace("archetype = \"battery\"", "");
        let cfg = ScenarioConfig::parse(&text).unwrap();
        assert!(matches!(cfg.resolve(Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }
}
