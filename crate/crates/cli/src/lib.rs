//! `vpp` command line: scenario loading, the five commands, and the
//! mapping from library errors to exit codes.

pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};
use vpp_core::dispatch::Bound;
use vpp_core::ensemble;
use vpp_core::envelope::{self, EnvelopePoint, ReducedFleet};
use vpp_core::scenario::ScenarioConfig;
use vpp_core::tracking;
use vpp_core::{Error, Result};

use output::{file_stem, OutDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";
pub const RUN_SUMMARY: &str = "run_summary.json";

#[derive(Debug, Parser)]
#[command(
    name = "vpp",
    version,
    about = "Virtual power plant flexibility and tracking simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Scenario file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub scenario: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Replaces the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Scenario override, e.g. `--set objective.budget=250`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// One-sided confidence multiplier for the envelope bands.
    #[arg(long, global = true)]
    pub z: Option<f64>,

    /// Fit tracking weights without the simplex constraint.
    #[arg(long, global = true)]
    pub unconstrained: bool,

    /// Record wall-clock timings in the run summary. Makes the summary
    /// differ between otherwise identical runs.
    #[arg(long, global = true)]
    pub timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write each class's ensemble CSV.
    Generate,
    /// Reduce each ensemble to its convex-hull vertices.
    Hull,
    /// Hourly performance envelope for the configured architecture.
    Envelope,
    /// Centralized against layered envelopes, hour by hour.
    Compare,
    /// Day-by-day tracking with model adaptation.
    Track,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Hull => "hull",
            Command::Envelope => "envelope",
            Command::Compare => "compare",
            Command::Track => "track",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Dimension { .. }
        | Error::Parse { .. }
        | Error::Constraint(_) => EXIT_CONFIG,
        Error::Infeasible { .. } | Error::NonConvex { .. } | Error::NoConvergence { .. } => {
            EXIT_SOLVER
        }
        Error::Io(_) => EXIT_IO,
        Error::Csv(e) if e.is_io_error() => EXIT_IO,
        Error::Csv(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// Loads the scenario with every command-line override applied, and its
/// resolved form.
pub fn load_config(cli: &Cli) -> Result<(ScenarioConfig, ScenarioConfig)> {
    let path = cli
        .scenario
        .as_deref()
        .ok_or_else(|| Error::Config("--scenario is required".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        if seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "--seed must be at most {}, got {seed}",
                i64::MAX
            )));
        }
        overrides.push(format!("seed={seed}"));
    }
    if let Some(z) = cli.z {
        if !(z.is_finite() && z >= 0.0) {
            return Err(Error::Config(format!(
                "--z must be finite and non-negative, got {z}"
            )));
        }
        overrides.push(format!("objective.confidence_z={z:?}"));
    }
    if cli.unconstrained {
        overrides.push("tracking.unconstrained=true".into());
    }
    let cfg = ScenarioConfig::load(path, &overrides)?;
    let base = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.canonicalize()?,
        _ => std::env::current_dir()?,
    };
    let resolved = cfg.resolve(&base)?;
    Ok((cfg, resolved))
}

/// Runs one command. Returns the line printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let (_, cfg) = load_config(cli)?;
    let mut out = OutDir::create(&cli.out)?;
    out.write_str(RESOLVED_CONFIG, &cfg.to_toml()?)?;
    let loaded = start.elapsed();

    let mut summary = Map::new();
    summary.insert("command".into(), json!(cli.command.name()));
    summary.insert("scenario".into(), json!(cfg.name));
    summary.insert("seed".into(), json!(cfg.seed));
    let message = match cli.command {
        Command::Generate => generate(&cfg, &mut out, &mut summary)?,
        Command::Hull => hull(&cfg, &mut out, &mut summary)?,
        Command::Envelope => envelope(&cfg, &mut out, &mut summary)?,
        Command::Compare => compare(&cfg, &mut out, &mut summary)?,
        Command::Track => track(&cfg, &mut out, &mut summary)?,
    };
    if cli.timings {
        summary.insert(
            "timings_ms".into(),
            json!({
                "load": loaded.as_secs_f64() * 1e3,
                "total": start.elapsed().as_secs_f64() * 1e3,
            }),
        );
    }
    let mut files: Vec<String> = out.written().to_vec();
    files.push(RUN_SUMMARY.into());
    summary.insert("files".into(), json!(files));
    let text = serde_json::to_string_pretty(&Value::Object(summary))
        .map_err(|e| Error::Internal(format!("serializing summary: {e}")))?;
    out.write_str(RUN_SUMMARY, &(text + "\n"))?;
    Ok(message)
}

fn generate(
    cfg: &ScenarioConfig,
    out: &mut OutDir,
    summary: &mut Map<String, Value>,
) -> Result<String> {
    let classes = cfg.build_classes()?;
    let mut rows = Vec::new();
    for class in &classes {
        let rel = format!("ensembles/{}.csv", file_stem(&class.name));
        out.write(&rel, |w| ensemble::write_ensemble(w, &class.pairs))?;
        rows.push(json!({
            "name": class.name,
            "n_total": class.n_total,
            "sequences": class.pairs.len(),
            "steps": class.steps(),
            "unit_dispatch_cost": class.unit_dispatch_cost,
            "rho": class.rho,
            "file": rel,
        }));
    }
    summary.insert("classes".into(), Value::Array(rows));
    Ok(format!(
        "wrote {} ensembles to {}",
        classes.len(),
        out_path(out)
    ))
}

fn hull(
    cfg: &ScenarioConfig,
    out: &mut OutDir,
    summary: &mut Map<String, Value>,
) -> Result<String> {
    let classes = cfg.build_classes()?;
    let fleet = ReducedFleet::new(&classes, cfg.hull.tol)?;
    let mut rows = Vec::new();
    for (class, (hull, verts)) in classes.iter().zip(fleet.hulls.iter().zip(&fleet.vertices)) {
        let rel = format!("hull/{}.csv", file_stem(&class.name));
        out.write(&rel, |w| ensemble::write_ensemble(w, verts))?;
        let worst = hull
            .certificates
            .iter()
            .map(|c| c.residual)
            .fold(0.0, f64::max);
        rows.push(json!({
            "name": class.name,
            "sequences": class.pairs.len(),
            "vertices": hull.vertex_indices.len(),
            "removed": hull.certificates.len(),
            "max_certificate_residual": worst,
            "file": rel,
        }));
    }
    out.write("hull/certificates.csv", |w| {
        writeln!(w, "class,control_id,residual,weights")?;
        for (class, hull) in classes.iter().zip(&fleet.hulls) {
            for cert in &hull.certificates {
                let weights: Vec<String> = cert.weights.iter().map(|x| x.to_string()).collect();
                writeln!(
                    w,
                    "{},{},{},{}",
                    class.name,
                    class.pairs[cert.point].control,
                    cert.residual,
                    weights.join(";")
                )?;
            }
        }
        Ok(())
    })?;
    let kept: usize = fleet.hulls.iter().map(|h| h.vertex_indices.len()).sum();
    let total: usize = classes.iter().map(|c| c.pairs.len()).sum();
    summary.insert("classes".into(), Value::Array(rows));
    Ok(format!(
        "kept {kept} of {total} load shapes as hull vertices"
    ))
}

fn point_json(p: &EnvelopePoint) -> Value {
    json!({
        "mean_kw": p.mean_kw,
        "conf_kw": p.conf_kw,
        "variance_kw2": p.variance_kw2,
        "objective": p.objective,
        "binding": p.binding,
        "dispatched_by_class": p.dispatched_by_class,
        "kkt_residual": p.kkt_residual,
        "rounded_objective": p.rounded_objective,
        "rounded_violations": p.rounded_violations,
    })
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn envelope(
    cfg: &ScenarioConfig,
    out: &mut OutDir,
    summary: &mut Map<String, Value>,
) -> Result<String> {
    let scenario = cfg.scenario()?;
    let report = envelope::compute_envelope(&scenario)?;
    out.write("envelope.csv", |w| envelope::write_envelope_csv(w, &report))?;
    let hours: Vec<Value> = report
        .steps
        .iter()
        .map(|s| json!({ "hour": s.hour, "up": point_json(&s.up), "down": point_json(&s.down) }))
        .collect();
    summary.insert("architecture".into(), json!(report.architecture.label()));
    summary.insert("confidence_z".into(), json!(report.confidence_z));
    summary.insert("budget".into(), finite_or_null(scenario.budget));
    summary.insert("beta".into(), json!(report.beta));
    summary.insert("vertex_counts".into(), json!(report.vertex_counts));
    summary.insert("hours".into(), Value::Array(hours));
    let peak_up = report
        .steps
        .iter()
        .map(|s| s.up.mean_kw)
        .fold(f64::NEG_INFINITY, f64::max);
    let peak_down = report
        .steps
        .iter()
        .map(|s| s.down.mean_kw)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "{} envelope: up to {peak_up:.1} kW, down to {peak_down:.1} kW",
        report.architecture
    ))
}

fn compare(
    cfg: &ScenarioConfig,
    out: &mut OutDir,
    summary: &mut Map<String, Value>,
) -> Result<String> {
    let scenario = cfg.scenario()?;
    let cmp = envelope::compare_architectures(&scenario)?;
    out.write("comparison.csv", |w| {
        envelope::write_comparison_csv(w, &cmp)
    })?;
    out.write("comparison_plot.csv", |w| {
        envelope::write_comparison_plot(w, &cmp)
    })?;
    let rows: Vec<Value> = cmp
        .rows
        .iter()
        .map(|r| {
            json!({
                "hour": r.hour,
                "bound": r.bound.label(),
                "centralized_objective": r.centralized.objective,
                "layered_objective": r.layered.objective,
                "objective_delta": r.objective_delta,
                "centralized_binding": r.centralized.binding,
                "layered_binding": r.layered.binding,
                "centralized_dominates": r.centralized_dominates,
            })
        })
        .collect();
    summary.insert("verdict".into(), json!(cmp.verdict()));
    summary.insert("all_dominate".into(), json!(cmp.all_dominate()));
    summary.insert("min_objective_delta".into(), json!(cmp.min_delta()));
    summary.insert("max_objective_delta".into(), json!(cmp.max_delta()));
    summary.insert("tolerance".into(), json!(cmp.tolerance));
    summary.insert("confidence_z".into(), json!(cmp.centralized.confidence_z));
    summary.insert("budget".into(), finite_or_null(scenario.budget));
    summary.insert("beta".into(), json!(cmp.layered.beta));
    summary.insert("rows".into(), Value::Array(rows));
    let violations = cmp.rows.iter().filter(|r| !r.centralized_dominates).count();
    let up_gain: f64 = cmp
        .rows
        .iter()
        .filter(|r| r.bound == Bound::Up)
        .map(|r| r.objective_delta)
        .sum();
    if violations > 0 {
        log::warn!("{violations} hour/bound pairs where layered beats centralized");
    }
    Ok(format!(
        "{}: objective delta (layered - centralized) in [{:.6}, {:.6}], summed over up-hours {:.3}",
        cmp.verdict(),
        cmp.min_delta(),
        cmp.max_delta(),
        up_gain
    ))
}

fn track(
    cfg: &ScenarioConfig,
    out: &mut OutDir,
    summary: &mut Map<String, Value>,
) -> Result<String> {
    let scenario = cfg.scenario()?;
    let fleet = ReducedFleet::new(&scenario.classes, scenario.hull_tol)?;
    let acfg = cfg.adaptation(&fleet)?;
    let log = tracking::run_adaptation(&acfg)?;
    out.write("tracking_log.csv", |w| tracking::write_log_csv(w, &log))?;
    out.write("tracking_plot.csv", |w| tracking::write_plot_csv(w, &log))?;

    let t = &cfg.tracking;
    summary.insert("days".into(), json!(t.days));
    summary.insert("tau_days".into(), json!(t.tau_days));
    summary.insert("noise_rel".into(), json!(t.noise_rel));
    summary.insert("partitions".into(), json!(t.partitions));
    summary.insert("simplex".into(), json!(log.simplex));
    summary.insert("disturbance_day".into(), json!(t.disturbance_day));
    summary.insert("rank_deficient_days".into(), json!(log.rank_deficient_days));
    summary.insert(
        "reference".into(),
        json!({
            "emphasized_partition": "day mod partitions",
            "fill": t.reference_fill,
            "excitation_floor": t.excitation_floor,
            "perturbation_rel": t.reference_perturbation,
        }),
    );
    let last = log.days.last();
    summary.insert(
        "final_model_error_rel".into(),
        json!(last.map(|r| r.model_error_rel)),
    );
    summary.insert(
        "final_tracking_rmse_kw".into(),
        json!(last.map(|r| r.tracking_rmse_kw)),
    );

    let lag = (3.0 * t.tau_days).round() as usize;
    let recovery = t.disturbance_day.and_then(|d| log.recovery(d, lag));
    let message = match recovery {
        Some(r) => {
            summary.insert(
                "recovery".into(),
                json!({
                    "change_day": r.change_day,
                    "check_day": r.check_day,
                    "peak_model_error_rel": r.peak_error,
                    "model_error_rel": r.error_after,
                    "model_error_ratio": r.error_ratio,
                    "rmse_before_kw": r.rmse_before_kw,
                    "rmse_after_kw": r.rmse_after_kw,
                    "rmse_ratio": r.rmse_ratio,
                }),
            );
            format!(
                "day {}: model error {:.4} ({:.1}% of day-{} peak), tracking RMSE {:.2} kW ({:.2}x day {})",
                r.check_day,
                r.error_after,
                100.0 * r.error_ratio,
                r.change_day,
                r.rmse_after_kw,
                r.rmse_ratio,
                r.change_day - 1
            )
        }
        None => format!(
            "{} days tracked, final model error {:.4}",
            log.days.len(),
            last.map_or(0.0, |r| r.model_error_rel)
        ),
    };
    Ok(message)
}

fn out_path(out: &OutDir) -> String {
    out.root().display().to_string()
}
