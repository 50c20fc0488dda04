//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpp_core::dispatch::{
    apply_architecture, build_multi_type_qp, partition_variance, solve_qp, Architecture, Bound,
    GroupMode, ObjectiveParams, QpProblem,
};
use vpp_core::ensemble::{scale_mean, ConditionKey, DerClass, LoadShapePair};
use vpp_core::envelope::{compare_architectures, ReducedFleet};
use vpp_core::hull::{minkowski_sum, reduce_to_hull, DEFAULT_TOL};
use vpp_core::scenario::ScenarioConfig;
use vpp_core::tracking::{
    filter_step, run_adaptation, FilterCoefficients, ResponseMatrix, TrackingState,
};
use vpp_oracles::{
    bilinear_step_response, covariance_sum, hull_membership_gap, objective, qp_by_enumeration,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/paper-vii.toml")
}

fn bundled(overrides: &[String]) -> ScenarioConfig {
    let path = scenario_path();
    let cfg = ScenarioConfig::load(&path, overrides).expect("bundled scenario loads");
    cfg.resolve(path.parent().unwrap())
        .expect("bundled scenario resolves")
}

fn variance_oracle() -> Outcome {
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for n in 1..=50 {
        for rho in [0.0, 0.1, 0.5, 1.0] {
            for sigma2 in [0.5, 3.0] {
                let closed = partition_variance(n as f64, rho, sigma2);
                let brute = covariance_sum(n, rho, sigma2);
                worst = worst.max((closed - brute).abs() / brute.abs());
                cases += 1;
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("{cases} cases, max relative error {worst:.1e}"),
    )
}

/// Random 2 or 3 variable dispatch program: one or two classes, with the
/// fleet totals either fixed or relaxed under a shared or split budget.
fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let vars = rng.random_range(2..=3);
    let split: Vec<usize> = if vars == 3 && rng.random_bool(0.5) {
        vec![2, 1]
    } else if rng.random_bool(0.3) {
        vec![1, vars - 1]
    } else {
        vec![vars]
    };
    let classes: Vec<DerClass> = split
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            let pairs = (0..m)
                .map(|j| {
                    let mean = if rng.random_bool(0.15) {
                        0.0
                    } else {
                        rng.random_range(-5.0..5.0)
                    };
                    LoadShapePair::new(
                        format!("s{j}"),
                        ConditionKey::default(),
                        vec![mean],
                        vec![rng.random_range(0.0..3.0)],
                    )
                    .unwrap()
                })
                .collect();
            let n_total = rng.random_range(1.0..500.0);
            DerClass::new(
                format!("c{c}"),
                n_total,
                rng.random_range(0.15..0.5),
                rng.random_range(0.0..1.0),
                pairs,
            )
            .unwrap()
        })
        .collect();
    let vertices: Vec<Vec<LoadShapePair>> = classes.iter().map(|c| c.pairs.clone()).collect();
    let bound = if rng.random_bool(0.5) {
        Bound::Up
    } else {
        Bound::Down
    };
    let mut params = ObjectiveParams::new(bound, rng.random_range(0.0..1.0), 0);
    params.confidence_z = 0.0;
    let base = build_multi_type_qp(&classes, &vertices, &params).unwrap();
    let costs: Vec<f64> = classes.iter().map(|c| c.unit_dispatch_cost).collect();
    match rng.random_range(0..3) {
        0 => base,
        1 => apply_architecture(
            &base,
            Architecture::Centralized,
            rng.random_range(0.0..150.0),
            None,
            &costs,
        )
        .unwrap(),
        _ => {
            let w: f64 = rng.random_range(0.1..0.9);
            let beta = if classes.len() == 2 {
                vec![w, 1.0 - w]
            } else {
                vec![1.0]
            };
            apply_architecture(
                &base,
                Architecture::Layered,
                rng.random_range(0.0..150.0),
                Some(&beta),
                &costs,
            )
            .unwrap()
        }
    }
}

fn rows_of(p: &QpProblem) -> (Vec<(Vec<f64>, f64)>, Vec<(Vec<f64>, f64)>) {
    let n = p.len();
    let mut eq = Vec::new();
    let mut le: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|j| {
            (
                (0..n).map(|i| if i == j { -1.0 } else { 0.0 }).collect(),
                0.0,
            )
        })
        .collect();
    for g in &p.groups {
        let row = (0..n)
            .map(|i| if g.vars.contains(&i) { 1.0 } else { 0.0 })
            .collect();
        match g.mode {
            GroupMode::Equality => eq.push((row, g.rhs)),
            GroupMode::AtMost => le.push((row, g.rhs)),
        }
    }
    for b in &p.budget_rows {
        le.push((b.coeffs.clone(), b.rhs));
    }
    (eq, le)
}

/// Best objective over a grid of the feasible set. Equality rows are
/// honored by solving for the last variable of each group.
fn grid_minimum(p: &QpProblem, eq: &[(Vec<f64>, f64)], le: &[(Vec<f64>, f64)]) -> f64 {
    let n = p.len();
    let steps = 120;
    let hi: Vec<f64> = (0..n)
        .map(|j| {
            p.groups
                .iter()
                .find(|g| g.vars.contains(&j))
                .map_or(0.0, |g| g.rhs)
        })
        .collect();
    let dependent: Vec<Option<usize>> = (0..n)
        .map(|j| {
            p.groups
                .iter()
                .find(|g| g.mode == GroupMode::Equality && g.vars.end - 1 == j)
                .map(|g| g.vars.start)
        })
        .collect();
    let free: Vec<usize> = (0..n).filter(|&j| dependent[j].is_none()).collect();
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; free.len()];
    loop {
        let mut x = vec![0.0; n];
        for (slot, &j) in free.iter().enumerate() {
            x[j] = hi[j] * idx[slot] as f64 / steps as f64;
        }
        for j in 0..n {
            if let Some(start) = dependent[j] {
                x[j] = hi[j] - (start..j).map(|i| x[i]).sum::<f64>();
            }
        }
        let ok = le
            .iter()
            .all(|(a, b)| a.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() <= b + 1e-9)
            && eq.iter().all(|(a, b)| {
                (a.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() - b).abs() <= 1e-9
            });
        if ok {
            best = best.min(objective(&p.linear, &p.quadratic_diag, &x));
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= steps {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn qp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_kkt) = (0.0_f64, 0.0_f64);
    let mut grid_beaten = 0;
    let mut failures = 0;
    for _ in 0..200 {
        let p = random_qp(&mut rng);
        let (eq, le) = rows_of(&p);
        let Some((_, exact)) = qp_by_enumeration(&p.linear, &p.quadratic_diag, &eq, &le) else {
            failures += 1;
            continue;
        };
        let grid = grid_minimum(&p, &eq, &le);
        if grid < exact - 1e-6 * (1.0 + exact.abs()) {
            grid_beaten += 1;
        }
        match solve_qp(&p, 1e-8) {
            Ok(plan) => {
                worst_gap = worst_gap.max((plan.objective - exact).abs());
                worst_kkt = worst_kkt.max(plan.kkt.max());
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        failures == 0 && grid_beaten == 0 && worst_gap <= 1e-4 && worst_kkt <= 1e-8,
        format!(
            "200 instances, max |objective - oracle| {worst_gap:.1e}, max KKT residual {worst_kkt:.1e}, \
             {failures} solve failures, oracle beaten on grid {grid_beaten} times"
        ),
    )
}

fn random_cloud(rng: &mut ChaCha8Rng, d: usize, max_points: usize) -> Vec<Vec<f64>> {
    let outer = rng.random_range(1..=max_points.min(30));
    let mut pts: Vec<Vec<f64>> = (0..outer)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let inner = rng.random_range(0..=max_points - outer);
    for _ in 0..inner {
        if rng.random_bool(0.1) {
            let copy = pts[rng.random_range(0..pts.len())].clone();
            pts.push(copy);
            continue;
        }
        let w: Vec<f64> = (0..outer).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        pts.push(
            (0..d)
                .map(|k| (0..outer).map(|i| pts[i][k] * w[i] / s).sum())
                .collect(),
        );
    }
    pts
}

fn hull_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_cert, mut min_gap) = (0.0_f64, f64::INFINITY);
    let (mut bad_certs, mut bad_kept, mut removed) = (0, 0, 0);
    for i in 0..100 {
        let d = [2, 3, 24][i % 3];
        let pts = random_cloud(&mut rng, d, 60);
        let hull = reduce_to_hull(&pts, DEFAULT_TOL).unwrap();
        let kept: Vec<Vec<f64>> = hull
            .vertex_indices
            .iter()
            .map(|&j| pts[j].clone())
            .collect();
        removed += hull.certificates.len();
        if hull.vertex_indices.len() + hull.certificates.len() != pts.len() {
            bad_certs += 1;
        }
        for cert in &hull.certificates {
            let target = &pts[cert.point];
            let residual = (0..d)
                .map(|k| {
                    (kept
                        .iter()
                        .zip(&cert.weights)
                        .map(|(v, w)| v[k] * w)
                        .sum::<f64>()
                        - target[k])
                        .powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let convex = cert.weights.iter().all(|&w| w >= -1e-12)
                && (cert.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
            worst_cert = worst_cert.max(residual);
            if !convex || residual > 1e-8 {
                bad_certs += 1;
            }
        }
        for pos in 0..kept.len() {
            let others: Vec<Vec<f64>> = kept
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != pos)
                .map(|(_, v)| v.clone())
                .collect();
            if others.is_empty() {
                continue;
            }
            let gap = hull_membership_gap(&others, &kept[pos]);
            min_gap = min_gap.min(gap);
            if gap <= 1e-9 {
                bad_kept += 1;
            }
        }
    }
    outcome(
        bad_certs == 0 && bad_kept == 0,
        format!(
            "100 sets, {removed} removals, max certificate residual {worst_cert:.1e}, \
             {bad_certs} bad certificates, {bad_kept} kept points inside the others (min LP gap {min_gap:.1e})"
        ),
    )
}

fn minkowski_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vertices = |pts: &[Vec<f64>]| -> Vec<Vec<f64>> {
        reduce_to_hull(pts, DEFAULT_TOL)
            .unwrap()
            .vertex_indices
            .iter()
            .map(|&i| pts[i].clone())
            .collect()
    };
    let mut mismatches = 0;
    let mut total_vertices = 0;
    for _ in 0..50 {
        let a = random_cloud(&mut rng, 2, 20);
        let b = random_cloud(&mut rng, 2, 20);
        let full = vertices(&minkowski_sum(&a, &b).unwrap());
        let reduced = vertices(&minkowski_sum(&vertices(&a), &vertices(&b)).unwrap());
        total_vertices += full.len();
        let close =
            |p: &Vec<f64>, q: &Vec<f64>| p.iter().zip(q).all(|(x, y)| (x - y).abs() <= 1e-9);
        let same = full.len() == reduced.len()
            && full.iter().all(|p| reduced.iter().any(|q| close(p, q)))
            && reduced.iter().all(|q| full.iter().any(|p| close(p, q)));
        if !same {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("50 instances, {total_vertices} sum vertices, {mismatches} mismatches"),
    )
}

fn dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut variants = vec![Vec::new()];
    for _ in 0..20 {
        variants.push(vec![
            format!("seed={}", rng.random_range(0..1_000_000u64)),
            format!("objective.budget={:?}", rng.random_range(50.0..1500.0_f64)),
            format!("objective.lambda={:?}", rng.random_range(0.0..0.5_f64)),
            format!("objective.rho={:?}", rng.random_range(0.0..0.5_f64)),
        ]);
    }
    let (mut worst, mut violations, mut rows) = (f64::NEG_INFINITY, 0, 0);
    for overrides in &variants {
        let cmp = compare_architectures(&bundled(overrides).scenario().unwrap()).unwrap();
        for r in &cmp.rows {
            let excess = r.centralized.objective - r.layered.objective;
            worst = worst.max(excess);
            if excess > 1e-6 {
                violations += 1;
            }
            rows += 1;
        }
    }
    let mut inf_worst = 0.0_f64;
    for overrides in [vec![], variants[1].clone(), variants[2].clone()] {
        let mut o = overrides;
        o.push("objective.budget=inf".into());
        let cmp = compare_architectures(&bundled(&o).scenario().unwrap()).unwrap();
        for r in &cmp.rows {
            inf_worst = inf_worst.max((r.centralized.objective - r.layered.objective).abs());
        }
    }
    outcome(
        violations == 0 && inf_worst <= 1e-6,
        format!(
            "21 scenarios x 48 hour/bound rows ({rows}), max centralized - layered {worst:.2e}, \
             {violations} violations; unlimited budget max |difference| {inf_worst:.1e}"
        ),
    )
}

fn filter_identities() -> Outcome {
    let mut dc_worst = 0.0_f64;
    let mut closed_form_worst = 0.0_f64;
    for tau in [0.5, 1.0, 7.0, 30.0, 365.0] {
        let c = FilterCoefficients::new(tau, 1.0).unwrap();
        dc_worst = dc_worst.max((2.0 * c.b / (1.0 - c.a) - 1.0).abs());
        // At rest on a constant input the output must stay there.
        let (mut y, mut from_zero, mut prev) = (1.0, 0.0, 0.0);
        for day in 0..(10.0 * tau).ceil() as usize {
            y = c.apply(y, 1.0, 1.0);
            from_zero = c.apply(from_zero, 1.0, prev);
            prev = 1.0;
            closed_form_worst =
                closed_form_worst.max((from_zero - bilinear_step_response(tau, day)).abs());
        }
        dc_worst = dc_worst.max((y - 1.0).abs());
    }

    let y = ResponseMatrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
    let mut state = TrackingState::zeroed(&y, 7.0).unwrap();
    let unit = nalgebra::DVector::from_element(1, 1.0);
    let mut crossing = None;
    for day in 0..30 {
        state = filter_step(&state, y.matrix(), &unit).unwrap();
        if crossing.is_none() && state.lam_filt[0] >= 1.0 - (-1.0f64).exp() {
            crossing = Some(day);
        }
    }
    let crossed_in_window = crossing.is_some_and(|d| (6..=8).contains(&d));
    outcome(
        dc_worst <= 1e-12 && closed_form_worst <= 1e-12 && crossed_in_window,
        format!(
            "DC gain error {dc_worst:.1e}, step response vs closed form {closed_form_worst:.1e}, \
             63% crossing on day {crossing:?} for tau 7"
        ),
    )
}

fn adaptation() -> Outcome {
    let cfg = bundled(&[]);
    let fleet = ReducedFleet::new(&cfg.build_classes().unwrap(), cfg.hull.tol).unwrap();
    let acfg = cfg.adaptation(&fleet).unwrap();
    let log = run_adaptation(&acfg).unwrap();
    let again = run_adaptation(&cfg.adaptation(&fleet).unwrap()).unwrap();
    let deterministic = log == again;
    let day = cfg
        .tracking
        .disturbance_day
        .expect("bundled scenario has a disturbance");
    let r = log.recovery(day, 21).unwrap();
    let before = log.days[day - 1].model_error_rel;
    let spike = r.peak_error > 10.0 * before
        && log.days[day..]
            .iter()
            .all(|d| d.model_error_rel <= r.peak_error);
    outcome(
        deterministic && spike && r.error_ratio < 0.1 && r.rmse_ratio <= 2.0,
        format!(
            "day {} error {:.4} -> peak {:.4} on day {day}; day {} error {:.4} ({:.1}% of peak); \
             RMSE day {} {:.1} kW, day {} {:.1} kW ({:.2}x); deterministic {deterministic}",
            day - 1,
            before,
            r.peak_error,
            r.check_day,
            r.error_after,
            100.0 * r.error_ratio,
            day - 1,
            r.rmse_before_kw,
            r.check_day,
            r.rmse_after_kw,
            r.rmse_ratio
        ),
    )
}

fn monotone_and_linear() -> Outcome {
    let base = bundled(&[]);
    let mut doubled_overrides = Vec::new();
    for (i, c) in base.classes.iter().enumerate() {
        doubled_overrides.push(format!("classes.{i}.n_total={:?}", 2.0 * c.n_total));
    }
    let doubled = bundled(&doubled_overrides);
    let a = compare_architectures(&base.scenario().unwrap()).unwrap();
    let b = compare_architectures(&doubled.scenario().unwrap()).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        worst = worst.max(y.centralized.objective - x.centralized.objective);
        worst = worst.max(y.layered.objective - x.layered.objective);
    }

    let mut inexact = 0;
    let mut additive_worst = 0.0_f64;
    for class in base.scenario().unwrap().classes {
        for pair in &class.pairs {
            for alpha in [0.0, 0.25, 0.5, 1.0, 1.7, 3.0] {
                let scaled = scale_mean(pair, alpha).unwrap();
                if scaled.iter().zip(&pair.mean).any(|(s, m)| *s != alpha * m) {
                    inexact += 1;
                }
                let left = scale_mean(pair, alpha + 0.5).unwrap();
                let half = scale_mean(pair, 0.5).unwrap();
                for ((l, s), h) in left.iter().zip(&scaled).zip(&half) {
                    let scale = l.abs().max(f64::MIN_POSITIVE);
                    additive_worst = additive_worst.max((l - (s + h)).abs() / scale);
                }
            }
        }
    }
    outcome(
        worst <= 1e-6 && inexact == 0 && additive_worst <= 4.0 * f64::EPSILON,
        format!(
            "doubling fleets changes hourly objectives by at most {worst:+.2e}; \
             scale_mean exact mismatches {inexact}, additivity error {additive_worst:.1e}"
        ),
    )
}

fn run_binary(cmd: &str, out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_vpp"))
        .args([
            cmd,
            "--scenario",
            scenario_path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "2024",
        ])
        .output()
        .is_ok_and(|o| o.status.success())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for cmd in ["compare", "track"] {
        let (a, b) = (
            dir.path().join(format!("{cmd}-1")),
            dir.path().join(format!("{cmd}-2")),
        );
        if !(run_binary(cmd, &a) && run_binary(cmd, &b)) {
            ok = false;
            details.push(format!("{cmd} failed to run"));
            continue;
        }
        let (ta, tb) = (tree(&a), tree(&b));
        let same = ta == tb;
        ok &= same && !ta.is_empty();
        details.push(format!(
            "{cmd}: {} files {}",
            ta.len(),
            if same { "identical" } else { "differ" }
        ));
    }
    outcome(ok, details.join(", "))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        (
            "variance oracle equivalence",
            Duration::from_secs(5),
            variance_oracle,
        ),
        ("QP correctness", Duration::from_secs(30), qp_correctness),
        (
            "hull soundness and minimality",
            Duration::from_secs(60),
            hull_soundness,
        ),
        (
            "Minkowski property",
            Duration::from_secs(10),
            minkowski_property,
        ),
        (
            "architecture dominance",
            Duration::from_secs(120),
            dominance,
        ),
        (
            "filter identities",
            Duration::from_secs(1),
            filter_identities,
        ),
        ("adaptation experiment", Duration::from_secs(60), adaptation),
        (
            "monotonicity and scaling",
            Duration::from_secs(60),
            monotone_and_linear,
        ),
        (
            "end-to-end determinism",
            Duration::from_secs(120),
            end_to_end_determinism,
        ),
    ];
    println!("\nrunning {} acceptance criteria", criteria.len());
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let passed = result.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {} {}: {} ({}; {:.2} s of {} s{})",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed\n",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
