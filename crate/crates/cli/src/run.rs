use fallball::cone::{
    certificate, dimension_curve, neutral_invariant_checks, neutral_space_h, restrict_to_velocity_orthogonal,
    strict_invariance_scan, Direction, Segment,
};
use fallball::flow::{advance_degenerate, Budget, Flow};
use fallball::lyapunov::{estimate_spectrum, zero_exponent_count_with, LyapunovEstimate, ThresholdRule, ZeroCount};
use fallball::state::{is_degenerate, sample_state, total_energy};
use fallball::{Error, MassProfile, OrderingClass, PhaseState};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{derive_seed, ExperimentConfig, Mode};
use crate::error::{run_exit_code, status_name, CliError};
use crate::output::{fmt, RunDir};

pub fn run_mode(mode: Mode, cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    match mode {
        Mode::Simulate => simulate(cfg, out),
        Mode::Lyapunov => lyapunov(cfg, out),
        Mode::Cone => cone(cfg, out),
        Mode::Neutral => neutral(cfg, out),
        Mode::Sweep => sweep(cfg, out),
        Mode::DegenerateDemo => degenerate_demo(cfg, out),
    }
}

/// The configured initial state at its own energy, or a sample on the `h0` shell.
fn initial_state(cfg: &ExperimentConfig, mp: &MassProfile, seed: u64) -> Result<PhaseState, CliError> {
    match &cfg.initial {
        Some(init) => {
            let h = total_energy(mp, &init.q, &init.v)?;
            PhaseState::new(mp, init.q.clone(), init.v.clone(), h)
                .map_err(|e| CliError::Config(format!("field `initial`: {e}")))
        }
        None => Ok(sample_state(mp, cfg.h0, seed)?),
    }
}

fn refuse_degenerate(state: &PhaseState) -> Result<(), CliError> {
    let d = is_degenerate(state);
    if d.degenerate {
        return Err(CliError::DegenerateRefusal { k: d.k });
    }
    Ok(())
}

fn point_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    if cfg.initial.is_some() {
        return vec![cfg.seed];
    }
    (0..cfg.budget.samples as u64).map(|i| derive_seed(cfg.seed, i)).collect()
}

fn simulate(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mp = cfg.mass_profile()?;
    let state = initial_state(cfg, &mp, cfg.seed)?;
    refuse_degenerate(&state)?;
    out.diagnostic("initial_q", &state.q());
    out.diagnostic("initial_v", &state.v());
    out.diagnostic("energy", &state.energy_target());

    let mut sink = out.events(cfg.output.format, mp.n())?;
    let mut flow = Flow::new(&mp, state, 0.0, cfg.flow_config())?;
    let max_events = cfg.budget.max_events.unwrap_or(usize::MAX);
    let max_time = cfg.budget.max_time.unwrap_or(f64::INFINITY);
    let mut written = 0usize;
    let result = (|| -> Result<(), CliError> {
        while written < max_events {
            let next = flow.peek()?;
            if flow.time() + next.dt >= max_time {
                flow.run_until(max_time, |_| {})?;
                break;
            }
            let e = flow.step()?;
            sink.write(&e)?;
            written += 1;
        }
        Ok(())
    })();
    sink.finish()?;
    out.diagnostic("flow", &flow.diagnostics());
    out.diagnostic("final_time", &flow.time());
    out.diagnostic("final_q", &flow.state().q());
    out.diagnostic("final_v", &flow.state().v());
    result
}

#[derive(Serialize)]
struct Calibration {
    masses: Vec<f64>,
    flow_exponents: Vec<f64>,
    max_abs_flow: f64,
    converged: bool,
}

#[derive(Serialize)]
struct SpectrumReport {
    masses: Vec<f64>,
    ordering: OrderingClass,
    seed: u64,
    n_returns: usize,
    qr_stride: usize,
    restarts: usize,
    mean_return_time: f64,
    map_exponents: Vec<f64>,
    flow_exponents: Vec<f64>,
    pairing_defect: f64,
    oscillation: Vec<f64>,
    converged: bool,
    calibration: Calibration,
    threshold_rule: ThresholdRule,
    threshold: f64,
    zero_count: ZeroCount,
    /// Smallest `|λ|` over the calibration maximum.
    separation_ratio: f64,
}

fn calibration(cfg: &ExperimentConfig, n: usize) -> Result<(LyapunovEstimate, Calibration), CliError> {
    let masses = vec![1.0; n];
    let mp = MassProfile::new(masses.clone())?;
    let state = sample_state(&mp, cfg.h0, cfg.seed)?;
    let est = estimate_spectrum(&mp, &state, &cfg.estimator(cfg.seed), &cfg.flow_config())?;
    let cal = Calibration {
        masses,
        flow_exponents: est.flow_exponents.clone(),
        max_abs_flow: est.max_abs_flow(),
        converged: est.converged(cfg.tolerances.convergence_rel, cfg.tolerances.convergence_abs),
    };
    Ok((est, cal))
}

fn classify(cfg: &ExperimentConfig, est: &LyapunovEstimate, cal: &Calibration) -> (ThresholdRule, ZeroCount) {
    let rule = ThresholdRule::Calibration {
        calibration_max: cal.max_abs_flow,
        factor: cfg.tolerances.zero_factor,
    };
    let t = &cfg.tolerances;
    let count = if cal.converged {
        zero_exponent_count_with(est, &rule, t.convergence_rel, t.convergence_abs)
    } else {
        ZeroCount::Inconclusive
    };
    (rule, count)
}

fn lyapunov(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mp = cfg.mass_profile()?;
    let state = initial_state(cfg, &mp, cfg.seed)?;
    refuse_degenerate(&state)?;
    let est = estimate_spectrum(&mp, &state, &cfg.estimator(cfg.seed), &cfg.flow_config())?;
    out.diagnostic("restarts", &est.restarts);

    let equal = mp.masses().iter().all(|&m| m == mp.masses()[0]);
    let cal = if equal {
        Calibration {
            masses: mp.masses().to_vec(),
            flow_exponents: est.flow_exponents.clone(),
            max_abs_flow: est.max_abs_flow(),
            converged: est.converged(cfg.tolerances.convergence_rel, cfg.tolerances.convergence_abs),
        }
    } else {
        calibration(cfg, mp.n())?.1
    };
    let (rule, zero_count) = classify(cfg, &est, &cal);
    let report = SpectrumReport {
        masses: mp.masses().to_vec(),
        ordering: mp.ordering(),
        seed: cfg.seed,
        n_returns: est.n_returns,
        qr_stride: cfg.budget.qr_stride,
        restarts: est.restarts,
        mean_return_time: est.mean_return_time,
        map_exponents: est.map_exponents.clone(),
        flow_exponents: est.flow_exponents.clone(),
        pairing_defect: est.pairing_defect,
        oscillation: est.oscillation(),
        converged: est.converged(cfg.tolerances.convergence_rel, cfg.tolerances.convergence_abs),
        threshold: rule.threshold(),
        threshold_rule: rule,
        zero_count,
        separation_ratio: est.min_abs_flow() / cal.max_abs_flow,
        calibration: cal,
    };
    out.write_json("spectrum.json", &report)?;

    let mut w = out.csv("history.csv")?;
    let k = est.map_exponents.len();
    let mut header = vec!["returns".to_string(), "t".to_string()];
    header.extend((1..=k).map(|i| format!("lambda_{i}")));
    w.write_record(&header)?;
    for row in &est.history {
        let mut rec = vec![row.returns.to_string(), fmt(row.t)];
        rec.extend(row.map_exponents.iter().map(|m| fmt(m * row.returns as f64 / row.t)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    if zero_count == ZeroCount::Inconclusive {
        return Err(CliError::Inconclusive(
            "exponent estimates did not settle within the return budget".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct DirectionSummary {
    direction: Direction,
    index: usize,
    entry_event: Option<usize>,
    min_delta_q: f64,
    q_final: f64,
}

#[derive(Serialize)]
struct ConePoint {
    index: usize,
    seed: u64,
    status: &'static str,
    error: Option<String>,
    strict_entry_event: Option<usize>,
    pure_h_entered: bool,
    pure_v_entered: bool,
    min_delta_q: f64,
    max_closed_form_mismatch: f64,
    directions: Vec<DirectionSummary>,
}

#[derive(Serialize)]
struct ConeReportFile {
    masses: Vec<f64>,
    ordering: OrderingClass,
    horizon: usize,
    points: usize,
    completed: usize,
    entered: usize,
    entry_fraction: f64,
    min_delta_q: f64,
    results: Vec<ConePoint>,
}

fn error_status(e: &Error) -> &'static str {
    status_name(run_exit_code(e))
}

fn cone(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mp = cfg.mass_profile()?;
    let seeds = point_seeds(cfg);
    let states: Vec<PhaseState> = seeds
        .iter()
        .map(|&s| initial_state(cfg, &mp, s))
        .collect::<Result<_, _>>()?;
    for s in &states {
        refuse_degenerate(s)?;
    }
    let flow_cfg = cfg.flow_config();
    let scans: Vec<_> = states
        .par_iter()
        .map(|s| strict_invariance_scan(&mp, s, cfg.budget.horizon, &flow_cfg))
        .collect();

    let mut results = Vec::with_capacity(scans.len());
    for (index, (scan, &seed)) in scans.iter().zip(&seeds).enumerate() {
        let point = match scan {
            Ok(scan) => ConePoint {
                index,
                seed,
                status: "ok",
                error: None,
                strict_entry_event: scan.strict_entry_event,
                pure_h_entered: scan.entered(Direction::PureH),
                pure_v_entered: scan.entered(Direction::PureV),
                min_delta_q: scan.directions.iter().map(|d| d.report.min_delta()).fold(f64::INFINITY, f64::min),
                max_closed_form_mismatch: scan
                    .directions
                    .iter()
                    .map(|d| d.report.max_closed_form_mismatch())
                    .fold(0.0, f64::max),
                directions: scan
                    .directions
                    .iter()
                    .map(|d| DirectionSummary {
                        direction: d.direction,
                        index: d.index,
                        entry_event: d.report.strict_entry_event,
                        min_delta_q: d.report.min_delta(),
                        q_final: d.report.q_final,
                    })
                    .collect(),
            },
            Err(e) => ConePoint {
                index,
                seed,
                status: error_status(e),
                error: Some(e.to_string()),
                strict_entry_event: None,
                pure_h_entered: false,
                pure_v_entered: false,
                min_delta_q: f64::NAN,
                max_closed_form_mismatch: f64::NAN,
                directions: Vec::new(),
            },
        };
        results.push(point);
    }

    if let Some(Ok(scan)) = scans.first() {
        let mut w = out.csv("cone_deltas.csv")?;
        w.write_record(["direction", "index", "event", "sigma", "delta_q", "closed_form"])?;
        for d in &scan.directions {
            let name = match d.direction {
                Direction::PureH => "pure_h",
                Direction::PureV => "pure_v",
            };
            for ev in &d.report.per_event_deltas {
                w.write_record([
                    name.to_string(),
                    d.index.to_string(),
                    ev.event.to_string(),
                    ev.sigma.to_string(),
                    fmt(ev.delta_q),
                    fmt(ev.closed_form),
                ])?;
            }
        }
        w.flush()?;
    }

    let completed = results.iter().filter(|p| p.status == "ok").count();
    let entered = results.iter().filter(|p| p.strict_entry_event.is_some()).count();
    let report = ConeReportFile {
        masses: mp.masses().to_vec(),
        ordering: mp.ordering(),
        horizon: cfg.budget.horizon,
        points: results.len(),
        completed,
        entered,
        entry_fraction: if completed > 0 { entered as f64 / completed as f64 } else { 0.0 },
        min_delta_q: results
            .iter()
            .filter(|p| p.status == "ok")
            .map(|p| p.min_delta_q)
            .fold(f64::INFINITY, f64::min),
        results,
    };
    out.diagnostic("completed", &report.completed);
    out.diagnostic("failed", &(report.points - report.completed));
    out.write_json("cone.json", &report)
}

#[derive(Serialize)]
struct NeutralPoint {
    index: usize,
    seed: u64,
    status: &'static str,
    error: Option<String>,
    events: usize,
    sigmas: Vec<usize>,
    dim_h: usize,
    dim_v: usize,
    /// Shortest prefix with a trivial neutral space.
    collapse_h: Option<usize>,
    collapse_v: Option<usize>,
    basis_h: Vec<Vec<f64>>,
    basis_v: Vec<Vec<f64>>,
    /// Invariant checks on the stretch before the first floor bounce.
    pre_floor_events: usize,
    pre_floor_dim: usize,
    pre_floor_invariants_passed: Option<bool>,
}

#[derive(Serialize)]
struct NeutralReportFile {
    masses: Vec<f64>,
    ordering: OrderingClass,
    horizon: usize,
    points: usize,
    completed: usize,
    collapsed_h: usize,
    collapsed_v: usize,
    results: Vec<NeutralPoint>,
}

struct NeutralRun {
    point: NeutralPoint,
    curve: Vec<(usize, usize, usize)>,
}

fn neutral_point(
    mp: &MassProfile,
    state: &PhaseState,
    cfg: &ExperimentConfig,
    index: usize,
    seed: u64,
) -> Result<NeutralRun, Error> {
    let seg = Segment::record(mp, state, cfg.budget.horizon, &cfg.flow_config())?;
    let seq = seg.sequence();
    let cert = certificate(mp, &seq)?;
    let curve = dimension_curve(mp, &seq.sigmas)?;
    let pre = seg.before_first_floor();
    let pre_basis = restrict_to_velocity_orthogonal(&neutral_space_h(mp, &pre.sequence().sigmas)?, state.v());
    let invariants = if pre_basis.is_empty() {
        None
    } else {
        Some(neutral_invariant_checks(mp, &pre, &pre_basis)?.passed)
    };
    Ok(NeutralRun {
        point: NeutralPoint {
            index,
            seed,
            status: "ok",
            error: None,
            events: seq.len(),
            collapse_h: curve.iter().find(|p| p.dim_h == 0).map(|p| p.length),
            collapse_v: curve.iter().find(|p| p.dim_v == 0).map(|p| p.length),
            sigmas: seq.sigmas,
            dim_h: cert.dim_h,
            dim_v: cert.dim_v,
            basis_h: cert.basis_h,
            basis_v: cert.basis_v,
            pre_floor_events: pre.events.len(),
            pre_floor_dim: pre_basis.len(),
            pre_floor_invariants_passed: invariants,
        },
        curve: curve.iter().map(|p| (p.length, p.dim_h, p.dim_v)).collect(),
    })
}

fn neutral(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mp = cfg.mass_profile()?;
    let seeds = point_seeds(cfg);
    let states: Vec<PhaseState> = seeds
        .iter()
        .map(|&s| initial_state(cfg, &mp, s))
        .collect::<Result<_, _>>()?;
    for s in &states {
        refuse_degenerate(s)?;
    }
    let runs: Vec<NeutralRun> = states
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(index, (s, &seed))| {
            neutral_point(&mp, s, cfg, index, seed).unwrap_or_else(|e| NeutralRun {
                point: NeutralPoint {
                    index,
                    seed,
                    status: error_status(&e),
                    error: Some(e.to_string()),
                    events: 0,
                    sigmas: Vec::new(),
                    dim_h: 0,
                    dim_v: 0,
                    collapse_h: None,
                    collapse_v: None,
                    basis_h: Vec::new(),
                    basis_v: Vec::new(),
                    pre_floor_events: 0,
                    pre_floor_dim: 0,
                    pre_floor_invariants_passed: None,
                },
                curve: Vec::new(),
            })
        })
        .collect();

    let mut w = out.csv("neutral_curve.csv")?;
    w.write_record(["point", "length", "dim_h", "dim_v"])?;
    for r in &runs {
        for &(len, h, v) in &r.curve {
            w.write_record([r.point.index.to_string(), len.to_string(), h.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;

    let results: Vec<NeutralPoint> = runs.into_iter().map(|r| r.point).collect();
    let completed = results.iter().filter(|p| p.status == "ok").count();
    let report = NeutralReportFile {
        masses: mp.masses().to_vec(),
        ordering: mp.ordering(),
        horizon: cfg.budget.horizon,
        points: results.len(),
        completed,
        collapsed_h: results.iter().filter(|p| p.collapse_h.is_some()).count(),
        collapsed_v: results.iter().filter(|p| p.collapse_v.is_some()).count(),
        results,
    };
    out.diagnostic("completed", &report.completed);
    out.diagnostic("failed", &(report.points - report.completed));
    out.write_json("neutral.json", &report)
}

struct SweepRow {
    masses: Vec<f64>,
    ordering: OrderingClass,
    seed: u64,
    outcome: Result<(LyapunovEstimate, ZeroCount), Error>,
}

fn sweep(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let (_, cal) = calibration(cfg, cfg.sweep.n)?;
    out.diagnostic("calibration", &cal);
    let grid = cfg.sweep.grid();
    let flow_cfg = cfg.flow_config();
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .enumerate()
        .map(|(k, masses)| {
            let seed = derive_seed(cfg.seed, k as u64);
            let mp = MassProfile::new(masses.clone()).expect("grid validated");
            let outcome = sample_state(&mp, cfg.h0, seed)
                .and_then(|s| estimate_spectrum(&mp, &s, &cfg.estimator(seed), &flow_cfg))
                .map(|est| {
                    let (_, count) = classify(cfg, &est, &cal);
                    (est, count)
                });
            SweepRow {
                masses: masses.clone(),
                ordering: mp.ordering(),
                seed,
                outcome,
            }
        })
        .collect();

    let mut w = out.csv("sweep.csv")?;
    w.write_record([
        "index",
        "masses",
        "ordering",
        "seed",
        "min_abs_lambda",
        "max_abs_lambda",
        "pairing_defect",
        "restarts",
        "zero_count",
        "status",
        "error",
    ])?;
    let mut failed = 0usize;
    for (k, r) in rows.iter().enumerate() {
        let masses = r.masses.iter().map(|&m| fmt(m)).collect::<Vec<_>>().join(";");
        let ordering = match r.ordering {
            OrderingClass::StrictTop => "strict-top",
            OrderingClass::Nonincreasing => "nonincreasing",
            OrderingClass::Unordered => "unordered",
        };
        let rec = match &r.outcome {
            Ok((est, count)) => {
                let (zero, status) = match count {
                    ZeroCount::Count(c) => (c.to_string(), "ok"),
                    ZeroCount::Inconclusive => (String::new(), "inconclusive"),
                };
                vec![
                    k.to_string(),
                    masses,
                    ordering.into(),
                    r.seed.to_string(),
                    fmt(est.min_abs_flow()),
                    fmt(est.max_abs_flow()),
                    fmt(est.pairing_defect),
                    est.restarts.to_string(),
                    zero,
                    status.into(),
                    String::new(),
                ]
            }
            Err(e) => {
                failed += 1;
                vec![
                    k.to_string(),
                    masses,
                    ordering.into(),
                    r.seed.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    error_status(e).into(),
                    e.to_string(),
                ]
            }
        };
        w.write_record(&rec)?;
    }
    w.flush()?;
    out.diagnostic("grid_points", &rows.len());
    out.diagnostic("failed", &failed);
    Ok(())
}

fn degenerate_demo(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mp = cfg.mass_profile()?;
    let state = initial_state(cfg, &mp, cfg.seed)?;
    let d = is_degenerate(&state);
    if !d.degenerate {
        return Err(CliError::Config(
            "field `initial`: state is not degenerate; use simulate".into(),
        ));
    }
    out.diagnostic("frozen_particles", &d.k);
    let budget = Budget {
        max_events: cfg.budget.max_events,
        max_time: cfg.budget.max_time,
    };
    let run = advance_degenerate(&mp, &state, budget, &cfg.flow_config())?;
    let mut sink = out.events(cfg.output.format, mp.n())?;
    for e in &run.events {
        sink.write(e)?;
    }
    sink.finish()?;
    out.diagnostic("flow", &run.diagnostics);
    out.diagnostic("final_time", &run.t);
    out.diagnostic("final_q", &run.state.q());
    out.diagnostic("final_v", &run.state.v());
    Ok(())
}
