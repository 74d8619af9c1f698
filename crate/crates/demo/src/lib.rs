//! Browser bindings for the covdet toolkit.
//!
//! Every exported function takes a JSON string and returns a JSON string,
//! so the page needs no generated TypeScript glue beyond wasm-bindgen's
//! default loader. Errors come back as `{"error": "..."}` instead of
//! throwing across the FFI boundary.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use covdet::detection::{detect, score};
use covdet::harness::{run_solver, SolverKind};
use covdet::model::{self, Gain, SystemConfig, TruthAssignment};
use covdet::objective::GammaVector;
use covdet::solvers::SolveResult;

const EPS: f64 = 1e-3;
const MAX_SWEEPS: usize = 500;

/// Browser-facing problem size guard: the page runs single-threaded, so
/// keep a single trial under a couple of seconds.
const MAX_DIM: usize = 512;

#[derive(Deserialize)]
struct DemoConfig {
    n: usize,
    q: usize,
    l: usize,
    m: usize,
    k: usize,
    sigma_w_sq: f64,
    #[serde(default = "default_gain")]
    gain: f64,
    #[serde(default)]
    seed: u64,
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Serialize)]
struct GammaEntry {
    index: usize,
    device: usize,
    sequence: usize,
    value: f64,
}

#[derive(Serialize)]
struct TraceEntry {
    outer: usize,
    active_set_size: usize,
    objective: f64,
    kkt: f64,
}

#[derive(Serialize)]
struct Detection {
    theta: f64,
    detected_devices: usize,
    missed_devices: usize,
    false_alarm_devices: usize,
    data_errors: usize,
    error_rate: f64,
}

#[derive(Serialize)]
struct RunOutput {
    solver: &'static str,
    converged: bool,
    objective: f64,
    kkt: f64,
    outer_iters: usize,
    inner_iters: usize,
    wall_time: f64,
    trace: Vec<TraceEntry>,
    detection: Detection,
    gamma: Vec<GammaEntry>,
    truth: Vec<usize>,
    q: usize,
    n: usize,
}

fn err_json(msg: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": msg.to_string() }).to_string()
}

fn parse_config(config_json: &str) -> Result<SystemConfig, String> {
    let demo: DemoConfig =
        serde_json::from_str(config_json).map_err(|e| format!("invalid config: {e}"))?;
    if demo.n.max(demo.l).max(demo.m) > MAX_DIM || demo.q > 8 {
        return Err(format!(
            "demo sizes are capped at N, L, M <= {MAX_DIM} and Q <= 8"
        ));
    }
    Ok(SystemConfig {
        n: demo.n,
        q: demo.q,
        l: demo.l,
        m: demo.m,
        k: demo.k,
        sigma_w_sq: demo.sigma_w_sq,
        gain: Gain::Uniform(demo.gain),
        seed: demo.seed,
    })
}

fn gamma_entries(gamma: &GammaVector, q: usize) -> Vec<GammaEntry> {
    gamma
        .support()
        .map(|(index, value)| GammaEntry {
            index,
            device: index / q,
            sequence: index % q,
            value,
        })
        .collect()
}

fn detection_report(
    gamma: &GammaVector,
    theta: f64,
    truth: &TruthAssignment,
    q: usize,
) -> Detection {
    let det = detect(gamma, theta, q);
    let errors = score(&det, truth);
    Detection {
        theta,
        detected_devices: det.active_count(),
        missed_devices: errors.missed_devices,
        false_alarm_devices: errors.false_alarm_devices,
        data_errors: errors.data_errors,
        error_rate: errors.error_rate(),
    }
}

fn run_output(
    solver: SolverKind,
    result: &SolveResult,
    cfg: &SystemConfig,
    truth: &TruthAssignment,
    theta: f64,
) -> RunOutput {
    RunOutput {
        solver: solver.name(),
        converged: result.converged,
        objective: result.objective,
        kkt: result.kkt,
        outer_iters: result.outer_iters,
        inner_iters: result.inner_iters_total,
        wall_time: result.wall_time,
        trace: result
            .trace
            .iter()
            .map(|row| TraceEntry {
                outer: row.outer,
                active_set_size: row.active_set_size,
                objective: row.objective,
                kkt: row.kkt,
            })
            .collect(),
        detection: detection_report(&result.gamma, theta, truth, cfg.q),
        gamma: gamma_entries(&result.gamma, cfg.q),
        truth: truth.support(),
        q: cfg.q,
        n: cfg.n,
    }
}

fn solve_instance(config_json: &str, solvers: &[SolverKind]) -> Result<String, String> {
    let cfg = parse_config(config_json)?;
    let inst = model::generate_instance(&cfg).map_err(|e| e.to_string())?;
    let theta = 0.5 * cfg.gain.of_device(0);
    let mut runs = Vec::new();
    for &solver in solvers {
        let result =
            run_solver(solver, &inst, EPS, MAX_SWEEPS, true).map_err(|e| e.to_string())?;
        runs.push(run_output(solver, &result, &cfg, &inst.truth, theta));
    }
    let body = if runs.len() == 1 {
        serde_json::to_value(&runs[0])
    } else {
        serde_json::to_value(&runs)
    };
    body.map(|v| v.to_string()).map_err(|e| e.to_string())
}

/// Generates an instance from the JSON config and solves it with the
/// active-set PG solver; returns the run, per-iteration trace, detection
/// outcome, and the recovered gamma support.
#[wasm_bindgen]
pub fn run_detection(config_json: &str) -> String {
    match solve_instance(config_json, &[SolverKind::ActiveSetPg]) {
        Ok(s) => s,
        Err(e) => err_json(e),
    }
}

/// Solves the same instance with active-set PG and random coordinate
/// descent; returns both runs so the page can show the objective gap.
#[wasm_bindgen]
pub fn compare_solvers(config_json: &str) -> String {
    match solve_instance(config_json, &[SolverKind::ActiveSetPg, SolverKind::RandomCd]) {
        Ok(s) => s,
        Err(e) => err_json(e),
    }
}

#[derive(Deserialize)]
struct RethresholdRequest {
    n: usize,
    q: usize,
    theta: f64,
    gamma: Vec<RethresholdEntry>,
    truth: Vec<usize>,
}

#[derive(Deserialize)]
struct RethresholdEntry {
    index: usize,
    value: f64,
}

/// Re-runs the detection rule on a previously returned gamma estimate at a
/// new threshold, without re-solving.
#[wasm_bindgen]
pub fn rethreshold(request_json: &str) -> String {
    let req: RethresholdRequest = match serde_json::from_str(request_json) {
        Ok(r) => r,
        Err(e) => return err_json(format!("invalid request: {e}")),
    };
    if req.q == 0 || req.theta < 0.0 {
        return err_json("q must be positive and theta nonnegative");
    }
    let dim = req.n * req.q;
    let mut gamma = GammaVector::zeros(dim);
    for entry in &req.gamma {
        if entry.index >= dim || entry.value < 0.0 {
            return err_json("gamma entries must be nonnegative with index < N*Q");
        }
        if entry.value > 0.0 {
            gamma.set(entry.index, entry.value);
        }
    }
    let mut selected = vec![None; req.n];
    for &idx in &req.truth {
        if idx >= dim {
            return err_json("truth indices must be < N*Q");
        }
        selected[idx / req.q] = Some(idx % req.q);
    }
    let truth = TruthAssignment::new(selected, &Gain::Uniform(1.0), req.q);
    let report = detection_report(&gamma, req.theta, &truth, req.q);
    serde_json::to_string(&report).unwrap_or_else(err_json)
}
