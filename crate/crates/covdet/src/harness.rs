//! Experiment harness: Monte-Carlo sweeps over problem sizes, per-trial
//! timing of each solver on identical instances, and CSV/JSON emission.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{detect, score, ErrorReport};
use crate::model::{self, Gain, RngPurpose, SystemConfig};
use crate::solvers::{
    active_set_pg, coordinate_descent, oracle_solve, ActiveSetSchedule, OracleMethod, PgConfig,
    SolveResult,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Solver(#[from] crate::solvers::SolverError),
    #[error("output error for {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

/// Which solvers a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    ActiveSetPg,
    RandomCd,
    IdealPg,
    IdealCd,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::ActiveSetPg => "active-set-pg",
            SolverKind::RandomCd => "random-cd",
            SolverKind::IdealPg => "ideal-pg",
            SolverKind::IdealCd => "ideal-cd",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "active-set-pg" => Some(SolverKind::ActiveSetPg),
            "random-cd" => Some(SolverKind::RandomCd),
            "ideal-pg" => Some(SolverKind::IdealPg),
            "ideal-cd" => Some(SolverKind::IdealCd),
            _ => None,
        }
    }
}

fn default_eps() -> f64 {
    1e-3
}

fn default_max_sweeps() -> usize {
    500
}

fn default_gain() -> f64 {
    1.0
}

/// Monte-Carlo sweep definition. K is derived per sweep point as
/// round(k_ratio * N).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sweep_n: Vec<usize>,
    pub k_ratio: f64,
    pub q: usize,
    pub l: usize,
    pub m: usize,
    pub sigma_w_sq: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub solvers: Vec<SolverKind>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    /// Detection threshold; defaults to half the gain.
    #[serde(default)]
    pub detection_threshold: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.sweep_n.is_empty() {
            return bad("sweep_n must be nonempty");
        }
        if self.trials < 1 {
            return bad("trials must be >= 1");
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return bad("k_ratio must be in (0, 1]");
        }
        if self.solvers.is_empty() {
            return bad("at least one solver must be selected");
        }
        Ok(())
    }

    pub fn system_config(&self, n: usize, seed: u64) -> SystemConfig {
        SystemConfig {
            n,
            q: self.q,
            l: self.l,
            m: self.m,
            k: ((self.k_ratio * n as f64).round() as usize).min(n),
            sigma_w_sq: self.sigma_w_sq,
            gain: Gain::Uniform(self.gain),
            seed,
        }
    }

    pub fn theta(&self) -> f64 {
        self.detection_threshold.unwrap_or(0.5 * self.gain)
    }
}

/// One (sweep point, trial, solver) record.
#[derive(Debug, Clone, Serialize)]
pub struct TrialReport {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub l: usize,
    pub m: usize,
    pub trial: usize,
    pub seed: u64,
    pub solver: &'static str,
    pub converged: bool,
    pub objective: f64,
    pub kkt: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Mean |A^k| / K over outer iterations; active-set solver only.
    pub cardinality_ratio: Option<f64>,
    pub missed_devices: usize,
    pub false_alarm_devices: usize,
    pub data_errors: usize,
    pub error_rate: f64,
    pub wall_time: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible per-trial seed, independent of execution order.
pub fn child_seed(master: u64, sweep_index: usize, trial_index: usize) -> u64 {
    let a = splitmix64(master ^ (sweep_index as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    splitmix64(a ^ (trial_index as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

/// Runs one solver on a prepared instance, timing only the solve call.
pub fn run_solver(
    solver: SolverKind,
    instance: &model::Instance,
    eps: f64,
    max_sweeps: usize,
    collect_trace: bool,
) -> Result<SolveResult, HarnessError> {
    let cfg = &instance.config;
    let sigma_hat = &instance.sample_cov.sigma_hat;
    let schedule = ActiveSetSchedule {
        eps,
        ..ActiveSetSchedule::default()
    };
    let pg_cfg = PgConfig::default();
    let result = match solver {
        SolverKind::ActiveSetPg => active_set_pg(
            &instance.signatures,
            sigma_hat,
            cfg.sigma_w_sq,
            &schedule,
            &pg_cfg,
            collect_trace,
        )?,
        SolverKind::RandomCd => {
            let mut rng = model::rng_stream(cfg.seed, RngPurpose::Solver);
            coordinate_descent(
                &instance.signatures,
                sigma_hat,
                cfg.sigma_w_sq,
                eps,
                max_sweeps,
                &mut rng,
                collect_trace,
            )?
        }
        SolverKind::IdealPg | SolverKind::IdealCd => {
            let method = if solver == SolverKind::IdealPg {
                OracleMethod::Pg
            } else {
                OracleMethod::Cd
            };
            let mut rng = model::rng_stream(cfg.seed, RngPurpose::Solver);
            oracle_solve(
                &instance.signatures,
                sigma_hat,
                cfg.sigma_w_sq,
                &instance.truth.support(),
                method,
                eps,
                &pg_cfg,
                max_sweeps,
                &mut rng,
            )?
        }
    };
    Ok(result)
}

fn report_for(
    cfg: &ExperimentConfig,
    sys: &SystemConfig,
    instance: &model::Instance,
    solver: SolverKind,
    trial: usize,
    result: &SolveResult,
) -> TrialReport {
    let detection = detect(&result.gamma, cfg.theta(), sys.q);
    let errors: ErrorReport = score(&detection, &instance.truth);
    let cardinality_ratio = match solver {
        SolverKind::ActiveSetPg if sys.k > 0 && !result.active_set_sizes.is_empty() => Some(
            result
                .active_set_sizes
                .iter()
                .map(|s| *s as f64 / sys.k as f64)
                .sum::<f64>()
                / result.active_set_sizes.len() as f64,
        ),
        _ => None,
    };
    TrialReport {
        n: sys.n,
        k: sys.k,
        q: sys.q,
        l: sys.l,
        m: sys.m,
        trial,
        seed: sys.seed,
        solver: solver.name(),
        converged: result.converged,
        objective: result.objective,
        kkt: result.kkt,
        outer_iters: result.outer_iters,
        inner_iters: result.inner_iters_total,
        cardinality_ratio,
        missed_devices: errors.missed_devices,
        false_alarm_devices: errors.false_alarm_devices,
        data_errors: errors.data_errors,
        error_rate: errors.error_rate(),
        wall_time: result.wall_time,
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    sweep_index: usize,
    n: usize,
    trial: usize,
) -> Result<Vec<TrialReport>, HarnessError> {
    let seed = child_seed(cfg.master_seed, sweep_index, trial);
    let sys = cfg.system_config(n, seed);
    let instance = model::generate_instance(&sys)?;
    let mut reports = Vec::with_capacity(cfg.solvers.len());
    for &solver in &cfg.solvers {
        let result = run_solver(solver, &instance, cfg.eps, cfg.max_sweeps, false)?;
        reports.push(report_for(cfg, &sys, &instance, solver, trial, &result));
    }
    Ok(reports)
}

/// Runs the full sweep. With `sequential` set, trials run one at a time
/// on the calling thread so wall-clock comparisons are uncontended;
/// otherwise trials run in parallel. Solver non-convergence is recorded
/// in the report, never aborts the sweep.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sequential: bool,
) -> Result<Vec<TrialReport>, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, usize)> = cfg
        .sweep_n
        .iter()
        .enumerate()
        .flat_map(|(si, &n)| (0..cfg.trials).map(move |t| (si, n, t)))
        .collect();
    let mut reports: Vec<TrialReport> = if sequential {
        let mut out = Vec::new();
        for (si, n, t) in jobs {
            out.extend(run_trial(cfg, si, n, t)?);
        }
        out
    } else {
        let nested: Result<Vec<Vec<TrialReport>>, HarnessError> = jobs
            .par_iter()
            .map(|&(si, n, t)| run_trial(cfg, si, n, t))
            .collect();
        nested?.into_iter().flatten().collect()
    };
    // Canonical order regardless of scheduling.
    reports.sort_by(|a, b| {
        (a.n, a.trial, a.solver).cmp(&(b.n, b.trial, b.solver))
    });
    Ok(reports)
}

/// Aggregate statistics for one (N, solver) sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub n: usize,
    pub k: usize,
    pub solver: &'static str,
    pub trials: usize,
    pub converged_fraction: f64,
    pub mean_objective: f64,
    pub mean_outer_iters: f64,
    pub mean_inner_iters: f64,
    pub mean_cardinality_ratio: Option<f64>,
    pub mean_error_rate: f64,
    pub mean_wall_time: f64,
    pub stderr_wall_time: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((n - 1) as f64 * n as f64)).sqrt()
    } else {
        0.0
    };
    (m, se, n)
}

pub fn aggregate(reports: &[TrialReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(usize, &'static str)> = reports.iter().map(|r| (r.n, r.solver)).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|&(n, solver)| {
            let rows: Vec<&TrialReport> = reports
                .iter()
                .filter(|r| r.n == n && r.solver == solver)
                .collect();
            let (mean_wall, se_wall, count) = mean(rows.iter().map(|r| r.wall_time));
            let ratios: Vec<f64> = rows.iter().filter_map(|r| r.cardinality_ratio).collect();
            AggregateRow {
                n,
                k: rows[0].k,
                solver,
                trials: count,
                converged_fraction: rows.iter().filter(|r| r.converged).count() as f64
                    / count as f64,
                mean_objective: mean(rows.iter().map(|r| r.objective)).0,
                mean_outer_iters: mean(rows.iter().map(|r| r.outer_iters as f64)).0,
                mean_inner_iters: mean(rows.iter().map(|r| r.inner_iters as f64)).0,
                mean_cardinality_ratio: if ratios.is_empty() {
                    None
                } else {
                    Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
                },
                mean_error_rate: mean(rows.iter().map(|r| r.error_rate)).0,
                mean_wall_time: mean_wall,
                stderr_wall_time: se_wall,
            }
        })
        .collect()
}

/// Fixed column order of the per-trial CSV.
pub const TRIAL_CSV_HEADER: &str = "n,k,q,l,m,trial,seed,solver,converged,objective,kkt,\
outer_iters,inner_iters,cardinality_ratio,missed_devices,false_alarm_devices,data_errors,\
error_rate,wall_time";

pub fn trial_csv_row(r: &TrialReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{:.12e},{:.6e},{},{},{},{},{},{},{:.8},{:.6}",
        r.n,
        r.k,
        r.q,
        r.l,
        r.m,
        r.trial,
        r.seed,
        r.solver,
        r.converged,
        r.objective,
        r.kkt,
        r.outer_iters,
        r.inner_iters,
        r.cardinality_ratio
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default(),
        r.missed_devices,
        r.false_alarm_devices,
        r.data_errors,
        r.error_rate,
        r.wall_time,
    )
}

pub const AGGREGATE_CSV_HEADER: &str = "n,k,solver,trials,converged_fraction,mean_objective,\
mean_outer_iters,mean_inner_iters,mean_cardinality_ratio,mean_error_rate,mean_wall_time,\
stderr_wall_time";

pub fn aggregate_csv_row(a: &AggregateRow) -> String {
    format!(
        "{},{},{},{},{:.6},{:.12e},{:.4},{:.2},{},{:.8},{:.6},{:.6}",
        a.n,
        a.k,
        a.solver,
        a.trials,
        a.converged_fraction,
        a.mean_objective,
        a.mean_outer_iters,
        a.mean_inner_iters,
        a.mean_cardinality_ratio
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default(),
        a.mean_error_rate,
        a.mean_wall_time,
        a.stderr_wall_time,
    )
}

fn write_file(path: &Path, content: &str) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path).map_err(|source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(content.as_bytes())
        .map_err(|source| HarnessError::Output {
            path: path.display().to_string(),
            source,
        })
}

/// Writes trials.csv, aggregate.csv, trials.json, aggregate.json into
/// `out_dir`.
pub fn emit_results(reports: &[TrialReport], out_dir: &Path) -> Result<(), HarnessError> {
    assert!(!reports.is_empty(), "no reports to emit");
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Output {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut trials = String::from(TRIAL_CSV_HEADER);
    trials.push('\n');
    for r in reports {
        trials.push_str(&trial_csv_row(r));
        trials.push('\n');
    }
    write_file(&out_dir.join("trials.csv"), &trials)?;

    let aggs = aggregate(reports);
    let mut agg_csv = String::from(AGGREGATE_CSV_HEADER);
    agg_csv.push('\n');
    for a in &aggs {
        agg_csv.push_str(&aggregate_csv_row(a));
        agg_csv.push('\n');
    }
    write_file(&out_dir.join("aggregate.csv"), &agg_csv)?;

    write_file(
        &out_dir.join("trials.json"),
        &serde_json::to_string_pretty(reports).expect("serializable"),
    )?;
    write_file(
        &out_dir.join("aggregate.json"),
        &serde_json::to_string_pretty(&aggs).expect("serializable"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            sweep_n: vec![30],
            k_ratio: 0.1,
            q: 2,
            l: 16,
            m: 64,
            sigma_w_sq: 1.0,
            gain: 1.0,
            trials: 2,
            master_seed: 7,
            solvers: vec![SolverKind::ActiveSetPg],
            eps: 1e-3,
            max_sweeps: 500,
            detection_threshold: None,
        }
    }

    #[test]
    fn single_trial_single_solver_yields_one_report() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        let reports = run_experiment(&cfg, true).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].solver, "active-set-pg");
    }

    #[test]
    fn reports_deterministic_modulo_timing() {
        let cfg = tiny_config();
        let a = run_experiment(&cfg, true).unwrap();
        let b = run_experiment(&cfg, false).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.objective, y.objective);
            assert_eq!(x.kkt, y.kkt);
            assert_eq!(x.outer_iters, y.outer_iters);
            assert_eq!(x.error_rate, y.error_rate);
        }
    }

    #[test]
    fn solver_rows_distinguishable_and_aggregates_are_means() {
        let mut cfg = tiny_config();
        cfg.solvers = vec![SolverKind::ActiveSetPg, SolverKind::IdealPg];
        let reports = run_experiment(&cfg, true).unwrap();
        assert_eq!(reports.len(), 4);
        let aggs = aggregate(&reports);
        assert_eq!(aggs.len(), 2);
        for agg in &aggs {
            let manual: Vec<f64> = reports
                .iter()
                .filter(|r| r.solver == agg.solver)
                .map(|r| r.wall_time)
                .collect();
            let m = manual.iter().sum::<f64>() / manual.len() as f64;
            assert!((agg.mean_wall_time - m).abs() < 1e-12);
        }
    }

    #[test]
    fn emit_writes_all_outputs() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        let reports = run_experiment(&cfg, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_results(&reports, dir.path()).unwrap();
        for name in ["trials.csv", "aggregate.csv", "trials.json", "aggregate.json"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let csv = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRIAL_CSV_HEADER);
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn child_seeds_differ_across_trials() {
        let a = child_seed(1, 0, 0);
        let b = child_seed(1, 0, 1);
        let c = child_seed(1, 1, 0);
        let a2 = child_seed(1, 0, 0);
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
