use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use covdet::container::{self, StoredInstance};
use covdet::detection::{detect, score};
use covdet::harness::{self, ExperimentConfig, SolverKind};
use covdet::model::{self, SystemConfig};
use covdet::solvers::SolveResult;
use covdet::validate;

/// Covariance-based joint activity and data detection toolkit.
#[derive(Parser)]
#[command(name = "covdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance and write it as a COVD1 container.
    Simulate(SimulateArgs),
    /// Solve one instance with one solver; prints the result as JSON.
    Solve(SolveArgs),
    /// Run a Monte-Carlo sweep and emit per-trial and aggregate CSV/JSON.
    Bench(BenchArgs),
    /// Run the independent oracle suites (finite-difference gradient
    /// check and the coordinate-descent closed-form check).
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file with the system configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV dump of gamma_true.
    #[arg(long)]
    gamma_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// COVD1 instance container.
    #[arg(long)]
    instance: PathBuf,
    /// Solver: active-set-pg, random-cd, ideal-pg, ideal-cd.
    #[arg(long, default_value = "active-set-pg")]
    solver: String,
    /// Seed for solver-side randomness (CD permutations).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Final KKT tolerance.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Detection threshold; defaults to half the nominal gain.
    #[arg(long)]
    theta: Option<f64>,
    /// Emit per-iteration diagnostics as CSV on stderr.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file with the experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run trials one at a time for uncontended timing.
    #[arg(long)]
    sequential: bool,
    /// Output directory for trials.csv / aggregate.csv / *.json.
    #[arg(long, default_value = "bench-results")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Number of gradient-check instances.
    #[arg(long, default_value_t = 50)]
    gradient_instances: usize,
    /// Number of coordinate-update checks.
    #[arg(long, default_value_t = 200)]
    cd_coords: usize,
    /// RNG seed for the oracle suites.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct GammaEntry {
    index: usize,
    device: usize,
    sequence: usize,
    value: f64,
}

#[derive(Serialize)]
struct SolveOutput {
    solver: String,
    converged: bool,
    objective: f64,
    kkt: f64,
    outer_iters: usize,
    inner_iters: usize,
    active_set_sizes: Vec<usize>,
    wall_time: f64,
    detection_threshold: f64,
    detected_active_devices: usize,
    missed_devices: usize,
    false_alarm_devices: usize,
    data_errors: usize,
    error_rate: f64,
    gamma: Vec<GammaEntry>,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Solve(args) => run_solve(args),
        Command::Bench(args) => run_bench(args),
        Command::Validate(args) => run_validate(args),
    }
}

fn run_simulate(args: SimulateArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(format!("cannot read {}: {e}", args.config.display())),
    };
    let mut cfg: SystemConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return fail(format!("invalid config: {e}")),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let inst = match model::generate_instance(&cfg) {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    let stored = StoredInstance::from_instance(&inst);
    if let Err(e) = container::write_instance_file(&args.out, &stored) {
        return fail(e);
    }
    if let Some(csv_path) = args.gamma_csv {
        let mut f = match std::fs::File::create(&csv_path) {
            Ok(f) => f,
            Err(e) => return fail(format!("cannot write {}: {e}", csv_path.display())),
        };
        if let Err(e) = container::write_gamma_csv(&mut f, inst.truth.gamma_true(), cfg.q) {
            return fail(e);
        }
    }
    println!(
        "wrote instance N={} Q={} L={} M={} K={} to {}",
        cfg.n,
        cfg.q,
        cfg.l,
        cfg.m,
        inst.truth.active_count(),
        args.out.display()
    );
    ExitCode::SUCCESS
}

fn solve_stored(
    stored: &StoredInstance,
    solver: SolverKind,
    seed: u64,
    eps: f64,
    trace: bool,
) -> Result<SolveResult, harness::HarnessError> {
    // Rehydrate a full instance so the shared solver dispatch applies.
    let truth = stored.truth();
    let config = SystemConfig {
        n: stored.n,
        q: stored.q,
        l: stored.l,
        m: stored.m,
        k: truth.active_count(),
        sigma_w_sq: stored.sigma_w_sq,
        gain: covdet::model::Gain::Uniform(stored.nominal_gain()),
        seed,
    };
    let instance = model::Instance {
        config,
        signatures: stored.signatures.clone(),
        truth,
        sample_cov: stored.sample_cov.clone(),
    };
    harness::run_solver(solver, &instance, eps, 500, trace)
}

fn run_solve(args: SolveArgs) -> ExitCode {
    let Some(solver) = SolverKind::parse(&args.solver) else {
        return fail(format!(
            "unknown solver '{}' (expected active-set-pg, random-cd, ideal-pg, ideal-cd)",
            args.solver
        ));
    };
    let stored = match container::read_instance_file(&args.instance) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let result = match solve_stored(&stored, solver, args.seed, args.eps, args.trace) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if args.trace {
        eprintln!("outer,active_set_size,objective,kkt,elapsed");
        for row in &result.trace {
            eprintln!(
                "{},{},{:.12e},{:.6e},{:.6}",
                row.outer, row.active_set_size, row.objective, row.kkt, row.elapsed
            );
        }
    }
    let theta = args.theta.unwrap_or(0.5 * stored.nominal_gain());
    let detection = detect(&result.gamma, theta, stored.q);
    let errors = score(&detection, &stored.truth());
    let output = SolveOutput {
        solver: args.solver.clone(),
        converged: result.converged,
        objective: result.objective,
        kkt: result.kkt,
        outer_iters: result.outer_iters,
        inner_iters: result.inner_iters_total,
        active_set_sizes: result.active_set_sizes.clone(),
        wall_time: result.wall_time,
        detection_threshold: theta,
        detected_active_devices: detection.active_count(),
        missed_devices: errors.missed_devices,
        false_alarm_devices: errors.false_alarm_devices,
        data_errors: errors.data_errors,
        error_rate: errors.error_rate(),
        gamma: result
            .gamma
            .support()
            .map(|(index, value)| GammaEntry {
                index,
                device: index / stored.q,
                sequence: index % stored.q,
                value,
            })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&output).expect("serializable"));
    if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run_bench(args: BenchArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(format!("cannot read {}: {e}", args.config.display())),
    };
    let mut cfg: ExperimentConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return fail(format!("invalid config: {e}")),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let reports = match harness::run_experiment(&cfg, args.sequential) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = harness::emit_results(&reports, &args.out_dir) {
        return fail(e);
    }
    let nonconverged = reports.iter().filter(|r| !r.converged).count();
    println!(
        "wrote {} trial rows to {} ({} non-converged)",
        reports.len(),
        args.out_dir.display(),
        nonconverged
    );
    ExitCode::SUCCESS
}

fn run_validate(args: ValidateArgs) -> ExitCode {
    let grad = validate::run_gradient_check(args.gradient_instances, args.seed);
    println!(
        "gradient check: {} pairs over {} instances, max rel err {:.3e} (tol {:.0e}) -> {}",
        grad.pairs_checked,
        grad.instances,
        grad.max_rel_err,
        grad.tolerance,
        if grad.passed() { "PASS" } else { "FAIL" }
    );
    let cd = validate::run_cd_check(args.cd_coords, args.seed);
    println!(
        "cd closed-form check: {} coordinates ({} boundary), max abs err {:.3e} (tol {:.0e}) -> {}",
        cd.coords_checked,
        cd.boundary_cases,
        cd.max_abs_err,
        cd.tolerance,
        if cd.passed() { "PASS" } else { "FAIL" }
    );
    if grad.passed() && cd.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
