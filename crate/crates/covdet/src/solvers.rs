//! Solvers for the nonnegativity-constrained MLE problem: the active-set
//! spectral projected-gradient algorithm, the spectral PG inner solver,
//! random-permuted coordinate descent, and ideal-support oracle variants.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::SignatureMatrix;
use crate::objective::{
    kkt_residual, residual_norm, CovarianceState, GammaVector, LeanState, ObjectiveError,
};
use crate::{CMatrix, RVector};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Wall clock that degrades to zero on targets without a monotonic timer.
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed_secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Parameter schedules of the outer active-set loop.
///
/// Defaults follow the published experimental setup:
/// omega_k = 10^(-6-k), eps_k = max(10^-k, 0.8e-3),
/// nu_k = min(10^(4-k), |min grad| / 2), final tolerance eps = 1e-3.
#[derive(Debug, Clone, Serialize)]
pub struct ActiveSetSchedule {
    /// omega_0; omega_k decays by a decade per iteration.
    pub omega_start: f64,
    /// Floor of the inner tolerance sequence.
    pub eps_floor: f64,
    /// nu cap at k = 0; decays by a decade per iteration.
    pub nu_start: f64,
    /// Final KKT tolerance.
    pub eps: f64,
    /// Outer iteration cap.
    pub max_outer: usize,
}

impl Default for ActiveSetSchedule {
    fn default() -> Self {
        Self {
            omega_start: 1e-6,
            eps_floor: 0.8e-3,
            nu_start: 1e4,
            eps: 1e-3,
            max_outer: 50,
        }
    }
}

impl ActiveSetSchedule {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidSchedule(m.to_string()));
        if !(self.omega_start > 0.0 && self.nu_start > 0.0) {
            return bad("omega and nu sequences must start positive");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("final tolerance must be positive");
        }
        if self.eps_floor.is_nan() || self.eps_floor >= self.eps {
            return bad("lim eps_k must stay below the final tolerance");
        }
        if self.max_outer == 0 {
            return bad("max_outer must be at least 1");
        }
        Ok(())
    }

    pub fn omega(&self, k: usize) -> f64 {
        self.omega_start * 10f64.powi(-(k as i32))
    }

    pub fn eps_k(&self, k: usize) -> f64 {
        10f64.powi(-(k as i32)).max(self.eps_floor)
    }

    pub fn nu(&self, k: usize, grad_min: f64) -> f64 {
        (self.nu_start * 10f64.powi(-(k as i32))).min(0.5 * grad_min.abs())
    }
}

/// Spectral projected-gradient configuration. The paper specifies only
/// "alternating BB stepsizes"; the numeric safeguards are ours.
#[derive(Debug, Clone, Serialize)]
pub struct PgConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Nonmonotone line-search memory (number of reference values).
    pub window: usize,
    /// Sufficient-decrease constant.
    pub delta: f64,
    /// Backtracking factor.
    pub shrink: f64,
    pub max_inner: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            alpha_min: 1e-10,
            alpha_max: 1e10,
            window: 10,
            delta: 1e-4,
            shrink: 0.5,
            max_inner: 1000,
        }
    }
}

/// Per-outer-iteration diagnostics, emitted when tracing is enabled.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub outer: usize,
    pub active_set_size: usize,
    pub objective: f64,
    pub kkt: f64,
    pub elapsed: f64,
}

/// Solver output plus the instrumentation behind the benchmark curves.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub gamma: GammaVector,
    pub objective: f64,
    /// Final projected-gradient residual. For oracle solvers this is the
    /// residual of the restricted problem they actually solve.
    pub kkt: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub active_set_sizes: Vec<usize>,
    pub wall_time: f64,
    pub trace: Vec<TraceRow>,
}

/// Eq.-(6)-style selection: indices with gamma above omega or gradient
/// below -nu.
pub fn select_active_set(
    gamma: &GammaVector,
    grad_full: &RVector,
    omega: f64,
    nu: f64,
) -> Vec<usize> {
    assert_eq!(gamma.len(), grad_full.len());
    (0..gamma.len())
        .filter(|&i| gamma.get(i) > omega || grad_full[i] < -nu)
        .collect()
}

/// Outcome of the spectral PG inner solver on a restricted problem.
#[derive(Debug)]
pub struct PgOutcome {
    pub x: RVector,
    pub inner_iters: usize,
    pub residual: f64,
    pub converged: bool,
    pub objective: f64,
}

/// Spectral projected gradient with alternating Barzilai-Borwein
/// stepsizes and a nonmonotone (max-over-window) backtracking line
/// search, run until the projected-gradient residual drops below eps.
pub fn spectral_pg(
    s_sub: &CMatrix,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    gamma_init: &RVector,
    eps: f64,
    cfg: &PgConfig,
) -> Result<PgOutcome, SolverError> {
    let m = s_sub.ncols();
    assert_eq!(gamma_init.len(), m);

    let eval = |x: &RVector| -> Result<(LeanState, f64), SolverError> {
        let st = LeanState::factorize(s_sub, x, sigma_hat, sigma_w_sq)?;
        let f = st.objective();
        Ok((st, f))
    };

    let mut x = gamma_init.clone();
    let (state, mut f) = eval(&x)?;
    let mut grad = state.gradient(s_sub, sigma_hat);
    let mut residual = residual_norm(&x, &grad);
    if residual < eps {
        return Ok(PgOutcome {
            x,
            inner_iters: 0,
            residual,
            converged: true,
            objective: f,
        });
    }

    let mut history = std::collections::VecDeque::with_capacity(cfg.window);
    history.push_back(f);
    let grad_inf = grad.amax();
    let mut alpha = if grad_inf > 0.0 {
        (1.0 / grad_inf).clamp(cfg.alpha_min, cfg.alpha_max)
    } else {
        cfg.alpha_max
    };

    let mut converged = false;
    let mut iters = 0;
    for it in 1..=cfg.max_inner {
        iters = it;
        // Feasible direction toward the projected gradient point.
        let d = RVector::from_fn(m, |i, _| (x[i] - alpha * grad[i]).max(0.0) - x[i]);
        let gd = grad.dot(&d);
        if gd >= 0.0 {
            // Numerically stationary for this stepsize.
            converged = residual < eps;
            break;
        }
        let f_ref = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let (mut xn, mut state_n, mut fn_);
        let mut backtracks = 0;
        loop {
            xn = RVector::from_fn(m, |i, _| (x[i] + t * d[i]).max(0.0));
            let (st, fv) = eval(&xn)?;
            state_n = st;
            fn_ = fv;
            if fn_ <= f_ref + cfg.delta * t * gd {
                // The GLL acceptance condition holds literally here.
                debug_assert!(fn_ <= f_ref + cfg.delta * t * gd);
                break;
            }
            backtracks += 1;
            if backtracks > 60 {
                break;
            }
            t *= cfg.shrink;
        }
        let grad_n = state_n.gradient(s_sub, sigma_hat);
        let dx = &xn - &x;
        let dg = &grad_n - &grad;
        let sy = dx.dot(&dg);
        alpha = if sy <= 0.0 {
            cfg.alpha_max
        } else if it % 2 == 1 {
            (dx.dot(&dx) / sy).clamp(cfg.alpha_min, cfg.alpha_max)
        } else {
            (sy / dg.dot(&dg)).clamp(cfg.alpha_min, cfg.alpha_max)
        };
        x = xn;
        grad = grad_n;
        f = fn_;
        if history.len() == cfg.window {
            history.pop_front();
        }
        history.push_back(f);
        residual = residual_norm(&x, &grad);
        if residual < eps {
            converged = true;
            break;
        }
    }
    Ok(PgOutcome {
        x,
        inner_iters: iters,
        residual,
        converged,
        objective: f,
    })
}

/// The active-set spectral PG algorithm: repeatedly selects a small
/// active set from the current iterate and the gradient sign pattern,
/// solves the restricted problem with spectral PG, and zeroes everything
/// outside the set, until the global KKT residual is below eps.
pub fn active_set_pg(
    s: &SignatureMatrix,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    schedule: &ActiveSetSchedule,
    cfg: &PgConfig,
    collect_trace: bool,
) -> Result<SolveResult, SolverError> {
    schedule.validate()?;
    let watch = Stopwatch::start();
    let entries = s.entries();
    let nq = entries.ncols();
    let mut gamma = GammaVector::zeros(nq);
    let mut active_set_sizes = Vec::new();
    let mut trace = Vec::new();
    let mut inner_total = 0;
    let mut converged = false;
    let mut k = 0;
    let (objective, kkt) = loop {
        let state = CovarianceState::build(entries, &gamma, sigma_hat, sigma_w_sq)?;
        let grad = state.gradient_full(entries, &gamma)?;
        let res = kkt_residual(&gamma, &grad).value;
        let f = state.evaluate(sigma_hat)?;
        if collect_trace {
            trace.push(TraceRow {
                outer: k,
                active_set_size: active_set_sizes.last().copied().unwrap_or(0),
                objective: f,
                kkt: res,
                elapsed: watch.elapsed_secs(),
            });
        }
        if res < schedule.eps {
            converged = true;
            break (f, res);
        }
        if k >= schedule.max_outer {
            break (f, res);
        }
        let omega = schedule.omega(k);
        let grad_min = grad.min();
        let mut nu = schedule.nu(k, grad_min);
        let mut active = select_active_set(&gamma, &grad, omega, nu);
        // A residual above eps with an empty set means nu is
        // misconfigured for this instance; halve it until the set fills.
        let mut halvings = 0;
        while active.is_empty() && halvings < 200 {
            nu *= 0.5;
            active = select_active_set(&gamma, &grad, omega, nu);
            halvings += 1;
        }
        if active.is_empty() {
            break (f, res);
        }
        let s_sub = entries.select_columns(&active);
        let x0 = RVector::from_fn(active.len(), |j, _| gamma.get(active[j]));
        let mut pg = spectral_pg(&s_sub, sigma_hat, sigma_w_sq, &x0, schedule.eps_k(k), cfg)?;
        inner_total += pg.inner_iters;
        if !pg.converged {
            // Spectral PG can crawl when the active columns are strongly
            // correlated (near-singular restricted Hessian). Exact cyclic
            // coordinate minimization is immune to that conditioning, so
            // polish the restricted iterate with it instead of burning
            // more gradient iterations.
            inner_total +=
                cd_polish(&s_sub, sigma_hat, sigma_w_sq, &mut pg.x, schedule.eps_k(k))?;
        }
        // Entries leaving the active set are zeroed.
        for i in 0..nq {
            if gamma.get(i) != 0.0 {
                gamma.set(i, 0.0);
            }
        }
        for (j, idx) in active.iter().enumerate() {
            if pg.x[j] > 0.0 {
                gamma.set(*idx, pg.x[j]);
            }
        }
        active_set_sizes.push(active.len());
        k += 1;
    };
    Ok(SolveResult {
        gamma,
        objective,
        kkt,
        converged,
        outer_iters: k,
        inner_iters_total: inner_total,
        active_set_sizes,
        wall_time: watch.elapsed_secs(),
        trace,
    })
}

/// Sweep cap for the coordinate polish fallback of the inner solver.
const CD_POLISH_MAX_SWEEPS: usize = 200;

/// Exact cyclic coordinate minimization over a restricted problem,
/// starting from `x`, until the restricted projected-gradient residual
/// drops below `eps` (certified on a fresh factorization each sweep).
/// Deterministic, so the enclosing solver stays reproducible. Returns the
/// number of coordinate updates performed; `x` holds the polished point.
fn cd_polish(
    s_sub: &CMatrix,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    x: &mut RVector,
    eps: f64,
) -> Result<usize, SolverError> {
    let m = s_sub.ncols();
    let mut gamma = GammaVector::zeros(m);
    for i in 0..m {
        if x[i] > 0.0 {
            gamma.set(i, x[i]);
        }
    }
    let mut state = CovarianceState::build(s_sub, &gamma, sigma_hat, sigma_w_sq)?;
    let all: Vec<usize> = (0..m).collect();
    let mut updates = 0usize;
    for _ in 0..CD_POLISH_MAX_SWEEPS {
        for idx in 0..m {
            let d = state.coordinate_minimize(s_sub.column(idx), gamma.get(idx));
            if d != 0.0 {
                gamma.set(idx, (gamma.get(idx) + d).max(0.0));
            }
            updates += 1;
            if updates.is_multiple_of(CD_REFRESH_PERIOD) || state.inverse_unreliable() {
                state = CovarianceState::build(s_sub, &gamma, sigma_hat, sigma_w_sq)?;
            }
        }
        state = CovarianceState::build(s_sub, &gamma, sigma_hat, sigma_w_sq)?;
        let grad = state.gradient_unchecked(s_sub, &all);
        if residual_norm(gamma.values(), &grad) < eps {
            break;
        }
    }
    for i in 0..m {
        x[i] = gamma.get(i);
    }
    Ok(updates)
}

/// One exact coordinate minimization: returns the closed-form step d* and
/// applies the rank-one updates to the cached inverse and trace matrix.
/// The sample covariance enters through the state's cached B matrix, so
/// it is accepted only to pin the interface.
pub fn cd_coordinate_update(
    state: &mut CovarianceState,
    s_col: nalgebra::DVectorView<'_, crate::C64>,
    gamma_nq: f64,
    _sigma_hat: &CMatrix,
) -> f64 {
    state.coordinate_minimize(s_col, gamma_nq)
}

/// How many rank-one updates to allow before a full refactorization.
pub const CD_REFRESH_PERIOD: usize = 1000;

/// Random-permuted coordinate descent from gamma = 0: each sweep shuffles
/// all NQ coordinates and applies the exact scalar update to each, with a
/// periodic full refactorization to bound rank-one drift.
pub fn coordinate_descent(
    s: &SignatureMatrix,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    eps: f64,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
    collect_trace: bool,
) -> Result<SolveResult, SolverError> {
    let watch = Stopwatch::start();
    let entries = s.entries();
    coordinate_descent_over(
        entries,
        None,
        sigma_hat,
        sigma_w_sq,
        eps,
        max_sweeps,
        rng,
        collect_trace,
        watch,
    )
}

/// Shared CD loop; `embed` maps restricted column positions back to flat
/// indices when solving over an oracle support.
#[allow(clippy::too_many_arguments)]
fn coordinate_descent_over(
    columns: &CMatrix,
    embed: Option<(&[usize], usize)>,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    eps: f64,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
    collect_trace: bool,
    watch: Stopwatch,
) -> Result<SolveResult, SolverError> {
    let m = columns.ncols();
    let mut gamma = GammaVector::zeros(m);
    let mut state = CovarianceState::build(columns, &gamma, sigma_hat, sigma_w_sq)?;
    let mut order: Vec<usize> = (0..m).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut updates = 0usize;
    let mut sweeps = 0;
    let all: Vec<usize> = (0..m).collect();
    let (mut objective, mut kkt) = (f64::NAN, f64::NAN);
    while sweeps < max_sweeps {
        sweeps += 1;
        order.shuffle(rng);
        for &idx in &order {
            let d = cd_coordinate_update(&mut state, columns.column(idx), gamma.get(idx), sigma_hat);
            if d != 0.0 {
                gamma.set(idx, (gamma.get(idx) + d).max(0.0));
            }
            updates += 1;
            if updates.is_multiple_of(CD_REFRESH_PERIOD) || state.inverse_unreliable() {
                state = CovarianceState::build(columns, &gamma, sigma_hat, sigma_w_sq)?;
            }
        }
        // Fresh factorization for the termination certificate.
        state = CovarianceState::build(columns, &gamma, sigma_hat, sigma_w_sq)?;
        let grad = state.gradient_unchecked(columns, &all);
        kkt = residual_norm(gamma.values(), &grad);
        objective = state.evaluate(sigma_hat)?;
        if collect_trace {
            trace.push(TraceRow {
                outer: sweeps,
                active_set_size: gamma.support().count(),
                objective,
                kkt,
                elapsed: watch.elapsed_secs(),
            });
        }
        if kkt < eps {
            converged = true;
            break;
        }
    }
    let gamma = match embed {
        None => gamma,
        Some((support, full_len)) => {
            let mut full = GammaVector::zeros(full_len);
            for (j, idx) in support.iter().enumerate() {
                if gamma.get(j) > 0.0 {
                    full.set(*idx, gamma.get(j));
                }
            }
            full
        }
    };
    Ok(SolveResult {
        gamma,
        objective,
        kkt,
        converged,
        outer_iters: sweeps,
        inner_iters_total: updates,
        active_set_sizes: Vec::new(),
        wall_time: watch.elapsed_secs(),
        trace,
    })
}

/// Which method an oracle-support solve should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    Pg,
    Cd,
}

/// Solves the problem restricted to a known support (simulation-only
/// benchmark; the reported residual certifies the restricted problem).
#[allow(clippy::too_many_arguments)]
pub fn oracle_solve(
    s: &SignatureMatrix,
    sigma_hat: &CMatrix,
    sigma_w_sq: f64,
    true_support: &[usize],
    method: OracleMethod,
    eps: f64,
    cfg: &PgConfig,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SolveResult, SolverError> {
    let watch = Stopwatch::start();
    let entries = s.entries();
    let nq = entries.ncols();
    if true_support.is_empty() {
        let gamma = GammaVector::zeros(nq);
        let state = CovarianceState::build(entries, &gamma, sigma_hat, sigma_w_sq)?;
        return Ok(SolveResult {
            objective: state.evaluate(sigma_hat)?,
            kkt: 0.0,
            converged: true,
            outer_iters: 0,
            inner_iters_total: 0,
            active_set_sizes: Vec::new(),
            wall_time: watch.elapsed_secs(),
            trace: Vec::new(),
            gamma,
        });
    }
    let s_sub = entries.select_columns(true_support);
    match method {
        OracleMethod::Pg => {
            let x0 = RVector::zeros(true_support.len());
            let pg = spectral_pg(&s_sub, sigma_hat, sigma_w_sq, &x0, eps, cfg)?;
            let mut gamma = GammaVector::zeros(nq);
            for (j, idx) in true_support.iter().enumerate() {
                if pg.x[j] > 0.0 {
                    gamma.set(*idx, pg.x[j]);
                }
            }
            Ok(SolveResult {
                gamma,
                objective: pg.objective,
                kkt: pg.residual,
                converged: pg.converged,
                outer_iters: 1,
                inner_iters_total: pg.inner_iters,
                active_set_sizes: vec![true_support.len()],
                wall_time: watch.elapsed_secs(),
                trace: Vec::new(),
            })
        }
        OracleMethod::Cd => coordinate_descent_over(
            &s_sub,
            Some((true_support, nq)),
            sigma_hat,
            sigma_w_sq,
            eps,
            max_sweeps,
            rng,
            false,
            watch,
        ),
    }
}
