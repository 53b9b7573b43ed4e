//! The outer optimization loop and its two comparison variants.
//!
//! Each iteration rebuilds collision residuals at the search checkpoints,
//! smooths their Gauss-Newton terms, adds the joint-limit penalty, and takes
//! a damped step in the null space of the boundary/task linearization.
//! Acceptance is unconditional in the exploratory phase and windowed
//! non-monotone Armijo in the tail phase. A constrained QP restores strict
//! limit feasibility at the end if the dense check fails.

mod config;
mod model;

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use config::SolverConfig;
pub use model::{
    lambda_update, penalty_terms, reduced_step, reduced_terms, uema_update, GnModel, ReducedStep, Uema,
};

use crate::basis::{smoothness_matrix, BasisSet, BoundaryLift, CoefficientVector, LiftMode, SmoothnessMatrix, Weight};
use crate::bench::dense_success_check;
use crate::constraints::{
    active_set, build_equality_system, build_inequality_system, checkpoints, select_task_checkpoints, task_residual,
    v_inf, violation_vector, EqualitySystem, InequalitySystem, TaskSpec,
};
use crate::kinematics::MultiChainModel;
use crate::qp::{init_trajectory, solve_qp_with, terminal_repair, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::scene::{min_clearance, obstacle_cost, residual_block, Scene};
use crate::{Error, Result};

/// One planning query.
#[derive(Clone, Debug)]
pub struct Problem {
    pub basis: BasisSet,
    pub lift: LiftMode,
    pub weight: Weight,
    pub start: DVector<f64>,
    pub goal: DVector<f64>,
    pub scene: Scene,
    pub model: MultiChainModel,
    pub task: Option<TaskSpec>,
}

impl Problem {
    pub fn new(basis: BasisSet, start: DVector<f64>, goal: DVector<f64>, scene: Scene, model: MultiChainModel) -> Self {
        Self { basis, lift: LiftMode::default(), weight: Weight::default(), start, goal, scene, model, task: None }
    }

    pub fn with_task(mut self, task: Option<TaskSpec>) -> Self {
        self.task = task;
        self
    }

    pub fn with_lift(mut self, lift: LiftMode) -> Self {
        self.lift = lift;
        self
    }

    /// Rejects endpoints that violate limits, collide, or miss the task box.
    pub fn check_endpoints(&self) -> Result<()> {
        let m = &self.model;
        for (name, q) in [("start", &self.start), ("goal", &self.goal)] {
            m.check_len(q.as_slice())?;
            if !m.within_limits(q.as_slice()) {
                return Err(Error::TaskInfeasible(format!("{name} configuration violates joint limits")));
            }
            let clear = min_clearance(&self.scene, m, q.as_slice())?;
            if clear < 0.0 {
                return Err(Error::TaskInfeasible(format!("{name} configuration is in collision (clearance {clear:.4})")));
            }
            if let Some(spec) = &self.task {
                spec.validate_for(m)?;
                let c = spec.chain();
                let (x, _) = m.chains()[c].ee_posture(m.slice(c, q.as_slice()))?;
                let h = task_residual(spec, &x);
                if h.amax() > 1e-9 {
                    return Err(Error::TaskInfeasible(format!(
                        "{name} configuration misses the task box by {:.3e}",
                        h.amax()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    Drafto,
    DraftoGn,
    Facto,
}

impl Planner {
    pub const ALL: [Planner; 3] = [Planner::Drafto, Planner::DraftoGn, Planner::Facto];

    pub fn name(self) -> &'static str {
        match self {
            Planner::Drafto => "drafto",
            Planner::DraftoGn => "drafto_gn",
            Planner::Facto => "facto",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown planner `{s}` (expected drafto, drafto_gn or facto)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    PartialFeasible,
    TaskInfeasible,
}

impl SolveStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::PartialFeasible => "partial_feasible",
            SolveStatus::TaskInfeasible => "task_infeasible",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Always accept, full step.
    #[serde(rename = "I")]
    Exploratory,
    /// Windowed non-monotone acceptance with backtracking.
    #[serde(rename = "II")]
    Tail,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Exploratory => "I",
            Phase::Tail => "II",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Working objective after the iteration.
    pub objective: f64,
    pub mred: f64,
    pub ared: f64,
    /// Damping used for the step.
    pub lambda: f64,
    pub alpha: f64,
    pub phase: Phase,
    pub accepted: bool,
    pub active_set_size: usize,
    pub wall_us: u64,
    /// `dpsi^T g < 0`.
    pub descent: bool,
    /// `|N^T g|_inf` of the model used for the step.
    pub stationarity: f64,
    /// `|alpha dpsi|_inf`.
    pub step_norm: f64,
    /// Rejected step after which only the equality correction was applied.
    pub restored: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub init: f64,
    pub search: f64,
    pub repair: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.init + self.search + self.repair
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub planner: Planner,
    pub coeffs: CoefficientVector,
    pub status: SolveStatus,
    pub trace: Vec<TraceRecord>,
    pub timings: Timings,
    pub initial_objective: f64,
    pub v_inf: f64,
    pub success: bool,
    pub repair_iterations: usize,
    pub endpoint_error: f64,
    /// Largest task residual at the selected task checkpoints.
    pub task_residual: Option<f64>,
    pub converged: bool,
    /// Reduced gradient norm of the last model is within `stationarity_tol`.
    pub stationary: bool,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// One row per iteration: `iter,J,mred,ared,lambda,alpha,phase,accepted,active_set_size,wall_us`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,J,mred,ared,lambda,alpha,phase,accepted,active_set_size,wall_us\n");
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{},{},{},{}",
                r.iter,
                r.objective,
                r.mred,
                r.ared,
                r.lambda,
                r.alpha,
                r.phase.label(),
                r.accepted,
                r.active_set_size,
                r.wall_us
            );
        }
        out
    }

    /// `(J_0, J_1, ...)`: the initial objective followed by each iteration's value.
    pub fn objective_history(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective).chain(self.trace.iter().map(|r| r.objective)).collect()
    }
}

/// Terms of the working objective at one coefficient vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    /// `sum_k r_k`.
    pub obstacle_sum: f64,
    /// Largest joint-limit violation at the search checkpoints (zero when feasible).
    pub max_violation: f64,
}

struct Context<'a> {
    p: &'a Problem,
    cfg: &'a SolverConfig,
    lift: BoundaryLift,
    smooth: SmoothnessMatrix,
    /// `rho Q`.
    weighted_q: DMatrix<f64>,
    check_times: Vec<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    task: Option<TaskSpec>,
    penalized: bool,
}

impl<'a> Context<'a> {
    fn new(p: &'a Problem, cfg: &'a SolverConfig, penalized: bool) -> Result<Self> {
        let lift = BoundaryLift::new(p.lift, &p.start, &p.goal, p.basis.horizon())?;
        let smooth = smoothness_matrix(&p.basis, p.model.dof(), p.weight)?;
        let weighted_q = smooth.matrix() * cfg.smoothness_weight;
        let task = match &p.task {
            Some(t) => Some(t.clone().with_checkpoints(cfg.task_points, 4 * cfg.task_points)?),
            None => None,
        };
        Ok(Self {
            p,
            cfg,
            lift,
            smooth,
            weighted_q,
            check_times: checkpoints(cfg.check_points, p.basis.horizon())?,
            lower: p.model.lower(),
            upper: p.model.upper(),
            task,
            penalized,
        })
    }

    fn coeffs(&self, psi: &DVector<f64>) -> CoefficientVector {
        CoefficientVector::new(psi.clone(), self.p.basis.clone(), self.lift.clone()).expect("coefficient length")
    }

    /// `rho psi^T Q psi + sum_k r_k^2 + s^-2 sum max(0, v)^2` at the search checkpoints.
    fn evaluate(&self, psi: &DVector<f64>) -> Result<Evaluation> {
        let c = self.coeffs(psi);
        let mut obstacle_sq = 0.0;
        let mut obstacle_sum = 0.0;
        let mut thetas = Vec::with_capacity(self.check_times.len());
        for &t in &self.check_times {
            let theta = c.eval(t)?;
            let r = obstacle_cost(&self.p.scene, &self.p.model, theta.as_slice())?;
            obstacle_sq += r * r;
            obstacle_sum += r;
            thetas.push(theta);
        }
        // Same order as the one-sided stack: all upper rows, then all lower rows.
        let mut penalty = 0.0;
        let mut worst: f64 = 0.0;
        for theta in &thetas {
            for i in 0..theta.len() {
                let v = theta[i] - self.upper[i];
                if v > 0.0 {
                    penalty += v * v;
                    worst = worst.max(v);
                }
            }
        }
        for theta in &thetas {
            for i in 0..theta.len() {
                let v = self.lower[i] - theta[i];
                if v > 0.0 {
                    penalty += v * v;
                    worst = worst.max(v);
                }
            }
        }
        let smooth = self.cfg.smoothness_weight * self.smooth.quadratic_form(psi);
        let objective = if self.penalized {
            smooth + obstacle_sq + penalty / self.cfg.penalty_scale.powi(2)
        } else {
            smooth + obstacle_sq
        };
        Ok(Evaluation { objective, obstacle_sum, max_violation: worst })
    }

    fn equality(&self, psi: &DVector<f64>) -> Result<EqualitySystem> {
        build_equality_system(&self.coeffs(psi), &self.p.start, &self.p.goal, self.task.as_ref(), &self.p.model)
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings { tol: self.cfg.qp_tol, max_iter: self.cfg.qp_max_iter, ..QpSettings::default() }
    }
}

/// `J(psi)` of the penalized search.
pub fn working_objective(problem: &Problem, cfg: &SolverConfig, psi: &DVector<f64>) -> Result<f64> {
    let ctx = Context::new(problem, cfg, true)?;
    let expected = problem.basis.len() * problem.model.dof();
    if psi.len() != expected {
        return Err(Error::Argument(format!("coefficient vector has length {}, expected {expected}", psi.len())));
    }
    Ok(ctx.evaluate(psi)?.objective)
}

/// Outcome of the acceptance test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acceptance {
    pub accepted: bool,
    pub alpha: f64,
    /// Objective at the accepted point (at the last trial when rejected).
    pub objective: f64,
    pub trials: usize,
}

/// Two-phase acceptance.
///
/// `history` holds the objective values of past iterates, newest last.
/// `slope` is `dpsi^T g`. In the tail phase a trial `alpha` is accepted when
/// `J(psi + alpha dpsi) <= max(window) - c1 alpha |slope|`.
pub fn accept_step(
    phase: Phase,
    history: &[f64],
    slope: f64,
    cfg: &SolverConfig,
    mut objective_at: impl FnMut(f64) -> Result<f64>,
) -> Result<Acceptance> {
    if phase == Phase::Exploratory {
        let objective = objective_at(1.0)?;
        return Ok(Acceptance { accepted: true, alpha: 1.0, objective, trials: 1 });
    }
    let from = history.len().saturating_sub(cfg.window);
    let reference = history[from..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha = 1.0;
    let mut objective = f64::NAN;
    for trial in 0..=cfg.max_backtracks {
        objective = objective_at(alpha)?;
        if objective <= reference - cfg.armijo * alpha * slope.abs() {
            return Ok(Acceptance { accepted: true, alpha, objective, trials: trial + 1 });
        }
        alpha *= cfg.backtrack;
    }
    Ok(Acceptance { accepted: false, alpha: 0.0, objective, trials: cfg.max_backtracks + 1 })
}

/// Full optimizer: penalized reduced search, two-phase acceptance, terminal repair.
pub fn drafto_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
    solve(problem, cfg, Planner::Drafto)
}

/// Same outer loop with a hard-constrained QP at every step and no penalty.
pub fn facto_baseline_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
    solve(problem, cfg, Planner::Facto)
}

/// Penalized reduced search that always accepts the full step; repair retained.
pub fn gn_ablation_solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
    solve(problem, cfg, Planner::DraftoGn)
}

struct StepOutcome {
    step: DVector<f64>,
    /// Hard limit rows of the baseline step, reused by its restoration projection.
    limits: Option<InequalitySystem>,
    mred: f64,
    lambda: f64,
    stationarity: f64,
    active: usize,
    slope: f64,
}

/// Largest task residual at the checkpoints selected for `coeffs`.
fn final_task_residual(problem: &Problem, ctx: &Context, coeffs: &CoefficientVector) -> Result<Option<f64>> {
    let Some(spec) = &ctx.task else {
        return Ok(None);
    };
    let pool = checkpoints(spec.pool(), problem.basis.horizon())?;
    let times = select_task_checkpoints(coeffs, spec, &problem.model, &pool)?;
    let c = spec.chain();
    let m = &problem.model;
    let mut worst: f64 = 0.0;
    for t in times {
        let theta = coeffs.eval(t)?;
        let (x, _) = m.chains()[c].ee_posture(m.slice(c, theta.as_slice()))?;
        worst = worst.max(task_residual(spec, &x).amax());
    }
    Ok(Some(worst))
}

/// Particular steps below this size count as equality-feasible.
const RESTORE_TOL: f64 = 1e-9;

/// Equality correction: the minimum-norm particular step, or with hard limit
/// rows the smallest step meeting both, with the boundary rows made exact.
fn restoration(
    eq: &EqualitySystem,
    limits: Option<&InequalitySystem>,
    boundary: &EqualitySystem,
    settings: &QpSettings,
) -> Result<Option<DVector<f64>>> {
    let Some(ieq) = limits else {
        return Ok(Some(eq.particular.clone()));
    };
    let n = eq.particular.len();
    let qp = QpProblem::new(DMatrix::identity(n, n), DVector::zeros(n))
        .with_equalities(eq.a_eq.clone(), eq.b_eq.clone())
        .with_inequalities(ieq.a_ieq.clone(), ieq.b_lo.clone(), ieq.b_up.clone());
    let sol = solve_qp_with(&qp, settings)?;
    let exact = &boundary.null_basis * boundary.null_basis.tr_mul(&sol.x);
    Ok((sol.status != QpStatus::Infeasible).then_some(exact))
}

pub fn solve(problem: &Problem, cfg: &SolverConfig, planner: Planner) -> Result<SolveResult> {
    cfg.validate()?;
    problem.check_endpoints()?;
    let clock = Instant::now();
    let ctx = Context::new(problem, cfg, planner != Planner::Facto)?;
    let init = init_trajectory(&problem.basis, &ctx.lift, &problem.start, &problem.goal, &problem.model)?;
    let mut timings = Timings { init: clock.elapsed().as_secs_f64(), ..Timings::default() };

    let search_clock = Instant::now();
    let mut psi = init.psi.clone();
    let n = psi.len();
    let mut lambda = cfg.lambda_init;
    let mut uema = Uema::new(cfg.ema_decay, n);
    let mut eval = ctx.evaluate(&psi)?;
    let initial_objective = eval.objective;
    let mut history = vec![eval.objective];
    let mut phase = Phase::Exploratory;
    let fixed_eq = if ctx.task.is_none() { Some(ctx.equality(&psi)?) } else { None };
    let boundary = build_equality_system(&init, &problem.start, &problem.goal, None, &problem.model)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let qp_settings = ctx.qp_settings();

    for iter in 1..=cfg.max_iter {
        let it_clock = Instant::now();
        if planner != Planner::DraftoGn
            && phase == Phase::Exploratory
            && ((eval.obstacle_sum <= cfg.phase_obstacle_tol && eval.max_violation <= cfg.phase_limit_tol)
                || iter >= cfg.forced_switch())
        {
            phase = Phase::Tail;
        }
        let coeffs = ctx.coeffs(&psi);
        let block = residual_block(&problem.scene, &problem.model, &coeffs, &ctx.check_times)?;
        let (g_bar, h_bar) = uema.update(&block.flat_gradient(), &block.flat_hessian());
        let eq = match &fixed_eq {
            Some(e) => e.clone(),
            None => ctx.equality(&psi)?,
        };
        let outcome = if planner == Planner::Facto {
            let gn = GnModel::assemble(&ctx.weighted_q, &psi, g_bar, h_bar, DVector::zeros(n), DMatrix::zeros(n, n));
            let ieq = build_inequality_system(&coeffs, &problem.model, cfg.limit_points)?;
            let mut h = gn.h.clone();
            for i in 0..n {
                h[(i, i)] += lambda;
            }
            let qp = QpProblem::new(h, gn.g.clone())
                .with_equalities(eq.a_eq.clone(), eq.b_eq.clone())
                .with_inequalities(ieq.a_ieq.clone(), ieq.b_lo.clone(), ieq.b_up.clone());
            let mut sol = solve_qp_with(&qp, &qp_settings)?;
            let mut active = sol.y.iter().skip(eq.a_eq.nrows()).filter(|y| **y != 0.0).count();
            if sol.status == QpStatus::MaxIter {
                // Near-dependent task rows stall ADMM; the null-space form keeps them exact.
                let (step, reduced) = terminal_repair(&gn.h, &gn.g, &eq, &ieq, lambda, &qp_settings)?;
                active = reduced.y.iter().filter(|y| **y != 0.0).count();
                sol = QpSolution { x: step, ..reduced };
            }
            if sol.status == QpStatus::Infeasible {
                log::debug!("baseline step QP infeasible at iteration {iter}");
                break;
            }
            // Remove the remaining boundary residual so the endpoints stay exact.
            let step = &boundary.null_basis * boundary.null_basis.tr_mul(&sol.x);
            StepOutcome {
                limits: Some(ieq),
                mred: -gn.eval(&step),
                slope: step.dot(&gn.g),
                step,
                lambda,
                stationarity: 0.0,
                active,
            }
        } else {
            let ieq = build_inequality_system(&coeffs, &problem.model, cfg.check_points)?;
            let v = violation_vector(&ieq, &DVector::zeros(n));
            let act = active_set(&v);
            let (g_jnt, h_jnt) = penalty_terms(&ieq, &v, &act, cfg.penalty_scale);
            let gn = GnModel::assemble(&ctx.weighted_q, &psi, g_bar, h_bar, g_jnt, h_jnt);
            let rs = reduced_step(&gn, &eq, lambda, cfg)?;
            StepOutcome {
                limits: None,
                slope: rs.step.dot(&gn.g),
                step: rs.step,
                mred: rs.mred,
                lambda: rs.lambda,
                stationarity: rs.stationarity,
                active: act.len(),
            }
        };
        lambda = outcome.lambda;

        let mut full: Option<Evaluation> = None;
        let mut last: Option<Evaluation> = None;
        let acc = accept_step(phase, &history, outcome.slope, cfg, |alpha| {
            let e = ctx.evaluate(&(&psi + &outcome.step * alpha))?;
            if alpha == 1.0 {
                full = Some(e);
            }
            last = Some(e);
            Ok(e.objective)
        })?;
        let ared = eval.objective - full.map_or(f64::NAN, |e| e.objective);
        let step_norm;
        let mut restored = false;
        if acc.accepted {
            psi += &outcome.step * acc.alpha;
            eval = last.expect("evaluated trial");
            lambda = lambda_update(lambda, ared, outcome.mred, cfg);
            step_norm = outcome.step.amax() * acc.alpha;
        } else {
            lambda = (lambda * cfg.lambda_up).min(cfg.lambda_max);
            step_norm = f64::INFINITY;
            if eq.particular.amax() > RESTORE_TOL {
                if let Some(fix) = restoration(&eq, outcome.limits.as_ref(), &boundary, &qp_settings)? {
                    psi += fix;
                    eval = ctx.evaluate(&psi)?;
                    restored = true;
                }
            }
        }
        history.push(eval.objective);
        trace.push(TraceRecord {
            iter,
            objective: eval.objective,
            mred: outcome.mred,
            ared,
            lambda: outcome.lambda,
            alpha: acc.alpha,
            phase,
            accepted: acc.accepted,
            active_set_size: outcome.active,
            wall_us: it_clock.elapsed().as_micros() as u64,
            descent: outcome.slope < 0.0,
            stationarity: outcome.stationarity,
            step_norm: if acc.accepted { step_norm } else { 0.0 },
            restored,
        });
        if acc.accepted && step_norm <= cfg.step_tol {
            let from = history.len().saturating_sub(cfg.window);
            let window = &history[from..];
            let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
            if window.len() >= 2 && hi - lo <= cfg.objective_tol * eval.objective.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    timings.search = search_clock.elapsed().as_secs_f64();

    let repair_clock = Instant::now();
    let mut coeffs = ctx.coeffs(&psi);
    let mut ieq = build_inequality_system(&coeffs, &problem.model, cfg.limit_points)?;
    let mut violation = v_inf(&ieq);
    let mut task_res = final_task_residual(problem, &ctx, &coeffs)?;
    let needs_repair = |v: f64, h: Option<f64>| v > cfg.limit_tol || h.is_some_and(|h| h > cfg.limit_tol);
    let mut repairs = 0;
    // The baseline keeps hard limits throughout, so it only restores the task rows.
    let triggered = match planner {
        Planner::Facto => task_res.is_some_and(|h| h > cfg.limit_tol),
        _ => needs_repair(violation, task_res),
    };
    if triggered {
        let score = |v: f64, h: Option<f64>| v.max(h.unwrap_or(0.0));
        let mut best = (score(violation, task_res), psi.clone());
        while needs_repair(violation, task_res) && repairs < cfg.max_repair {
            let eq = ctx.equality(&psi)?;
            let step = if planner == Planner::Facto {
                repairs += 1;
                match restoration(&eq, Some(&ieq), &boundary, &qp_settings)? {
                    Some(step) => step,
                    None => break,
                }
            } else {
                let (g_bar, h_bar) = uema.current();
                let gn = GnModel::assemble(&ctx.weighted_q, &psi, g_bar, h_bar, DVector::zeros(n), DMatrix::zeros(n, n));
                let reg = cfg.repair_reg.unwrap_or_else(|| 10.0 * gn.h.trace() / n as f64);
                let (step, sol) = terminal_repair(&gn.h, &gn.g, &eq, &ieq, reg, &qp_settings)?;
                repairs += 1;
                if sol.status == QpStatus::Infeasible {
                    log::debug!("repair QP infeasible");
                    break;
                }
                step
            };
            psi += step;
            coeffs = ctx.coeffs(&psi);
            ieq = build_inequality_system(&coeffs, &problem.model, cfg.limit_points)?;
            violation = v_inf(&ieq);
            task_res = final_task_residual(problem, &ctx, &coeffs)?;
            if score(violation, task_res) < best.0 {
                best = (score(violation, task_res), psi.clone());
            }
        }
        if score(violation, task_res) > best.0 {
            psi = best.1;
            coeffs = ctx.coeffs(&psi);
            ieq = build_inequality_system(&coeffs, &problem.model, cfg.limit_points)?;
            violation = v_inf(&ieq);
            task_res = final_task_residual(problem, &ctx, &coeffs)?;
        }
    }
    timings.repair = repair_clock.elapsed().as_secs_f64();

    let status = if violation > cfg.limit_tol {
        SolveStatus::PartialFeasible
    } else if converged {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIter
    };
    let horizon = problem.basis.horizon();
    let endpoint_error =
        (coeffs.eval(0.0)? - &problem.start).amax().max((coeffs.eval(horizon)? - &problem.goal).amax());
    let task_residual = task_res;
    let stationary = trace.last().is_some_and(|r| r.stationarity <= cfg.stationarity_tol);
    let success = dense_success_check(&coeffs, &problem.scene, &problem.model, cfg.dense_samples, cfg.dense_limit_slack)?;
    Ok(SolveResult {
        planner,
        coeffs,
        status,
        trace,
        timings,
        initial_objective,
        v_inf: violation,
        success,
        repair_iterations: repairs,
        endpoint_error,
        task_residual,
        converged,
        stationary,
    })
}
