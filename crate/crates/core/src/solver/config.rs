use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tuning knobs of the outer loop, the penalty, the repair stage and the checkpoint densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Weight of the smoothness term `psi^T Q psi`.
    pub smoothness_weight: f64,
    /// Joint-limit penalty scale; the penalty is divided by its square.
    pub penalty_scale: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Reduction ratio at or below which damping grows.
    pub ratio_low: f64,
    /// Reduction ratio at or above which damping shrinks.
    pub ratio_high: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Length of the non-monotone reference window, also used by the stopping test.
    pub window: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Checkpoints for collision residuals and the penalty during the search.
    pub check_points: usize,
    /// Checkpoints for the terminal limit check and repair.
    pub limit_points: usize,
    /// Task checkpoints kept per iteration; the candidate pool is four times larger.
    pub task_points: usize,
    pub limit_tol: f64,
    pub max_iter: usize,
    pub ema_decay: f64,
    /// Phase switch once the summed collision residual falls to this value...
    pub phase_obstacle_tol: f64,
    /// ...and the largest penalty violation falls to this value.
    pub phase_limit_tol: f64,
    /// Forced phase switch at this fraction of `max_iter`.
    pub phase_switch_fraction: f64,
    pub step_tol: f64,
    pub objective_tol: f64,
    /// Threshold behind [`SolveResult::stationary`](super::SolveResult::stationary).
    pub stationarity_tol: f64,
    pub max_repair: usize,
    /// Repair regularizer; `None` uses ten times the mean diagonal of the model Hessian.
    pub repair_reg: Option<f64>,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub dense_samples: usize,
    /// Joint-limit slack (rad) of the dense success check.
    pub dense_limit_slack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            smoothness_weight: 0.1,
            penalty_scale: 0.05,
            lambda_init: 1e-3,
            lambda_min: 1e-8,
            lambda_max: 1e4,
            ratio_low: 0.25,
            ratio_high: 0.75,
            lambda_up: 4.0,
            lambda_down: 2.0,
            window: 5,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 8,
            check_points: 32,
            limit_points: 128,
            task_points: 8,
            limit_tol: 1e-6,
            max_iter: 200,
            ema_decay: 0.9,
            phase_obstacle_tol: 1e-3,
            phase_limit_tol: 1e-3,
            phase_switch_fraction: 0.5,
            step_tol: 1e-6,
            objective_tol: 1e-6,
            stationarity_tol: 1e-5,
            max_repair: 5,
            repair_reg: None,
            qp_tol: 1e-8,
            qp_max_iter: 4000,
            dense_samples: 2000,
            dense_limit_slack: 1e-3,
        }
    }
}

fn require(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("solver.{key}: {msg}")))
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.smoothness_weight >= 0.0, "smoothness_weight", "must be >= 0")?;
        require(self.penalty_scale > 0.0, "penalty_scale", "must be > 0")?;
        require(self.lambda_min > 0.0, "lambda_min", "must be > 0")?;
        require(
            self.lambda_min <= self.lambda_init && self.lambda_init <= self.lambda_max,
            "lambda_init",
            "must satisfy lambda_min <= lambda_init <= lambda_max",
        )?;
        require(
            0.0 < self.ratio_low && self.ratio_low < self.ratio_high,
            "ratio_low",
            "must satisfy 0 < ratio_low < ratio_high",
        )?;
        require(self.lambda_up > 1.0, "lambda_up", "must be > 1")?;
        require(self.lambda_down > 1.0, "lambda_down", "must be > 1")?;
        require(self.window >= 1, "window", "must be >= 1")?;
        require(0.0 < self.armijo && self.armijo < 1.0, "armijo", "must lie in (0, 1)")?;
        require(0.0 < self.backtrack && self.backtrack < 1.0, "backtrack", "must lie in (0, 1)")?;
        require(self.check_points >= 2, "check_points", "must be >= 2")?;
        require(self.limit_points >= 2, "limit_points", "must be >= 2")?;
        require(self.task_points >= 1, "task_points", "must be >= 1")?;
        require(self.limit_tol > 0.0, "limit_tol", "must be > 0")?;
        require(self.max_iter >= 1, "max_iter", "must be >= 1")?;
        require((0.0..1.0).contains(&self.ema_decay), "ema_decay", "must lie in [0, 1)")?;
        require(
            (0.0..=1.0).contains(&self.phase_switch_fraction),
            "phase_switch_fraction",
            "must lie in [0, 1]",
        )?;
        require(self.qp_tol > 0.0, "qp_tol", "must be > 0")?;
        require(self.qp_max_iter >= 1, "qp_max_iter", "must be >= 1")?;
        require(self.repair_reg.is_none_or(|r| r >= 0.0), "repair_reg", "must be >= 0")?;
        require(self.dense_samples >= 2, "dense_samples", "must be >= 2")?;
        require(self.dense_limit_slack >= 0.0, "dense_limit_slack", "must be >= 0")?;
        Ok(())
    }

    /// Iteration at which the tail phase is forced.
    pub fn forced_switch(&self) -> usize {
        (self.phase_switch_fraction * self.max_iter as f64).floor() as usize
    }
}
