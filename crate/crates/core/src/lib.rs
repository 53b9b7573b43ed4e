//! Constrained trajectory optimization for serial kinematic chains.
//!
//! Trajectories live in a truncated basis-function expansion. The main search
//! is a damped Gauss-Newton iteration in the null space of the linearized
//! boundary/task equalities, with joint limits handled by a hinge-squared
//! penalty and a two-phase (exploratory, then non-monotone) acceptance rule.
//! A convex QP is used only to initialize the coefficients and to restore
//! strict joint-limit feasibility at termination.
//!
//! Module map:
//!
//! - [`basis`]: basis functions, boundary lift, smoothness matrix
//! - [`kinematics`]: planar and spatial revolute chains, ball placement, Jacobians
//! - [`scene`]: sphere/box obstacle worlds and the collision residuals
//! - [`constraints`]: boundary, task and joint-limit systems, null-space reduction
//! - [`qp`]: ADMM QP solver, initialization and terminal repair
//! - [`solver`]: the reduced Gauss-Newton loop and its baseline/ablation variants
//! - [`bench`]: procedural suites, metrics and the benchmark harness
//! - [`io`]: JSON scene/task/config files

pub mod basis;
pub mod bench;
pub mod constraints;
mod error;
pub mod io;
pub mod kinematics;
pub mod qp;
pub mod scene;
pub mod solver;

pub use error::{Error, Result};
