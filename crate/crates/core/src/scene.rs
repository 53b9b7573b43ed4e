//! Obstacle worlds and the collision term of the objective.
//!
//! The per-configuration cost is a margin hinge summed over collision balls:
//! `f_o = sum_b max(0, eps - d_b)` where `d_b` is the signed distance from
//! ball `b` to the nearest obstacle. Enabled self- and cross-collision pairs
//! add the same hinge on ball-ball clearance.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::basis::CoefficientVector;
use crate::kinematics::{BallState, MultiChainModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Obstacle {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box given by its min and max corners.
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

impl Obstacle {
    /// Signed distance from `p` to the surface and its gradient in `p`.
    ///
    /// The gradient is zero where the distance is not differentiable in a
    /// well-defined direction (the sphere center).
    pub fn distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Obstacle::Sphere { center, radius } => {
                let v = p - center;
                let len = v.norm();
                let grad = if len > 1e-12 { v / len } else { Vector3::zeros() };
                (len - radius, grad)
            }
            Obstacle::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let rel = p - c;
                let sign = rel.map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
                let q = rel.abs() - h;
                let outside = q.map(|x| x.max(0.0));
                let out_len = outside.norm();
                if out_len > 0.0 {
                    (out_len, sign.component_mul(&outside) / out_len)
                } else {
                    let k = q.imax();
                    let mut grad = Vector3::zeros();
                    grad[k] = sign[k];
                    (q[k], grad)
                }
            }
        }
    }

    pub fn translated(&self, shift: &Vector3<f64>) -> Self {
        match self {
            Obstacle::Sphere { center, radius } => Obstacle::Sphere { center: center + shift, radius: *radius },
            Obstacle::Box { min, max } => Obstacle::Box { min: min + shift, max: max + shift },
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        match self {
            Obstacle::Sphere { radius, .. } if !(*radius > 0.0) => Err(Error::Argument(format!(
                "obstacles[{index}]: sphere radius must be > 0, got {radius}"
            ))),
            Obstacle::Box { min, max } if !(0..3).all(|k| min[k] < max[k]) => Err(Error::Argument(format!(
                "obstacles[{index}]: box min {:?} must be below max {:?}",
                min.as_slice(),
                max.as_slice()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    obstacles: Vec<Obstacle>,
    margin: f64,
    self_collision: bool,
    cross_collision: bool,
}

impl Scene {
    pub fn new(obstacles: Vec<Obstacle>, margin: f64) -> Result<Self> {
        for (i, o) in obstacles.iter().enumerate() {
            o.validate(i)?;
        }
        if !(margin >= 0.0) {
            return Err(Error::Argument(format!("safety margin must be >= 0, got {margin}")));
        }
        Ok(Self { obstacles, margin, self_collision: false, cross_collision: false })
    }

    pub fn with_self_collision(mut self, on: bool) -> Self {
        self.self_collision = on;
        self
    }

    pub fn with_cross_collision(mut self, on: bool) -> Self {
        self.cross_collision = on;
        self
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn self_collision(&self) -> bool {
        self.self_collision
    }

    pub fn cross_collision(&self) -> bool {
        self.cross_collision
    }

    pub fn translated(&self, shift: &Vector3<f64>) -> Self {
        Self {
            obstacles: self.obstacles.iter().map(|o| o.translated(shift)).collect(),
            ..self.clone()
        }
    }

    /// Nearest obstacle surface distance and gradient, or `None` for an empty world.
    fn nearest(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for o in &self.obstacles {
            let (d, g) = o.distance(p);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, g));
            }
        }
        best
    }
}

/// Ball clearance to the nearest obstacle; `+inf` without obstacles.
pub fn signed_distance(scene: &Scene, center: &Vector3<f64>, radius: f64) -> f64 {
    scene.nearest(center).map_or(f64::INFINITY, |(d, _)| d - radius)
}

/// World ball states of every chain, with Jacobians widened to the stacked joint vector.
struct ModelBalls {
    chain: Vec<usize>,
    states: Vec<BallState>,
    offsets: Vec<usize>,
}

fn model_balls(model: &MultiChainModel, theta: &[f64], with_jacobian: bool) -> Result<ModelBalls> {
    model.check_len(theta)?;
    let mut chain = Vec::new();
    let mut states = Vec::new();
    for (c, ch) in model.chains().iter().enumerate() {
        let slice = model.slice(c, theta);
        let balls = if with_jacobian { ch.ccb_states(slice)? } else { ch.ccb_centers(slice)? };
        for s in balls {
            chain.push(c);
            states.push(s);
        }
    }
    let offsets = (0..model.chains().len()).map(|c| model.offset(c)).collect();
    Ok(ModelBalls { chain, states, offsets })
}

impl ModelBalls {
    /// Adds `scale * n^T J_b` into `grad` for ball `b`.
    fn accumulate(&self, b: usize, n: &Vector3<f64>, scale: f64, grad: &mut DVector<f64>) {
        let off = self.offsets[self.chain[b]];
        let jac = &self.states[b].jacobian;
        for j in 0..jac.ncols() {
            grad[off + j] += scale * n.dot(&jac.column(j));
        }
    }

    /// Ball pairs subject to self- or cross-collision checks.
    fn pairs(&self, scene: &Scene) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.states.len() {
            if !self.states[a].check {
                continue;
            }
            for b in a + 1..self.states.len() {
                if !self.states[b].check {
                    continue;
                }
                let same = self.chain[a] == self.chain[b];
                let wanted = if same {
                    scene.self_collision && self.states[a].link.abs_diff(self.states[b].link) >= 2
                } else {
                    scene.cross_collision
                };
                if wanted {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// `f_o(theta)`, the margin-hinge collision cost of one configuration.
pub fn obstacle_cost(scene: &Scene, model: &MultiChainModel, theta: &[f64]) -> Result<f64> {
    let balls = model_balls(model, theta, false)?;
    let eps = scene.margin;
    let mut cost = 0.0;
    for s in balls.states.iter().filter(|s| s.check) {
        if let Some((d, _)) = scene.nearest(&s.center) {
            cost += (eps - (d - s.radius)).max(0.0);
        }
    }
    for (a, b) in balls.pairs(scene) {
        let (sa, sb) = (&balls.states[a], &balls.states[b]);
        cost += (eps - ((sa.center - sb.center).norm() - sa.radius - sb.radius)).max(0.0);
    }
    Ok(cost)
}

/// `f_o(theta)` and `d f_o / d theta` (subgradient zero at hinge kinks).
pub fn obstacle_cost_gradient(scene: &Scene, model: &MultiChainModel, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let balls = model_balls(model, theta, true)?;
    let eps = scene.margin;
    let mut cost = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for (b, s) in balls.states.iter().enumerate() {
        if !s.check {
            continue;
        }
        if let Some((d, n)) = scene.nearest(&s.center) {
            let gap = eps - (d - s.radius);
            if gap > 0.0 {
                cost += gap;
                balls.accumulate(b, &n, -1.0, &mut grad);
            }
        }
    }
    for (a, b) in balls.pairs(scene) {
        let (sa, sb) = (&balls.states[a], &balls.states[b]);
        let v = sa.center - sb.center;
        let len = v.norm();
        let gap = eps - (len - sa.radius - sb.radius);
        if gap > 0.0 {
            cost += gap;
            if len > 1e-12 {
                let n = v / len;
                balls.accumulate(a, &n, -1.0, &mut grad);
                balls.accumulate(b, &n, 1.0, &mut grad);
            }
        }
    }
    Ok((cost, grad))
}

/// Smallest raw clearance over checked balls and enabled pairs (no margin).
pub fn min_clearance(scene: &Scene, model: &MultiChainModel, theta: &[f64]) -> Result<f64> {
    let balls = model_balls(model, theta, false)?;
    let mut best = f64::INFINITY;
    for s in balls.states.iter().filter(|s| s.check) {
        best = best.min(signed_distance(scene, &s.center, s.radius));
    }
    for (a, b) in balls.pairs(scene) {
        let (sa, sb) = (&balls.states[a], &balls.states[b]);
        best = best.min((sa.center - sb.center).norm() - sa.radius - sb.radius);
    }
    Ok(best)
}

/// Collision residual at one checkpoint and its gradient in coefficient space.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleResidual {
    pub time: f64,
    /// `r_k = f_o(xi(t_k))`.
    pub value: f64,
    /// `g_k = Phi(t_k)^T d f_o / d theta`.
    pub gradient: DVector<f64>,
}

/// All checkpoint residuals stacked: `values[k] = r_k`, row `k` of `gradients` is `g_k^T`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub values: DVector<f64>,
    pub gradients: DMatrix<f64>,
}

impl ResidualBlock {
    /// `sum_k r_k^2`.
    pub fn cost(&self) -> f64 {
        self.values.norm_squared()
    }

    /// `sum_k r_k g_k`.
    pub fn flat_gradient(&self) -> DVector<f64> {
        self.gradients.tr_mul(&self.values)
    }

    /// `sum_k g_k g_k^T`.
    pub fn flat_hessian(&self) -> DMatrix<f64> {
        self.gradients.tr_mul(&self.gradients)
    }
}

pub fn residual_block(
    scene: &Scene,
    model: &MultiChainModel,
    coeffs: &CoefficientVector,
    checkpoints: &[f64],
) -> Result<ResidualBlock> {
    let basis = coeffs.basis();
    let len = basis.len();
    let n = coeffs.psi.len();
    let mut values = DVector::zeros(checkpoints.len());
    let mut gradients = DMatrix::zeros(checkpoints.len(), n);
    let mut phi = vec![0.0; len];
    for (k, &t) in checkpoints.iter().enumerate() {
        let t = basis.check_time(t)?;
        let theta = coeffs.eval(t)?;
        let (cost, dtheta) = obstacle_cost_gradient(scene, model, theta.as_slice())?;
        values[k] = cost;
        if cost > 0.0 {
            basis.fill_values(t, &mut phi);
            for (i, &dq) in dtheta.iter().enumerate() {
                for (m, &p) in phi.iter().enumerate() {
                    gradients[(k, i * len + m)] = p * dq;
                }
            }
        }
    }
    Ok(ResidualBlock { values, gradients })
}

/// Per-checkpoint residuals `r_k` and gradients `g_k`.
pub fn obstacle_residuals(
    scene: &Scene,
    model: &MultiChainModel,
    coeffs: &CoefficientVector,
    checkpoints: &[f64],
) -> Result<Vec<ObstacleResidual>> {
    let block = residual_block(scene, model, coeffs, checkpoints)?;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(k, &t)| ObstacleResidual {
            time: t,
            value: block.values[k],
            gradient: block.gradients.row(k).transpose(),
        })
        .collect())
}
