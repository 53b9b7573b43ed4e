//! Serial revolute chains: forward kinematics, collision-check balls and
//! end-effector posture coordinates.
//!
//! Both chain classes share one representation. Joint `k` sits at `offset_k`
//! in the body frame of joint `k - 1` and rotates about `axis_k`; the tool
//! point is a fixed offset in the last body frame. A planar chain is the
//! special case with every axis along `+z` and offsets along the previous
//! link's `x` direction, so planar geometry lives in the `z = 0` plane.

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix3, Matrix3xX, Rotation3, Translation3, Unit, UnitQuaternion,
    Vector3,
};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// Posture `(px, py, yaw)`.
    Planar,
    /// Posture `(px, py, pz, rx, ry, rz)` with the rotation as axis-angle.
    Spatial,
}

impl ChainKind {
    pub fn posture_dim(self) -> usize {
        match self {
            ChainKind::Planar => 3,
            ChainKind::Spatial => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RevoluteJoint {
    /// Joint origin in the previous body frame (the base frame for joint 0).
    pub offset: Vector3<f64>,
    pub axis: Unit<Vector3<f64>>,
}

/// A sphere rigidly attached to one link.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionBall {
    pub link: usize,
    /// Center in the body frame of `link`.
    pub offset: Vector3<f64>,
    pub radius: f64,
    /// Balls with `check == false` (e.g. fingers) are skipped by every
    /// collision term.
    pub check: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainModel {
    kind: ChainKind,
    joints: Vec<RevoluteJoint>,
    tool: Vector3<f64>,
    base: Isometry3<f64>,
    base_yaw: f64,
    lower: DVector<f64>,
    upper: DVector<f64>,
    balls: Vec<CollisionBall>,
}

/// World-frame state of one collision ball.
#[derive(Clone, Debug)]
pub struct BallState {
    pub link: usize,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub check: bool,
    /// `d center / d theta`, 3 x M.
    pub jacobian: Matrix3xX<f64>,
}

impl ChainModel {
    /// Planar revolute chain with the given link lengths; `base = (x, y, yaw)`.
    pub fn planar(
        link_lengths: &[f64],
        base: [f64; 3],
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(Error::Argument("planar chain needs at least one link".into()));
        }
        if let Some(l) = link_lengths.iter().find(|l| !(**l > 0.0)) {
            return Err(Error::Argument(format!("link lengths must be > 0, got {l}")));
        }
        let joints = link_lengths
            .iter()
            .enumerate()
            .map(|(k, _)| RevoluteJoint {
                offset: if k == 0 {
                    Vector3::zeros()
                } else {
                    Vector3::new(link_lengths[k - 1], 0.0, 0.0)
                },
                axis: Vector3::z_axis(),
            })
            .collect();
        let tool = Vector3::new(*link_lengths.last().unwrap(), 0.0, 0.0);
        let iso = Isometry3::from_parts(
            Translation3::new(base[0], base[1], 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), base[2]),
        );
        Self::build(ChainKind::Planar, joints, tool, iso, base[2], lower, upper)
    }

    /// Spatial revolute chain with fixed joint axes.
    pub fn spatial(
        joints: Vec<RevoluteJoint>,
        tool: Vector3<f64>,
        base: Isometry3<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Argument("spatial chain needs at least one joint".into()));
        }
        Self::build(ChainKind::Spatial, joints, tool, base, 0.0, lower, upper)
    }

    fn build(
        kind: ChainKind,
        joints: Vec<RevoluteJoint>,
        tool: Vector3<f64>,
        base: Isometry3<f64>,
        base_yaw: f64,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let m = joints.len();
        if lower.len() != m || upper.len() != m {
            return Err(Error::Argument(format!(
                "joint limits must have length {m}, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..m {
            if !(lower[i] < upper[i]) {
                return Err(Error::Argument(format!(
                    "joint {i}: lower limit {} must be below upper limit {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { kind, joints, tool, base, base_yaw, lower, upper, balls: Vec::new() })
    }

    /// Replaces the ball set after validating links and radii.
    pub fn with_balls(mut self, balls: Vec<CollisionBall>) -> Result<Self> {
        for (i, b) in balls.iter().enumerate() {
            if b.link >= self.dof() {
                return Err(Error::Argument(format!(
                    "ball {i} attached to link {} but the chain has {} links",
                    b.link,
                    self.dof()
                )));
            }
            if !(b.radius > 0.0) {
                return Err(Error::Argument(format!("ball {i} radius must be > 0, got {}", b.radius)));
            }
        }
        self.balls = balls;
        Ok(self)
    }

    /// Places `ceil(length / (2 r))` balls of radius `r` evenly along each link.
    pub fn with_default_balls(self, radius: f64) -> Result<Self> {
        let balls = self.default_balls(radius)?;
        self.with_balls(balls)
    }

    pub fn default_balls(&self, radius: f64) -> Result<Vec<CollisionBall>> {
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("ball radius must be > 0, got {radius}")));
        }
        let mut balls = Vec::new();
        for k in 0..self.dof() {
            let seg = self.link_segment(k);
            let count = ((seg.norm() / (2.0 * radius)).ceil() as usize).max(1);
            for i in 0..count {
                let s = (i as f64 + 0.5) / count as f64;
                balls.push(CollisionBall { link: k, offset: seg * s, radius, check: true });
            }
        }
        Ok(balls)
    }

    pub fn kind(&self) -> ChainKind {
        self.kind
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[RevoluteJoint] {
        &self.joints
    }

    pub fn tool(&self) -> &Vector3<f64> {
        &self.tool
    }

    pub fn base(&self) -> &Isometry3<f64> {
        &self.base
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn balls(&self) -> &[CollisionBall] {
        &self.balls
    }

    /// Yaw of the planar base; zero for spatial chains.
    pub fn base_yaw(&self) -> f64 {
        self.base_yaw
    }

    /// Vector from joint `k` to the next joint (or the tool) in body frame `k`.
    pub fn link_segment(&self, k: usize) -> Vector3<f64> {
        if k + 1 < self.joints.len() {
            self.joints[k + 1].offset
        } else {
            self.tool
        }
    }

    /// Returns a copy moved rigidly by `shift` in the world frame.
    pub fn translated(&self, shift: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        out.base = Translation3::from(*shift) * self.base;
        out
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dof() {
            return Err(Error::Argument(format!(
                "joint vector has length {}, chain has {} joints",
                theta.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// Body frames of joints `0..M` followed by the tool frame (`M + 1` poses).
    pub fn forward_kinematics(&self, theta: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        self.check_len(theta)?;
        let mut frames = Vec::with_capacity(self.dof() + 1);
        let mut pose = self.base;
        for (joint, &q) in self.joints.iter().zip(theta) {
            pose = pose
                * Isometry3::from_parts(
                    Translation3::from(joint.offset),
                    UnitQuaternion::from_axis_angle(&joint.axis, q),
                );
            frames.push(pose);
        }
        frames.push(pose * Translation3::from(self.tool));
        Ok(frames)
    }

    /// World joint origins and axes for the body frames.
    fn joint_axes(frames: &[Isometry3<f64>], joints: &[RevoluteJoint]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        joints
            .iter()
            .zip(frames)
            .map(|(j, f)| (f.translation.vector, f.rotation * j.axis.into_inner()))
            .collect()
    }

    /// Jacobian of a world point rigidly attached to body `link`.
    fn point_jacobian(axes: &[(Vector3<f64>, Vector3<f64>)], link: usize, p: &Vector3<f64>) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(axes.len());
        for (j, (origin, axis)) in axes.iter().enumerate().take(link + 1) {
            jac.set_column(j, &axis.cross(&(p - origin)));
        }
        jac
    }

    /// Ball centers in the world with their analytic Jacobians.
    pub fn ccb_states(&self, theta: &[f64]) -> Result<Vec<BallState>> {
        self.ball_states(theta, true)
    }

    /// Ball centers only; every `jacobian` is left empty (3 x 0).
    pub fn ccb_centers(&self, theta: &[f64]) -> Result<Vec<BallState>> {
        self.ball_states(theta, false)
    }

    fn ball_states(&self, theta: &[f64], with_jacobian: bool) -> Result<Vec<BallState>> {
        let frames = self.forward_kinematics(theta)?;
        let axes = if with_jacobian { Self::joint_axes(&frames, &self.joints) } else { Vec::new() };
        Ok(self
            .balls
            .iter()
            .map(|b| {
                let center = frames[b.link] * nalgebra::Point3::from(b.offset);
                let center = center.coords;
                BallState {
                    link: b.link,
                    center,
                    radius: b.radius,
                    check: b.check,
                    jacobian: if with_jacobian {
                        Self::point_jacobian(&axes, b.link, &center)
                    } else {
                        Matrix3xX::zeros(0)
                    },
                }
            })
            .collect())
    }

    /// End-effector posture and its Jacobian `d x / d theta`.
    pub fn ee_posture(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let frames = self.forward_kinematics(theta)?;
        let axes = Self::joint_axes(&frames, &self.joints);
        let tool = frames[self.dof()];
        let p = tool.translation.vector;
        let jv = Self::point_jacobian(&axes, self.dof() - 1, &p);
        let m = self.dof();
        match self.kind {
            ChainKind::Planar => {
                let yaw = self.base_yaw + theta.iter().sum::<f64>();
                let x = DVector::from_vec(vec![p.x, p.y, yaw]);
                let mut jac = DMatrix::zeros(3, m);
                for j in 0..m {
                    jac[(0, j)] = jv[(0, j)];
                    jac[(1, j)] = jv[(1, j)];
                    jac[(2, j)] = 1.0;
                }
                Ok((x, jac))
            }
            ChainKind::Spatial => {
                let r = so3_log(&tool.rotation);
                let rate = left_jacobian_inverse(&r);
                let mut jac = DMatrix::zeros(6, m);
                for (j, (_, axis)) in axes.iter().enumerate() {
                    let w = rate * axis;
                    for row in 0..3 {
                        jac[(row, j)] = jv[(row, j)];
                        jac[(row + 3, j)] = w[row];
                    }
                }
                let x = DVector::from_vec(vec![p.x, p.y, p.z, r.x, r.y, r.z]);
                Ok((x, jac))
            }
        }
    }
}

/// Rotation vector (axis * angle) with angle in `[0, pi]`.
///
/// Goes through the unit quaternion and picks the hemisphere with `w >= 0`,
/// which selects the smaller of the two angles near `pi`.
pub fn so3_log(rot: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = rot.quaternion();
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // angle ~ 2 s / w, axis v / s
        return v * (2.0 / w);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

pub fn so3_exp(r: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::new(*r)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the left Jacobian of SO(3): maps world angular velocity to the
/// rate of the rotation vector.
pub fn left_jacobian_inverse(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(r);
    let k2 = k * k;
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + coeff * k2
}

/// One or two chains planned jointly; joint vectors are concatenated.
///
/// Whether balls of different chains are checked against each other is a
/// property of the [`Scene`](crate::scene::Scene), not of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChainModel {
    chains: Vec<ChainModel>,
    offsets: Vec<usize>,
}

impl MultiChainModel {
    pub fn new(chains: Vec<ChainModel>) -> Result<Self> {
        if chains.is_empty() || chains.len() > 2 {
            return Err(Error::Argument(format!(
                "a model holds one or two chains, got {}",
                chains.len()
            )));
        }
        let mut offsets = Vec::with_capacity(chains.len());
        let mut acc = 0;
        for c in &chains {
            offsets.push(acc);
            acc += c.dof();
        }
        Ok(Self { chains, offsets })
    }

    pub fn single(chain: ChainModel) -> Self {
        Self { chains: vec![chain], offsets: vec![0] }
    }

    pub fn chains(&self) -> &[ChainModel] {
        &self.chains
    }

    /// Index of the first joint of chain `c` in the stacked joint vector.
    pub fn offset(&self, c: usize) -> usize {
        self.offsets[c]
    }

    pub fn dof(&self) -> usize {
        self.chains.iter().map(ChainModel::dof).sum()
    }

    pub fn lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.chains.iter().flat_map(|c| c.lower().iter().copied()))
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.chains.iter().flat_map(|c| c.upper().iter().copied()))
    }

    /// Joint slice belonging to chain `c`.
    pub fn slice<'a>(&self, c: usize, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offsets[c]..self.offsets[c] + self.chains[c].dof()]
    }

    pub fn translated(&self, shift: &Vector3<f64>) -> Self {
        Self {
            chains: self.chains.iter().map(|c| c.translated(shift)).collect(),
            offsets: self.offsets.clone(),
        }
    }

    pub fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dof() {
            return Err(Error::Argument(format!(
                "joint vector has length {}, model has {} joints",
                theta.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// True when every joint lies in its closed limit interval.
    pub fn within_limits(&self, theta: &[f64]) -> bool {
        let (lo, up) = (self.lower(), self.upper());
        theta.iter().enumerate().all(|(i, &q)| q >= lo[i] && q <= up[i])
    }
}
