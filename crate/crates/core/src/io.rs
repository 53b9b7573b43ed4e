//! JSON scene, task and configuration files.
//!
//! Parse failures are reported as [`Error::Parse`] with the path of the
//! offending key (`chains[0].lower`) and the line/column in the source.

use std::path::Path;

use nalgebra::{DVector, Isometry3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFamily, BasisSet, LiftMode, Weight};
use crate::bench::BenchTask;
use crate::constraints::TaskSpec;
use crate::kinematics::{ChainKind, ChainModel, CollisionBall, MultiChainModel, RevoluteJoint};
use crate::scene::{Obstacle, Scene};
use crate::solver::{Problem, SolverConfig};
use crate::{Error, Result};

fn parse<T: DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Parse(format!("{what}: {inner}"))
        } else {
            Error::Parse(format!("{what}: key `{path}`: {inner}"))
        }
    })?;
    de.end().map_err(|e| Error::Parse(format!("{what}: {e}")))?;
    Ok(value)
}

/// Prefixes a semantic error with the key it came from.
fn at<T>(what: &str, key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Parse(format!("{what}: key `{key}`: {e}")))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------- scenes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ObstacleKind {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    #[serde(rename = "type")]
    kind: ObstacleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<[f64; 3]>,
}

fn required<T>(value: Option<T>, key: &str, kind: &str) -> Result<T> {
    value.ok_or_else(|| Error::Argument(format!("{kind} needs `{key}`")))
}

impl ObstacleFile {
    fn build(self) -> Result<Obstacle> {
        Ok(match self.kind {
            ObstacleKind::Sphere => Obstacle::Sphere {
                center: Vector3::from(required(self.center, "center", "sphere")?),
                radius: required(self.radius, "radius", "sphere")?,
            },
            ObstacleKind::Box => Obstacle::Box {
                min: Vector3::from(required(self.min, "min", "box")?),
                max: Vector3::from(required(self.max, "max", "box")?),
            },
        })
    }

    fn from_obstacle(o: &Obstacle) -> Self {
        match o {
            Obstacle::Sphere { center, radius } => Self {
                kind: ObstacleKind::Sphere,
                center: Some((*center).into()),
                radius: Some(*radius),
                min: None,
                max: None,
            },
            Obstacle::Box { min, max } => Self {
                kind: ObstacleKind::Box,
                center: None,
                radius: None,
                min: Some((*min).into()),
                max: Some((*max).into()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    offset: [f64; 3],
    axis: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BallFile {
    link: usize,
    offset: [f64; 3],
    radius: f64,
    #[serde(default = "yes")]
    check: bool,
}

fn yes() -> bool {
    true
}

/// Rotation as a unit quaternion `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    #[serde(default)]
    translation: [f64; 3],
    #[serde(default = "identity_rotation")]
    rotation: [f64; 4],
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for PoseFile {
    fn default() -> Self {
        Self { translation: [0.0; 3], rotation: identity_rotation() }
    }
}

/// Planar chains use `links` and `base = (x, y, yaw)`; spatial chains use `joints`, `tool` and `pose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    kind: ChainKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    links: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<JointFile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<PoseFile>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ball_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    balls: Option<Vec<BallFile>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    margin: f64,
    #[serde(default)]
    self_collision: bool,
    #[serde(default)]
    cross_collision: bool,
    #[serde(default)]
    obstacles: Vec<ObstacleFile>,
    chains: Vec<ChainFile>,
}

/// Keeps already-unit input bit-exact so written files read back identically.
fn unit_axis(v: [f64; 3]) -> Result<Unit<Vector3<f64>>> {
    let v = Vector3::from(v);
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Argument("joint axis must be a nonzero finite vector".into()));
    }
    Ok(if (n - 1.0).abs() <= 1e-12 { Unit::new_unchecked(v) } else { Unit::new_normalize(v) })
}

fn unit_rotation(q: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Argument("base rotation must be a nonzero finite quaternion".into()));
    }
    Ok(if (n - 1.0).abs() <= 1e-12 { UnitQuaternion::new_unchecked(q) } else { UnitQuaternion::new_normalize(q) })
}

fn with_balls(chain: ChainModel, radius: Option<f64>, balls: Option<Vec<BallFile>>) -> Result<ChainModel> {
    match (radius, balls) {
        (_, Some(list)) => chain.with_balls(
            list.into_iter()
                .map(|b| CollisionBall { link: b.link, offset: Vector3::from(b.offset), radius: b.radius, check: b.check })
                .collect(),
        ),
        (Some(r), None) => chain.with_default_balls(r),
        (None, None) => Err(Error::Argument("chain needs `ball_radius` or an explicit `balls` list".into())),
    }
}

impl ChainFile {
    fn build(self) -> Result<ChainModel> {
        let lower = DVector::from_vec(self.lower);
        let upper = DVector::from_vec(self.upper);
        let chain = match self.kind {
            ChainKind::Planar => {
                if self.joints.is_some() || self.tool.is_some() || self.pose.is_some() {
                    return Err(Error::Argument("planar chains take `links` and `base`, not `joints`/`tool`/`pose`".into()));
                }
                let links = required(self.links, "links", "planar chain")?;
                ChainModel::planar(&links, self.base.unwrap_or_default(), lower, upper)?
            }
            ChainKind::Spatial => {
                if self.links.is_some() || self.base.is_some() {
                    return Err(Error::Argument("spatial chains take `joints`, `tool` and `pose`, not `links`/`base`".into()));
                }
                let joints = required(self.joints, "joints", "spatial chain")?
                    .into_iter()
                    .map(|j| Ok(RevoluteJoint { offset: Vector3::from(j.offset), axis: unit_axis(j.axis)? }))
                    .collect::<Result<Vec<_>>>()?;
                let tool = Vector3::from(required(self.tool, "tool", "spatial chain")?);
                let pose = self.pose.unwrap_or_default();
                let iso = Isometry3::from_parts(Translation3::from(Vector3::from(pose.translation)), unit_rotation(pose.rotation)?);
                ChainModel::spatial(joints, tool, iso, lower, upper)?
            }
        };
        with_balls(chain, self.ball_radius, self.balls)
    }

    fn from_model(c: &ChainModel) -> Self {
        let mut file = Self {
            kind: c.kind(),
            links: None,
            base: None,
            joints: None,
            tool: None,
            pose: None,
            lower: c.lower().as_slice().to_vec(),
            upper: c.upper().as_slice().to_vec(),
            ball_radius: None,
            balls: Some(
                c.balls()
                    .iter()
                    .map(|b| BallFile { link: b.link, offset: b.offset.into(), radius: b.radius, check: b.check })
                    .collect(),
            ),
        };
        match c.kind() {
            ChainKind::Planar => {
                let t = c.base().translation.vector;
                file.links = Some((0..c.dof()).map(|k| c.link_segment(k).x).collect());
                file.base = Some([t.x, t.y, c.base_yaw()]);
            }
            ChainKind::Spatial => {
                let q = c.base().rotation.quaternion();
                file.joints =
                    Some(c.joints().iter().map(|j| JointFile { offset: j.offset.into(), axis: j.axis.into_inner().into() }).collect());
                file.tool = Some((*c.tool()).into());
                file.pose = Some(PoseFile { translation: c.base().translation.vector.into(), rotation: [q.w, q.i, q.j, q.k] });
            }
        }
        file
    }
}

/// Obstacle world plus the robot model it is planned for.
pub fn parse_scene(text: &str) -> Result<(Scene, MultiChainModel)> {
    const WHAT: &str = "scene";
    let file: SceneFile = parse(WHAT, text)?;
    let obstacles = file
        .obstacles
        .into_iter()
        .enumerate()
        .map(|(i, o)| at(WHAT, &format!("obstacles[{i}]"), o.build()))
        .collect::<Result<Vec<_>>>()?;
    let scene = at(WHAT, "obstacles", Scene::new(obstacles, file.margin))?
        .with_self_collision(file.self_collision)
        .with_cross_collision(file.cross_collision);
    let chains = file
        .chains
        .into_iter()
        .enumerate()
        .map(|(i, c)| at(WHAT, &format!("chains[{i}]"), c.build()))
        .collect::<Result<Vec<_>>>()?;
    let model = at(WHAT, "chains", MultiChainModel::new(chains))?;
    Ok((scene, model))
}

/// Writes every ball explicitly, so the output parses back to an identical model.
pub fn scene_to_json(scene: &Scene, model: &MultiChainModel) -> String {
    let file = SceneFile {
        margin: scene.margin(),
        self_collision: scene.self_collision(),
        cross_collision: scene.cross_collision(),
        obstacles: scene.obstacles().iter().map(ObstacleFile::from_obstacle).collect(),
        chains: model.chains().iter().map(ChainFile::from_model).collect(),
    };
    to_json(&file)
}

pub fn load_scene(path: &Path) -> Result<(Scene, MultiChainModel)> {
    parse_scene(&read_text(path)?).map_err(|e| prefix_path(path, e))
}

fn prefix_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}

// ----------------------------------------------------------------- tasks

/// `null` bounds leave a posture coordinate free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskBoxFile {
    #[serde(default)]
    chain: usize,
    min: Vec<Option<f64>>,
    max: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    start: Vec<f64>,
    goal: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<TaskBoxFile>,
}

/// Endpoints and optional posture box of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    pub start: DVector<f64>,
    pub goal: DVector<f64>,
    pub task: Option<TaskSpec>,
}

impl TaskEntry {
    pub fn problem(&self, basis: BasisSet, scene: Scene, model: MultiChainModel) -> Problem {
        Problem::new(basis, self.start.clone(), self.goal.clone(), scene, model).with_task(self.task.clone())
    }
}

impl TaskFile {
    fn build(self) -> Result<TaskEntry> {
        let task = match self.task {
            Some(b) => {
                let lo = b.min.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY));
                let up = b.max.iter().map(|v| v.unwrap_or(f64::INFINITY));
                Some(TaskSpec::new(b.chain, DVector::from_iterator(b.min.len(), lo), DVector::from_iterator(b.max.len(), up))?)
            }
            None => None,
        };
        Ok(TaskEntry { start: DVector::from_vec(self.start), goal: DVector::from_vec(self.goal), task })
    }

    fn from_entry(start: &DVector<f64>, goal: &DVector<f64>, task: Option<&TaskSpec>) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            start: start.as_slice().to_vec(),
            goal: goal.as_slice().to_vec(),
            task: task.map(|t| TaskBoxFile {
                chain: t.chain(),
                min: t.lower().iter().map(|v| finite(*v)).collect(),
                max: t.upper().iter().map(|v| finite(*v)).collect(),
            }),
        }
    }
}

/// A single task object, or a list of them.
pub fn parse_tasks(text: &str) -> Result<Vec<TaskEntry>> {
    const WHAT: &str = "task";
    let files: Vec<TaskFile> = if text.trim_start().starts_with('[') {
        parse(WHAT, text)?
    } else {
        vec![parse(WHAT, text)?]
    };
    files
        .into_iter()
        .enumerate()
        .map(|(i, f)| at(WHAT, &format!("[{i}].task"), f.build()))
        .collect()
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskEntry>> {
    parse_tasks(&read_text(path)?).map_err(|e| prefix_path(path, e))
}

pub fn task_to_json(task: &BenchTask) -> String {
    to_json(&TaskFile::from_entry(&task.start, &task.goal, task.task.as_ref()))
}

pub fn tasks_to_json(tasks: &[BenchTask]) -> String {
    to_json(&tasks.iter().map(|t| TaskFile::from_entry(&t.start, &t.goal, t.task.as_ref())).collect::<Vec<_>>())
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default)]
    pub family: BasisFamily,
    /// Highest basis index; each joint carries `order + 1` coefficients.
    pub order: usize,
    #[serde(default = "unit_horizon")]
    pub horizon: f64,
}

fn unit_horizon() -> f64 {
    1.0
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { family: BasisFamily::DerivOrthogonal, order: 16, horizon: 1.0 }
    }
}

impl BasisConfig {
    pub fn build(&self) -> Result<BasisSet> {
        BasisSet::new(self.family, self.order, self.horizon)
    }
}

/// Everything but the scene and the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `None` keeps the basis of the suite (bench) or the default basis (solve).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisConfig>,
    #[serde(default)]
    pub lift: LiftMode,
    #[serde(default)]
    pub weight: Weight,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl RunConfig {
    pub fn basis_or_default(&self) -> Result<BasisSet> {
        self.basis.clone().unwrap_or_default().build()
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    const WHAT: &str = "config";
    let cfg: RunConfig = parse(WHAT, text)?;
    at(WHAT, "solver", cfg.solver.validate())?;
    if let Some(b) = &cfg.basis {
        at(WHAT, "basis", b.build())?;
    }
    at(WHAT, "weight", cfg.weight.validate())?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?).map_err(|e| prefix_path(path, e))
}

pub fn config_to_json(cfg: &RunConfig) -> String {
    to_json(cfg)
}
