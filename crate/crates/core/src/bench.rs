//! Benchmark scenes, task generation, metrics and the planner sweep.
//!
//! Randomness: every draw comes from a Xoshiro256++ stream seeded through
//! SplitMix64. Task `i` of a sweep with seed `s` uses the stream seeded with
//! `s + (i + 1) * 0x9E37_79B9_7F4A_7C15` (wrapping), so tasks are independent
//! of each other and of the worker count. Scene layout draws use `s` itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFamily, BasisSet, CoefficientVector};
use crate::constraints::{task_residual, TaskSpec};
use crate::kinematics::{ChainModel, MultiChainModel, RevoluteJoint};
use crate::scene::{min_clearance, obstacle_cost, Obstacle, Scene};
use crate::solver::{solve, Phase, Planner, Problem, SolveResult, SolverConfig};
use crate::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Draw budget per task before generation gives up.
pub const MAX_DRAWS: usize = 20_000;

/// Base scenes; each also exists with a `_constr` suffix that adds a posture box.
pub const BASE_SUITES: [&str; 5] = ["gate2d", "shelf2d", "sphere_field_3d", "narrow_3d", "dual_table_3d"];

pub fn suite_names() -> Vec<String> {
    BASE_SUITES
        .iter()
        .flat_map(|s| [s.to_string(), format!("{s}_constr")])
        .collect()
}

/// True at every one of `samples` uniform times: all checked balls have raw
/// clearance `>= 0` and every joint lies within its limits widened by `slack`.
pub fn dense_success_check(
    coeffs: &CoefficientVector,
    scene: &Scene,
    model: &MultiChainModel,
    samples: usize,
    slack: f64,
) -> Result<bool> {
    let horizon = coeffs.basis().horizon();
    let (lo, up) = (model.lower(), model.upper());
    let count = samples.max(2);
    for k in 0..count {
        let t = if k + 1 == count { horizon } else { horizon * k as f64 / (count - 1) as f64 };
        let theta = coeffs.eval(t)?;
        for i in 0..theta.len() {
            if theta[i] < lo[i] - slack || theta[i] > up[i] + slack {
                return Ok(false);
            }
        }
        if min_clearance(scene, model, theta.as_slice())? < 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `1/(K-1) sum_{k=1}^{K-2} |theta_{k-1} - 2 theta_k + theta_{k+1}| / dt^2` on the
/// normalized grid `t_k = k / (K - 1)`, sampling the trajectory at `t_k T`.
pub fn roughness(coeffs: &CoefficientVector, count: usize) -> Result<f64> {
    if count < 3 {
        return Err(Error::Config(format!("roughness needs at least 3 samples, got {count}")));
    }
    let horizon = coeffs.basis().horizon();
    let samples = (0..count)
        .map(|k| {
            let s = if k + 1 == count { 1.0 } else { k as f64 / (count - 1) as f64 };
            coeffs.eval(s * horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(second_difference_sum(&samples))
}

/// The roughness sum for explicit samples on the uniform normalized grid.
pub fn second_difference_sum(samples: &[DVector<f64>]) -> f64 {
    let count = samples.len();
    let dt = 1.0 / (count - 1) as f64;
    let mut total = 0.0;
    for k in 1..count - 1 {
        total += (&samples[k - 1] - &samples[k] * 2.0 + &samples[k + 1]).norm() / (dt * dt);
    }
    total / (count - 1) as f64
}

/// A scene with its robot, basis and optional posture box.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTemplate {
    pub name: String,
    pub scene: Scene,
    pub model: MultiChainModel,
    pub basis: BasisSet,
    pub task: Option<TaskSpec>,
}

/// One planning query of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchTask {
    pub id: usize,
    pub scene: String,
    pub start: DVector<f64>,
    pub goal: DVector<f64>,
    pub task: Option<TaskSpec>,
    pub seed: u64,
}

impl BenchTask {
    pub fn problem(&self, template: &SceneTemplate) -> Problem {
        Problem::new(
            template.basis.clone(),
            self.start.clone(),
            self.goal.clone(),
            template.scene.clone(),
            template.model.clone(),
        )
        .with_task(self.task.clone())
    }
}

pub fn task_stream(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add((index as u64 + 1).wrapping_mul(GOLDEN)))
}

fn limits(values: &[f64]) -> (DVector<f64>, DVector<f64>) {
    (DVector::from_iterator(values.len(), values.iter().map(|v| -v)), DVector::from_column_slice(values))
}

fn planar_arm(lengths: &[f64], limit: f64, ball: f64) -> Result<ChainModel> {
    let (lo, up) = limits(&vec![limit; lengths.len()]);
    ChainModel::planar(lengths, [0.0; 3], lo, up)?.with_default_balls(ball)
}

/// Six revolute joints: base yaw, shoulder and elbow pitch, forearm roll, wrist pitch and roll.
fn spatial_arm(base: Vector3<f64>, yaw: f64) -> Result<ChainModel> {
    let z = Vector3::z_axis();
    let y = Vector3::y_axis();
    let joint = |offset: [f64; 3], axis| RevoluteJoint { offset: Vector3::from(offset), axis };
    let joints = vec![
        joint([0.0, 0.0, 0.0], z),
        joint([0.0, 0.0, 0.3], y),
        joint([0.0, 0.0, 0.4], y),
        joint([0.0, 0.0, 0.3], z),
        joint([0.0, 0.0, 0.1], y),
        joint([0.0, 0.0, 0.1], z),
    ];
    let pose = Isometry3::from_parts(Translation3::from(base), UnitQuaternion::from_axis_angle(&z, yaw));
    let (lo, up) = limits(&[2.8, 2.0, 2.4, 2.8, 2.0, 2.8]);
    ChainModel::spatial(joints, Vector3::new(0.0, 0.0, 0.12), pose, lo, up)?.with_default_balls(0.05)
}

fn sphere(c: [f64; 3], r: f64) -> Obstacle {
    Obstacle::Sphere { center: Vector3::from(c), radius: r }
}

fn cuboid(min: [f64; 3], max: [f64; 3]) -> Obstacle {
    Obstacle::Box { min: Vector3::from(min), max: Vector3::from(max) }
}

/// Posture box with only the listed coordinates bounded; the rest are left wide open.
fn posture_box(chain: usize, dim: usize, bounded: &[(usize, f64, f64)]) -> Result<TaskSpec> {
    let mut lo = DVector::from_element(dim, -10.0);
    let mut up = DVector::from_element(dim, 10.0);
    for &(i, a, b) in bounded {
        lo[i] = a;
        up[i] = b;
    }
    TaskSpec::new(chain, lo, up)
}

/// Builds a named suite scene. Only `sphere_field_3d` consumes `seed`.
pub fn suite_template(name: &str, seed: u64) -> Result<SceneTemplate> {
    let (base, constrained) = match name.strip_suffix("_constr") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 16, 1.0)?;
    let (scene, model, task) = match base {
        "gate2d" => {
            let model = MultiChainModel::single(planar_arm(&[0.5, 0.4, 0.3], 2.6, 0.04)?);
            let scene = Scene::new(vec![sphere([0.75, 0.42, 0.0], 0.16), sphere([0.75, -0.42, 0.0], 0.16)], 0.1)?;
            let task = posture_box(0, 3, &[(2, -1.2, 1.2)])?;
            (scene, model, task)
        }
        "shelf2d" => {
            let model = MultiChainModel::single(planar_arm(&[0.4, 0.35, 0.3, 0.2], 2.6, 0.04)?);
            let scene = Scene::new(
                vec![
                    cuboid([0.55, 0.28, -1.0], [1.6, 0.33, 1.0]),
                    cuboid([0.55, -0.33, -1.0], [1.6, -0.28, 1.0]),
                    cuboid([-0.8, -1.2, -1.0], [-0.6, 1.2, 1.0]),
                ],
                0.1,
            )?
            .with_self_collision(true);
            let task = posture_box(0, 3, &[(2, -1.5, 1.5)])?;
            (scene, model, task)
        }
        "sphere_field_3d" => {
            let model = MultiChainModel::single(spatial_arm(Vector3::zeros(), 0.0)?);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let obstacles = (0..6)
                .map(|_| {
                    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let rad = rng.random_range(0.55..0.85);
                    let z = rng.random_range(0.3..1.0);
                    let r = rng.random_range(0.06..0.12);
                    sphere([rad * az.cos(), rad * az.sin(), z], r)
                })
                .collect();
            let scene = Scene::new(obstacles, 0.1)?;
            let task = posture_box(0, 6, &[(2, 0.25, 1.4)])?;
            (scene, model, task)
        }
        "narrow_3d" => {
            let model = MultiChainModel::single(spatial_arm(Vector3::zeros(), 0.0)?);
            let scene = Scene::new(
                vec![
                    cuboid([0.45, 0.22, 0.0], [0.9, 0.26, 0.9]),
                    cuboid([0.45, -0.26, 0.0], [0.9, -0.22, 0.9]),
                    cuboid([0.45, -0.26, 0.9], [0.9, 0.26, 0.94]),
                ],
                0.1,
            )?;
            let task = posture_box(0, 6, &[(2, 0.2, 1.3)])?;
            (scene, model, task)
        }
        "dual_table_3d" => {
            let left = spatial_arm(Vector3::new(0.0, 0.55, 0.0), 0.0)?;
            let right = spatial_arm(Vector3::new(0.0, -0.55, 0.0), 0.0)?;
            let model = MultiChainModel::new(vec![left, right])?;
            let scene = Scene::new(vec![cuboid([0.45, -0.9, 0.12], [0.85, 0.9, 0.17])], 0.1)?.with_cross_collision(true);
            let task = posture_box(0, 6, &[(2, 0.25, 1.4)])?;
            (scene, model, task)
        }
        _ => {
            return Err(Error::Argument(format!(
                "unknown suite `{name}`; available: {}",
                suite_names().join(", ")
            )))
        }
    };
    Ok(SceneTemplate { name: name.to_string(), scene, model, basis, task: constrained.then_some(task) })
}

fn admissible(template: &SceneTemplate, task: Option<&TaskSpec>, theta: &DVector<f64>) -> Result<bool> {
    let m = &template.model;
    if obstacle_cost(&template.scene, m, theta.as_slice())? > 0.0 {
        return Ok(false);
    }
    if let Some(spec) = task {
        let c = spec.chain();
        let (x, _) = m.chains()[c].ee_posture(m.slice(c, theta.as_slice()))?;
        if task_residual(spec, &x).amax() > 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Rejection-samples `n` endpoint pairs uniformly in the joint box; both ends
/// clear the safety margin and satisfy the template's posture box.
pub fn generate_tasks(template: &SceneTemplate, n: usize, seed: u64) -> Result<Vec<BenchTask>> {
    if n == 0 {
        return Err(Error::Argument("task count must be >= 1".into()));
    }
    let (lo, up) = (template.model.lower(), template.model.upper());
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = task_stream(seed, id);
        let draw = |rng: &mut Xoshiro256PlusPlus| -> Result<DVector<f64>> {
            for _ in 0..MAX_DRAWS {
                let q = DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..up[i]));
                if admissible(template, template.task.as_ref(), &q)? {
                    return Ok(q);
                }
            }
            Err(Error::Generation {
                scene: template.name.clone(),
                reason: format!("no admissible configuration in {MAX_DRAWS} draws for task {id}"),
            })
        };
        let start = draw(&mut rng)?;
        let goal = draw(&mut rng)?;
        out.push(BenchTask { id, scene: template.name.clone(), start, goal, task: template.task.clone(), seed });
    }
    Ok(out)
}

/// Number of tail-phase accepted steps whose objective exceeds the window maximum by more than `1e-12`.
pub fn window_violations(result: &SolveResult, window: usize) -> usize {
    let history = result.objective_history();
    let mut count = 0;
    for (i, r) in result.trace.iter().enumerate() {
        if r.phase != Phase::Tail || !r.accepted {
            continue;
        }
        let end = i + 1;
        let from = end.saturating_sub(window);
        let reference = history[from..end].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if history[end] > reference + 1e-12 {
            count += 1;
        }
    }
    count
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub task_id: usize,
    pub scene: String,
    pub planner: Planner,
    pub success: bool,
    /// Init, search and repair wall time in seconds.
    pub time_s: f64,
    pub roughness: f64,
    pub iters: usize,
    pub v_inf: f64,
    pub status: String,
    pub endpoint_error: f64,
    pub task_residual: Option<f64>,
    pub repair_iterations: usize,
    pub window_violations: usize,
    /// Median wall time of one search iteration, seconds.
    pub median_iter_s: f64,
}

pub const ROUGHNESS_SAMPLES: usize = 200;

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn record_from(task: &BenchTask, planner: Planner, cfg: &SolverConfig, result: Result<SolveResult>) -> BenchRecord {
    match result {
        Ok(r) => BenchRecord {
            task_id: task.id,
            scene: task.scene.clone(),
            planner,
            success: r.success,
            time_s: r.timings.total(),
            roughness: roughness(&r.coeffs, ROUGHNESS_SAMPLES).unwrap_or(f64::NAN),
            iters: r.iterations(),
            v_inf: r.v_inf,
            status: r.status.name().to_string(),
            endpoint_error: r.endpoint_error,
            task_residual: r.task_residual,
            repair_iterations: r.repair_iterations,
            window_violations: window_violations(&r, cfg.window),
            median_iter_s: median(r.trace.iter().map(|t| t.wall_us as f64 * 1e-6).collect()),
        },
        Err(e) => {
            let status = match e {
                Error::TaskInfeasible(_) => "task_infeasible".to_string(),
                other => format!("error: {other}"),
            };
            BenchRecord {
                task_id: task.id,
                scene: task.scene.clone(),
                planner,
                success: false,
                time_s: 0.0,
                roughness: f64::NAN,
                iters: 0,
                v_inf: f64::NAN,
                status,
                endpoint_error: f64::NAN,
                task_residual: None,
                repair_iterations: 0,
                window_violations: 0,
                median_iter_s: 0.0,
            }
        }
    }
}

/// Runs every planner on every task on `workers` threads; records come back sorted by
/// scene, task id and planner. Solver errors become failed records.
pub fn run_benchmark(
    templates: &[SceneTemplate],
    tasks: &[BenchTask],
    planners: &[Planner],
    cfg: &SolverConfig,
    workers: usize,
) -> Result<Vec<BenchRecord>> {
    if tasks.is_empty() {
        return Err(Error::Argument("benchmark needs at least one task".into()));
    }
    if workers == 0 {
        return Err(Error::Argument("worker count must be >= 1".into()));
    }
    let by_name: BTreeMap<&str, &SceneTemplate> = templates.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut jobs = Vec::new();
    for task in tasks {
        let template = by_name
            .get(task.scene.as_str())
            .ok_or_else(|| Error::Argument(format!("task {} refers to unknown scene `{}`", task.id, task.scene)))?;
        for &p in planners {
            jobs.push((*template, task, p));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
    let mut records: Vec<BenchRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(template, task, planner)| {
                let result = solve(&task.problem(template), cfg, *planner);
                log::debug!("{} task {} {}: {:?}", task.scene, task.id, planner.name(), result.as_ref().map(|r| r.status));
                record_from(task, *planner, cfg, result)
            })
            .collect()
    });
    records.sort_by(|a, b| (&a.scene, a.task_id, a.planner).cmp(&(&b.scene, b.task_id, b.planner)));
    Ok(records)
}

/// Aggregates of one planner: S over all runs, T over completed runs, R over successes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub planner: Planner,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub time_avg: f64,
    pub time_max: f64,
    pub roughness_avg: f64,
    pub roughness_max: f64,
}

pub fn summarize(records: &[BenchRecord]) -> Vec<PlannerSummary> {
    let mut groups: BTreeMap<Planner, Vec<&BenchRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.planner).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(planner, rs)| {
            let times: Vec<f64> = rs.iter().filter(|r| r.time_s > 0.0).map(|r| r.time_s).collect();
            let rough: Vec<f64> = rs.iter().filter(|r| r.success).map(|r| r.roughness).collect();
            let successes = rough.len();
            let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            PlannerSummary {
                planner,
                runs: rs.len(),
                successes,
                success_rate: 100.0 * successes as f64 / rs.len() as f64,
                time_avg: avg(&times),
                time_max: max(&times),
                roughness_avg: avg(&rough),
                roughness_max: max(&rough),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    task_id: usize,
    planner: &'a str,
    success: bool,
    time_s: f64,
    roughness: f64,
    iters: usize,
    v_inf: f64,
    status: &'a str,
}

/// `task_id,planner,success,time_s,roughness,iters,v_inf,status`.
pub fn records_csv(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow {
            task_id: r.task_id,
            planner: r.planner.name(),
            success: r.success,
            time_s: r.time_s,
            roughness: r.roughness,
            iters: r.iters,
            v_inf: r.v_inf,
            status: &r.status,
        })
        .map_err(|e| Error::Argument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Argument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Argument(format!("csv: {e}")))
}

pub fn summary_table(summary: &[PlannerSummary]) -> String {
    let mut out = format!(
        "{:<10} {:>5} {:>7} {:>10} {:>10} {:>10} {:>10}\n",
        "planner", "runs", "S(%)", "T avg(s)", "T max(s)", "R avg", "R max"
    );
    for s in summary {
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>7.1} {:>10.4} {:>10.4} {:>10.3} {:>10.3}",
            s.planner.name(),
            s.runs,
            s.success_rate,
            s.time_avg,
            s.time_max,
            s.roughness_avg,
            s.roughness_max
        );
    }
    out
}

/// Strip plot of per-run wall times, one row per planner, log-scaled axis.
pub fn time_svg(records: &[BenchRecord]) -> String {
    let mut groups: BTreeMap<Planner, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.time_s > 0.0) {
        groups.entry(r.planner).or_default().push(r.time_s);
    }
    let all: Vec<f64> = groups.values().flatten().copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).max(1e-6).log10().floor();
    let hi = all.iter().copied().fold(0.0, f64::max).max(1e-6).log10().ceil().max(lo + 1.0);
    let (width, left, row) = (640.0, 90.0, 40.0);
    let height = row * (groups.len() as f64 + 1.0);
    let x = |t: f64| left + (width - left - 20.0) * (t.log10() - lo) / (hi - lo);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (i, (planner, times)) in groups.iter().enumerate() {
        let y = row * (i as f64 + 1.0);
        let _ = writeln!(svg, "<text x=\"4\" y=\"{:.1}\">{}</text>", y + 4.0, planner.name());
        for &t in times {
            let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.5\"/>", x(t));
        }
    }
    let axis = height - 12.0;
    let mut e = lo;
    while e <= hi {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{axis:.1}\">1e{e}</text>", x(10f64.powf(e)) - 10.0);
        e += 1.0;
    }
    svg.push_str("</svg>\n");
    svg
}
