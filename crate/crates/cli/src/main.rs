use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use drafto::basis::BasisFamily;
use drafto::bench::{
    generate_tasks, records_csv, roughness, run_benchmark, suite_template, summarize, summary_table, time_svg,
    BenchTask, SceneTemplate, BASE_SUITES, ROUGHNESS_SAMPLES,
};
use drafto::io::{self, RunConfig};
use drafto::solver::{solve, Planner, SolveResult, SolveStatus, Timings};
use drafto::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  solve finished (converged or iteration budget reached); bench and gen-scene completed
  1  invalid arguments, unreadable or malformed input files, harness failure
  2  solve ended partially feasible (joint limits still violated after repair)
  3  task infeasible (endpoints violate limits, collide, or miss the task box)

Set DRAFTO_LOG=debug (or info, warn, ...) for log output on stderr.";

#[derive(Parser)]
#[command(name = "drafto", version, about = "Constrained trajectory optimization for serial chains", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan one task and write result.json, trace.csv and trajectory.csv.
    #[command(after_help = EXIT_CODES)]
    Solve(SolveArgs),
    /// Run planners over a suite or a task list and write records, summary and plot.
    #[command(after_help = EXIT_CODES)]
    Bench(BenchArgs),
    /// Write a suite scene, its tasks and a matching config as JSON files.
    #[command(after_help = EXIT_CODES)]
    GenScene(GenArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    scene: PathBuf,
    /// A single task object.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "drafto", value_parser = parse_planner)]
    planner: Planner,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated suite names; `all` expands to the base suites, `all_constr` to their constrained variants.
    #[arg(long, conflicts_with = "scene")]
    suite: Option<String>,
    /// Scene file; pair with --task holding a list of tasks.
    #[arg(long, requires = "task")]
    scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    task: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Tasks per suite.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "drafto,drafto_gn,facto", value_delimiter = ',', value_parser = parse_planner)]
    planners: Vec<Planner>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "scene_out")]
    out: PathBuf,
}

fn parse_planner(s: &str) -> Result<Planner, String> {
    Planner::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DRAFTO_LOG")).init();
    // Usage errors must not collide with the solve exit codes 2 and 3.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Bench(a) => cmd_bench(&a).map(|_| 0),
        Command::GenScene(a) => cmd_gen_scene(&a).map(|_| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), io::load_config)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct BasisOut {
    family: BasisFamily,
    order: usize,
    horizon: f64,
}

#[derive(Serialize)]
struct SolveOut<'a> {
    planner: &'a str,
    status: &'a str,
    message: Option<String>,
    success: bool,
    converged: bool,
    stationary: bool,
    iterations: usize,
    initial_objective: Option<f64>,
    final_objective: Option<f64>,
    v_inf: Option<f64>,
    endpoint_error: Option<f64>,
    task_residual: Option<f64>,
    repair_iterations: usize,
    roughness: Option<f64>,
    timings: Option<Timings>,
    basis: BasisOut,
    /// Joint-major coefficients.
    psi: Vec<f64>,
}

fn pretty<T: Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
}

const TRAJECTORY_SAMPLES: usize = 201;

fn trajectory_csv(r: &SolveResult) -> Result<String, Error> {
    let dof = r.coeffs.dof();
    let horizon = r.coeffs.basis().horizon();
    let mut out = String::from("t");
    for i in 0..dof {
        let _ = write!(out, ",q{i}");
    }
    out.push('\n');
    for k in 0..TRAJECTORY_SAMPLES {
        let t = if k + 1 == TRAJECTORY_SAMPLES { horizon } else { horizon * k as f64 / (TRAJECTORY_SAMPLES - 1) as f64 };
        let q = r.coeffs.eval(t)?;
        let _ = write!(out, "{t}");
        for v in q.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn cmd_solve(a: &SolveArgs) -> Result<u8, Error> {
    let (scene, model) = io::load_scene(&a.scene)?;
    let mut entries = io::load_tasks(&a.task)?;
    if entries.len() != 1 {
        return Err(Error::Argument(format!(
            "{}: solve expects a single task, found {}",
            a.task.display(),
            entries.len()
        )));
    }
    let entry = entries.remove(0);
    let cfg = load_config(a.config.as_deref())?;
    let basis = cfg.basis_or_default()?;
    let basis_out = BasisOut { family: basis.family(), order: basis.order(), horizon: basis.horizon() };
    let mut problem = entry.problem(basis, scene, model).with_lift(cfg.lift);
    problem.weight = cfg.weight;
    create_dir(&a.out)?;
    let result = solve(&problem, &cfg.solver, a.planner);
    let (out, code) = match &result {
        Ok(r) => {
            io::write_text(&a.out.join("trace.csv"), &r.trace_csv())?;
            io::write_text(&a.out.join("trajectory.csv"), &trajectory_csv(r)?)?;
            let code = if r.status == SolveStatus::PartialFeasible { 2 } else { 0 };
            let out = SolveOut {
                planner: a.planner.name(),
                status: r.status.name(),
                message: None,
                success: r.success,
                converged: r.converged,
                stationary: r.stationary,
                iterations: r.iterations(),
                initial_objective: Some(r.initial_objective),
                final_objective: r.objective_history().last().copied(),
                v_inf: Some(r.v_inf),
                endpoint_error: Some(r.endpoint_error),
                task_residual: r.task_residual,
                repair_iterations: r.repair_iterations,
                roughness: Some(roughness(&r.coeffs, ROUGHNESS_SAMPLES)?),
                timings: Some(r.timings),
                basis: basis_out,
                psi: r.coeffs.psi.as_slice().to_vec(),
            };
            (out, code)
        }
        Err(Error::TaskInfeasible(msg)) => {
            let out = SolveOut {
                planner: a.planner.name(),
                status: SolveStatus::TaskInfeasible.name(),
                message: Some(msg.clone()),
                success: false,
                converged: false,
                stationary: false,
                iterations: 0,
                initial_objective: None,
                final_objective: None,
                v_inf: None,
                endpoint_error: None,
                task_residual: None,
                repair_iterations: 0,
                roughness: None,
                timings: None,
                basis: basis_out,
                psi: Vec::new(),
            };
            eprintln!("task infeasible: {msg}");
            (out, 3)
        }
        Err(e) => return Err(e.clone()),
    };
    io::write_text(&a.out.join("result.json"), &pretty(&out)?)?;
    println!("{} {} -> {}", a.planner.name(), out.status, a.out.display());
    Ok(code)
}

fn expand_suites(spec: &str) -> Vec<String> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        match name {
            "all" => out.extend(BASE_SUITES.iter().map(|s| s.to_string())),
            "all_constr" => out.extend(BASE_SUITES.iter().map(|s| format!("{s}_constr"))),
            other => out.push(other.to_string()),
        }
    }
    out
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.as_deref())?;
    let (templates, tasks) = match (&a.suite, &a.scene, &a.task) {
        (Some(spec), _, _) => {
            let mut templates = Vec::new();
            let mut tasks = Vec::new();
            for name in expand_suites(spec) {
                let mut t = suite_template(&name, a.seed)?;
                if let Some(b) = &cfg.basis {
                    t.basis = b.build()?;
                }
                let offset = tasks.len();
                tasks.extend(generate_tasks(&t, a.n, a.seed)?.into_iter().map(|mut task| {
                    task.id += offset;
                    task
                }));
                templates.push(t);
            }
            (templates, tasks)
        }
        (None, Some(scene_path), Some(task_path)) => {
            let (scene, model) = io::load_scene(scene_path)?;
            let name = scene_path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
            let template = SceneTemplate { name: name.clone(), scene, model, basis: cfg.basis_or_default()?, task: None };
            let tasks = io::load_tasks(task_path)?
                .into_iter()
                .enumerate()
                .map(|(id, e)| BenchTask { id, scene: name.clone(), start: e.start, goal: e.goal, task: e.task, seed: a.seed })
                .collect();
            (vec![template], tasks)
        }
        _ => return Err(Error::Argument("bench needs --suite, or --scene with --task".into())),
    };
    let mut planners = a.planners.clone();
    planners.sort();
    planners.dedup();
    let records = run_benchmark(&templates, &tasks, &planners, &cfg.solver, a.workers)?;
    let summary = summarize(&records);
    create_dir(&a.out)?;
    io::write_text(&a.out.join("records.csv"), &records_csv(&records)?)?;
    io::write_text(&a.out.join("records.json"), &pretty(&records)?)?;
    io::write_text(&a.out.join("summary.json"), &pretty(&summary)?)?;
    let table = summary_table(&summary);
    io::write_text(&a.out.join("summary.txt"), &table)?;
    io::write_text(&a.out.join("time.svg"), &time_svg(&records))?;
    print!("{table}");
    Ok(())
}

fn cmd_gen_scene(a: &GenArgs) -> Result<(), Error> {
    let template = suite_template(&a.suite, a.seed)?;
    let tasks = generate_tasks(&template, a.n, a.seed)?;
    create_dir(&a.out)?;
    io::write_text(&a.out.join("scene.json"), &io::scene_to_json(&template.scene, &template.model))?;
    io::write_text(&a.out.join("tasks.json"), &io::tasks_to_json(&tasks))?;
    let task_dir = a.out.join("tasks");
    create_dir(&task_dir)?;
    for t in &tasks {
        io::write_text(&task_dir.join(format!("task_{:03}.json", t.id)), &io::task_to_json(t))?;
    }
    let b = &template.basis;
    let cfg = RunConfig {
        basis: Some(io::BasisConfig { family: b.family(), order: b.order(), horizon: b.horizon() }),
        ..RunConfig::default()
    };
    io::write_text(&a.out.join("config.json"), &io::config_to_json(&cfg))?;
    println!("{}: scene, {} tasks and config written to {}", a.suite, tasks.len(), a.out.display());
    Ok(())
}
