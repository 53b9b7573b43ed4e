use std::path::Path;
use std::process::{Command, Output};

use drafto::bench::suite_template;
use drafto::io::parse_scene;

fn drafto(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drafto")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

const FREE_SCENE: &str = r#"{"margin": 0.05, "chains": [{"kind": "planar", "links": [0.5, 0.4], "lower": [-2.5, -2.5], "upper": [2.5, 2.5], "ball_radius": 0.04}]}"#;

#[test]
fn trivial_task_exits_zero_with_matching_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "scene.json", FREE_SCENE);
    write(dir.path(), "task.json", r#"{"start": [-0.7, 0.2], "goal": [0.9, -0.4]}"#);
    write(dir.path(), "config.json", r#"{"basis": {"order": 8}}"#);
    let out = drafto(&["solve", "--scene", "scene.json", "--task", "task.json", "--config", "config.json", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = read(dir.path().join("o/trajectory.csv"));
    let rows: Vec<Vec<f64>> =
        traj.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let (first, last) = (&rows[0], rows.last().unwrap());
    assert_eq!(first[0], 0.0);
    assert_eq!(last[0], 1.0);
    assert!((first[1] + 0.7).abs() < 1e-9 && (first[2] - 0.2).abs() < 1e-9);
    assert!((last[1] - 0.9).abs() < 1e-9 && (last[2] + 0.4).abs() < 1e-9);
    let result: serde_json::Value = serde_json::from_str(&read(dir.path().join("o/result.json"))).unwrap();
    assert_eq!(result["status"], "converged");
    assert_eq!(result["psi"].as_array().unwrap().len(), 18);
    let trace = read(dir.path().join("o/trace.csv"));
    assert!(trace.starts_with("iter,J,mred,ared,lambda,alpha,phase,accepted,active_set_size,wall_us\n"));
}

#[test]
fn malformed_scene_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "scene.json",
        "{\n  \"margin\": 0.05,\n  \"obstacles\": [{\"type\": \"sphere\", \"center\": [1, 0, 0], \"radius\": \"big\"}],\n  \"chains\": []\n}",
    );
    write(dir.path(), "task.json", r#"{"start": [0, 0], "goal": [0, 0]}"#);
    let out = drafto(&["solve", "--scene", "scene.json", "--task", "task.json", "--out", "o"], dir.path());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("obstacles[0].radius") && err.contains("line 3"), "{err}");
}

#[test]
fn out_of_limit_goal_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "scene.json", FREE_SCENE);
    write(dir.path(), "task.json", r#"{"start": [0.0, 0.0], "goal": [3.0, 0.0]}"#);
    let out = drafto(&["solve", "--scene", "scene.json", "--task", "task.json", "--out", "o"], dir.path());
    assert_eq!(code(&out), 3);
    let result: serde_json::Value = serde_json::from_str(&read(dir.path().join("o/result.json"))).unwrap();
    assert_eq!(result["status"], "task_infeasible");
}

#[test]
fn unrepaired_limit_violation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // A sphere just below the arm pushes it past its upper limit; repair is disabled.
    write(
        dir.path(),
        "scene.json",
        r#"{"margin": 0.1, "obstacles": [{"type": "sphere", "center": [0.33, 0.226, 0], "radius": 0.05}],
            "chains": [{"kind": "planar", "links": [0.5], "lower": [-1.0], "upper": [1.0], "ball_radius": 0.05}]}"#,
    );
    write(dir.path(), "task.json", r#"{"start": [0.95], "goal": [0.95]}"#);
    write(dir.path(), "config.json", r#"{"solver": {"max_repair": 0, "max_iter": 3}}"#);
    let out = drafto(&["solve", "--scene", "scene.json", "--task", "task.json", "--config", "config.json", "--out", "o"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_one_and_help_lists_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&drafto(&["bench", "--suite", "gate2d", "--planners", "nope"], dir.path())), 1);
    let help = drafto(&["solve", "--help"], dir.path());
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("Exit codes") && text.contains("partially feasible"), "{text}");
}

#[test]
fn unknown_suite_lists_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = drafto(&["bench", "--suite", "moon_base", "--out", "b"], dir.path());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gate2d") && err.contains("dual_table_3d_constr"), "{err}");
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn bench_is_deterministic_and_summary_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = drafto(
            &["bench", "--suite", "gate2d", "--n", "20", "--seed", "7", "--workers", "2", "--planners", "drafto,facto", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        read(dir.path().join(out).join("records.csv"))
    };
    let a = run("a");
    let b = run("b");
    assert!(a.starts_with("task_id,planner,success,time_s,roughness,iters,v_inf,status\n"));
    for col in ["task_id", "planner", "success", "roughness", "iters", "status"] {
        assert_eq!(column(&a, col), column(&b, col), "{col}");
    }

    let summary: serde_json::Value = serde_json::from_str(&read(dir.path().join("a/summary.json"))).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let planners = column(&a, "planner");
    let success = column(&a, "success");
    let time: Vec<f64> = column(&a, "time_s").iter().map(|v| v.parse().unwrap()).collect();
    let rough: Vec<f64> = column(&a, "roughness").iter().map(|v| v.parse().unwrap()).collect();
    for row in rows {
        let name = row["planner"].as_str().unwrap();
        let idx: Vec<usize> = (0..planners.len()).filter(|&i| planners[i] == name).collect();
        let t: Vec<f64> = idx.iter().map(|&i| time[i]).filter(|t| *t > 0.0).collect();
        let r: Vec<f64> = idx.iter().filter(|&&i| success[i] == "true").map(|&i| rough[i]).collect();
        let close = |x: f64, key: &str| {
            let y = row[key].as_f64().unwrap();
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name} {key}: {x} vs {y}");
        };
        close(t.iter().sum::<f64>() / t.len() as f64, "time_avg");
        close(t.iter().copied().fold(0.0, f64::max), "time_max");
        close(r.iter().sum::<f64>() / r.len() as f64, "roughness_avg");
        close(r.iter().copied().fold(0.0, f64::max), "roughness_max");
        close(100.0 * r.len() as f64 / idx.len() as f64, "success_rate");
    }
    for f in ["records.json", "summary.txt", "time.svg"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn generated_scene_round_trips_and_solves() {
    let dir = tempfile::tempdir().unwrap();
    let out = drafto(&["gen-scene", "--suite", "sphere_field_3d_constr", "--n", "2", "--seed", "5", "--out", "g"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (scene, model) = parse_scene(&read(dir.path().join("g/scene.json"))).unwrap();
    let template = suite_template("sphere_field_3d_constr", 5).unwrap();
    assert_eq!(scene, template.scene);
    assert_eq!(model, template.model);

    let out = drafto(
        &["solve", "--scene", "g/scene.json", "--task", "g/tasks/task_000.json", "--config", "g/config.json", "--out", "s"],
        dir.path(),
    );
    assert!(matches!(code(&out), 0 | 2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = drafto(
        &["bench", "--scene", "g/scene.json", "--task", "g/tasks.json", "--config", "g/config.json", "--planners", "drafto", "--out", "b"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(dir.path().join("b/records.csv")).lines().count(), 3);
}
