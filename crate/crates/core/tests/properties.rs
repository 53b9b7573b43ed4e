mod common;

use drafto::basis::{smoothness_matrix, BasisFamily, BasisSet, BoundaryLift, CoefficientVector, LiftMode, Weight};
use drafto::bench::{generate_tasks, roughness, run_benchmark, suite_template, window_violations};
use drafto::constraints::{task_residual, EqualitySystem, TaskSpec};
use drafto::qp::{init_trajectory, solve_qp, QpStatus};
use drafto::scene::{obstacle_cost, Scene};
use drafto::solver::{solve, Planner, Problem, SolveStatus, SolverConfig};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use common::{planar_arm, random_qp, random_scene, rng};

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, len).prop_map(DVector::from_vec)
}

fn family() -> impl Strategy<Value = BasisFamily> {
    prop_oneof![Just(BasisFamily::DerivOrthogonal), Just(BasisFamily::ShiftedLegendre)]
}

fn lift_mode() -> impl Strategy<Value = LiftMode> {
    prop_oneof![Just(LiftMode::Constant), Just(LiftMode::Linear)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn init_reproduces_endpoints(
        start in vec_in(3, -2.0, 2.0),
        goal in vec_in(3, -2.0, 2.0),
        order in 2usize..14,
        horizon in 0.5f64..3.0,
        fam in family(),
        mode in lift_mode(),
    ) {
        let model = planar_arm(&[0.5, 0.4, 0.3], 2.5, 0.03);
        let basis = BasisSet::new(fam, order, horizon).unwrap();
        let lift = BoundaryLift::new(mode, &start, &goal, horizon).unwrap();
        let c = init_trajectory(&basis, &lift, &start, &goal, &model).unwrap();
        prop_assert!((c.eval(0.0).unwrap() - &start).amax() <= 1e-8);
        prop_assert!((c.eval(horizon).unwrap() - &goal).amax() <= 1e-8);
    }

    #[test]
    fn smoothness_form_matches_trapezoid(
        raw in vec_in(2 * 9, -1.0, 1.0),
        start in vec_in(2, -1.0, 1.0),
        horizon in 0.5f64..2.0,
        fam in family(),
        ramp in 0.2f64..3.0,
    ) {
        // The trapezoid rule at this density resolves polynomials only up to moderate degree.
        let order = if fam == BasisFamily::DerivOrthogonal { 8 } else { 4 };
        let len = order + 1;
        let psi = DVector::from_fn(2 * len, |i, _| raw[(i / len) * 9 + i % len]);
        let basis = BasisSet::new(fam, order, horizon).unwrap();
        let weight = Weight::Linear { start: 1.0, end: ramp };
        let q = smoothness_matrix(&basis, 2, weight).unwrap();
        let traj = CoefficientVector::new(psi.clone(), basis, BoundaryLift::constant(start, horizon)).unwrap();
        let samples = 10_000;
        let dt = horizon / samples as f64;
        let rate = |t: f64| weight.eval(t, horizon) * traj.eval_rate(t).unwrap().norm_squared();
        let mut integral = 0.5 * (rate(0.0) + rate(horizon));
        for k in 1..samples {
            integral += rate(k as f64 * dt);
        }
        integral *= dt;
        let form = q.quadratic_form(&psi);
        prop_assert!((form - integral).abs() <= 1e-6 * form.abs().max(1e-12), "{form} vs {integral}");
    }

    #[test]
    fn default_family_smoothness_is_diagonal(order in 1usize..30, horizon in 0.2f64..5.0, c in 0.1f64..10.0) {
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, order, horizon).unwrap();
        let q = smoothness_matrix(&basis, 2, Weight::Constant(c)).unwrap();
        let m = q.matrix();
        let tr = m.trace();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    prop_assert!(m[(i, j)].abs() <= 1e-10 * tr);
                }
            }
        }
    }

    #[test]
    fn planar_links_keep_their_lengths(theta in vec_in(4, -3.0, 3.0), base in prop::array::uniform3(-1.0f64..1.0)) {
        let lengths = [0.7, 0.3, 0.5, 0.2];
        let chain = drafto::kinematics::ChainModel::planar(
            &lengths, base, DVector::from_element(4, -3.2), DVector::from_element(4, 3.2),
        ).unwrap();
        let frames = chain.forward_kinematics(theta.as_slice()).unwrap();
        for k in 0..4 {
            let d = (frames[k + 1].translation.vector - frames[k].translation.vector).norm();
            prop_assert!((d - lengths[k]).abs() <= 1e-12);
            prop_assert!(frames[k].translation.vector.z.abs() <= 1e-12);
        }
    }

    #[test]
    fn obstacle_cost_is_nonnegative_and_translation_invariant(
        seed in any::<u64>(),
        theta in vec_in(3, -3.0, 3.0),
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, 4, 0.1);
        let model = planar_arm(&[0.6, 0.5, 0.4], 3.2, 0.06);
        let cost = obstacle_cost(&scene, &model, theta.as_slice()).unwrap();
        prop_assert!(cost >= 0.0);
        let s = Vector3::from(shift);
        let moved = obstacle_cost(&scene.translated(&s), &model.translated(&s), theta.as_slice()).unwrap();
        prop_assert!((moved - cost).abs() <= 1e-9 * cost.max(1.0));
    }

    #[test]
    fn null_space_is_exact(seed in any::<u64>(), rows in 1usize..8, cols in 8usize..20, rank_drop in 0usize..3) {
        use rand::Rng;
        let mut r = rng(seed);
        let base = DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        let mut a = base.clone();
        for k in 0..rank_drop.min(rows - 1) {
            let copy = a.row(k).into_owned() * 2.0;
            a.row_mut(rows - 1 - k).copy_from(&copy);
        }
        let b = &a * DVector::from_fn(cols, |_, _| r.random_range(-1.0..1.0));
        let sys = EqualitySystem::from_rows(a.clone(), b.clone()).unwrap();
        prop_assert!((&a * &sys.null_basis).amax() <= 1e-10);
        let gram = sys.null_basis.tr_mul(&sys.null_basis);
        prop_assert!((gram - DMatrix::identity(sys.null_dim(), sys.null_dim())).amax() <= 1e-10);
        prop_assert_eq!(sys.rank + sys.null_dim(), cols);
        prop_assert!(!sys.inconsistent);
        prop_assert!((&a * &sys.particular - &b).amax() <= 1e-10);
    }

    #[test]
    fn task_residual_is_distance_to_the_box(
        lower in vec_in(3, -1.0, 0.0),
        width in vec_in(3, 0.0, 1.0),
        x in vec_in(3, -2.0, 2.0),
    ) {
        let upper = &lower + &width;
        let spec = TaskSpec::new(0, lower.clone(), upper.clone()).unwrap();
        let h = task_residual(&spec, &x);
        for i in 0..3 {
            if x[i] < lower[i] {
                prop_assert_eq!(h[i], x[i] - lower[i]);
            } else if x[i] > upper[i] {
                prop_assert_eq!(h[i], x[i] - upper[i]);
            } else {
                prop_assert_eq!(h[i], 0.0);
            }
        }
        prop_assert_eq!(h.amax() == 0.0, spec.contains(&x));
    }

    #[test]
    fn roughness_ignores_offsets_and_scales_linearly(
        psi in vec_in(2 * 7, -1.0, 1.0),
        offset in vec_in(2, -3.0, 3.0),
        scale in -4.0f64..4.0,
    ) {
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 6, 1.0).unwrap();
        let base = CoefficientVector::new(psi.clone(), basis.clone(), BoundaryLift::constant(DVector::zeros(2), 1.0)).unwrap();
        let r = roughness(&base, 150).unwrap();
        let shifted = CoefficientVector::new(psi.clone(), basis.clone(), BoundaryLift::constant(offset, 1.0)).unwrap();
        prop_assert!((roughness(&shifted, 150).unwrap() - r).abs() <= 1e-8 * r.max(1.0));
        let scaled = base.with_psi(&psi * scale);
        prop_assert!((roughness(&scaled, 150).unwrap() - scale.abs() * r).abs() <= 1e-8 * r.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn qp_solutions_satisfy_kkt(seed in any::<u64>(), n in 2usize..9, meq in 0usize..3, mi in 0usize..9) {
        let mut r = rng(seed);
        let p = random_qp(&mut r, n, meq.min(n - 1), mi);
        let s = solve_qp(&p, 1e-8, 4000).unwrap();
        prop_assert_eq!(s.status, QpStatus::Optimal);
        let tol = 1e-7;
        prop_assert!((&p.a_eq * &s.x - &p.b_eq).amax() <= tol);
        let ax = &p.a_ieq * &s.x;
        let me = p.a_eq.nrows();
        for i in 0..ax.len() {
            prop_assert!(ax[i] >= p.b_lo[i] - tol && ax[i] <= p.b_up[i] + tol);
            let y = s.y[me + i];
            if y > 1e-7 {
                prop_assert!((ax[i] - p.b_up[i]).abs() <= 1e-6);
            } else if y < -1e-7 {
                prop_assert!((ax[i] - p.b_lo[i]).abs() <= 1e-6);
            }
        }
        let mut a = DMatrix::zeros(me + ax.len(), n);
        a.rows_mut(0, me).copy_from(&p.a_eq);
        a.rows_mut(me, ax.len()).copy_from(&p.a_ieq);
        let stat = &p.h * &s.x * 2.0 + &p.g * 2.0 + a.tr_mul(&s.y);
        prop_assert!(stat.amax() <= 1e-6, "stationarity {}", stat.amax());
    }
}

fn blocked(start: DVector<f64>, goal: DVector<f64>, obstacle_y: f64) -> Problem {
    let scene = Scene::new(
        vec![drafto::scene::Obstacle::Sphere { center: Vector3::new(0.8, obstacle_y, 0.0), radius: 0.1 }],
        0.1,
    )
    .unwrap();
    let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 10, 1.0).unwrap();
    Problem::new(basis, start, goal, scene, planar_arm(&[0.6, 0.5], 2.6, 0.03))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solves_keep_endpoints_and_limits(
        start in prop::array::uniform2(-1.2f64..-0.6),
        goal in prop::array::uniform2(0.6f64..1.2),
        oy in -0.2f64..0.2,
        planner in prop_oneof![Just(Planner::Drafto), Just(Planner::DraftoGn), Just(Planner::Facto)],
    ) {
        let problem = blocked(DVector::from_row_slice(&start), DVector::from_row_slice(&goal), oy);
        prop_assume!(problem.check_endpoints().is_ok());
        let cfg = SolverConfig::default();
        let res = solve(&problem, &cfg, planner).unwrap();
        prop_assert!(res.endpoint_error <= 1e-8);
        if res.status != SolveStatus::PartialFeasible {
            prop_assert!(res.v_inf <= cfg.limit_tol);
        }
        prop_assert!(res.repair_iterations <= cfg.max_repair);
        prop_assert_eq!(window_violations(&res, cfg.window), 0);
        for rec in &res.trace {
            prop_assert!(rec.objective.is_finite() && rec.lambda >= cfg.lambda_min && rec.lambda <= cfg.lambda_max);
        }
        prop_assert!((res.coeffs.eval(0.0).unwrap() - &problem.start).amax() <= 1e-8);
        prop_assert!((res.coeffs.eval(1.0).unwrap() - &problem.goal).amax() <= 1e-8);
    }
}

#[test]
fn benchmark_records_do_not_depend_on_worker_count() {
    let template = suite_template("shelf2d", 3).unwrap();
    let tasks = generate_tasks(&template, 4, 9).unwrap();
    let cfg = SolverConfig::default();
    let strip = |mut recs: Vec<drafto::bench::BenchRecord>| {
        for r in &mut recs {
            r.time_s = 0.0;
            r.median_iter_s = 0.0;
        }
        recs
    };
    let one = strip(run_benchmark(std::slice::from_ref(&template), &tasks, &Planner::ALL, &cfg, 1).unwrap());
    let three = strip(run_benchmark(std::slice::from_ref(&template), &tasks, &Planner::ALL, &cfg, 3).unwrap());
    assert_eq!(one.len(), 12);
    assert_eq!(one, three);
}
