#![allow(dead_code)]

use drafto::kinematics::{ChainModel, MultiChainModel};
use drafto::qp::QpProblem;
use drafto::scene::{Obstacle, Scene};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn planar_arm(lengths: &[f64], limit: f64, ball: f64) -> MultiChainModel {
    let m = lengths.len();
    let chain = ChainModel::planar(lengths, [0.0; 3], DVector::from_element(m, -limit), DVector::from_element(m, limit))
        .unwrap()
        .with_default_balls(ball)
        .unwrap();
    MultiChainModel::single(chain)
}

pub fn random_scene(rng: &mut impl Rng, count: usize, margin: f64) -> Scene {
    let obstacles = (0..count)
        .map(|k| {
            let c = Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-0.2..0.2));
            if k % 2 == 0 {
                Obstacle::Sphere { center: c, radius: rng.random_range(0.05..0.3) }
            } else {
                let half = Vector3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
                Obstacle::Box { min: c - half, max: c + half }
            }
        })
        .collect();
    Scene::new(obstacles, margin).unwrap()
}

pub fn random_qp(rng: &mut impl Rng, n: usize, meq: usize, mi: usize) -> QpProblem {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() * 0.5 + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let a_eq = DMatrix::from_fn(meq, n, |_, _| rng.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let b_eq = &a_eq * &x0;
    let a_ieq = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
    let mid = &a_ieq * &x0;
    let b_lo = DVector::from_fn(mi, |i, _| mid[i] - rng.random_range(0.05..0.5));
    let b_up = DVector::from_fn(mi, |i, _| mid[i] + rng.random_range(0.05..0.5));
    QpProblem::new(h, g).with_equalities(a_eq, b_eq).with_inequalities(a_ieq, b_lo, b_up)
}

/// Exhaustive search over lower/upper/inactive states of every inequality row,
/// keeping the best KKT point with feasible rows and correctly signed multipliers.
pub fn enumerate_qp(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.dim();
    let meq = p.a_eq.nrows();
    let mi = p.a_ieq.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(mi as u32) {
        let mut states = vec![0usize; mi];
        let mut c = code;
        for s in states.iter_mut() {
            *s = c % 3;
            c /= 3;
        }
        let act: Vec<usize> = (0..mi).filter(|i| states[*i] != 0).collect();
        let k = meq + act.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&p.h * 2.0));
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(&p.g * -2.0));
        let mut put = |r: usize, row: Vec<f64>, b: f64| {
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
            rhs[n + r] = b;
        };
        for r in 0..meq {
            put(r, p.a_eq.row(r).iter().copied().collect(), p.b_eq[r]);
        }
        for (r, &i) in act.iter().enumerate() {
            let b = if states[i] == 1 { p.b_lo[i] } else { p.b_up[i] };
            put(meq + r, p.a_ieq.row(i).iter().copied().collect(), b);
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let ax = &p.a_ieq * &x;
        let feasible = (0..mi).all(|i| ax[i] >= p.b_lo[i] - 1e-9 && ax[i] <= p.b_up[i] + 1e-9);
        let signs = act.iter().enumerate().all(|(r, &i)| {
            let y = sol[n + meq + r];
            if states[i] == 1 {
                y <= 1e-9
            } else {
                y >= -1e-9
            }
        });
        if feasible && signs {
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|b| b.1)
}
