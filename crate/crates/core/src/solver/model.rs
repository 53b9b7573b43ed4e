//! Local quadratic model of the working objective and the damped reduced step.
//!
//! Factor convention: the model is `m(d) = d^T H d + 2 g^T d`, so `g` is half
//! the gradient of the working objective and `H` half its Gauss-Newton
//! Hessian. For `sum_k r_k^2` the gradient is `2 sum_k r_k g_k`, which the
//! model stores as `sum_k r_k g_k`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::SolverConfig;
use crate::constraints::{EqualitySystem, InequalitySystem};
use crate::{Error, Result};

/// Bias-corrected exponential moving average of a gradient/Hessian pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Uema {
    decay: f64,
    steps: i32,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Uema {
    pub fn new(decay: f64, dim: usize) -> Self {
        Self { decay, steps: 0, grad: DVector::zeros(dim), hess: DMatrix::zeros(dim, dim) }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Pushes one raw sample and returns the bias-corrected averages.
    pub fn update(&mut self, grad: &DVector<f64>, hess: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let b = self.decay;
        self.steps += 1;
        self.grad *= b;
        self.grad.axpy(1.0 - b, grad, 1.0);
        self.hess *= b;
        self.hess += hess * (1.0 - b);
        self.current()
    }

    /// Bias-corrected averages after the latest update.
    pub fn current(&self) -> (DVector<f64>, DMatrix<f64>) {
        if self.steps == 0 {
            return (self.grad.clone(), self.hess.clone());
        }
        let corr = 1.0 - self.decay.powi(self.steps);
        (&self.grad / corr, &self.hess / corr)
    }
}

/// Applies one uEMA step.
pub fn uema_update(state: &mut Uema, grad: &DVector<f64>, hess: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    state.update(grad, hess)
}

/// `g_jnt = s^-2 sum v_k a_k`, `H_jnt = s^-2 sum a_k a_k^T` over the active one-sided rows.
///
/// `v` indexes the one-sided stack `[A; -A]`.
pub fn penalty_terms(
    ieq: &InequalitySystem,
    v: &DVector<f64>,
    active: &[usize],
    scale: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = ieq.a_ieq.ncols();
    let r = ieq.rows();
    let w = scale.powi(-2);
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    for &k in active {
        let (row, sign) = if k < r { (k, 1.0) } else { (k - r, -1.0) };
        let a = ieq.a_ieq.row(row);
        let nz: Vec<(usize, f64)> = a.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, x)| (j, sign * x)).collect();
        for &(i, ai) in &nz {
            g[i] += w * v[k] * ai;
            for &(j, aj) in &nz {
                h[(i, j)] += w * ai * aj;
            }
        }
    }
    (g, h)
}

/// The full-space model `g = rho Q psi + g_bar + g_jnt`, `H = rho Q + H_bar + H_jnt`.
#[derive(Clone, Debug)]
pub struct GnModel {
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Smoothing-averaged obstacle terms.
    pub g_bar: DVector<f64>,
    pub h_bar: DMatrix<f64>,
    pub g_jnt: DVector<f64>,
    pub h_jnt: DMatrix<f64>,
}

impl GnModel {
    pub fn assemble(
        smooth: &DMatrix<f64>,
        psi: &DVector<f64>,
        g_bar: DVector<f64>,
        h_bar: DMatrix<f64>,
        g_jnt: DVector<f64>,
        h_jnt: DMatrix<f64>,
    ) -> Self {
        let g = smooth * psi + &g_bar + &g_jnt;
        let mut h = smooth + &h_bar + &h_jnt;
        h = (&h + h.transpose()) * 0.5;
        Self { g, h, g_bar, h_bar, g_jnt, h_jnt }
    }

    /// `m(d) = d^T H d + 2 g^T d`.
    pub fn eval(&self, d: &DVector<f64>) -> f64 {
        d.dot(&(&self.h * d)) + 2.0 * self.g.dot(d)
    }
}

#[derive(Clone, Debug)]
pub struct ReducedStep {
    pub z: DVector<f64>,
    pub step: DVector<f64>,
    /// Predicted decrease of the reduced model.
    pub mred: f64,
    /// Damping actually used (raised when the damped matrix was not positive definite).
    pub lambda: f64,
    /// `|N^T g|_inf` of the full-space model.
    pub stationarity: f64,
}

/// Reduced Hessian and gradient `N^T H N`, `N^T (H dpsi_0 + g)`.
pub fn reduced_terms(model: &GnModel, eq: &EqualitySystem) -> (DMatrix<f64>, DVector<f64>) {
    let n = &eq.null_basis;
    let hn = &model.h * n;
    let hr = n.tr_mul(&hn);
    let hr = (&hr + hr.transpose()) * 0.5;
    let gr = n.tr_mul(&(&model.h * &eq.particular + &model.g));
    (hr, gr)
}

fn damped(hr: &DMatrix<f64>, lambda: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut b = hr.clone();
    for i in 0..b.nrows() {
        b[(i, i)] += lambda;
    }
    Cholesky::new(b)
}

/// Solves `(H_red + lambda I) z = -g_red` and evaluates the predicted decrease
/// `g_red^T [2I - B^-1 H_red] B^-1 g_red` with `B = H_red + lambda I`.
pub fn reduced_step(model: &GnModel, eq: &EqualitySystem, lambda: f64, cfg: &SolverConfig) -> Result<ReducedStep> {
    let (hr, gr) = reduced_terms(model, eq);
    let stationarity = eq.null_basis.tr_mul(&model.g).amax();
    let k = gr.len();
    if k == 0 {
        return Ok(ReducedStep {
            z: gr,
            step: eq.particular.clone(),
            mred: 0.0,
            lambda,
            stationarity: 0.0,
        });
    }
    let mut lam = lambda;
    let floor = cfg.lambda_min.max(1e-12 * hr.diagonal().amax());
    for _ in 0..40 {
        if let Some(chol) = damped(&hr, lam) {
            let s = chol.solve(&gr);
            let w = chol.solve(&(&hr * &s));
            let mred = 2.0 * gr.dot(&s) - gr.dot(&w);
            let z = -s;
            let step = eq.lift_step(&z);
            return Ok(ReducedStep { z, step, mred, lambda: lam, stationarity });
        }
        lam = (lam * cfg.lambda_up).max(floor);
    }
    Err(Error::Numerical(format!("damped reduced system stays indefinite up to lambda = {lam:e}")))
}

/// Trust-ratio damping update; a non-positive predicted decrease counts as a failed step.
pub fn lambda_update(lambda: f64, ared: f64, mred: f64, cfg: &SolverConfig) -> f64 {
    let ratio = if mred > 0.0 { ared / mred } else { f64::NEG_INFINITY };
    if ratio >= cfg.ratio_high {
        (lambda / cfg.lambda_down).max(cfg.lambda_min)
    } else if ratio <= cfg.ratio_low {
        (lambda * cfg.lambda_up).min(cfg.lambda_max)
    } else {
        lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisFamily, BasisSet, BoundaryLift, CoefficientVector};
    use crate::constraints::{build_inequality_system, violation_vector, active_set};
    use crate::kinematics::{ChainModel, MultiChainModel};

    struct Lcg(u64);
    impl Lcg {
        fn next(&mut self) -> f64 {
            self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
        fn range(&mut self, a: f64, b: f64) -> f64 {
            a + (b - a) * self.next()
        }
    }

    #[test]
    fn uema_first_step_is_identity() {
        let mut u = Uema::new(0.9, 2);
        let g = DVector::from_vec(vec![1.5, -2.0]);
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (gb, hb) = uema_update(&mut u, &g, &h);
        assert!((gb - g).amax() < 1e-15);
        assert!((hb - h).amax() < 1e-15);
    }

    #[test]
    fn uema_constant_input_is_fixed_point() {
        let mut u = Uema::new(0.7, 1);
        let g = DVector::from_element(1, 3.0);
        let h = DMatrix::from_element(1, 1, 4.0);
        for _ in 0..20 {
            let (gb, hb) = u.update(&g, &h);
            assert!((gb[0] - 3.0).abs() < 1e-12 && (hb[(0, 0)] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uema_matches_weighted_sum() {
        let mut rng = Lcg(3);
        let b: f64 = 0.9;
        let mut u = Uema::new(b, 1);
        let mut xs = Vec::new();
        for i in 1..=30 {
            let x = rng.range(-5.0, 5.0);
            xs.push(x);
            let (gb, _) = u.update(&DVector::from_element(1, x), &DMatrix::zeros(1, 1));
            let oracle: f64 = xs
                .iter()
                .enumerate()
                .map(|(j, xj)| b.powi(i - 1 - j as i32) * (1.0 - b) * xj)
                .sum::<f64>()
                / (1.0 - b.powi(i));
            assert!((gb[0] - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }
    }

    fn toy_ieq(a: DMatrix<f64>) -> InequalitySystem {
        let r = a.nrows();
        InequalitySystem { a_ieq: a, b_lo: DVector::from_element(r, -1.0), b_up: DVector::from_element(r, 1.0), times: vec![] }
    }

    #[test]
    fn penalty_examples() {
        let ieq = toy_ieq(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let (g, h) = penalty_terms(&ieq, &DVector::zeros(2), &[], 0.1);
        assert_eq!(g.amax(), 0.0);
        assert_eq!(h.amax(), 0.0);
        let v = DVector::from_vec(vec![0.2, -2.2]);
        let (g, h) = penalty_terms(&ieq, &v, &[0], 0.1);
        assert!((g[0] - 20.0).abs() < 1e-12 && g[1] == 0.0);
        assert!((h[(0, 0)] - 100.0).abs() < 1e-9);
        assert_eq!(h[(0, 1)], 0.0);
        assert_eq!(h[(1, 1)], 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = Lcg(8);
        let model = MultiChainModel::single(
            ChainModel::planar(&[0.5, 0.5], [0.0; 3], DVector::from_element(2, -0.6), DVector::from_element(2, 0.6))
                .unwrap(),
        );
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 4, 1.0).unwrap();
        let lift = BoundaryLift::constant(DVector::from_vec(vec![0.2, -0.3]), 1.0);
        let scale = 0.05;
        let penalty = |c: &CoefficientVector| {
            let ieq = build_inequality_system(c, &model, 16).unwrap();
            let v = violation_vector(&ieq, &DVector::zeros(10));
            v.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>() / (scale * scale)
        };
        let mut checked = 0;
        while checked < 30 {
            let psi = DVector::from_fn(10, |_, _| rng.range(-1.5, 1.5));
            let c = CoefficientVector::new(psi.clone(), basis.clone(), lift.clone()).unwrap();
            let ieq = build_inequality_system(&c, &model, 16).unwrap();
            let v = violation_vector(&ieq, &DVector::zeros(10));
            let act = active_set(&v);
            if act.is_empty() || v.iter().any(|x| x.abs() < 1e-4) {
                continue;
            }
            let (g, _) = penalty_terms(&ieq, &v, &act, scale);
            let h = 1e-7;
            let mut fd = DVector::zeros(10);
            for j in 0..10 {
                let mut p = psi.clone();
                p[j] += h;
                let up = penalty(&c.with_psi(p.clone()));
                p[j] -= 2.0 * h;
                let dn = penalty(&c.with_psi(p));
                fd[j] = (up - dn) / (2.0 * h);
            }
            // Model gradient is half the objective gradient.
            let err = (&fd * 0.5 - &g).norm() / g.norm();
            assert!(err <= 1e-4, "{err}");
            checked += 1;
        }
    }

    fn plain_eq(n: usize) -> EqualitySystem {
        EqualitySystem::from_rows(DMatrix::zeros(0, n), DVector::zeros(0)).unwrap()
    }

    #[test]
    fn reduced_step_examples() {
        let cfg = SolverConfig::default();
        let eq = plain_eq(2);
        let zero = GnModel::assemble(
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
        );
        let s = reduced_step(&zero, &eq, 1e-3, &cfg).unwrap();
        assert_eq!(s.z.amax(), 0.0);
        assert_eq!(s.mred, 0.0);
        // H = I, g = e1, lambda = 0.
        let m = GnModel {
            g: DVector::from_vec(vec![1.0, 0.0]),
            h: DMatrix::identity(2, 2),
            g_bar: DVector::zeros(2),
            h_bar: DMatrix::zeros(2, 2),
            g_jnt: DVector::zeros(2),
            h_jnt: DMatrix::zeros(2, 2),
        };
        let s = reduced_step(&m, &eq, 0.0, &cfg).unwrap();
        assert!((s.z.norm() - 1.0).abs() < 1e-14);
        assert!((s.step.dot(&DVector::from_vec(vec![1.0, 0.0])) + 1.0).abs() < 1e-14);
        assert!((s.mred - 1.0).abs() < 1e-14);
    }

    #[test]
    fn predicted_decrease_matches_model_and_stays_nonnegative() {
        let mut rng = Lcg(12);
        let cfg = SolverConfig::default();
        for _ in 0..50 {
            let n = 6;
            let l = DMatrix::from_fn(n, 3, |_, _| rng.range(-1.0, 1.0));
            let h = &l * l.transpose();
            let g = DVector::from_fn(n, |_, _| rng.range(-1.0, 1.0));
            let a = DMatrix::from_fn(2, n, |_, _| rng.range(-1.0, 1.0));
            let eq = EqualitySystem::from_rows(a, DVector::zeros(2)).unwrap();
            let m = GnModel { g, h, g_bar: DVector::zeros(n), h_bar: DMatrix::zeros(n, n), g_jnt: DVector::zeros(n), h_jnt: DMatrix::zeros(n, n) };
            let lambda = rng.range(1e-3, 1.0);
            let s = reduced_step(&m, &eq, lambda, &cfg).unwrap();
            assert!(s.mred >= -1e-12);
            // Bracket form equals m(0) - m(step) for the undamped model.
            assert!((s.mred + m.eval(&s.step)).abs() < 1e-10 * s.mred.abs().max(1.0));
            assert!((&eq.a_eq * &s.step).amax() < 1e-12);
        }
    }

    #[test]
    fn indefinite_system_raises_damping() {
        let cfg = SolverConfig::default();
        let m = GnModel {
            g: DVector::from_vec(vec![1.0]),
            h: DMatrix::from_element(1, 1, -1.0),
            g_bar: DVector::zeros(1),
            h_bar: DMatrix::zeros(1, 1),
            g_jnt: DVector::zeros(1),
            h_jnt: DMatrix::zeros(1, 1),
        };
        let s = reduced_step(&m, &plain_eq(1), 1e-3, &cfg).unwrap();
        assert!(s.lambda > 1.0);
    }

    #[test]
    fn lambda_update_examples() {
        let cfg = SolverConfig { lambda_min: 1e-6, ..SolverConfig::default() };
        assert_eq!(lambda_update(1.0, 0.9, 1.0, &cfg), 0.5);
        assert_eq!(lambda_update(1.0, 0.1, 1.0, &cfg), 4.0);
        assert_eq!(lambda_update(1.0, 0.5, 1.0, &cfg), 1.0);
        assert_eq!(lambda_update(1.0, 0.9, 0.0, &cfg), 4.0);
        assert_eq!(lambda_update(1e4, 0.0, 1.0, &cfg), 1e4);
        assert_eq!(lambda_update(1e-6, 1.0, 1.0, &cfg), 1e-6);
    }
}
