//! Basis-function trajectory parameterization.
//!
//! A single joint follows `xi(t) = phi(t)^T psi + lift(t)` on `[0, T]`; an
//! `M`-joint trajectory stacks one expansion per joint, so the coefficient
//! vector is laid out joint-major: entry `i * (N + 1) + n` is coefficient `n`
//! of joint `i`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative slack accepted on the `[0, T]` domain check.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// `phi_0 = t/T`, `phi_n = (T / n pi) sin(n pi t / T)`. The derivatives are
    /// `1/T` and `cos(n pi t / T)`, which are mutually orthogonal on `[0, T]`.
    #[default]
    DerivOrthogonal,
    /// Legendre polynomials mapped onto `[0, T]`.
    ShiftedLegendre,
}

/// Positive weight `w(t)` of the smoothness integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    Constant(f64),
    /// Linear ramp from `start` at `t = 0` to `end` at `t = T`.
    Linear { start: f64, end: f64 },
}

impl Default for Weight {
    fn default() -> Self {
        Weight::Constant(1.0)
    }
}

impl Weight {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Weight::Constant(c) => c,
            Weight::Linear { start, end } => start + (end - start) * t / horizon,
        }
    }

    /// A linear weight is positive on the interval iff both endpoints are.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Weight::Constant(c) => c > 0.0 && c.is_finite(),
            Weight::Linear { start, end } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "smoothness weight must be strictly positive on [0, T], got {self:?}"
            )))
        }
    }
}

/// Truncated basis `phi_0 .. phi_N` on `[0, T]` with cached Gauss-Legendre rule.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    family: BasisFamily,
    order: usize,
    horizon: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl BasisSet {
    /// Builds a basis with the default quadrature size `4 (N + 1)`.
    pub fn new(family: BasisFamily, order: usize, horizon: f64) -> Result<Self> {
        Self::with_quadrature(family, order, horizon, 4 * (order + 1))
    }

    pub fn with_quadrature(
        family: BasisFamily,
        order: usize,
        horizon: f64,
        quadrature_nodes: usize,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config(format!("basis order N must be >= 1, got {order}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon T must be > 0, got {horizon}")));
        }
        if quadrature_nodes < 1 {
            return Err(Error::Config("quadrature needs at least one node".into()));
        }
        let (x, w) = gauss_legendre(quadrature_nodes);
        let nodes = x.iter().map(|&xi| 0.5 * horizon * (xi + 1.0)).collect();
        let weights = w.iter().map(|&wi| 0.5 * horizon * wi).collect();
        Ok(Self { family, order, horizon, nodes, weights })
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    /// The truncation order `N`; each joint carries `N + 1` coefficients.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of functions per joint, `N + 1`.
    pub fn len(&self) -> usize {
        self.order + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Quadrature nodes and weights on `[0, T]`.
    pub fn quadrature(&self) -> (&[f64], &[f64]) {
        (&self.nodes, &self.weights)
    }

    /// Rejects `t` outside `[0, T]` and snaps round-off excursions onto the ends.
    pub fn check_time(&self, t: f64) -> Result<f64> {
        let slack = DOMAIN_SLACK * self.horizon.max(1.0);
        if !t.is_finite() || t < -slack || t > self.horizon + slack {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// `phi(t)`.
    pub fn values(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.check_time(t)?;
        let mut out = DVector::zeros(self.len());
        self.fill_values(t, out.as_mut_slice());
        Ok(out)
    }

    /// `d phi / dt`.
    pub fn derivatives(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.check_time(t)?;
        let mut out = DVector::zeros(self.len());
        self.fill_derivatives(t, out.as_mut_slice());
        Ok(out)
    }

    /// Second derivatives of the basis functions.
    pub fn second_derivatives(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.check_time(t)?;
        let tt = self.horizon;
        let mut out = DVector::zeros(self.len());
        match self.family {
            BasisFamily::DerivOrthogonal => {
                for n in 1..=self.order {
                    let w = n as f64 * PI / tt;
                    out[n] = -w * (w * t).sin();
                }
            }
            BasisFamily::ShiftedLegendre => {
                let x = 2.0 * t / tt - 1.0;
                let (_, _, d2) = legendre_with_derivatives(self.order, x);
                let s = 4.0 / (tt * tt);
                for n in 0..=self.order {
                    out[n] = s * d2[n];
                }
            }
        }
        Ok(out)
    }

    /// Basis values at an already-validated time. Panics on length mismatch.
    pub(crate) fn fill_values(&self, t: f64, out: &mut [f64]) {
        let tt = self.horizon;
        match self.family {
            BasisFamily::DerivOrthogonal => {
                out[0] = t / tt;
                for n in 1..=self.order {
                    let w = n as f64 * PI / tt;
                    out[n] = (w * t).sin() / w;
                }
            }
            BasisFamily::ShiftedLegendre => {
                let x = 2.0 * t / tt - 1.0;
                let (p, _, _) = legendre_with_derivatives(self.order, x);
                out.copy_from_slice(&p);
            }
        }
    }

    pub(crate) fn fill_derivatives(&self, t: f64, out: &mut [f64]) {
        let tt = self.horizon;
        match self.family {
            BasisFamily::DerivOrthogonal => {
                out[0] = 1.0 / tt;
                for n in 1..=self.order {
                    out[n] = (n as f64 * PI * t / tt).cos();
                }
            }
            BasisFamily::ShiftedLegendre => {
                let x = 2.0 * t / tt - 1.0;
                let (_, d, _) = legendre_with_derivatives(self.order, x);
                for n in 0..=self.order {
                    out[n] = 2.0 / tt * d[n];
                }
            }
        }
    }

    /// `Phi(t) = I_M (x) phi(t)^T`, an `M x M(N+1)` matrix.
    pub fn stack(&self, dof: usize, t: f64) -> Result<DMatrix<f64>> {
        let phi = self.values(t)?;
        Ok(kron_rows(dof, &phi))
    }

    /// `dPhi/dt`, same layout as [`BasisSet::stack`].
    pub fn stack_derivative(&self, dof: usize, t: f64) -> Result<DMatrix<f64>> {
        let dphi = self.derivatives(t)?;
        Ok(kron_rows(dof, &dphi))
    }
}

/// `eval_basis_stack`: the `M x M(N+1)` basis stack at `t`.
pub fn eval_basis_stack(basis: &BasisSet, dof: usize, t: f64) -> Result<DMatrix<f64>> {
    basis.stack(dof, t)
}

fn kron_rows(dof: usize, phi: &DVector<f64>) -> DMatrix<f64> {
    let len = phi.len();
    let mut out = DMatrix::zeros(dof, dof * len);
    for i in 0..dof {
        for n in 0..len {
            out[(i, i * len + n)] = phi[n];
        }
    }
    out
}

/// Legendre `P_n`, `P_n'`, `P_n''` for `n = 0..=order` at `x` in `[-1, 1]`.
fn legendre_with_derivatives(order: usize, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; order + 1];
    let mut d = vec![0.0; order + 1];
    let mut d2 = vec![0.0; order + 1];
    p[0] = 1.0;
    if order >= 1 {
        p[1] = x;
        d[1] = 1.0;
    }
    for n in 1..order {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * x * p[n] - nf * p[n - 1]) / (nf + 1.0);
        // P'_{n+1} = P'_{n-1} + (2n+1) P_n, and the same identity differentiated.
        d[n + 1] = d[n - 1] + (2.0 * nf + 1.0) * p[n];
        d2[n + 1] = d2[n - 1] + (2.0 * nf + 1.0) * d[n];
    }
    (p, d, d2)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp;
        loop {
            // p1 = P_n(x), p2 = P_{n-1}(x)
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * x * p2 - (jf - 1.0) * p3) / jf;
            }
            dp = nf * (x * p1 - p2) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() <= 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LiftMode {
    /// `lift(t) = theta_0`.
    #[default]
    Constant,
    /// Straight line from `theta_0` to `theta_g`.
    Linear,
}

/// Fixed function added to the expansion so coefficients encode a deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryLift {
    start: DVector<f64>,
    goal: Option<DVector<f64>>,
    horizon: f64,
}

impl BoundaryLift {
    pub fn constant(start: DVector<f64>, horizon: f64) -> Self {
        Self { start, goal: None, horizon }
    }

    pub fn linear(start: DVector<f64>, goal: DVector<f64>, horizon: f64) -> Result<Self> {
        if start.len() != goal.len() {
            return Err(Error::Argument(format!(
                "lift endpoints differ in length: {} vs {}",
                start.len(),
                goal.len()
            )));
        }
        Ok(Self { start, goal: Some(goal), horizon })
    }

    pub fn new(mode: LiftMode, start: &DVector<f64>, goal: &DVector<f64>, horizon: f64) -> Result<Self> {
        match mode {
            LiftMode::Constant => Ok(Self::constant(start.clone(), horizon)),
            LiftMode::Linear => Self::linear(start.clone(), goal.clone(), horizon),
        }
    }

    pub fn mode(&self) -> LiftMode {
        if self.goal.is_some() {
            LiftMode::Linear
        } else {
            LiftMode::Constant
        }
    }

    pub fn dof(&self) -> usize {
        self.start.len()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        match &self.goal {
            None => self.start.clone(),
            Some(g) => &self.start + (g - &self.start) * (t / self.horizon),
        }
    }

    pub fn rate(&self, _t: f64) -> DVector<f64> {
        match &self.goal {
            None => DVector::zeros(self.start.len()),
            Some(g) => (g - &self.start) / self.horizon,
        }
    }
}

/// The decision variable `psi` together with its basis and lift.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    pub psi: DVector<f64>,
    basis: BasisSet,
    lift: BoundaryLift,
}

impl CoefficientVector {
    pub fn new(psi: DVector<f64>, basis: BasisSet, lift: BoundaryLift) -> Result<Self> {
        let expect = lift.dof() * basis.len();
        if psi.len() != expect {
            return Err(Error::Argument(format!(
                "coefficient vector has length {}, expected M(N+1) = {expect}",
                psi.len()
            )));
        }
        Ok(Self { psi, basis, lift })
    }

    pub fn zeros(basis: BasisSet, lift: BoundaryLift) -> Self {
        let n = lift.dof() * basis.len();
        Self { psi: DVector::zeros(n), basis, lift }
    }

    pub fn dof(&self) -> usize {
        self.lift.dof()
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn lift(&self) -> &BoundaryLift {
        &self.lift
    }

    pub fn with_psi(&self, psi: DVector<f64>) -> Self {
        debug_assert_eq!(psi.len(), self.psi.len());
        Self { psi, basis: self.basis.clone(), lift: self.lift.clone() }
    }

    /// `xi(t) = Phi(t) psi + lift(t)`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.basis.check_time(t)?;
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.fill_values(t, &mut phi);
        Ok(combine(&self.psi, &phi, self.lift.value(t)))
    }

    /// `xi'(t) = dPhi(t) psi + lift'(t)`.
    pub fn eval_rate(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.basis.check_time(t)?;
        let mut dphi = vec![0.0; self.basis.len()];
        self.basis.fill_derivatives(t, &mut dphi);
        Ok(combine(&self.psi, &dphi, self.lift.rate(t)))
    }
}

/// `eval_trajectory`: joint positions and rates at `t`.
pub fn eval_trajectory(coeffs: &CoefficientVector, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    Ok((coeffs.eval(t)?, coeffs.eval_rate(t)?))
}

/// Per-joint inner products of `psi` blocks with `phi`, added onto `base`.
pub(crate) fn combine(psi: &DVector<f64>, phi: &[f64], mut base: DVector<f64>) -> DVector<f64> {
    let len = phi.len();
    for i in 0..base.len() {
        let block = &psi.as_slice()[i * len..(i + 1) * len];
        base[i] += block.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
    }
    base
}

/// Gram matrix of basis derivatives, replicated block-diagonally per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessMatrix {
    q: DMatrix<f64>,
    block: DMatrix<f64>,
    weight: Weight,
}

impl SmoothnessMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// The single-joint `(N+1) x (N+1)` block.
    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }

    pub fn weight(&self) -> Weight {
        self.weight
    }

    pub fn quadratic_form(&self, psi: &DVector<f64>) -> f64 {
        psi.dot(&(&self.q * psi))
    }
}

/// `Q_ij = int_0^T phi_i'(t) phi_j'(t) w(t) dt`, one block per joint.
pub fn smoothness_matrix(basis: &BasisSet, dof: usize, weight: Weight) -> Result<SmoothnessMatrix> {
    weight.validate()?;
    let len = basis.len();
    let (nodes, weights) = basis.quadrature();
    let mut block = DMatrix::zeros(len, len);
    let mut d = vec![0.0; len];
    for (&t, &wq) in nodes.iter().zip(weights) {
        basis.fill_derivatives(t, &mut d);
        let w = wq * weight.eval(t, basis.horizon());
        for i in 0..len {
            for j in i..len {
                block[(i, j)] += w * d[i] * d[j];
            }
        }
    }
    for i in 0..len {
        for j in 0..i {
            block[(i, j)] = block[(j, i)];
        }
    }
    let mut q = DMatrix::zeros(dof * len, dof * len);
    for k in 0..dof {
        q.view_mut((k * len, k * len), (len, len)).copy_from(&block);
    }
    Ok(SmoothnessMatrix { q, block, weight })
}
