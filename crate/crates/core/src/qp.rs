//! Convex QP solver and the two QPs of the planner: initialization and
//! terminal feasibility repair.
//!
//! Problems use the factor-2 form `min x^T H x + 2 g^T x` subject to
//! `A_eq x = b_eq` and `b_lo <= A_ieq x <= b_up`. Internally they are solved
//! as `min 1/2 x^T P x + q^T x, l <= A x <= u` with `P = 2H`, `q = 2g` by an
//! operator-splitting (ADMM) iteration with Ruiz equilibration, adaptive
//! step size, and a final active-set polish that makes optimal solutions
//! exact up to round-off.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::basis::{smoothness_matrix, BasisSet, BoundaryLift, CoefficientVector, Weight};
use crate::constraints::{boundary_rows, EqualitySystem, InequalitySystem};
use crate::kinematics::MultiChainModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ieq: DMatrix<f64>,
    pub b_lo: DVector<f64>,
    pub b_up: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add rows with the builder methods.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ieq: DMatrix::zeros(0, n),
            b_lo: DVector::zeros(0),
            b_up: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, lo: DVector<f64>, up: DVector<f64>) -> Self {
        self.a_ieq = a;
        self.b_lo = lo;
        self.b_up = up;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// `x^T H x + 2 g^T x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.h * x)) + 2.0 * self.g.dot(x)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |what: &str| Err(Error::Argument(format!("QP dimension mismatch: {what}")));
        if self.h.shape() != (n, n) {
            return bad("H must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality rows");
        }
        if self.a_ieq.ncols() != n || self.a_ieq.nrows() != self.b_lo.len() || self.b_lo.len() != self.b_up.len() {
            return bad("inequality rows");
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-9 * self.h.amax().max(1.0) {
            return Err(Error::Argument(format!("QP Hessian is not symmetric (asymmetry {asym:e})")));
        }
        for i in 0..self.b_lo.len() {
            if self.b_lo[i] > self.b_up[i] || self.b_lo[i].is_nan() || self.b_up[i].is_nan() {
                return Err(Error::Argument(format!(
                    "inequality row {i}: lower bound {} above upper bound {}",
                    self.b_lo[i], self.b_up[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: f64,
    /// Step-size adaptation period in iterations.
    pub adapt_every: usize,
    pub scaling_passes: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            adapt_every: 25,
            scaling_passes: 10,
            polish: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the stacked rows `[A_eq; A_ieq]`; positive on upper-active rows.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
struct RowMatrix {
    ncols: usize,
    start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl RowMatrix {
    fn with_capacity(ncols: usize) -> Self {
        Self { ncols, start: vec![0], cols: Vec::new(), vals: Vec::new() }
    }

    fn push_row(&mut self, entries: impl Iterator<Item = (usize, f64)>) {
        for (j, v) in entries {
            if v != 0.0 {
                self.cols.push(j);
                self.vals.push(v);
            }
        }
        self.start.push(self.cols.len());
    }

    fn nrows(&self) -> usize {
        self.start.len() - 1
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.start[i]..self.start[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(j, a)| a * x[*j]).sum()
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows(), |i, _| self.row_dot(i, x.as_slice()))
    }

    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows() {
            if y[i] != 0.0 {
                let (c, v) = self.row(i);
                for (j, a) in c.iter().zip(v) {
                    out[*j] += a * y[i];
                }
            }
        }
        out
    }

    /// `A^T diag(w) A`.
    fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (a, va) in c.iter().zip(v) {
                let s = w[i] * va;
                for (b, vb) in c.iter().zip(v) {
                    out[(*a, *b)] += s * vb;
                }
            }
        }
        out
    }

    fn scale(&mut self, rows: &[f64], cols: &[f64]) {
        for i in 0..self.nrows() {
            for k in self.start[i]..self.start[i + 1] {
                self.vals[k] *= rows[i] * cols[self.cols[k]];
            }
        }
    }
}

/// Problem data after dropping all-zero rows.
struct Stacked {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: RowMatrix,
    lo: DVector<f64>,
    up: DVector<f64>,
    /// Original stacked index of each kept row.
    origin: Vec<usize>,
    total_rows: usize,
}

fn stack(p: &QpProblem, tol: f64) -> std::result::Result<Stacked, usize> {
    let n = p.dim();
    let mut a = RowMatrix::with_capacity(n);
    let (mut lo, mut up, mut origin) = (Vec::new(), Vec::new(), Vec::new());
    let meq = p.a_eq.nrows();
    let total = meq + p.a_ieq.nrows();
    for r in 0..total {
        let (row, l, u) = if r < meq {
            (p.a_eq.row(r), p.b_eq[r], p.b_eq[r])
        } else {
            (p.a_ieq.row(r - meq), p.b_lo[r - meq], p.b_up[r - meq])
        };
        if row.iter().all(|v| *v == 0.0) {
            if l > tol || u < -tol {
                return Err(r);
            }
            continue;
        }
        a.push_row(row.iter().copied().enumerate());
        lo.push(l);
        up.push(u);
        origin.push(r);
    }
    Ok(Stacked {
        p: &p.h * 2.0,
        q: &p.g * 2.0,
        a,
        lo: DVector::from_vec(lo),
        up: DVector::from_vec(up),
        origin,
        total_rows: total,
    })
}

fn factor(mut m: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(c);
        }
        let bump = if jitter == 0.0 { 1e-10 * m.diagonal().amax().max(1.0) } else { jitter * 9.0 };
        for i in 0..n {
            m[(i, i)] += bump;
        }
        jitter += bump;
    }
    Err(Error::Numerical("QP linear system is not positive definite".into()))
}

pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    solve_qp_with(problem, &QpSettings { tol, max_iter, ..QpSettings::default() })
}

pub fn solve_qp_with(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    let data = match stack(problem, settings.tol) {
        Ok(d) => d,
        Err(_) => {
            return Ok(QpSolution {
                x: DVector::zeros(n),
                y: DVector::zeros(problem.a_eq.nrows() + problem.a_ieq.nrows()),
                status: QpStatus::Infeasible,
                iterations: 0,
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                polished: false,
            })
        }
    };
    if data.a.nrows() == 0 {
        let chol = factor(data.p.clone())?;
        let x = chol.solve(&(-&data.q));
        let dual = (&data.p * &x + &data.q).amax();
        return Ok(QpSolution {
            x,
            y: DVector::zeros(data.total_rows),
            status: QpStatus::Optimal,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: dual,
            polished: false,
        });
    }
    Admm::new(data, settings).run()
}

struct Admm<'a> {
    data: Stacked,
    s: &'a QpSettings,
    // Scaled copies.
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: RowMatrix,
    lo: DVector<f64>,
    up: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    rho: f64,
}

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

fn clamp_norm(v: f64) -> f64 {
    if v < MIN_SCALE {
        1.0
    } else {
        v.min(MAX_SCALE)
    }
}

impl<'a> Admm<'a> {
    fn new(data: Stacked, s: &'a QpSettings) -> Self {
        let n = data.p.nrows();
        let m = data.a.nrows();
        let mut p = data.p.clone();
        let mut q = data.q.clone();
        let mut a = data.a.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..s.scaling_passes {
            let mut col = vec![0.0f64; n];
            let mut row = vec![0.0f64; m];
            for j in 0..n {
                col[j] = p.column(j).amax();
            }
            for i in 0..m {
                let (c, v) = a.row(i);
                for (j, x) in c.iter().zip(v) {
                    col[*j] = col[*j].max(x.abs());
                    row[i] = row[i].max(x.abs());
                }
            }
            let dd: Vec<f64> = col.iter().map(|v| 1.0 / clamp_norm(*v).sqrt()).collect();
            let ee: Vec<f64> = row.iter().map(|v| 1.0 / clamp_norm(*v).sqrt()).collect();
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                q[j] *= dd[j];
                d[j] *= dd[j];
            }
            a.scale(&ee, &dd);
            for i in 0..m {
                e[i] *= ee[i];
            }
        }
        let mean_col = (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n.max(1) as f64;
        let c = 1.0 / clamp_norm(mean_col.max(q.amax()));
        p *= c;
        q *= c;
        let lo = data.lo.component_mul(&e);
        let up = data.up.component_mul(&e);
        Self { data, s, p, q, a, lo, up, d, e, c, rho: s.rho }
    }

    fn rho_vector(&self) -> Vec<f64> {
        (0..self.a.nrows())
            .map(|i| {
                let (l, u) = (self.lo[i], self.up[i]);
                if l == u {
                    1e3 * self.rho
                } else if l == f64::NEG_INFINITY && u == f64::INFINITY {
                    RHO_MIN
                } else {
                    self.rho
                }
            })
            .collect()
    }

    fn factor(&self, rho: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let mut k = &self.p + self.a.weighted_gram(rho);
        for i in 0..k.nrows() {
            k[(i, i)] += self.s.sigma;
        }
        factor(k)
    }

    /// Unscaled `x`, `z`, `y`.
    fn unscale(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            x.component_mul(&self.d),
            z.component_div(&self.e),
            y.component_mul(&self.e) / self.c,
        )
    }

    fn run(mut self) -> Result<QpSolution> {
        let n = self.p.nrows();
        let m = self.a.nrows();
        let alpha = self.s.relaxation;
        let mut rho = self.rho_vector();
        let mut chol = self.factor(&rho)?;
        let mut x: DVector<f64> = DVector::zeros(n);
        let mut z: DVector<f64> = DVector::zeros(m);
        let mut y: DVector<f64> = DVector::zeros(m);
        let mut last_polish: Option<Vec<i8>> = None;
        let mut best = (f64::INFINITY, f64::INFINITY);
        for it in 1..=self.s.max_iter {
            let mut rhs = &x * self.s.sigma - &self.q;
            let w = DVector::from_fn(m, |i, _| rho[i] * z[i] - y[i]);
            rhs += self.a.tr_mul(&w);
            let xt = chol.solve(&rhs);
            let zt = self.a.mul(&xt);
            let x_new = &xt * alpha + &x * (1.0 - alpha);
            let z_relax = &zt * alpha + &z * (1.0 - alpha);
            let z_new = DVector::from_fn(m, |i, _| (z_relax[i] + y[i] / rho[i]).clamp(self.lo[i], self.up[i]));
            let y_new = DVector::from_fn(m, |i, _| y[i] + rho[i] * (z_relax[i] - z_new[i]));
            let dy = &y_new - &y;
            x = x_new;
            z = z_new;
            y = y_new;

            let check = it % 5 == 0 || it == self.s.max_iter || it % self.s.adapt_every == 0;
            if !check {
                continue;
            }
            let r = self.residuals(&x, &z, &y);
            best = (r.prim, r.dual);
            if r.prim <= r.eps_prim && r.dual <= r.eps_dual {
                let (xu, zu, yu) = self.unscale(&x, &z, &y);
                if self.s.polish {
                    if let Some(sol) = self.polish(&z, &y, it) {
                        return Ok(sol);
                    }
                }
                let _ = zu;
                return Ok(self.finish(xu, yu, QpStatus::Optimal, it, r.prim, r.dual, false));
            }
            if it % self.s.adapt_every == 0 {
                if self.certifies_infeasible(&dy) {
                    let (xu, _, yu) = self.unscale(&x, &z, &y);
                    return Ok(self.finish(xu, yu, QpStatus::Infeasible, it, r.prim, r.dual, false));
                }
                let loose = 1e-3 * (1.0 + r.scale);
                if self.s.polish && r.prim <= loose && r.dual <= loose {
                    let guess = self.active_guess(&z, &y);
                    if last_polish.as_ref() != Some(&guess) {
                        if let Some(sol) = self.polish(&z, &y, it) {
                            return Ok(sol);
                        }
                        last_polish = Some(guess);
                    }
                }
                let ratio = (r.prim_scaled / r.dual_scaled.max(1e-30)).sqrt();
                let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                    self.rho = new_rho;
                    rho = self.rho_vector();
                    chol = self.factor(&rho)?;
                }
            }
        }
        if self.s.polish {
            if let Some(sol) = self.polish(&z, &y, self.s.max_iter) {
                return Ok(sol);
            }
        }
        let (xu, _, yu) = self.unscale(&x, &z, &y);
        Ok(self.finish(xu, yu, QpStatus::MaxIter, self.s.max_iter, best.0, best.1, false))
    }

    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
        let ax = self.a.mul(x);
        let px = &self.p * x;
        let aty = self.a.tr_mul(y);
        let einv = self.e.map(|v| 1.0 / v);
        let dinv = self.d.map(|v| 1.0 / v);
        let prim = (&ax - z).component_mul(&einv).amax();
        let dual_vec = &px + &self.q + &aty;
        let dual = dual_vec.component_mul(&dinv).amax() / self.c;
        let n_ax = ax.component_mul(&einv).amax();
        let n_z = z.component_mul(&einv).amax();
        let n_px = px.component_mul(&dinv).amax() / self.c;
        let n_aty = aty.component_mul(&dinv).amax() / self.c;
        let n_q = self.q.component_mul(&dinv).amax() / self.c;
        let tol = self.s.tol;
        let prim_norm = n_ax.max(n_z);
        let dual_norm = n_px.max(n_aty).max(n_q);
        Residuals {
            prim,
            dual,
            eps_prim: tol + tol * prim_norm,
            eps_dual: tol + tol * dual_norm,
            prim_scaled: (&ax - z).amax() / ax.amax().max(z.amax()).max(1e-30),
            dual_scaled: dual_vec.amax() / px.amax().max(aty.amax()).max(self.q.amax()).max(1e-30),
            scale: prim_norm.max(dual_norm),
        }
    }

    fn certifies_infeasible(&self, dy: &DVector<f64>) -> bool {
        let dy_u = dy.component_mul(&self.e);
        let norm = dy_u.amax();
        if norm <= 1e-30 {
            return false;
        }
        let eps = 1e-6 * norm;
        let aty = self.a.tr_mul(dy).component_div(&self.d);
        if aty.amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let v = dy[i];
            if v > 0.0 {
                if self.up[i] == f64::INFINITY {
                    return false;
                }
                support += self.up[i] * v;
            } else if v < 0.0 {
                if self.lo[i] == f64::NEG_INFINITY {
                    return false;
                }
                support += self.lo[i] * v;
            }
        }
        support < -eps
    }

    /// `-1` lower-active, `1` upper-active, `2` equality, `0` free (scaled variables).
    fn active_guess(&self, z: &DVector<f64>, y: &DVector<f64>) -> Vec<i8> {
        (0..z.len())
            .map(|i| {
                if self.lo[i] == self.up[i] {
                    2
                } else if z[i] - self.lo[i] < -y[i] {
                    -1
                } else if self.up[i] - z[i] < y[i] {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Solves the equality-constrained problem on the guessed active set and
    /// accepts it only when it satisfies the full KKT conditions.
    fn polish(&self, z: &DVector<f64>, y: &DVector<f64>, iterations: usize) -> Option<QpSolution> {
        let guess = self.active_guess(z, y);
        let data = &self.data;
        let n = data.p.nrows();
        let act: Vec<usize> = (0..guess.len()).filter(|i| guess[*i] != 0).collect();
        let k = act.len();
        let dim = n + k;
        let delta = 1e-9 * data.p.diagonal().amax().max(1.0);
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&data.p);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&data.q));
        for (r, &i) in act.iter().enumerate() {
            let (c, v) = data.a.row(i);
            for (j, a) in c.iter().zip(v) {
                kkt[(n + r, *j)] = *a;
                kkt[(*j, n + r)] = *a;
            }
            rhs[n + r] = if guess[i] == -1 { data.lo[i] } else { data.up[i] };
        }
        let mut reg = kkt.clone();
        for i in 0..dim {
            reg[(i, i)] += if i < n { delta } else { -delta };
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..10 {
            let res = &rhs - &kkt * &sol;
            if res.amax() <= 1e-14 * rhs.amax().max(1.0) {
                break;
            }
            sol += lu.solve(&res)?;
        }
        let x = sol.rows(0, n).into_owned();
        let mut yk = DVector::zeros(data.a.nrows());
        for (r, &i) in act.iter().enumerate() {
            yk[i] = sol[n + r];
        }
        let tol = self.s.tol;
        let ax = data.a.mul(&x);
        let mut prim: f64 = 0.0;
        for i in 0..ax.len() {
            prim = prim.max(data.lo[i] - ax[i]).max(ax[i] - data.up[i]);
        }
        if prim > tol {
            return None;
        }
        let px = &data.p * &x;
        let aty = data.a.tr_mul(&yk);
        let stat = (&px + &data.q + &aty).amax();
        let scale = 1.0f64.max(data.q.amax()).max(px.amax()).max(aty.amax());
        if !(stat <= tol * scale) {
            return None;
        }
        let sign_tol = tol * scale;
        for &i in &act {
            let bad = match guess[i] {
                -1 => yk[i] > sign_tol,
                1 => yk[i] < -sign_tol,
                _ => false,
            };
            if bad {
                return None;
            }
        }
        Some(self.finish(x, yk, QpStatus::Optimal, iterations, prim.max(0.0), stat, true))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        x: DVector<f64>,
        y: DVector<f64>,
        status: QpStatus,
        iterations: usize,
        prim: f64,
        dual: f64,
        polished: bool,
    ) -> QpSolution {
        let mut full = DVector::zeros(self.data.total_rows);
        for (k, &r) in self.data.origin.iter().enumerate() {
            full[r] = y[k];
        }
        QpSolution { x, y: full, status, iterations, primal_residual: prim, dual_residual: dual, polished }
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    prim_scaled: f64,
    dual_scaled: f64,
    scale: f64,
}

/// Smoothest coefficients meeting the boundary conditions: `argmin psi^T Q psi` s.t. the boundary rows.
pub fn init_trajectory(
    basis: &BasisSet,
    lift: &BoundaryLift,
    start: &DVector<f64>,
    goal: &DVector<f64>,
    model: &MultiChainModel,
) -> Result<CoefficientVector> {
    let (rows, rhs) = boundary_rows(basis, lift, start, goal, model)?;
    let q = smoothness_matrix(basis, start.len(), Weight::default())?;
    let problem = QpProblem::new(q.matrix().clone(), DVector::zeros(rows.ncols())).with_equalities(rows.clone(), rhs.clone());
    let sol = solve_qp_with(&problem, &QpSettings::default())?;
    if sol.status == QpStatus::Infeasible {
        return Err(Error::TaskInfeasible("boundary conditions are inconsistent".into()));
    }
    let mut psi = sol.x;
    let gap = &rhs - &rows * &psi;
    if gap.amax() > 1e-12 {
        let fix = EqualitySystem::from_rows(rows, gap)?;
        psi += fix.particular;
    }
    CoefficientVector::new(psi, basis.clone(), lift.clone())
}

/// One repair QP: `min m(dpsi) + reg |dpsi|^2` over `dpsi = dpsi_0 + N z`, subject to the limit rows.
///
/// Solved in reduced coordinates so the equalities hold exactly.
pub fn terminal_repair(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: &EqualitySystem,
    ieq: &InequalitySystem,
    reg: f64,
    settings: &QpSettings,
) -> Result<(DVector<f64>, QpSolution)> {
    let n = g.len();
    let nb = &eq.null_basis;
    let mut hr = h.clone();
    for i in 0..n {
        hr[(i, i)] += reg;
    }
    let hz = nb.tr_mul(&(&hr * nb));
    let hz = (&hz + hz.transpose()) * 0.5;
    let gz = nb.tr_mul(&(&hr * &eq.particular + g));
    let a = &ieq.a_ieq * nb;
    let shift = &ieq.a_ieq * &eq.particular;
    let problem = QpProblem::new(hz, gz).with_inequalities(a, &ieq.b_lo - &shift, &ieq.b_up - &shift);
    let sol = solve_qp_with(&problem, settings)?;
    Ok((eq.lift_step(&sol.x), sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::constraints::{build_equality_system, build_inequality_system, v_inf};
    use crate::kinematics::ChainModel;

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

    fn one(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn mat1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn equality_pin() {
        let p = QpProblem::new(mat1(1.0), one(0.0)).with_equalities(mat1(1.0), one(1.0));
        let s = solve_qp(&p, 1e-8, 4000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn active_upper_bound() {
        // (x - 2)^2 = x^2 - 4x + 4 -> H = 1, g = -2.
        let p = QpProblem::new(mat1(1.0), one(-2.0)).with_inequalities(mat1(1.0), one(f64::NEG_INFINITY), one(1.0));
        let s = solve_qp(&p, 1e-8, 4000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-10);
        assert!(s.y[0] > 0.0);
    }

    #[test]
    fn detects_infeasible_rows() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let p = QpProblem::new(mat1(1.0), one(0.0)).with_inequalities(
            a,
            DVector::from_vec(vec![2.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, 1.0]),
        );
        assert_eq!(solve_qp(&p, 1e-8, 4000).unwrap().status, QpStatus::Infeasible);
        let zero = QpProblem::new(mat1(1.0), one(0.0)).with_equalities(mat1(0.0), one(1.0));
        assert_eq!(solve_qp(&zero, 1e-8, 4000).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let p = QpProblem::new(DMatrix::identity(2, 2), one(0.0));
        assert!(solve_qp(&p, 1e-8, 10).is_err());
    }

    /// Exhaustive active-set enumeration: each double-sided row is free, at its
    /// lower bound or at its upper bound. The strictly convex optimum is the
    /// unique KKT point.
    fn enumerate_oracle(p: &QpProblem) -> Option<DVector<f64>> {
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
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&(&p.h * 2.0));
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(&p.g * -2.0));
            for r in 0..meq {
                for j in 0..n {
                    kkt[(n + r, j)] = p.a_eq[(r, j)];
                    kkt[(j, n + r)] = p.a_eq[(r, j)];
                }
                rhs[n + r] = p.b_eq[r];
            }
            for (r, &i) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + meq + r, j)] = p.a_ieq[(i, j)];
                    kkt[(j, n + meq + r)] = p.a_ieq[(i, j)];
                }
                rhs[n + meq + r] = if states[i] == 1 { p.b_lo[i] } else { p.b_up[i] };
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            let ax = &p.a_ieq * &x;
            let feasible = (0..mi).all(|i| ax[i] >= p.b_lo[i] - 1e-9 && ax[i] <= p.b_up[i] + 1e-9);
            let signs = act.iter().enumerate().all(|(r, &i)| {
                let y = sol[n + meq + r];
                if states[i] == 1 { y <= 1e-9 } else { y >= -1e-9 }
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

    fn random_qp(rng: &mut Lcg, n: usize, meq: usize, mi: usize) -> QpProblem {
        let l = DMatrix::from_fn(n, n, |_, _| rng.range(-1.0, 1.0));
        let h = &l * l.transpose() * 0.5 + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.range(-2.0, 2.0));
        let a_eq = DMatrix::from_fn(meq, n, |_, _| rng.range(-1.0, 1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.range(-0.5, 0.5));
        let b_eq = &a_eq * &x0;
        let a_ieq = DMatrix::from_fn(mi, n, |_, _| rng.range(-1.0, 1.0));
        let mid = &a_ieq * &x0;
        let b_lo = DVector::from_fn(mi, |i, _| mid[i] - rng.range(0.05, 0.5));
        let b_up = DVector::from_fn(mi, |i, _| mid[i] + rng.range(0.05, 0.5));
        QpProblem::new(h, g).with_equalities(a_eq, b_eq).with_inequalities(a_ieq, b_lo, b_up)
    }

    #[test]
    fn matches_active_set_oracle() {
        let mut rng = Lcg(99);
        for _ in 0..40 {
            let p = random_qp(&mut rng, 6, 2, 4);
            let s = solve_qp(&p, 1e-8, 4000).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            let oracle = enumerate_oracle(&p).unwrap();
            assert!((&s.x - &oracle).amax() < 1e-6, "{}", (&s.x - &oracle).amax());
        }
    }

    #[test]
    fn optimal_solutions_satisfy_kkt() {
        let mut rng = Lcg(5);
        for _ in 0..40 {
            let p = random_qp(&mut rng, 8, 2, 8);
            let s = solve_qp(&p, 1e-8, 4000).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            let tol = 1e-8;
            assert!((&p.a_eq * &s.x - &p.b_eq).amax() <= tol);
            let ax = &p.a_ieq * &s.x;
            for i in 0..ax.len() {
                assert!(ax[i] >= p.b_lo[i] - tol && ax[i] <= p.b_up[i] + tol);
                let y = s.y[2 + i];
                // Complementary slackness.
                if y > 1e-9 {
                    assert!((ax[i] - p.b_up[i]).abs() <= 1e-7);
                } else if y < -1e-9 {
                    assert!((ax[i] - p.b_lo[i]).abs() <= 1e-7);
                }
            }
            let mut a = DMatrix::zeros(10, 8);
            a.rows_mut(0, 2).copy_from(&p.a_eq);
            a.rows_mut(2, 8).copy_from(&p.a_ieq);
            let stat = &p.h * &s.x * 2.0 + &p.g * 2.0 + a.tr_mul(&s.y);
            assert!(stat.amax() <= 1e-7);
        }
    }

    fn arm1(limit: f64) -> MultiChainModel {
        MultiChainModel::single(
            ChainModel::planar(&[1.0], [0.0; 3], DVector::from_element(1, -limit), DVector::from_element(1, limit))
                .unwrap(),
        )
    }

    #[test]
    fn init_matches_closed_form() {
        let model = MultiChainModel::single(
            ChainModel::planar(&[1.0, 1.0, 1.0], [0.0; 3], DVector::from_element(3, -3.0), DVector::from_element(3, 3.0))
                .unwrap(),
        );
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 8, 1.0).unwrap();
        let start = DVector::from_vec(vec![0.1, -0.5, 2.0]);
        let goal = DVector::from_vec(vec![1.0, 0.3, -1.0]);
        let lift = BoundaryLift::constant(start.clone(), 1.0);
        let c = init_trajectory(&basis, &lift, &start, &goal, &model).unwrap();
        for i in 0..3 {
            for n in 0..9 {
                let expect = if n == 0 { goal[i] - start[i] } else { 0.0 };
                assert!((c.psi[i * 9 + n] - expect).abs() < 1e-9);
            }
        }
        assert!((c.eval(0.0).unwrap() - &start).amax() <= 1e-8);
        assert!((c.eval(1.0).unwrap() - &goal).amax() <= 1e-8);
    }

    #[test]
    fn init_examples() {
        let model = arm1(2.0);
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 4, 1.0).unwrap();
        let z = one(0.0);
        let lift = BoundaryLift::constant(z.clone(), 1.0);
        let same = init_trajectory(&basis, &lift, &z, &z, &model).unwrap();
        assert!(same.psi.amax() < 1e-12);
        let c = init_trajectory(&basis, &lift, &z, &one(1.0), &model).unwrap();
        assert!((c.psi[0] - 1.0).abs() < 1e-9 && c.psi.rows(1, 4).amax() < 1e-9);
        assert!(matches!(init_trajectory(&basis, &lift, &z, &one(3.0), &model), Err(Error::TaskInfeasible(_))));
    }

    #[test]
    fn init_with_legendre_and_linear_lift_meets_endpoints() {
        let model = arm1(3.0);
        let basis = BasisSet::new(BasisFamily::ShiftedLegendre, 5, 2.0).unwrap();
        let (s, g) = (one(-0.4), one(1.3));
        let lift = BoundaryLift::linear(s.clone(), g.clone(), 2.0).unwrap();
        let c = init_trajectory(&basis, &lift, &s, &g, &model).unwrap();
        assert!((c.eval(0.0).unwrap() - &s).amax() <= 1e-8);
        assert!((c.eval(2.0).unwrap() - &g).amax() <= 1e-8);
    }

    /// Single joint at rest at both ends with a bump peaking 0.1 above the limit at mid-horizon.
    fn bump_instance() -> (CoefficientVector, MultiChainModel, DVector<f64>, DVector<f64>) {
        let model = arm1(1.0);
        let basis = BasisSet::new(BasisFamily::DerivOrthogonal, 4, 1.0).unwrap();
        let start = one(0.0);
        let goal = one(0.0);
        let lift = BoundaryLift::constant(start.clone(), 1.0);
        // xi(t) = c sin(pi t) / pi peaks at t = 0.5.
        let psi = DVector::from_vec(vec![0.0, 1.1 * std::f64::consts::PI, 0.0, 0.0, 0.0]);
        (CoefficientVector::new(psi, basis, lift).unwrap(), model, start, goal)
    }

    #[test]
    fn repair_removes_limit_violation() {
        let (c, model, start, goal) = bump_instance();
        let ieq = build_inequality_system(&c, &model, 129).unwrap();
        assert!((v_inf(&ieq) - 0.1).abs() < 1e-9);
        let eq = build_equality_system(&c, &start, &goal, None, &model).unwrap();
        let q = smoothness_matrix(c.basis(), 1, Weight::default()).unwrap();
        let h = q.matrix() * 0.1;
        let g = &h * &c.psi;
        let (step, sol) = terminal_repair(&h, &g, &eq, &ieq, 1.0, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let fixed = c.with_psi(&c.psi + &step);
        let after = build_inequality_system(&fixed, &model, 129).unwrap();
        assert!(v_inf(&after) <= 1e-6);
        assert!((fixed.eval(0.0).unwrap() - &start).amax() <= 1e-8);
        assert!((fixed.eval(1.0).unwrap() - &goal).amax() <= 1e-8);
    }

    #[test]
    fn larger_regularization_shrinks_repair_step() {
        let (c, model, start, goal) = bump_instance();
        let ieq = build_inequality_system(&c, &model, 65).unwrap();
        let eq = build_equality_system(&c, &start, &goal, None, &model).unwrap();
        let q = smoothness_matrix(c.basis(), 1, Weight::default()).unwrap();
        let h = q.matrix() * 0.1;
        let g = &h * &c.psi;
        let mut last = f64::INFINITY;
        for reg in [1.0, 10.0, 100.0] {
            let (step, _) = terminal_repair(&h, &g, &eq, &ieq, reg, &QpSettings::default()).unwrap();
            let norm = step.norm();
            assert!(norm < last, "{norm} !< {last}");
            last = norm;
        }
    }
}
