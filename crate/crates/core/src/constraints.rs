//! Boundary, task and joint-limit constraint systems in coefficient space.
//!
//! All systems constrain a step `dpsi` from the current coefficients, so
//! bounds are shifted by the current trajectory values.

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSet, BoundaryLift, CoefficientVector};
use crate::kinematics::MultiChainModel;
use crate::{Error, Result};

/// `K` uniform times on `[0, T]`, both ends included.
pub fn checkpoints(count: usize, horizon: f64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::Config(format!("checkpoint count must be >= 2, got {count}")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    let last = (count - 1) as f64;
    Ok((0..count).map(|k| if k + 1 == count { horizon } else { k as f64 / last * horizon }).collect())
}

/// Writes `Phi(t)` into rows `row..row+M` of `out`.
fn put_stack(out: &mut DMatrix<f64>, row: usize, dof: usize, phi: &[f64]) {
    let len = phi.len();
    for i in 0..dof {
        for (m, &p) in phi.iter().enumerate() {
            out[(row + i, i * len + m)] = p;
        }
    }
}

fn phi_at(basis: &BasisSet, t: f64) -> Result<Vec<f64>> {
    let t = basis.check_time(t)?;
    let mut phi = vec![0.0; basis.len()];
    basis.fill_values(t, &mut phi);
    Ok(phi)
}

fn check_waypoint(model: &MultiChainModel, q: &DVector<f64>, name: &str) -> Result<()> {
    model.check_len(q.as_slice())?;
    if !model.within_limits(q.as_slice()) {
        return Err(Error::TaskInfeasible(format!("{name} configuration violates joint limits")));
    }
    Ok(())
}

/// Rows `[Phi(0); Phi(T)]` and right-hand side `[theta_0 - lift(0); theta_g - lift(T)]`.
pub fn boundary_rows(
    basis: &BasisSet,
    lift: &BoundaryLift,
    start: &DVector<f64>,
    goal: &DVector<f64>,
    model: &MultiChainModel,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_waypoint(model, start, "start")?;
    check_waypoint(model, goal, "goal")?;
    let m = start.len();
    let horizon = basis.horizon();
    let mut rows = DMatrix::zeros(2 * m, m * basis.len());
    put_stack(&mut rows, 0, m, &phi_at(basis, 0.0)?);
    put_stack(&mut rows, m, m, &phi_at(basis, horizon)?);
    let mut rhs = DVector::zeros(2 * m);
    rhs.rows_mut(0, m).copy_from(&(start - lift.value(0.0)));
    rhs.rows_mut(m, m).copy_from(&(goal - lift.value(horizon)));
    Ok((rows, rhs))
}

/// A posture box for the end effector of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    chain: usize,
    lower: DVector<f64>,
    upper: DVector<f64>,
    kept: usize,
    pool: usize,
}

impl TaskSpec {
    pub const DEFAULT_KEPT: usize = 8;

    /// Box `[lower, upper]` per posture coordinate; infinite entries leave a coordinate free.
    pub fn new(chain: usize, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Argument(format!(
                "task box bounds differ in length: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::Argument(format!(
                    "task box coordinate {i}: min {} must not exceed max {}",
                    lower[i], upper[i]
                )));
            }
        }
        let kept = Self::DEFAULT_KEPT;
        Ok(Self { chain, lower, upper, kept, pool: 4 * kept })
    }

    /// Retain `kept` checkpoints out of a uniform pool of `pool` candidates.
    pub fn with_checkpoints(mut self, kept: usize, pool: usize) -> Result<Self> {
        if kept == 0 || pool < kept.max(2) {
            return Err(Error::Config(format!(
                "task checkpoints need 1 <= kept <= pool and pool >= 2, got kept {kept}, pool {pool}"
            )));
        }
        self.kept = kept;
        self.pool = pool;
        Ok(self)
    }

    pub fn chain(&self) -> usize {
        self.chain
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        task_residual(self, x).amax() == 0.0
    }

    /// Checks the chain index and box dimension against a model.
    pub fn validate_for(&self, model: &MultiChainModel) -> Result<()> {
        let chain = model.chains().get(self.chain).ok_or_else(|| {
            Error::Argument(format!("task refers to chain {}, model has {}", self.chain, model.chains().len()))
        })?;
        let dim = chain.kind().posture_dim();
        if self.dim() != dim {
            return Err(Error::Argument(format!(
                "task box has {} coordinates, chain posture has {dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `h = x - clamp(x, x_min, x_max)`.
pub fn task_residual(spec: &TaskSpec, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i] - x[i].clamp(spec.lower[i], spec.upper[i]))
}

/// Task residual at configuration `theta` and its Jacobian in the stacked joint vector.
///
/// Jacobian rows of coordinates inside the box are zero.
pub fn task_terms(spec: &TaskSpec, model: &MultiChainModel, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    spec.validate_for(model)?;
    model.check_len(theta)?;
    let c = spec.chain;
    let (x, jac) = model.chains()[c].ee_posture(model.slice(c, theta))?;
    let h = task_residual(spec, &x);
    let off = model.offset(c);
    let mut full = DMatrix::zeros(h.len(), theta.len());
    for r in 0..h.len() {
        if h[r] != 0.0 {
            for j in 0..jac.ncols() {
                full[(r, off + j)] = jac[(r, j)];
            }
        }
    }
    Ok((h, full))
}

/// Indices of the `k` largest norms, ties to the lower index, returned in increasing order.
pub fn largest_residuals(norms: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// The `K_tsk` candidate times with the largest task residual norm.
pub fn select_task_checkpoints(
    coeffs: &CoefficientVector,
    spec: &TaskSpec,
    model: &MultiChainModel,
    candidates: &[f64],
) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(candidates.len());
    for &t in candidates {
        let theta = coeffs.eval(t)?;
        norms.push(task_terms(spec, model, theta.as_slice())?.0.norm());
    }
    Ok(largest_residuals(&norms, spec.kept).into_iter().map(|i| candidates[i]).collect())
}

/// Linearized equalities `A_eq dpsi = b_eq` with their null space and minimum-norm solution.
#[derive(Clone, Debug)]
pub struct EqualitySystem {
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Orthonormal columns spanning `ker A_eq`.
    pub null_basis: DMatrix<f64>,
    /// Minimum-norm (least-squares when inconsistent) solution.
    pub particular: DVector<f64>,
    pub rank: usize,
    /// Set when the least-squares particular solution leaves a residual above `1e-8`.
    pub inconsistent: bool,
    /// Times of the task rows, empty without a task.
    pub task_times: Vec<f64>,
}

impl EqualitySystem {
    pub const RANK_TOL: f64 = 1e-10;

    pub fn from_rows(a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Result<Self> {
        if a_eq.nrows() != b_eq.len() {
            return Err(Error::Argument(format!(
                "equality system has {} rows but {} right-hand sides",
                a_eq.nrows(),
                b_eq.len()
            )));
        }
        let n = a_eq.ncols();
        let m = a_eq.nrows();
        // `A^T P = Q R` with the leading `rank` columns of Q spanning the row space.
        let (q, r, perm, rank) = pivoted_qr(a_eq.transpose(), Self::RANK_TOL);
        let rhs = DVector::from_fn(m, |i, _| b_eq[perm[i]]);
        // Least squares over the row space: `x = Q_r y` with `R_r^T y ~ P^T b`.
        let particular = if rank == 0 {
            DVector::zeros(n)
        } else {
            let (q2, r2) = r.rows(0, rank).transpose().qr().unpack();
            let y = r2
                .solve_upper_triangular(&q2.tr_mul(&rhs))
                .ok_or_else(|| Error::Numerical("singular triangular factor in equality system".into()))?;
            q.columns(0, rank) * y
        };
        let null_basis = q.columns(rank, n - rank).into_owned();
        let residual = (&a_eq * &particular - &b_eq).amax();
        Ok(Self { a_eq, b_eq, null_basis, particular, rank, inconsistent: residual > 1e-8, task_times: Vec::new() })
    }

    /// Dimension of the reduced space.
    pub fn null_dim(&self) -> usize {
        self.null_basis.ncols()
    }

    /// `dpsi = dpsi_0 + N z`.
    pub fn lift_step(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.null_basis * z
    }
}

/// Householder QR with column pivoting by remaining column norm.
///
/// Returns the square orthogonal `Q`, the factor `R`, the column order and the
/// numerical rank (pivot norms above `tol` times the first one).
fn pivoted_qr(mut w: DMatrix<f64>, tol: f64) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>, usize) {
    let (n, m) = w.shape();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut reflectors: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut lead = 0.0;
    let mut rank = 0;
    for j in 0..n.min(m) {
        let norms: Vec<f64> = (j..m).map(|k| w.view((j, k), (n - j, 1)).norm()).collect();
        let (best, &big) = norms.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        if j == 0 {
            lead = big;
        }
        if big == 0.0 || big <= tol * lead {
            break;
        }
        w.swap_columns(j, j + best);
        perm.swap(j, j + best);
        let x: DVector<f64> = w.view((j, j), (n - j, 1)).column(0).into_owned();
        let alpha = if x[0] >= 0.0 { -big } else { big };
        let mut v = x;
        v[0] -= alpha;
        let vn = v.norm();
        if vn > 0.0 {
            v /= vn;
            let mut block = w.view_mut((j, j), (n - j, m - j));
            let proj = v.tr_mul(&block);
            block -= &v * proj * 2.0;
            reflectors.push((j, v));
        }
        w.view_mut((j + 1, j), (n - j - 1, 1)).fill(0.0);
        rank += 1;
    }
    let mut q = DMatrix::identity(n, n);
    for (j, v) in reflectors.iter().rev() {
        let mut block = q.view_mut((*j, 0), (n - j, n));
        let proj = v.tr_mul(&block);
        block -= v * proj * 2.0;
    }
    (q, w, perm, rank)
}

/// Boundary rows (rhs zero, as iterates already satisfy them) stacked with linearized task rows.
pub fn build_equality_system(
    coeffs: &CoefficientVector,
    start: &DVector<f64>,
    goal: &DVector<f64>,
    task: Option<&TaskSpec>,
    model: &MultiChainModel,
) -> Result<EqualitySystem> {
    let basis = coeffs.basis();
    let (bound, _) = boundary_rows(basis, coeffs.lift(), start, goal, model)?;
    let m = coeffs.dof();
    let Some(spec) = task else {
        let rhs = DVector::zeros(bound.nrows());
        return EqualitySystem::from_rows(bound, rhs);
    };
    let pool = checkpoints(spec.pool, basis.horizon())?;
    let times = select_task_checkpoints(coeffs, spec, model, &pool)?;
    let d = spec.dim();
    let n = coeffs.psi.len();
    let len = basis.len();
    let mut a = DMatrix::zeros(2 * m + d * times.len(), n);
    a.rows_mut(0, 2 * m).copy_from(&bound);
    let mut b = DVector::zeros(a.nrows());
    for (k, &t) in times.iter().enumerate() {
        let theta = coeffs.eval(t)?;
        let (h, jac) = task_terms(spec, model, theta.as_slice())?;
        let phi = phi_at(basis, t)?;
        let row0 = 2 * m + d * k;
        for r in 0..d {
            b[row0 + r] = -h[r];
            for i in 0..m {
                let w = jac[(r, i)];
                if w != 0.0 {
                    for (q, &p) in phi.iter().enumerate() {
                        a[(row0 + r, i * len + q)] = w * p;
                    }
                }
            }
        }
    }
    let mut sys = EqualitySystem::from_rows(a, b)?;
    sys.task_times = times;
    Ok(sys)
}

/// Joint-limit rows `b_lo <= A_ieq dpsi <= b_up` at a set of checkpoints.
///
/// Row `k * M + i` is joint `i` at time `times[k]`.
#[derive(Clone, Debug)]
pub struct InequalitySystem {
    pub a_ieq: DMatrix<f64>,
    pub b_lo: DVector<f64>,
    pub b_up: DVector<f64>,
    pub times: Vec<f64>,
}

impl InequalitySystem {
    pub fn rows(&self) -> usize {
        self.a_ieq.nrows()
    }

    /// One-sided form `[A; -A] dpsi <= [b_up; -b_lo]`.
    pub fn one_sided(&self) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.rows();
        let mut a = DMatrix::zeros(2 * r, self.a_ieq.ncols());
        a.rows_mut(0, r).copy_from(&self.a_ieq);
        a.rows_mut(r, r).copy_from(&(-&self.a_ieq));
        let mut b = DVector::zeros(2 * r);
        b.rows_mut(0, r).copy_from(&self.b_up);
        b.rows_mut(r, r).copy_from(&(-&self.b_lo));
        (a, b)
    }
}

pub fn build_inequality_system(
    coeffs: &CoefficientVector,
    model: &MultiChainModel,
    count: usize,
) -> Result<InequalitySystem> {
    let basis = coeffs.basis();
    let times = checkpoints(count, basis.horizon())?;
    let m = coeffs.dof();
    if m != model.dof() {
        return Err(Error::Argument(format!("coefficients cover {m} joints, model has {}", model.dof())));
    }
    let (lo, up) = (model.lower(), model.upper());
    let mut a = DMatrix::zeros(count * m, coeffs.psi.len());
    let mut b_lo = DVector::zeros(count * m);
    let mut b_up = DVector::zeros(count * m);
    for (k, &t) in times.iter().enumerate() {
        let phi = phi_at(basis, t)?;
        put_stack(&mut a, k * m, m, &phi);
        let xi = coeffs.eval(t)?;
        for i in 0..m {
            b_lo[k * m + i] = lo[i] - xi[i];
            b_up[k * m + i] = up[i] - xi[i];
        }
    }
    Ok(InequalitySystem { a_ieq: a, b_lo, b_up, times })
}

/// `v = [A; -A] dpsi - [b_up; -b_lo]`; positive entries are limit violations at `psi + dpsi`.
pub fn violation_vector(ieq: &InequalitySystem, step: &DVector<f64>) -> DVector<f64> {
    let ad = &ieq.a_ieq * step;
    let r = ieq.rows();
    DVector::from_fn(2 * r, |i, _| if i < r { ad[i] - ieq.b_up[i] } else { ieq.b_lo[i - r] - ad[i - r] })
}

/// Indices with `v_k > 0`.
pub fn active_set(v: &DVector<f64>) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, x)| **x > 0.0).map(|(i, _)| i).collect()
}

/// Largest limit violation of the iterate the system was built at; zero when feasible.
pub fn v_inf(ieq: &InequalitySystem) -> f64 {
    let up = ieq.b_up.iter().map(|b| -b);
    let lo = ieq.b_lo.iter().copied();
    up.chain(lo).fold(0.0, f64::max)
}
