//! Dense strictly convex quadratic programs.
//!
//! ```text
//!     minimize    1/2 x' Q x + q' x
//!     subject to  F x  = f
//!                 G x <= g
//! ```
//!
//! The solver is a dual active-set method (Goldfarb-Idnani) that keeps a QR-like
//! factor `J' N = [R; 0]` of the active constraint normals updated with Givens
//! rotations. Infeasibility shows up as an unbounded dual step. The final active
//! set is polished with one direct KKT solve so that multipliers and primal agree
//! to working precision, which the sensitivity routines rely on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matrix_from_rows, matrix_to_rows};

/// Relative activity tolerance for `G_i x - g_i`.
pub const ACTIVE_TOL: f64 = 1e-9;
/// Multipliers above this are strongly active.
pub const STRONG_TOL: f64 = 1e-9;
/// Relative pivot threshold for the KKT factorization.
pub const PIVOT_TOL: f64 = 1e-12;
/// Rank tolerance for the LICQ test.
pub const LICQ_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP is infeasible")]
    Infeasible,
    #[error("active-set iteration limit ({0}) exceeded")]
    MaxIterations(usize),
    #[error("cost matrix is not positive definite")]
    IllConditioned,
    #[error("active constraint rows are linearly dependent")]
    LicqViolated,
    #[error("KKT matrix is numerically singular")]
    SingularKkt,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// QP data. Rows of `f_mat`/`g_mat` are constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub f_mat: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        q_mat: DMatrix<f64>,
        q: DVector<f64>,
        f_mat: DMatrix<f64>,
        f: DVector<f64>,
        g_mat: DMatrix<f64>,
        g: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = Self { q_mat, q, f_mat, f, g_mat, g };
        p.check_dims()?;
        Ok(p)
    }

    /// Problem without constraints.
    pub fn unconstrained(q_mat: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q_mat,
            q,
            f_mat: DMatrix::zeros(0, n),
            f: DVector::zeros(0),
            g_mat: DMatrix::zeros(0, n),
            g: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn n_eq(&self) -> usize {
        self.f.len()
    }

    pub fn n_in(&self) -> usize {
        self.g.len()
    }

    pub fn check_dims(&self) -> Result<(), QpError> {
        let n = self.q.len();
        let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.q_mat.nrows() != n || self.q_mat.ncols() != n {
            return bad("Q must be n x n");
        }
        if self.f_mat.ncols() != n || self.f_mat.nrows() != self.f.len() {
            return bad("F/f shape");
        }
        if self.g_mat.ncols() != n || self.g_mat.nrows() != self.g.len() {
            return bad("G/g shape");
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q.dot(x)
    }

    /// Euclidean projection of `point` onto `{z : a z <= b}` posed as a QP.
    pub fn projection(point: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        let n = point.len();
        Self {
            q_mat: DMatrix::identity(n, n),
            q: -point,
            f_mat: DMatrix::zeros(0, n),
            f: DVector::zeros(0),
            g_mat: a.clone(),
            g: b.clone(),
        }
    }
}

/// Primal-dual point with its active set.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub nu: DVector<f64>,
    pub lambda: DVector<f64>,
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl QpSolution {
    /// Active constraints whose multiplier is strictly positive.
    pub fn strongly_active(&self) -> Vec<usize> {
        self.active_set
            .iter()
            .copied()
            .filter(|&i| self.lambda[i] > STRONG_TOL)
            .collect()
    }

    /// Smallest distance to a change of the active set: the smallest inactive
    /// slack or the smallest active multiplier, whichever is smaller.
    pub fn degeneracy_margin(&self, problem: &QpProblem) -> f64 {
        let mut margin = f64::INFINITY;
        let slack = &problem.g - &problem.g_mat * &self.x;
        for i in 0..problem.n_in() {
            if self.active_set.contains(&i) {
                margin = margin.min(self.lambda[i]);
            } else {
                margin = margin.min(slack[i]);
            }
        }
        margin
    }
}

/// Derivatives of the QP data with respect to one scalar parameter coordinate.
/// `None` stands for a zero block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpDataDerivative {
    pub d_q_mat: Option<DMatrix<f64>>,
    pub d_q: Option<DVector<f64>>,
    pub d_f_mat: Option<DMatrix<f64>>,
    pub d_f: Option<DVector<f64>>,
    pub d_g_mat: Option<DMatrix<f64>>,
    pub d_g: Option<DVector<f64>>,
}

impl QpDataDerivative {
    /// `problem + h * self`, used by finite-difference fallbacks.
    pub fn perturb(&self, problem: &QpProblem, h: f64) -> QpProblem {
        let mut p = problem.clone();
        if let Some(d) = &self.d_q_mat {
            p.q_mat += d * h;
        }
        if let Some(d) = &self.d_q {
            p.q += d * h;
        }
        if let Some(d) = &self.d_f_mat {
            p.f_mat += d * h;
        }
        if let Some(d) = &self.d_f {
            p.f += d * h;
        }
        if let Some(d) = &self.d_g_mat {
            p.g_mat += d * h;
        }
        if let Some(d) = &self.d_g {
            p.g += d * h;
        }
        p
    }
}

/// Per-coordinate derivatives of `(Q, q, F, f, G, g)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpDataJacobian {
    pub coords: Vec<QpDataDerivative>,
}

impl QpDataJacobian {
    pub fn with_len(n: usize) -> Self {
        Self { coords: vec![QpDataDerivative::default(); n] }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub max_iter: Option<usize>,
    /// Relative primal feasibility tolerance of the active-set loop.
    pub feas_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { max_iter: None, feas_tol: 1e-12 }
    }
}

/// Solve a QP, optionally trying the active set of a previous solution first.
pub fn qp_solve(problem: &QpProblem, warm_start: Option<&QpSolution>) -> Result<QpSolution, QpError> {
    qp_solve_with(problem, warm_start, &QpSettings::default())
}

pub fn qp_solve_with(
    problem: &QpProblem,
    warm_start: Option<&QpSolution>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    problem.check_dims()?;
    if let Some(ws) = warm_start {
        if ws.x.len() == problem.n() {
            if let Some(sol) = try_active_set(problem, &ws.strongly_active()) {
                return Ok(sol);
            }
        }
    }
    let mut solver = DualActiveSet::new(problem)?;
    let iterations = solver.run(settings)?;
    let (x, active_in) = solver.result();
    Ok(finalize(problem, x, &active_in, iterations, Some(&solver)))
}

/// Solve the equality-constrained problem on a guessed active set and accept it
/// if it satisfies all KKT conditions.
fn try_active_set(problem: &QpProblem, active: &[usize]) -> Option<QpSolution> {
    let (x, nu, lam_a) = kkt_direct(problem, active)?;
    let slack = &problem.g - &problem.g_mat * &x;
    for i in 0..problem.n_in() {
        if slack[i] < -ACTIVE_TOL * (1.0 + problem.g[i].abs()) {
            return None;
        }
    }
    if lam_a.iter().any(|&l| l < -STRONG_TOL) {
        return None;
    }
    let mut lambda = DVector::zeros(problem.n_in());
    for (k, &i) in active.iter().enumerate() {
        lambda[i] = lam_a[k].max(0.0);
    }
    Some(assemble(problem, x, nu, lambda, 0))
}

/// Direct solve of `[Q C'; C 0] [x; mu] = [-q; rhs]` with `C = [F; G_A]`.
fn kkt_direct(
    problem: &QpProblem,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let m = problem.n_eq();
    let a = active.len();
    let dim = n + m + a;
    let mut k = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.q_mat);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    for r in 0..m {
        for c in 0..n {
            let v = problem.f_mat[(r, c)];
            k[(n + r, c)] = v;
            k[(c, n + r)] = v;
        }
        rhs[n + r] = problem.f[r];
    }
    for (j, &i) in active.iter().enumerate() {
        for c in 0..n {
            let v = problem.g_mat[(i, c)];
            k[(n + m + j, c)] = v;
            k[(c, n + m + j)] = v;
        }
        rhs[n + m + j] = problem.g[i];
    }
    let scale = k.amax().max(1.0);
    let lu = k.lu();
    let u = lu.u();
    if (0..dim).any(|i| u[(i, i)].abs() <= PIVOT_TOL * scale) {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((
        sol.rows(0, n).into_owned(),
        sol.rows(n, m).into_owned(),
        sol.rows(n + m, a).into_owned(),
    ))
}

fn finalize(
    problem: &QpProblem,
    x_ga: DVector<f64>,
    active: &[usize],
    iterations: usize,
    solver: Option<&DualActiveSet>,
) -> QpSolution {
    // Polish on the identified active set; fall back to the active-set iterate.
    if let Some((x, nu, lam_a)) = kkt_direct(problem, active) {
        if lam_a.iter().all(|&l| l > -1e-7) {
            let mut lambda = DVector::zeros(problem.n_in());
            for (k, &i) in active.iter().enumerate() {
                lambda[i] = lam_a[k].max(0.0);
            }
            let polished = assemble(problem, x, nu, lambda, iterations);
            if let Some(s) = solver {
                let fallback = s.solution(problem, iterations);
                if fallback.kkt_residual < polished.kkt_residual {
                    return fallback;
                }
            }
            return polished;
        }
    }
    match solver {
        Some(s) => s.solution(problem, iterations),
        None => {
            let lambda = DVector::zeros(problem.n_in());
            let nu = DVector::zeros(problem.n_eq());
            assemble(problem, x_ga, nu, lambda, iterations)
        }
    }
}

fn assemble(
    problem: &QpProblem,
    x: DVector<f64>,
    nu: DVector<f64>,
    mut lambda: DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let gx = &problem.g_mat * &x;
    let mut active_set = Vec::new();
    for i in 0..problem.n_in() {
        if gx[i] - problem.g[i] >= -ACTIVE_TOL * (1.0 + problem.g[i].abs()) {
            active_set.push(i);
        } else {
            lambda[i] = 0.0;
        }
    }
    let kkt_residual = kkt_residual(problem, &x, &nu, &lambda);
    QpSolution { x, nu, lambda, active_set, kkt_residual, iterations }
}

/// Scaled max-norm of the KKT residuals (stationarity, primal feasibility, dual
/// feasibility, complementarity). Each block is divided by `1 +` the magnitude
/// of the terms it is built from.
pub fn kkt_residual(problem: &QpProblem, x: &DVector<f64>, nu: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let qx = &problem.q_mat * x;
    let fnu = problem.f_mat.tr_mul(nu);
    let glam = problem.g_mat.tr_mul(lambda);
    let stat = &qx + &problem.q + &fnu + &glam;
    let stat_scale = 1.0 + qx.amax().max(problem.q.amax()).max(fnu.amax()).max(glam.amax());
    let mut res = stat.amax() / stat_scale;
    if problem.n_eq() > 0 {
        let fx = &problem.f_mat * x;
        let r = (&fx - &problem.f).amax() / (1.0 + fx.amax().max(problem.f.amax()));
        res = res.max(r);
    }
    if problem.n_in() > 0 {
        let gx = &problem.g_mat * x;
        let scale = 1.0 + gx.amax().max(problem.g.amax());
        for i in 0..problem.n_in() {
            let s = gx[i] - problem.g[i];
            res = res.max(s.max(0.0) / scale);
            res = res.max((-lambda[i]).max(0.0));
            res = res.max((lambda[i] * s).abs() / scale);
        }
    }
    res
}

/// Goldfarb-Idnani dual active-set iteration state.
struct DualActiveSet<'a> {
    problem: &'a QpProblem,
    n: usize,
    x: DVector<f64>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Active constraints: (global index, sign). Equalities come first and
    /// have global index `< n_eq`; inequalities are `n_eq + i`.
    active: Vec<(usize, f64)>,
    u: Vec<f64>,
    row_norms: Vec<f64>,
}

impl<'a> DualActiveSet<'a> {
    fn new(problem: &'a QpProblem) -> Result<Self, QpError> {
        let n = problem.n();
        let chol = problem.q_mat.clone().cholesky().ok_or(QpError::IllConditioned)?;
        let l = chol.l();
        // J = L^{-T}, so that J' Q J = I.
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::IllConditioned)?;
        let j = l_inv.transpose();
        let x = -chol.solve(&problem.q);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(QpError::IllConditioned);
        }
        let row_norms = (0..problem.n_in()).map(|i| problem.g_mat.row(i).norm()).collect();
        Ok(Self {
            problem,
            n,
            x,
            j,
            r: DMatrix::zeros(n, n),
            active: Vec::new(),
            u: Vec::new(),
            row_norms,
        })
    }

    /// Constraint normal and rhs in `n' x >= b` form.
    fn normal(&self, global: usize, sign: f64) -> (DVector<f64>, f64) {
        let m = self.problem.n_eq();
        if global < m {
            (self.problem.f_mat.row(global).transpose() * sign, self.problem.f[global] * sign)
        } else {
            let i = global - m;
            (-self.problem.g_mat.row(i).transpose(), -self.problem.g[i])
        }
    }

    /// Primal direction `z`, dual direction `r` and `d = J' n`.
    fn directions(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let a = self.active.len();
        let d = self.j.tr_mul(normal);
        let mut z = DVector::zeros(self.n);
        for c in a..self.n {
            z.axpy(d[c], &self.j.column(c), 1.0);
        }
        let mut r = DVector::zeros(a);
        for i in (0..a).rev() {
            let mut s = d[i];
            for k in i + 1..a {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        (z, r, d)
    }

    fn add_constraint(&mut self, mut d: DVector<f64>, global: usize, sign: f64, mult: f64) -> bool {
        let a = self.active.len();
        for c in (a + 1..self.n).rev() {
            let (x, y) = (d[c - 1], d[c]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (cs, sn) = (x / h, y / h);
            d[c - 1] = h;
            d[c] = 0.0;
            rotate_columns(&mut self.j, c - 1, c, cs, sn);
        }
        if d[a].abs() <= f64::EPSILON * d.amax().max(1.0) {
            return false;
        }
        for i in 0..=a {
            self.r[(i, a)] = d[i];
        }
        self.active.push((global, sign));
        self.u.push(mult);
        true
    }

    fn drop_constraint(&mut self, pos: usize) {
        let a = self.active.len();
        self.active.remove(pos);
        self.u.remove(pos);
        for c in pos..a - 1 {
            for i in 0..a {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..a {
            self.r[(i, a - 1)] = 0.0;
        }
        // Restore upper-triangular form of the Hessenberg block.
        for c in pos..a - 1 {
            let (x, y) = (self.r[(c, c)], self.r[(c + 1, c)]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (cs, sn) = (x / h, y / h);
            for k in c..a - 1 {
                let (r0, r1) = (self.r[(c, k)], self.r[(c + 1, k)]);
                self.r[(c, k)] = cs * r0 + sn * r1;
                self.r[(c + 1, k)] = -sn * r0 + cs * r1;
            }
            self.r[(c + 1, c)] = 0.0;
            rotate_columns(&mut self.j, c, c + 1, cs, sn);
        }
    }

    fn run(&mut self, settings: &QpSettings) -> Result<usize, QpError> {
        let m = self.problem.n_eq();
        let mut iterations = 0usize;
        for e in 0..m {
            let (mut normal, mut b) = self.normal(e, 1.0);
            let mut sign = 1.0;
            let mut s = normal.dot(&self.x) - b;
            if s > 0.0 {
                sign = -1.0;
                normal = -normal;
                b = -b;
                s = -s;
            }
            let _ = b;
            let (z, r, d) = self.directions(&normal);
            let zn = z.dot(&normal);
            let scale = 1.0 + self.problem.f[e].abs() + self.problem.f_mat.row(e).amax() * self.x.amax();
            if zn <= 1e-14 * normal.norm_squared().max(1e-300) {
                // Row is dependent on the active equalities: consistent or infeasible.
                if s.abs() <= 1e-9 * scale {
                    continue;
                }
                return Err(QpError::Infeasible);
            }
            let t = -s / zn;
            self.x.axpy(t, &z, 1.0);
            for (ui, ri) in self.u.iter_mut().zip(r.iter()) {
                *ui -= t * ri;
            }
            if !self.add_constraint(d, e, sign, t) {
                return Err(QpError::Infeasible);
            }
        }

        let n_in = self.problem.n_in();
        let max_iter = settings.max_iter.unwrap_or(50 * (self.n + n_in + m) + 100);
        loop {
            // Most violated inequality (scaled by its row norm).
            let gx = &self.problem.g_mat * &self.x;
            let mut best: Option<(usize, f64)> = None;
            for i in 0..n_in {
                if self.active.iter().any(|&(gidx, _)| gidx == m + i) {
                    continue;
                }
                let s = self.problem.g[i] - gx[i];
                let tol = settings.feas_tol * (1.0 + self.problem.g[i].abs() + self.row_norms[i] * self.x.amax());
                if s < -tol {
                    let scaled = s / self.row_norms[i].max(1e-300);
                    if best.is_none_or(|(_, v)| scaled < v) {
                        best = Some((i, scaled));
                    }
                }
            }
            let Some((p, _)) = best else {
                return Ok(iterations);
            };
            let (normal, b) = self.normal(m + p, 1.0);
            let mut s = normal.dot(&self.x) - b;
            let mut u_plus = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpError::MaxIterations(max_iter));
                }
                let (z, r, d) = self.directions(&normal);
                let mut t1 = f64::INFINITY;
                let mut drop_pos = None;
                for (pos, &(gidx, _)) in self.active.iter().enumerate() {
                    if gidx < m {
                        continue;
                    }
                    if r[pos] > 0.0 {
                        let ratio = self.u[pos] / r[pos];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_pos = Some(pos);
                        }
                    }
                }
                let zn = z.dot(&normal);
                let t2 = if zn > 1e-14 * normal.norm_squared() { -s / zn } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    for (ui, ri) in self.u.iter_mut().zip(r.iter()) {
                        *ui -= t * ri;
                    }
                    u_plus += t;
                    self.drop_constraint(drop_pos.expect("finite partial step has a blocking constraint"));
                    continue;
                }
                self.x.axpy(t, &z, 1.0);
                for (ui, ri) in self.u.iter_mut().zip(r.iter()) {
                    *ui -= t * ri;
                }
                u_plus += t;
                if t2 <= t1 {
                    if !self.add_constraint(d, m + p, 1.0, u_plus) {
                        return Err(QpError::Infeasible);
                    }
                    break;
                }
                self.drop_constraint(drop_pos.expect("partial step has a blocking constraint"));
                s = normal.dot(&self.x) - b;
            }
        }
    }

    /// Current primal and the list of active inequality indices.
    fn result(&self) -> (DVector<f64>, Vec<usize>) {
        let m = self.problem.n_eq();
        let mut act: Vec<usize> = self
            .active
            .iter()
            .filter(|&&(g, _)| g >= m)
            .map(|&(g, _)| g - m)
            .collect();
        act.sort_unstable();
        (self.x.clone(), act)
    }

    fn solution(&self, problem: &QpProblem, iterations: usize) -> QpSolution {
        let m = problem.n_eq();
        let mut nu = DVector::zeros(m);
        let mut lambda = DVector::zeros(problem.n_in());
        for (pos, &(g, sign)) in self.active.iter().enumerate() {
            if g < m {
                nu[g] = -sign * self.u[pos];
            } else {
                lambda[g - m] = self.u[pos].max(0.0);
            }
        }
        assemble(problem, self.x.clone(), nu, lambda, iterations)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, cs: f64, sn: f64) {
    for i in 0..j.nrows() {
        let (ja, jb) = (j[(i, a)], j[(i, b)]);
        j[(i, a)] = cs * ja + sn * jb;
        j[(i, b)] = -sn * ja + cs * jb;
    }
}

/// Data `(H, h)` of the dual QP `min 1/2 z'Hz + h'z s.t. z_ineq >= 0`, with
/// `z = (lambda, nu)` ordered inequalities first.
pub fn qp_dual_data(problem: &QpProblem) -> Result<(DMatrix<f64>, DVector<f64>), QpError> {
    problem.check_dims()?;
    let chol = problem.q_mat.clone().cholesky().ok_or(QpError::IllConditioned)?;
    let n = problem.n();
    let (mi, me) = (problem.n_in(), problem.n_eq());
    let mut c = DMatrix::zeros(mi + me, n);
    c.view_mut((0, 0), (mi, n)).copy_from(&problem.g_mat);
    c.view_mut((mi, 0), (me, n)).copy_from(&problem.f_mat);
    let mut rhs = DVector::zeros(mi + me);
    rhs.rows_mut(0, mi).copy_from(&problem.g);
    rhs.rows_mut(mi, me).copy_from(&problem.f);
    let qinv_ct = chol.solve(&c.transpose());
    let mut h_mat = &c * &qinv_ct;
    h_mat = (&h_mat + h_mat.transpose()) * 0.5;
    let h = &c * chol.solve(&problem.q) + rhs;
    Ok((h_mat, h))
}

/// Full KKT sensitivity `(dx, dlambda_A, dnu)` for every parameter coordinate.
/// Strongly active inequalities form `G_A`.
pub struct KktSensitivity {
    pub dx: DMatrix<f64>,
    pub dlambda: DMatrix<f64>,
    pub dnu: DMatrix<f64>,
    pub strongly_active: Vec<usize>,
}

/// Element of the conservative Jacobian of the primal solution map, one column
/// per coordinate of `data_jac`.
pub fn qp_solution_jacobian(
    problem: &QpProblem,
    solution: &QpSolution,
    data_jac: &QpDataJacobian,
) -> Result<DMatrix<f64>, QpError> {
    Ok(qp_kkt_sensitivity(problem, solution, data_jac)?.dx)
}

pub fn qp_kkt_sensitivity(
    problem: &QpProblem,
    solution: &QpSolution,
    data_jac: &QpDataJacobian,
) -> Result<KktSensitivity, QpError> {
    problem.check_dims()?;
    let n = problem.n();
    let m = problem.n_eq();
    let act = solution.strongly_active();
    let a = act.len();
    let dim = n + a + m;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.q_mat);
    for (j, &i) in act.iter().enumerate() {
        for c in 0..n {
            let v = problem.g_mat[(i, c)];
            k[(n + j, c)] = v;
            k[(c, n + j)] = v;
        }
    }
    for r in 0..m {
        for c in 0..n {
            let v = problem.f_mat[(r, c)];
            k[(n + a + r, c)] = v;
            k[(c, n + a + r)] = v;
        }
    }
    let scale = k.amax().max(1.0);
    let lu = k.lu();
    {
        let u = lu.u();
        if (0..dim).any(|i| u[(i, i)].abs() <= PIVOT_TOL * scale) {
            return Err(if licq_holds(problem, &act) { QpError::SingularKkt } else { QpError::LicqViolated });
        }
    }

    let np = data_jac.len();
    let mut rhs = DMatrix::zeros(dim, np);
    let x = &solution.x;
    let lam_a = DVector::from_iterator(a, act.iter().map(|&i| solution.lambda[i]));
    for (c, d) in data_jac.coords.iter().enumerate() {
        let mut top = DVector::zeros(n);
        if let Some(dq) = &d.d_q_mat {
            top += dq * x;
        }
        if let Some(dq) = &d.d_q {
            top += dq;
        }
        if let Some(dg) = &d.d_g_mat {
            for (j, &i) in act.iter().enumerate() {
                top.axpy(lam_a[j], &dg.row(i).transpose(), 1.0);
            }
        }
        if let Some(df) = &d.d_f_mat {
            top += df.tr_mul(&solution.nu);
        }
        for r in 0..n {
            rhs[(r, c)] = -top[r];
        }
        for (j, &i) in act.iter().enumerate() {
            let mut v = 0.0;
            if let Some(dg) = &d.d_g_mat {
                v += dg.row(i).transpose().dot(x);
            }
            if let Some(dg) = &d.d_g {
                v -= dg[i];
            }
            rhs[(n + j, c)] = -v;
        }
        if d.d_f_mat.is_some() || d.d_f.is_some() {
            let mut v = DVector::zeros(m);
            if let Some(df) = &d.d_f_mat {
                v += df * x;
            }
            if let Some(df) = &d.d_f {
                v -= df;
            }
            for r in 0..m {
                rhs[(n + a + r, c)] = -v[r];
            }
        }
    }
    let sol = lu.solve(&rhs).ok_or(QpError::SingularKkt)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(QpError::SingularKkt);
    }
    Ok(KktSensitivity {
        dx: sol.rows(0, n).into_owned(),
        dlambda: sol.rows(n, a).into_owned(),
        dnu: sol.rows(n + a, m).into_owned(),
        strongly_active: act,
    })
}

/// Rank test on the stacked rows `[F; G_A]`.
pub fn licq_holds(problem: &QpProblem, active: &[usize]) -> bool {
    let n = problem.n();
    let rows = problem.n_eq() + active.len();
    if rows == 0 {
        return true;
    }
    if rows > n {
        return false;
    }
    let mut c = DMatrix::zeros(rows, n);
    c.view_mut((0, 0), (problem.n_eq(), n)).copy_from(&problem.f_mat);
    for (j, &i) in active.iter().enumerate() {
        c.row_mut(problem.n_eq() + j).copy_from(&problem.g_mat.row(i));
    }
    let sv = c.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return false;
    }
    sv.min() > LICQ_TOL * smax
}

/// One-sided finite-difference Jacobian obtained by re-solving the linearly
/// perturbed data. Used when the KKT route is unavailable.
pub fn qp_solution_jacobian_fd(
    problem: &QpProblem,
    solution: &QpSolution,
    data_jac: &QpDataJacobian,
    step: f64,
) -> Result<DMatrix<f64>, QpError> {
    let mut jac = DMatrix::zeros(problem.n(), data_jac.len());
    for (c, d) in data_jac.coords.iter().enumerate() {
        let perturbed = d.perturb(problem, step);
        let s = qp_solve(&perturbed, Some(solution))?;
        jac.set_column(c, &((&s.x - &solution.x) / step));
    }
    Ok(jac)
}

/// JSON fixture dump of a problem and (optionally) its solution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QpDump {
    pub q_mat: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub f_mat: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub g_mat: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<f64>>,
}

impl QpDump {
    pub fn new(problem: &QpProblem, solution: Option<&QpSolution>) -> Self {
        Self {
            q_mat: matrix_to_rows(&problem.q_mat),
            q: problem.q.iter().copied().collect(),
            f_mat: matrix_to_rows(&problem.f_mat),
            f: problem.f.iter().copied().collect(),
            g_mat: matrix_to_rows(&problem.g_mat),
            g: problem.g.iter().copied().collect(),
            x: solution.map(|s| s.x.iter().copied().collect()),
            lambda: solution.map(|s| s.lambda.iter().copied().collect()),
            nu: solution.map(|s| s.nu.iter().copied().collect()),
        }
    }

    pub fn problem(&self) -> Result<QpProblem, QpError> {
        let n = self.q.len();
        let mat = |rows: &[Vec<f64>]| {
            matrix_from_rows(rows, n).ok_or_else(|| QpError::DimensionMismatch("ragged matrix".into()))
        };
        QpProblem::new(
            mat(&self.q_mat)?,
            DVector::from_column_slice(&self.q),
            mat(&self.f_mat)?,
            DVector::from_column_slice(&self.f),
            mat(&self.g_mat)?,
            DVector::from_column_slice(&self.g),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(q: f64, lin: f64, g: Option<(f64, f64)>) -> QpProblem {
        let (gm, gv) = match g {
            Some((a, b)) => (DMatrix::from_element(1, 1, a), DVector::from_element(1, b)),
            None => (DMatrix::zeros(0, 1), DVector::zeros(0)),
        };
        QpProblem::new(
            DMatrix::from_element(1, 1, q),
            DVector::from_element(1, lin),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            gm,
            gv,
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_minimum() {
        let s = qp_solve(&scalar(1.0, 0.0, None), None).unwrap();
        assert_eq!(s.x[0], 0.0);
        assert!(s.lambda.is_empty() && s.nu.is_empty());
    }

    #[test]
    fn active_bound_multiplier() {
        let s = qp_solve(&scalar(1.0, -1.0, Some((1.0, 0.0))), None).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.lambda[0], 1.0, epsilon = 1e-14);
        assert_eq!(s.active_set, vec![0]);
        assert!(s.kkt_residual <= 1e-9);
    }

    #[test]
    fn equality_and_inequality() {
        // min 1/2|x|^2 s.t. x0 + x1 = 1, x0 <= 0.2
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 0.2),
        )
        .unwrap();
        let s = qp_solve(&p, None).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.2, epsilon = 1e-13);
        assert_abs_diff_eq!(s.x[1], 0.8, epsilon = 1e-13);
        // stationarity: x + nu*[1,1] + lambda*[1,0] = 0
        assert_abs_diff_eq!(s.nu[0], -0.8, epsilon = 1e-13);
        assert_abs_diff_eq!(s.lambda[0], 0.6, epsilon = 1e-13);
    }

    #[test]
    fn infeasible_inequalities() {
        // x <= -1 and -x <= -1 (x >= 1)
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_row_slice(&[-1.0, -1.0]),
        )
        .unwrap();
        assert_eq!(qp_solve(&p, None), Err(QpError::Infeasible));
    }

    #[test]
    fn inconsistent_equalities() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::from_row_slice(&[1.0, 3.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        assert_eq!(qp_solve(&p, None), Err(QpError::Infeasible));
    }

    #[test]
    fn redundant_consistent_equalities() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::from_row_slice(&[1.0, 2.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let s = qp_solve(&p, None).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-13);
    }

    #[test]
    fn indefinite_cost_is_rejected() {
        let p = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
        assert_eq!(qp_solve(&p, None), Err(QpError::IllConditioned));
    }

    #[test]
    fn max_iterations_guard() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[-3.0, -3.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[1.0, 1.0]),
        )
        .unwrap();
        let settings = QpSettings { max_iter: Some(1), ..Default::default() };
        assert_eq!(qp_solve_with(&p, None, &settings), Err(QpError::MaxIterations(1)));
    }

    #[test]
    fn dual_data_examples() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[0.3, -0.7]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let (h_mat, h) = qp_dual_data(&p).unwrap();
        assert_abs_diff_eq!(h_mat[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], 0.5 + 0.3, epsilon = 1e-15);

        let p = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let (h_mat, h) = qp_dual_data(&p).unwrap();
        assert_abs_diff_eq!(h_mat[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_closed_forms() {
        // min 1/2 x^2 - p x ; dq/dp = -1
        let mut dj = QpDataJacobian::with_len(1);
        dj.coords[0].d_q = Some(DVector::from_element(1, -1.0));
        let p = scalar(1.0, -1.0, None);
        let s = qp_solve(&p, None).unwrap();
        let jac = qp_solution_jacobian(&p, &s, &dj).unwrap();
        assert_abs_diff_eq!(jac[(0, 0)], 1.0, epsilon = 1e-14);

        let p = scalar(1.0, -1.0, Some((1.0, 0.5)));
        let s = qp_solve(&p, None).unwrap();
        assert_eq!(s.strongly_active(), vec![0]);
        let jac = qp_solution_jacobian(&p, &s, &dj).unwrap();
        assert_abs_diff_eq!(jac[(0, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn licq_violation_is_reported() {
        // Two identical active constraints x0 <= 0 with multipliers forced positive.
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let sol = QpSolution {
            x: DVector::zeros(1),
            nu: DVector::zeros(0),
            lambda: DVector::from_row_slice(&[0.5, 0.5]),
            active_set: vec![0, 1],
            kkt_residual: 0.0,
            iterations: 0,
        };
        let dj = QpDataJacobian::with_len(1);
        assert!(matches!(qp_solution_jacobian(&p, &sol, &dj), Err(QpError::LicqViolated)));
        // The solver itself handles the duplicate row.
        let s = qp_solve(&p, None).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn warm_start_reuses_active_set() {
        let p = scalar(1.0, -1.0, Some((1.0, 0.0)));
        let cold = qp_solve(&p, None).unwrap();
        let warm = qp_solve(&p, Some(&cold)).unwrap();
        assert_eq!(warm.iterations, 0);
        assert_abs_diff_eq!(warm.x[0], cold.x[0], epsilon = 1e-15);
    }

    #[test]
    fn dump_round_trip() {
        let p = scalar(2.0, -1.0, Some((1.0, 0.25)));
        let s = qp_solve(&p, None).unwrap();
        let json = serde_json::to_string(&QpDump::new(&p, Some(&s))).unwrap();
        let back: QpDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back.problem().unwrap(), p);
        assert_eq!(back.x.unwrap()[0], s.x[0]);
    }
}
