//! Soft-constrained MPC posed as a stacked (non-condensed) QP.
//!
//! Decision vector `y = (x_0..x_N, u_0..u_{N-1}, eps_0..eps_N)` with one slack
//! per state-constraint row per stage. Cost
//!
//! ```text
//!   sum_{j<N} |x_j - x_ref|_Q^2 + |u_j - u_ref|_R^2 + |x_N - x_ref|_P^2 + c1 1'eps + c2 eps'eps
//! ```
//!
//! subject to `x_0 = x_t`, `x_{j+1} = A_j x_j + B_j u_j + c_j`,
//! `H_x x_j <= h_x + eps_j`, `H_u u_j <= h_u` and `eps >= 0`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{FeatureModel, Polytope};
use crate::qp::{
    qp_solution_jacobian, qp_solution_jacobian_fd, qp_solve, QpDataDerivative, QpDataJacobian, QpError, QpProblem,
    QpSolution,
};

/// Shift keeping the factored cost matrices positive definite.
pub const COST_SHIFT: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Design parameter `p = (p1, p2, p3, vartheta)` with lower-triangular cost
/// factors. Flattened layout: lower-triangular entries of `p1`, `p2`, `p3`
/// (row-major, `j <= i`), then `vartheta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignParameter {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub p3: DMatrix<f64>,
    pub vartheta: Option<DVector<f64>>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

fn tril_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn tril_push(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

fn tril_read(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = v[k];
            k += 1;
        }
    }
    m
}

fn tril_index(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

/// Lower Cholesky factor of `m - COST_SHIFT I`, so that the factor reproduces `m`.
fn cost_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MpcError> {
    let n = m.nrows();
    let shifted = m - DMatrix::identity(n, n) * COST_SHIFT;
    shifted
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| MpcError::ConfigMismatch("cost matrix is not positive definite".into()))
}

impl DesignParameter {
    /// Parameter whose implied matrices equal `q`, `r`, `p` (up to the shift),
    /// with an unbounded box.
    pub fn from_costs(
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        p: &DMatrix<f64>,
        vartheta: Option<DVector<f64>>,
    ) -> Result<Self, MpcError> {
        let mut param = Self {
            p1: cost_factor(q)?,
            p2: cost_factor(r)?,
            p3: cost_factor(p)?,
            vartheta,
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        };
        let n = param.n_params();
        param.lower = DVector::from_element(n, f64::NEG_INFINITY);
        param.upper = DVector::from_element(n, f64::INFINITY);
        Ok(param)
    }

    /// Box `|factor entry| <= factor_bound`, `|vartheta - center| <= theta_bound`.
    pub fn with_box(mut self, factor_bound: f64, theta_center: Option<&DVector<f64>>, theta_bound: f64) -> Self {
        let nf = self.n_factor_params();
        let n = self.n_params();
        self.lower = DVector::from_element(n, -factor_bound);
        self.upper = DVector::from_element(n, factor_bound);
        if let (Some(c), Some(r)) = (theta_center, self.vartheta_range()) {
            for (k, i) in r.enumerate() {
                self.lower[i] = c[k] - theta_bound;
                self.upper[i] = c[k] + theta_bound;
            }
        }
        debug_assert_eq!(nf + self.vartheta.as_ref().map_or(0, |v| v.len()), n);
        self
    }

    pub fn n_x(&self) -> usize {
        self.p1.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.p2.nrows()
    }

    pub fn n_factor_params(&self) -> usize {
        2 * tril_len(self.n_x()) + tril_len(self.n_u())
    }

    pub fn n_params(&self) -> usize {
        self.n_factor_params() + self.vartheta.as_ref().map_or(0, |v| v.len())
    }

    pub fn vartheta_range(&self) -> Option<Range<usize>> {
        let start = self.n_factor_params();
        self.vartheta.as_ref().map(|v| start..start + v.len())
    }

    pub fn to_vec(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        tril_push(&self.p1, &mut out);
        tril_push(&self.p2, &mut out);
        tril_push(&self.p3, &mut out);
        if let Some(v) = &self.vartheta {
            out.extend(v.iter());
        }
        DVector::from_vec(out)
    }

    /// Same structure with coordinates taken from `v`.
    pub fn with_vec(&self, v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), self.n_params());
        let (nx, nu) = (self.n_x(), self.n_u());
        let s = v.as_slice();
        let (a, rest) = s.split_at(tril_len(nx));
        let (b, rest) = rest.split_at(tril_len(nu));
        let (c, rest) = rest.split_at(tril_len(nx));
        Self {
            p1: tril_read(nx, a),
            p2: tril_read(nu, b),
            p3: tril_read(nx, c),
            vartheta: self.vartheta.as_ref().map(|_| DVector::from_column_slice(rest)),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }

    pub fn clamp_to_box(&self) -> Self {
        let v = self.to_vec().zip_zip_map(&self.lower, &self.upper, |x, l, h| x.clamp(l, h));
        self.with_vec(&v)
    }

    pub fn in_box(&self, tol: f64) -> bool {
        let v = self.to_vec();
        (0..v.len()).all(|i| v[i] >= self.lower[i] - tol && v[i] <= self.upper[i] + tol)
    }

    pub fn q_mpc(&self) -> DMatrix<f64> {
        shifted_gram(&self.p1)
    }

    pub fn r_mpc(&self) -> DMatrix<f64> {
        shifted_gram(&self.p2)
    }

    pub fn p_mpc(&self) -> DMatrix<f64> {
        shifted_gram(&self.p3)
    }

    /// Model coefficients predicted by the MPC: `vartheta` if present, else `theta_model`.
    pub fn prediction_model<'a>(&'a self, theta_model: &'a DVector<f64>) -> &'a DVector<f64> {
        self.vartheta.as_ref().unwrap_or(theta_model)
    }
}

fn shifted_gram(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    l * l.transpose() + DMatrix::identity(n, n) * COST_SHIFT
}

/// `d(L L')/dL_ab = E_ab L' + L E_ba`.
fn gram_derivative(l: &DMatrix<f64>, a: usize, b: usize) -> DMatrix<f64> {
    let n = l.nrows();
    let mut d = DMatrix::zeros(n, n);
    for c in 0..n {
        d[(a, c)] += l[(c, b)];
        d[(c, a)] += l[(c, b)];
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub state_constraint: Polytope,
    pub input_constraint: Polytope,
    pub c1: f64,
    pub c2: f64,
    pub x_ref: Option<DVector<f64>>,
    pub u_ref: Option<DVector<f64>>,
    /// Linearize the first stage at the measured state instead of `x_{1|t-1}`.
    pub linearize_at_current: bool,
}

impl MpcConfig {
    pub fn new(horizon: usize, state_constraint: Polytope, input_constraint: Polytope, c1: f64, c2: f64) -> Self {
        Self {
            horizon,
            state_constraint,
            input_constraint,
            c1,
            c2,
            x_ref: None,
            u_ref: None,
            linearize_at_current: false,
        }
    }

    pub fn layout(&self) -> MpcLayout {
        MpcLayout {
            n_x: self.state_constraint.dim(),
            n_u: self.input_constraint.dim(),
            horizon: self.horizon,
            m_x: self.state_constraint.n_rows(),
            m_u: self.input_constraint.n_rows(),
        }
    }

    fn validate(&self, param: &DesignParameter, model_theta_len: usize, n_theta: usize) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::ConfigMismatch(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if param.n_x() != self.state_constraint.dim() || param.n_u() != self.input_constraint.dim() {
            return bad("parameter and constraint dimensions differ");
        }
        if model_theta_len != n_theta {
            return bad("model parameter length");
        }
        if !(self.c1 >= 0.0 && self.c2 > 0.0) {
            return bad("slack weights must satisfy c1 >= 0, c2 > 0");
        }
        Ok(())
    }
}

/// Index bookkeeping for the stacked decision vector and constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpcLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub m_x: usize,
    pub m_u: usize,
}

impl MpcLayout {
    pub fn x(&self, j: usize) -> usize {
        j * self.n_x
    }

    pub fn u(&self, j: usize) -> usize {
        self.n_x * (self.horizon + 1) + j * self.n_u
    }

    pub fn eps(&self, j: usize) -> usize {
        self.u(self.horizon) + j * self.m_x
    }

    pub fn n_y(&self) -> usize {
        self.eps(self.horizon + 1)
    }

    pub fn n_eq(&self) -> usize {
        self.n_x * (self.horizon + 1)
    }

    pub fn n_in(&self) -> usize {
        2 * self.m_x * (self.horizon + 1) + self.m_u * self.horizon
    }

    /// Row of the state constraint block for stage `j`.
    pub fn state_row(&self, j: usize) -> usize {
        j * self.m_x
    }

    pub fn input_row(&self, j: usize) -> usize {
        self.m_x * (self.horizon + 1) + j * self.m_u
    }

    pub fn slack_row(&self, j: usize) -> usize {
        self.input_row(self.horizon) + j * self.m_x
    }

    pub fn state_at(&self, y: &DVector<f64>, j: usize) -> DVector<f64> {
        y.rows(self.x(j), self.n_x).into_owned()
    }

    pub fn input_at(&self, y: &DVector<f64>, j: usize) -> DVector<f64> {
        y.rows(self.u(j), self.n_u).into_owned()
    }

    pub fn slack_at(&self, y: &DVector<f64>, j: usize) -> DVector<f64> {
        y.rows(self.eps(j), self.m_x).into_owned()
    }
}

/// One linearized prediction stage `x+ = a x + b u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub x_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
}

/// Linearization point of stage `j`: `(x_{j+1|t-1}, u_{j+1|t-1})`, with the last
/// input repeated for `j = N - 1`. Optionally stage 0 uses the measured state.
fn linearization_points(
    layout: &MpcLayout,
    y_prev: &DVector<f64>,
    x_t: &DVector<f64>,
    at_current: bool,
) -> Vec<(DVector<f64>, DVector<f64>, usize, usize)> {
    let n = layout.horizon;
    (0..n)
        .map(|j| {
            let xi = (j + 1).min(n);
            let ui = (j + 1).min(n - 1);
            let x = if j == 0 && at_current { x_t.clone() } else { layout.state_at(y_prev, xi) };
            (x, layout.input_at(y_prev, ui), xi, ui)
        })
        .collect()
}

fn linear_stage(model: &dyn FeatureModel, theta: &DVector<f64>, x: DVector<f64>, u: DVector<f64>) -> LinearStage {
    let a = model.jac_x(&x, &u, theta);
    let b = model.jac_u(&x, &u, theta);
    let c = model.f(&x, &u, theta) - &a * &x - &b * &u;
    LinearStage { a, b, c, x_bar: x, u_bar: u }
}

/// Exact Jacobians of the model along the previous predicted trajectory.
pub fn linearize_model(
    model: &dyn FeatureModel,
    theta_model: &DVector<f64>,
    y_prev: &DVector<f64>,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<Vec<LinearStage>, MpcError> {
    let layout = cfg.layout();
    if theta_model.len() != model.n_theta() || y_prev.len() != layout.n_y() || x_t.len() != layout.n_x {
        return Err(MpcError::ConfigMismatch("linearization inputs".into()));
    }
    Ok(linearization_points(&layout, y_prev, x_t, cfg.linearize_at_current)
        .into_iter()
        .map(|(x, u, _, _)| linear_stage(model, theta_model, x, u))
        .collect())
}

/// Stacked QP for the given linearization. The returned data Jacobian has
/// coordinates `(x_t, p)`, in that order.
pub fn build_mpc_qp(
    x_t: &DVector<f64>,
    stages: &[LinearStage],
    param: &DesignParameter,
    cfg: &MpcConfig,
    model: Option<(&dyn FeatureModel, &DVector<f64>)>,
) -> Result<(QpProblem, QpDataJacobian), MpcError> {
    let problem = mpc_qp_problem(x_t, stages, param, cfg)?;
    Ok((problem, mpc_data_jacobian(stages, param, cfg, model)?))
}

fn mpc_qp_problem(x_t: &DVector<f64>, stages: &[LinearStage], param: &DesignParameter, cfg: &MpcConfig) -> Result<QpProblem, MpcError> {
    let lay = cfg.layout();
    if stages.len() != cfg.horizon {
        return Err(MpcError::ConfigMismatch(format!("{} stages for horizon {}", stages.len(), cfg.horizon)));
    }
    if param.n_x() != lay.n_x || param.n_u() != lay.n_u || x_t.len() != lay.n_x {
        return Err(MpcError::ConfigMismatch("state/input dimensions".into()));
    }
    let (nx, nu, n) = (lay.n_x, lay.n_u, lay.horizon);
    let ny = lay.n_y();
    let (q_m, r_m, p_m) = (param.q_mpc(), param.r_mpc(), param.p_mpc());
    let x_ref = cfg.x_ref.clone().unwrap_or_else(|| DVector::zeros(nx));
    let u_ref = cfg.u_ref.clone().unwrap_or_else(|| DVector::zeros(nu));

    let mut h = DMatrix::zeros(ny, ny);
    let mut q = DVector::zeros(ny);
    for j in 0..=n {
        let w = if j < n { &q_m } else { &p_m };
        h.view_mut((lay.x(j), lay.x(j)), (nx, nx)).copy_from(&(w * 2.0));
        q.rows_mut(lay.x(j), nx).copy_from(&(w * &x_ref * -2.0));
    }
    for j in 0..n {
        h.view_mut((lay.u(j), lay.u(j)), (nu, nu)).copy_from(&(&r_m * 2.0));
        q.rows_mut(lay.u(j), nu).copy_from(&(&r_m * &u_ref * -2.0));
    }
    for i in lay.eps(0)..ny {
        h[(i, i)] = 2.0 * cfg.c2;
        q[i] = cfg.c1;
    }

    let mut f_mat = DMatrix::zeros(lay.n_eq(), ny);
    let mut f = DVector::zeros(lay.n_eq());
    for i in 0..nx {
        f_mat[(i, i)] = 1.0;
    }
    f.rows_mut(0, nx).copy_from(x_t);
    for (j, st) in stages.iter().enumerate() {
        let r = nx * (j + 1);
        f_mat.view_mut((r, lay.x(j + 1)), (nx, nx)).copy_from(&DMatrix::identity(nx, nx));
        f_mat.view_mut((r, lay.x(j)), (nx, nx)).copy_from(&(-&st.a));
        f_mat.view_mut((r, lay.u(j)), (nx, nu)).copy_from(&(-&st.b));
        f.rows_mut(r, nx).copy_from(&st.c);
    }

    let (hx, hxb) = (&cfg.state_constraint.h, &cfg.state_constraint.b);
    let (hu, hub) = (&cfg.input_constraint.h, &cfg.input_constraint.b);
    let mut g_mat = DMatrix::zeros(lay.n_in(), ny);
    let mut g = DVector::zeros(lay.n_in());
    for j in 0..=n {
        let r = lay.state_row(j);
        g_mat.view_mut((r, lay.x(j)), (lay.m_x, nx)).copy_from(hx);
        g_mat.view_mut((r, lay.eps(j)), (lay.m_x, lay.m_x)).copy_from(&(-DMatrix::identity(lay.m_x, lay.m_x)));
        g.rows_mut(r, lay.m_x).copy_from(hxb);
        let s = lay.slack_row(j);
        for i in 0..lay.m_x {
            g_mat[(s + i, lay.eps(j) + i)] = -1.0;
        }
    }
    for j in 0..n {
        let r = lay.input_row(j);
        g_mat.view_mut((r, lay.u(j)), (lay.m_u, nu)).copy_from(hu);
        g.rows_mut(r, lay.m_u).copy_from(hub);
    }
    Ok(QpProblem::new(h, q, f_mat, f, g_mat, g)?)
}

/// Data derivatives: `x_t` coordinates, then cost factors, then vartheta.
fn mpc_data_jacobian(
    stages: &[LinearStage],
    param: &DesignParameter,
    cfg: &MpcConfig,
    model: Option<(&dyn FeatureModel, &DVector<f64>)>,
) -> Result<QpDataJacobian, MpcError> {
    let lay = cfg.layout();
    let (nx, nu, n) = (lay.n_x, lay.n_u, lay.horizon);
    let ny = lay.n_y();
    let x_ref = cfg.x_ref.clone().unwrap_or_else(|| DVector::zeros(nx));
    let u_ref = cfg.u_ref.clone().unwrap_or_else(|| DVector::zeros(nu));
    let mut jac = QpDataJacobian::with_len(nx + param.n_params());
    for i in 0..nx {
        let mut df = DVector::zeros(lay.n_eq());
        df[i] = 1.0;
        jac.coords[i].d_f = Some(df);
    }
    let mut c = nx;
    let all_stages: Vec<usize> = (0..n).collect();
    let terminal = vec![n];
    let blocks = [
        (&param.p1, nx, &all_stages, false),
        (&param.p2, nu, &all_stages, true),
        (&param.p3, nx, &terminal, false),
    ];
    for (l, dim, on_stages, is_input) in blocks {
        let r = if is_input { &u_ref } else { &x_ref };
        for (a, b) in tril_index(dim) {
            let dg = gram_derivative(l, a, b);
            let mut dq_mat = DMatrix::zeros(ny, ny);
            let mut dq = DVector::zeros(ny);
            for &j in on_stages {
                let o = if is_input { lay.u(j) } else { lay.x(j) };
                dq_mat.view_mut((o, o), (dim, dim)).copy_from(&(&dg * 2.0));
                dq.rows_mut(o, dim).copy_from(&(&dg * r * -2.0));
            }
            jac.coords[c] = QpDataDerivative {
                d_q_mat: Some(dq_mat),
                d_q: (r.amax() > 0.0).then_some(dq),
                ..Default::default()
            };
            c += 1;
        }
    }
    if let Some(range) = param.vartheta_range() {
        let (model, theta) = model.ok_or_else(|| MpcError::ConfigMismatch("vartheta needs the model".into()))?;
        let zero = DVector::zeros(theta.len());
        let psi: Vec<DMatrix<f64>> = stages.iter().map(|st| model.features(&st.x_bar, &st.u_bar)).collect();
        for k in 0..range.len() {
            let mut e = DVector::zeros(theta.len());
            e[k] = 1.0;
            let mut d_f_mat = DMatrix::zeros(lay.n_eq(), ny);
            let mut d_f = DVector::zeros(lay.n_eq());
            for (j, st) in stages.iter().enumerate() {
                let da = model.jac_x(&st.x_bar, &st.u_bar, &e) - model.jac_x(&st.x_bar, &st.u_bar, &zero);
                let db = model.jac_u(&st.x_bar, &st.u_bar, &e) - model.jac_u(&st.x_bar, &st.u_bar, &zero);
                let psi_k = psi[j].row(k).transpose();
                let dc = psi_k - &da * &st.x_bar - &db * &st.u_bar;
                let r = nx * (j + 1);
                d_f_mat.view_mut((r, lay.x(j)), (nx, nx)).copy_from(&(-da));
                d_f_mat.view_mut((r, lay.u(j)), (nx, nu)).copy_from(&(-db));
                d_f.rows_mut(r, nx).copy_from(&dc);
            }
            jac.coords[c] = QpDataDerivative {
                d_f_mat: Some(d_f_mat),
                d_f: (d_f.amax() > 0.0).then_some(d_f),
                ..Default::default()
            };
            c += 1;
        }
    }
    Ok(jac)
}

/// MPC solve and its sensitivities. `jac_x` is `n_y x n_x`, `jac_yprev` is
/// `n_y x n_y`, `jac_p` is `n_y x n_p`.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub y: DVector<f64>,
    pub qp: QpSolution,
    pub first_input: DVector<f64>,
    pub jac_x: Option<DMatrix<f64>>,
    pub jac_yprev: Option<DMatrix<f64>>,
    pub jac_p: Option<DMatrix<f64>>,
    /// The KKT route failed and finite differences were used.
    pub fd_fallback: bool,
    /// Smallest inactive slack or active multiplier of the QP.
    pub margin: f64,
    pub layout: MpcLayout,
}

impl MpcSolution {
    pub fn slack_norm(&self) -> f64 {
        self.y.rows(self.layout.eps(0), self.layout.m_x * (self.layout.horizon + 1)).norm()
    }
}

/// One receding-horizon step: linearize along `y_prev`, solve, and optionally
/// differentiate.
#[allow(clippy::too_many_arguments)]
pub fn mpc_step(
    model: &dyn FeatureModel,
    x_t: &DVector<f64>,
    y_prev: &DVector<f64>,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    cfg: &MpcConfig,
    want_jacobians: bool,
    warm_start: Option<&QpSolution>,
) -> Result<MpcSolution, MpcError> {
    let theta = param.prediction_model(theta_model);
    cfg.validate(param, theta.len(), model.n_theta())?;
    let lay = cfg.layout();
    let stages = linearize_model(model, theta, y_prev, x_t, cfg)?;
    let problem = mpc_qp_problem(x_t, &stages, param, cfg)?;
    let shifted = warm_start.map(|w| shift_warm_start(w, &lay));
    let qp = qp_solve(&problem, shifted.as_ref())?;
    let y = qp.x.clone();
    let first_input = lay.input_at(&y, 0);

    let mut out = MpcSolution {
        y,
        qp,
        first_input,
        jac_x: None,
        jac_yprev: None,
        jac_p: None,
        fd_fallback: false,
        margin: 0.0,
        layout: lay,
    };
    out.margin = out.qp.degeneracy_margin(&problem);
    if !want_jacobians {
        return Ok(out);
    }
    let mut full = mpc_data_jacobian(&stages, param, cfg, Some((model, theta)))?;
    let yprev_coords = if model.is_affine() { None } else { Some(yprev_data_jacobian(model, theta, y_prev, x_t, cfg)) };
    let split = full.len();
    if let Some((yj, xt_extra)) = &yprev_coords {
        full.coords.extend(yj.coords.iter().cloned());
        // Stage-0 linearization at the measured state also depends on x_t.
        for (i, d) in xt_extra.coords.iter().enumerate() {
            merge_derivative(&mut full.coords[i], d);
        }
    }
    let jac = match qp_solution_jacobian(&problem, &out.qp, &full) {
        Ok(j) => j,
        Err(e @ (QpError::LicqViolated | QpError::SingularKkt)) => {
            log::warn!("MPC sensitivity via KKT failed ({e}); using finite differences");
            out.fd_fallback = true;
            qp_solution_jacobian_fd(&problem, &out.qp, &full, 1e-7)?
        }
        Err(e) => return Err(e.into()),
    };
    out.jac_x = Some(jac.columns(0, lay.n_x).into_owned());
    out.jac_p = Some(jac.columns(lay.n_x, param.n_params()).into_owned());
    out.jac_yprev = Some(match yprev_coords {
        Some(_) => jac.columns(split, lay.n_y()).into_owned(),
        None => DMatrix::zeros(lay.n_y(), lay.n_y()),
    });
    Ok(out)
}

fn merge_derivative(into: &mut QpDataDerivative, d: &QpDataDerivative) {
    fn add_m(a: &mut Option<DMatrix<f64>>, b: &Option<DMatrix<f64>>) {
        if let Some(b) = b {
            *a = Some(a.take().map_or_else(|| b.clone(), |x| x + b));
        }
    }
    fn add_v(a: &mut Option<DVector<f64>>, b: &Option<DVector<f64>>) {
        if let Some(b) = b {
            *a = Some(a.take().map_or_else(|| b.clone(), |x| x + b));
        }
    }
    add_m(&mut into.d_q_mat, &d.d_q_mat);
    add_v(&mut into.d_q, &d.d_q);
    add_m(&mut into.d_f_mat, &d.d_f_mat);
    add_v(&mut into.d_f, &d.d_f);
    add_m(&mut into.d_g_mat, &d.d_g_mat);
    add_v(&mut into.d_g, &d.d_g);
}

/// Derivatives of the dynamics equalities with respect to the linearization
/// points, by central differences of the model Jacobians. Returns coordinates
/// for every entry of `y_prev` and, when stage 0 is linearized at `x_t`, extra
/// contributions for the `x_t` coordinates.
fn yprev_data_jacobian(
    model: &dyn FeatureModel,
    theta: &DVector<f64>,
    y_prev: &DVector<f64>,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> (QpDataJacobian, QpDataJacobian) {
    const H: f64 = 1e-6;
    let lay = cfg.layout();
    let (nx, nu, ny) = (lay.n_x, lay.n_u, lay.n_y());
    let mut jac = QpDataJacobian::with_len(ny);
    let mut xt_jac = QpDataJacobian::with_len(nx);
    let points = linearization_points(&lay, y_prev, x_t, cfg.linearize_at_current);
    for (j, (xb, ub, xi, ui)) in points.iter().enumerate() {
        let r = nx * (j + 1);
        let emit = |target: &mut QpDataDerivative, xp: DVector<f64>, up: DVector<f64>, xm: DVector<f64>, um: DVector<f64>| {
            let sp = linear_stage(model, theta, xp, up);
            let sm = linear_stage(model, theta, xm, um);
            let da = (&sp.a - &sm.a) / (2.0 * H);
            let db = (&sp.b - &sm.b) / (2.0 * H);
            let dc = (&sp.c - &sm.c) / (2.0 * H);
            let mut dfm = DMatrix::zeros(lay.n_eq(), ny);
            let mut df = DVector::zeros(lay.n_eq());
            dfm.view_mut((r, lay.x(j)), (nx, nx)).copy_from(&(-da));
            dfm.view_mut((r, lay.u(j)), (nx, nu)).copy_from(&(-db));
            df.rows_mut(r, nx).copy_from(&dc);
            merge_derivative(
                target,
                &QpDataDerivative { d_f_mat: Some(dfm), d_f: Some(df), ..Default::default() },
            );
        };
        for k in 0..nx {
            let mut e = DVector::zeros(nx);
            e[k] = H;
            let target = if j == 0 && cfg.linearize_at_current {
                &mut xt_jac.coords[k]
            } else {
                &mut jac.coords[lay.x(*xi) + k]
            };
            emit(target, xb + &e, ub.clone(), xb - &e, ub.clone());
        }
        for k in 0..nu {
            let mut e = DVector::zeros(nu);
            e[k] = H;
            emit(&mut jac.coords[lay.u(*ui) + k], xb.clone(), ub + &e, xb.clone(), ub - &e);
        }
    }
    (jac, xt_jac)
}

/// Shifts the previous active set by one stage so it can seed the next solve.
fn shift_warm_start(prev: &QpSolution, lay: &MpcLayout) -> QpSolution {
    let n = lay.horizon;
    let mut active = Vec::new();
    let mut lambda = DVector::zeros(lay.n_in());
    let mut push = |new: usize, old: usize| {
        active.push(new);
        lambda[new] = prev.lambda[old];
    };
    for &i in &prev.active_set {
        if prev.lambda[i] <= crate::qp::STRONG_TOL {
            continue;
        }
        if i < lay.input_row(0) {
            let (j, r) = (i / lay.m_x.max(1), i % lay.m_x.max(1));
            if j >= 1 {
                push(lay.state_row(j - 1) + r, i);
            }
        } else if i < lay.slack_row(0) {
            let off = i - lay.input_row(0);
            let (j, r) = (off / lay.m_u.max(1), off % lay.m_u.max(1));
            if j >= 1 {
                push(lay.input_row(j - 1) + r, i);
            }
        } else {
            let off = i - lay.slack_row(0);
            let (j, r) = (off / lay.m_x.max(1), off % lay.m_x.max(1));
            if j >= 1 && j <= n {
                push(lay.slack_row(j - 1) + r, i);
            }
        }
    }
    active.sort_unstable();
    QpSolution {
        x: prev.x.clone(),
        nu: prev.nu.clone(),
        lambda,
        active_set: active,
        kkt_residual: prev.kkt_residual,
        iterations: 0,
    }
}

/// Initial predicted trajectory: one solve with the model linearized at the origin.
pub fn initial_trajectory(
    model: &dyn FeatureModel,
    x0: &DVector<f64>,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<DVector<f64>, MpcError> {
    let zeros = DVector::zeros(cfg.layout().n_y());
    let mut origin_cfg = cfg.clone();
    origin_cfg.linearize_at_current = false;
    Ok(mpc_step(model, x0, &zeros, param, theta_model, &origin_cfg, false, None)?.y)
}
