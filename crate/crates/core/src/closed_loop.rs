//! True closed loop `x_{t+1} = f(x_t, u_t, theta) + d_t`, `u_t` from the MPC,
//! its upper-level cost, and sensitivities propagated through time.

use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, uniform_in_unit_ball};
use crate::model::{FeatureModel, Polytope};
use crate::mpc::{initial_trajectory, mpc_step, DesignParameter, MpcConfig, MpcError};
use crate::qp::{QpError, QpSolution};
use crate::sysid::NoiseSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("non-finite state at t = {t}")]
    NonFinite { t: usize },
    #[error("step {t} has no stored MPC Jacobians")]
    MissingJacobians { t: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("MPC failed at t = {t}: {source}")]
    Mpc { t: usize, source: MpcError },
    #[error(transparent)]
    Projection(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLaw {
    /// Componentwise uniform on `[-bound, bound]`.
    Uniform,
    /// Componentwise Gaussian rejected outside `[-bound, bound]`.
    TruncatedGaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    /// Uniform in the ball of `radius` around `center`.
    Ball { center: DVector<f64>, radius: f64 },
}

impl InitialState {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Fixed(x) => x.clone(),
            Self::Ball { center, radius } => center + uniform_in_unit_ball(rng, center.len()) * *radius,
        }
    }
}

/// Plant with hidden parameter. The disturbance is `noise_input * w_t` plus a
/// known deterministic sequence `exogenous[t]` (zero when the sequence is shorter).
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: Arc<dyn FeatureModel>,
    pub theta_true: DVector<f64>,
    pub noise: NoiseSpec,
    pub noise_law: NoiseLaw,
    pub noise_input: DMatrix<f64>,
    pub exogenous: Vec<DVector<f64>>,
    pub x_constraint: Polytope,
    pub u_constraint: Polytope,
    pub horizon: usize,
    pub x0_law: InitialState,
}

impl Plant {
    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.model.n_u()
    }

    pub fn n_w(&self) -> usize {
        self.noise_input.ncols()
    }

    pub fn exogenous_at(&self, t: usize) -> Option<&DVector<f64>> {
        self.exogenous.get(t)
    }

    /// Disturbance `E w + exogenous[t]`.
    pub fn disturbance(&self, t: usize, w: &DVector<f64>) -> DVector<f64> {
        let mut d = &self.noise_input * w;
        if let Some(e) = self.exogenous_at(t) {
            d += e;
        }
        d
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let b = self.noise.bound;
        match self.noise_law {
            NoiseLaw::Uniform => DVector::from_fn(self.n_w(), |_, _| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 }),
            NoiseLaw::TruncatedGaussian { sigma } => {
                let normal = Normal::new(0.0, sigma).expect("sigma must be positive");
                DVector::from_fn(self.n_w(), |_, _| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= b {
                        break v;
                    }
                })
            }
        }
    }

    /// Noise and initial state for one episode.
    pub fn sample_trace(&self, seed: u64) -> NoiseTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = self.x0_law.sample(&mut rng);
        let w = (0..self.horizon).map(|_| self.sample_noise(&mut rng)).collect();
        NoiseTrace { seed, w, x0, y0: None }
    }
}

/// `f(x, u, theta_true) + d`.
pub fn plant_step(plant: &Plant, x: &DVector<f64>, u: &DVector<f64>, disturbance: &DVector<f64>) -> DVector<f64> {
    plant.model.f(x, u, &plant.theta_true) + disturbance
}

/// Realized randomness `(w, x0, y0)`. `y0` is filled in by the first rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrace {
    pub seed: u64,
    pub w: Vec<DVector<f64>>,
    pub x0: DVector<f64>,
    pub y0: Option<DVector<f64>>,
}

/// Differentiable stage cost added to the upper-level objective.
pub trait StageCost: Send + Sync + Debug {
    fn value(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64;
    /// `(dl/dx, dl/du)`; `dl/du` is ignored at the terminal stage.
    fn gradient(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> (DVector<f64>, Option<DVector<f64>>);
}

/// `weight * sum |u_i|^3`.
#[derive(Debug, Clone, Copy)]
pub struct CubicInputPenalty {
    pub weight: f64,
}

impl StageCost for CubicInputPenalty {
    fn value(&self, _x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
        u.map_or(0.0, |u| self.weight * u.iter().map(|v| v.abs().powi(3)).sum::<f64>())
    }

    fn gradient(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> (DVector<f64>, Option<DVector<f64>>) {
        (DVector::zeros(x.len()), u.map(|u| u.map(|v| 3.0 * self.weight * v * v.abs())))
    }
}

/// `sum_{t<=T} |x_t - x_ref|_Q^2 + sum_{t<T} |u_t - u_ref|_R^2 + extras + c3 dist(x, X^{T+1})`.
#[derive(Debug, Clone)]
pub struct UpperLevelCost {
    pub q_ul: DMatrix<f64>,
    pub r_ul: DMatrix<f64>,
    pub x_ref: Option<DVector<f64>>,
    pub u_ref: Option<DVector<f64>>,
    pub c3: f64,
    pub extra_terms: Vec<Arc<dyn StageCost>>,
}

impl UpperLevelCost {
    pub fn quadratic(q_ul: DMatrix<f64>, r_ul: DMatrix<f64>, c3: f64) -> Self {
        Self { q_ul, r_ul, x_ref: None, u_ref: None, c3, extra_terms: Vec::new() }
    }

    fn dx(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.x_ref {
            Some(r) => x - r,
            None => x.clone(),
        }
    }

    fn du(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.u_ref {
            Some(r) => u - r,
            None => u.clone(),
        }
    }

    /// Tracking and extra terms (no constraint penalty).
    pub fn stage_sum(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let mut c = 0.0;
        for (t, xt) in x.iter().enumerate() {
            let e = self.dx(xt);
            c += e.dot(&(&self.q_ul * &e));
            let ut = u.get(t);
            if let Some(ut) = ut {
                let e = self.du(ut);
                c += e.dot(&(&self.r_ul * &e));
            }
            for extra in &self.extra_terms {
                c += extra.value(xt, ut);
            }
        }
        c
    }

    /// Full upper-level cost including `c3 * dist`.
    pub fn total(&self, x: &[DVector<f64>], u: &[DVector<f64>], x_set: &Polytope) -> Result<f64, QpError> {
        Ok(self.stage_sum(x, u) + self.c3 * dist_penalty(x, x_set)?.0)
    }
}

/// Distance of the stacked trajectory to `X^{T+1}` and a subgradient per state.
pub fn dist_penalty(x: &[DVector<f64>], x_set: &Polytope) -> Result<(f64, Vec<DVector<f64>>), QpError> {
    let mut diffs = Vec::with_capacity(x.len());
    let mut sq = 0.0;
    for xt in x {
        let d = xt - x_set.project(xt)?;
        sq += d.norm_squared();
        diffs.push(d);
    }
    let dist = sq.sqrt();
    if dist == 0.0 {
        return Ok((0.0, diffs.into_iter().map(|d| d * 0.0).collect()));
    }
    Ok((dist, diffs.into_iter().map(|d| d / dist).collect()))
}

/// Closed-loop problem: plant, controller structure and upper-level cost.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub plant: Plant,
    pub mpc: MpcConfig,
    pub cost: UpperLevelCost,
}

/// MPC sensitivities and surrogate model Jacobians stored during the forward pass.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    pub mpc_x: DMatrix<f64>,
    pub mpc_y: DMatrix<f64>,
    pub mpc_p: DMatrix<f64>,
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
}

/// Sensitivities of states, inputs and MPC solutions with respect to `p`.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub j_x: Vec<DMatrix<f64>>,
    pub j_u: Vec<DMatrix<f64>>,
    pub j_y: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub eps_norm: Vec<f64>,
    pub cost: f64,
    pub dist: f64,
    pub grad_p: Option<DVector<f64>>,
    pub noise_trace: NoiseTrace,
    /// Regressors and targets `z_t = x_{t+1} - phi(x_t, u_t) - exogenous[t]`.
    pub features: Vec<DMatrix<f64>>,
    pub targets: Vec<DVector<f64>>,
    /// Smallest inactive slack or active multiplier over all MPC solves.
    pub min_margin: f64,
    /// Some step used the finite-difference sensitivity fallback.
    pub fd_fallback: bool,
    pub steps: Vec<StepJacobians>,
}

impl Rollout {
    pub fn seed(&self) -> u64 {
        self.noise_trace.seed
    }

    /// Rollout CSV with columns `t, x..., u..., eps_norm`; the last row has no input.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let nx = self.x.first().map_or(0, |x| x.len());
        let nu = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..nx).map(|i| format!("x{i}")));
        header.extend((0..nu).map(|i| format!("u{i}")));
        header.push("eps_norm".into());
        w.write_record(&header)?;
        for (t, xt) in self.x.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(xt.iter().map(|v| v.to_string()));
            match self.u.get(t) {
                Some(ut) => rec.extend(ut.iter().map(|v| v.to_string())),
                None => rec.extend((0..nu).map(|_| String::new())),
            }
            rec.push(self.eps_norm.get(t).map_or(String::new(), |v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> RolloutSidecar {
        RolloutSidecar {
            seed: self.seed(),
            cost: self.cost,
            dist: self.dist,
            grad_p: self.grad_p.as_ref().map(|g| g.iter().copied().collect()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RolloutSidecar {
    pub seed: u64,
    pub cost: f64,
    pub dist: f64,
    pub grad_p: Option<Vec<f64>>,
}

/// Samples the episode randomness from `seed` and simulates it.
pub fn rollout(
    cl: &ClosedLoop,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    seed: u64,
    want_grad: bool,
) -> Result<Rollout, RolloutError> {
    rollout_with_trace(cl, param, theta_model, cl.plant.sample_trace(seed), want_grad)
}

/// Simulates the closed loop on a given noise trace. When `trace.y0` is empty
/// it is computed with `param` and stored in the result.
pub fn rollout_with_trace(
    cl: &ClosedLoop,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    mut trace: NoiseTrace,
    want_grad: bool,
) -> Result<Rollout, RolloutError> {
    let plant = &cl.plant;
    let model = plant.model.as_ref();
    let t_len = plant.horizon;
    if trace.w.len() < t_len || theta_model.len() != model.n_theta() {
        return Err(RolloutError::ConfigMismatch("noise trace or model length".into()));
    }
    let y0 = match &trace.y0 {
        Some(y) => y.clone(),
        None => {
            let y = initial_trajectory(model, &trace.x0, param, theta_model, &cl.mpc)
                .map_err(|source| RolloutError::Mpc { t: 0, source })?;
            trace.y0 = Some(y.clone());
            y
        }
    };

    let mut x = vec![trace.x0.clone()];
    let mut u = Vec::with_capacity(t_len);
    let mut y = Vec::with_capacity(t_len);
    let mut eps_norm = Vec::with_capacity(t_len);
    let mut features = Vec::with_capacity(t_len);
    let mut targets = Vec::with_capacity(t_len);
    let mut steps = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut fd_fallback = false;
    let mut y_prev = y0;
    let mut warm: Option<QpSolution> = None;
    for t in 0..t_len {
        let xt = &x[t];
        let sol = mpc_step(model, xt, &y_prev, param, theta_model, &cl.mpc, want_grad, warm.as_ref())
            .map_err(|source| RolloutError::Mpc { t, source })?;
        let ut = sol.first_input.clone();
        let d = plant.disturbance(t, &trace.w[t]);
        let next = plant_step(plant, xt, &ut, &d);
        if !all_finite(&next) {
            return Err(RolloutError::NonFinite { t: t + 1 });
        }
        let psi = model.features(xt, &ut);
        let mut z = &next - model.offset(xt, &ut);
        if let Some(e) = plant.exogenous_at(t) {
            z -= e;
        }
        features.push(psi);
        targets.push(z);
        min_margin = min_margin.min(sol.margin);
        fd_fallback |= sol.fd_fallback;
        if want_grad {
            steps.push(StepJacobians {
                mpc_x: sol.jac_x.clone().expect("requested"),
                mpc_y: sol.jac_yprev.clone().expect("requested"),
                mpc_p: sol.jac_p.clone().expect("requested"),
                f_x: model.jac_x(xt, &ut, theta_model),
                f_u: model.jac_u(xt, &ut, theta_model),
            });
        }
        eps_norm.push(sol.slack_norm());
        y.push(sol.y.clone());
        u.push(ut);
        x.push(next);
        y_prev = sol.y;
        warm = Some(sol.qp);
    }

    let (dist, subgrad) = dist_penalty(&x, &plant.x_constraint)?;
    let cost = cl.cost.stage_sum(&x, &u) + cl.cost.c3 * dist;
    let grad_p = if want_grad {
        let sweep = backprop_sweep(&steps, cl.mpc.layout().u(0), plant.n_u(), param.n_params())?;
        Some(cost_gradient(&cl.cost, &x, &u, &subgrad, &sweep))
    } else {
        None
    };
    Ok(Rollout {
        x,
        u,
        y,
        eps_norm,
        cost,
        dist,
        grad_p,
        noise_trace: trace,
        features,
        targets,
        min_margin,
        fd_fallback,
        steps,
    })
}

/// Forward sensitivity recursion with `J_{x,0} = 0` and `J_{y,-1} = 0`.
/// `u_offset` locates `u_{0|t}` in the MPC decision vector.
pub fn backprop_sweep(
    steps: &[StepJacobians],
    u_offset: usize,
    n_u: usize,
    n_p: usize,
) -> Result<Sweep, RolloutError> {
    let Some(first) = steps.first() else {
        return Ok(Sweep { j_x: Vec::new(), j_u: Vec::new(), j_y: Vec::new() });
    };
    let n_x = first.f_x.nrows();
    let n_y = first.mpc_x.nrows();
    let mut j_x = vec![DMatrix::zeros(n_x, n_p)];
    let mut j_u = Vec::with_capacity(steps.len());
    let mut j_y: Vec<DMatrix<f64>> = Vec::with_capacity(steps.len());
    for (t, s) in steps.iter().enumerate() {
        if s.mpc_p.ncols() != n_p || s.mpc_x.nrows() != n_y {
            return Err(RolloutError::MissingJacobians { t });
        }
        let mut jy = &s.mpc_x * &j_x[t] + &s.mpc_p;
        if let Some(prev) = j_y.last() {
            jy += &s.mpc_y * prev;
        }
        let ju = jy.rows(u_offset, n_u).into_owned();
        let jx_next = &s.f_x * &j_x[t] + &s.f_u * &ju;
        j_y.push(jy);
        j_u.push(ju);
        j_x.push(jx_next);
    }
    Ok(Sweep { j_x, j_u, j_y })
}

/// `sum [dC/dx_t + c3 g_t]' J_{x,t} + sum [dC/du_t]' J_{u,t}`.
pub fn cost_gradient(
    cost: &UpperLevelCost,
    x: &[DVector<f64>],
    u: &[DVector<f64>],
    dist_subgrad: &[DVector<f64>],
    sweep: &Sweep,
) -> DVector<f64> {
    let n_p = sweep.j_x.first().map_or(0, |j| j.ncols());
    let mut g = DVector::zeros(n_p);
    for (t, xt) in x.iter().enumerate() {
        let mut gx = (&cost.q_ul + cost.q_ul.transpose()) * cost.dx(xt) + &dist_subgrad[t] * cost.c3;
        let ut = u.get(t);
        let mut gu = ut.map(|ut| (&cost.r_ul + cost.r_ul.transpose()) * cost.du(ut));
        for extra in &cost.extra_terms {
            let (ex, eu) = extra.gradient(xt, ut);
            gx += ex;
            if let (Some(gu), Some(eu)) = (gu.as_mut(), eu) {
                *gu += eu;
            }
        }
        g += sweep.j_x[t].tr_mul(&gx);
        if let Some(gu) = gu {
            g += sweep.j_u[t].tr_mul(&gu);
        }
    }
    g
}

/// Rollouts over `seeds`, in parallel, results in seed order.
pub fn rollout_many(
    cl: &ClosedLoop,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    seeds: &[u64],
    want_grad: bool,
) -> Vec<Result<Rollout, RolloutError>> {
    seeds.par_iter().map(|&s| rollout(cl, param, theta_model, s, want_grad)).collect()
}

/// Mean cost over `seeds`.
pub fn mean_cost(
    cl: &ClosedLoop,
    param: &DesignParameter,
    theta_model: &DVector<f64>,
    seeds: &[u64],
) -> Result<Vec<f64>, RolloutError> {
    rollout_many(cl, param, theta_model, seeds, false)
        .into_iter()
        .map(|r| r.map(|r| r.cost))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AffineParamModel;
    use approx::assert_relative_eq;

    pub(crate) fn scalar_loop(a: f64, b: f64, bound: f64, horizon: usize) -> (ClosedLoop, DesignParameter) {
        let model = AffineParamModel::full_linear(1, 1);
        let plant = Plant {
            model: Arc::new(model),
            theta_true: DVector::from_row_slice(&[a, b]),
            noise: NoiseSpec::new(bound.max(1e-3), 1.0, bound).unwrap(),
            noise_law: NoiseLaw::Uniform,
            noise_input: DMatrix::identity(1, 1),
            exogenous: Vec::new(),
            x_constraint: Polytope::free(1),
            u_constraint: Polytope::symmetric_box(&[10.0]),
            horizon,
            x0_law: InitialState::Fixed(DVector::from_element(1, 1.0)),
        };
        let mpc = MpcConfig::new(1, Polytope::free(1), Polytope::symmetric_box(&[10.0]), 1.0, 1.0);
        let cost = UpperLevelCost::quadratic(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 0.0);
        let one = DMatrix::identity(1, 1);
        let param = DesignParameter::from_costs(&one, &one, &one, None).unwrap();
        (ClosedLoop { plant, mpc, cost }, param)
    }

    #[test]
    fn still_plant_costs_nothing() {
        let (mut cl, param) = scalar_loop(0.0, 0.0, 0.0, 5);
        cl.plant.x0_law = InitialState::Fixed(DVector::zeros(1));
        let r = rollout(&cl, &param, &cl.plant.theta_true.clone(), 3, true).unwrap();
        assert!(r.x.iter().all(|x| x[0] == 0.0));
        assert_eq!(r.cost, 0.0);
        assert!(r.grad_p.unwrap().amax() == 0.0);
    }

    #[test]
    fn two_step_hand_cost() {
        let (a, b) = (0.9, 0.5);
        let (cl, param) = scalar_loop(a, b, 0.0, 2);
        let theta = cl.plant.theta_true.clone();
        let r = rollout(&cl, &param, &theta, 0, false).unwrap();
        let (pm, rm) = (param.p_mpc()[(0, 0)], param.r_mpc()[(0, 0)]);
        let k = (b * pm * a) / (rm + b * pm * b);
        let x0 = 1.0;
        let u0 = -k * x0;
        let x1 = a * x0 + b * u0;
        let u1 = -k * x1;
        let x2 = a * x1 + b * u1;
        let expected = x0 * x0 + x1 * x1 + x2 * x2 + u0 * u0 + u1 * u1;
        assert_relative_eq!(r.cost, expected, epsilon = 1e-12);
    }

    #[test]
    fn box_distance() {
        let set = Polytope::symmetric_box(&[1.0]);
        let (d, g) = dist_penalty(&[DVector::from_element(1, 2.0)], &set).unwrap();
        assert_relative_eq!(d, 1.0);
        assert_relative_eq!(g[0][0], 1.0);
        let (d, g) = dist_penalty(&[DVector::from_element(1, 0.5)], &set).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(g[0][0], 0.0);
    }

    #[test]
    fn sweep_starts_at_zero() {
        let (cl, param) = scalar_loop(0.9, 0.5, 0.05, 4);
        let r = rollout(&cl, &param, &cl.plant.theta_true.clone(), 1, true).unwrap();
        let sweep = backprop_sweep(&r.steps, cl.mpc.layout().u(0), 1, param.n_params()).unwrap();
        assert_eq!(sweep.j_x[0].amax(), 0.0);
        assert_eq!(sweep.j_x.len(), 5);
    }

    #[test]
    fn one_step_terminal_gain_derivative() {
        // T = 1, N = 1: u0 = -k(p3) x0 with k = b P a / (R + b P b), P = p3^2 + shift.
        let (a, b) = (0.9, 0.5);
        let (cl, param) = scalar_loop(a, b, 0.0, 1);
        let r = rollout(&cl, &param, &cl.plant.theta_true.clone(), 0, true).unwrap();
        let sweep = backprop_sweep(&r.steps, cl.mpc.layout().u(0), 1, param.n_params()).unwrap();
        let (p3, rm) = (param.p3[(0, 0)], param.r_mpc()[(0, 0)]);
        let pm = p3 * p3 + crate::mpc::COST_SHIFT;
        let dk_dp = (b * a * rm) / (rm + b * b * pm).powi(2);
        let du_dp3 = -dk_dp * 2.0 * p3 * 1.0;
        assert_relative_eq!(sweep.j_u[0][(0, 2)], du_dp3, epsilon = 1e-10);
        assert_eq!(sweep.j_u[0][(0, 0)], 0.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (cl, param) = scalar_loop(1.02, 0.4, 0.1, 20);
        let th = cl.plant.theta_true.clone();
        let a = rollout(&cl, &param, &th, 42, true).unwrap();
        let b = rollout(&cl, &param, &th, 42, true).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.grad_p, b.grad_p);
        let c = rollout_with_trace(&cl, &param, &th, a.noise_trace.clone(), false).unwrap();
        assert_eq!(a.x, c.x);
        for t in 0..20 {
            let next = plant_step(&cl.plant, &a.x[t], &a.u[t], &cl.plant.disturbance(t, &a.noise_trace.w[t]));
            assert_eq!(next, a.x[t + 1]);
        }
    }

    #[test]
    fn cubic_penalty_gradient() {
        let p = CubicInputPenalty { weight: 2.0 };
        let u = DVector::from_row_slice(&[-1.5, 0.5]);
        assert_relative_eq!(p.value(&DVector::zeros(1), Some(&u)), 2.0 * (3.375 + 0.125));
        let (_, g) = p.gradient(&DVector::zeros(1), Some(&u));
        let g = g.unwrap();
        assert_relative_eq!(g[0], -3.0 * 2.0 * 2.25);
        assert_relative_eq!(g[1], 3.0 * 2.0 * 0.25);
    }

    #[test]
    fn csv_export_shape() {
        let (cl, param) = scalar_loop(0.9, 0.5, 0.1, 3);
        let r = rollout(&cl, &param, &cl.plant.theta_true.clone(), 5, false).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,u0,eps_norm");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].ends_with(",,"));
    }
}
