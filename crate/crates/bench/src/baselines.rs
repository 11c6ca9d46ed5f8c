//! Reference controllers: the omniscient full-horizon optimum and the MPC
//! with a Riccati terminal cost.

use std::ops::AddAssign;

use mpc_tune::closed_loop::{plant_step, ClosedLoop, NoiseTrace, UpperLevelCost};
use mpc_tune::mpc::DesignParameter;
use mpc_tune::qp::{qp_solve, QpProblem};
use nalgebra::{DMatrix, DVector};

use crate::riccati::riccati_terminal;
use crate::BenchError;

/// Optimal open-loop trajectory for one episode.
#[derive(Debug, Clone)]
pub struct OmniscientSolution {
    pub cost: f64,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

/// Quadratic tracking part of the upper-level cost.
pub fn tracking_cost(cost: &UpperLevelCost, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
    let dx = |v: &DVector<f64>| cost.x_ref.as_ref().map_or(v.clone(), |r| v - r);
    let du = |v: &DVector<f64>| cost.u_ref.as_ref().map_or(v.clone(), |r| v - r);
    let sx: f64 = x.iter().map(|v| dx(v).dot(&(&cost.q_ul * dx(v)))).sum();
    let su: f64 = u.iter().map(|v| du(v).dot(&(&cost.r_ul * du(v)))).sum();
    sx + su
}

/// Minimizes the tracking cost over the whole episode with the true model and
/// the realized disturbances, subject only to the input set. State constraints
/// and the constraint penalty are dropped, so the value is a lower bound on
/// every causal controller that respects the input set.
pub fn omniscient_bound(cl: &ClosedLoop, trace: &NoiseTrace) -> Result<OmniscientSolution, BenchError> {
    let plant = &cl.plant;
    if !plant.model.is_affine() {
        return Err(BenchError::Config("the omniscient bound needs a model affine in (x, u)".into()));
    }
    let (n_x, n_u, t_len) = (plant.n_x(), plant.n_u(), plant.horizon);
    let zx = DVector::zeros(n_x);
    let zu = DVector::zeros(n_u);
    let a = plant.model.jac_x(&zx, &zu, &plant.theta_true);
    let b = plant.model.jac_u(&zx, &zu, &plant.theta_true);
    let n = n_u * t_len;
    // x_t = c_t + G_t U.
    let mut c = vec![trace.x0.clone()];
    let mut g = vec![DMatrix::zeros(n_x, n)];
    for t in 0..t_len {
        let d = plant.disturbance(t, &trace.w[t]);
        c.push(&a * &c[t] + d);
        let mut next = &a * &g[t];
        next.view_mut((0, t * n_u), (n_x, n_u)).add_assign(&b);
        g.push(next);
    }
    let q2 = &cl.cost.q_ul + cl.cost.q_ul.transpose();
    let r2 = &cl.cost.r_ul + cl.cost.r_ul.transpose();
    let mut h = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    for t in 0..=t_len {
        let e = cl.cost.x_ref.as_ref().map_or(c[t].clone(), |r| &c[t] - r);
        let gq = g[t].transpose() * &q2;
        h += &gq * &g[t];
        lin += gq * e;
    }
    for t in 0..t_len {
        h.view_mut((t * n_u, t * n_u), (n_u, n_u)).add_assign(&r2);
        if let Some(r) = &cl.cost.u_ref {
            let v = -(&r2 * r);
            lin.rows_mut(t * n_u, n_u).add_assign(&v);
        }
    }
    let uc = &plant.u_constraint;
    let m = uc.n_rows();
    let mut gm = DMatrix::zeros(m * t_len, n);
    let mut gv = DVector::zeros(m * t_len);
    for t in 0..t_len {
        gm.view_mut((t * m, t * n_u), (m, n_u)).copy_from(&uc.h);
        gv.rows_mut(t * m, m).copy_from(&uc.b);
    }
    let h = (&h + h.transpose()) * 0.5;
    let problem = QpProblem::new(h, lin, DMatrix::zeros(0, n), DVector::zeros(0), gm, gv)
        .map_err(|e| BenchError::Numerical(format!("omniscient QP: {e}")))?;
    let sol = qp_solve(&problem, None).map_err(|e| BenchError::Numerical(format!("omniscient QP: {e}")))?;
    let u: Vec<DVector<f64>> = (0..t_len).map(|t| sol.x.rows(t * n_u, n_u).into_owned()).collect();
    let mut x = vec![trace.x0.clone()];
    for t in 0..t_len {
        let d = plant.disturbance(t, &trace.w[t]);
        let next = plant_step(plant, &x[t], &u[t], &d);
        x.push(next);
    }
    Ok(OmniscientSolution { cost: tracking_cost(&cl.cost, &x, &u), x, u })
}

/// MPC weights equal to the upper-level cost with the Riccati solution for
/// the given model as terminal cost.
pub fn dare_parameter(cl: &ClosedLoop, theta_model: &DVector<f64>) -> Result<DesignParameter, BenchError> {
    let model = &cl.plant.model;
    let zx = DVector::zeros(model.n_x());
    let zu = DVector::zeros(model.n_u());
    let a = model.jac_x(&zx, &zu, theta_model);
    let b = model.jac_u(&zx, &zu, theta_model);
    let p = riccati_terminal(&cl.cost.q_ul, &cl.cost.r_ul, &a, &b).map_err(|e| BenchError::Numerical(e.to_string()))?;
    DesignParameter::from_costs(&cl.cost.q_ul, &cl.cost.r_ul, &p, None).map_err(|e| BenchError::Numerical(e.to_string()))
}
