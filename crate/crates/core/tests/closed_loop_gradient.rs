use std::sync::Arc;

use mpc_tune::closed_loop::{
    rollout, rollout_with_trace, ClosedLoop, CubicInputPenalty, InitialState, NoiseLaw, Plant, UpperLevelCost,
};
use mpc_tune::model::{AffineParamModel, FeatureModel, Polytope};
use mpc_tune::mpc::{DesignParameter, MpcConfig};
use mpc_tune::sysid::NoiseSpec;
use mpc_tune::testkit::random_matrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_linear_loop(rng: &mut ChaCha8Rng, n_x: usize, horizon: usize) -> (ClosedLoop, DesignParameter) {
    let mut a = random_matrix(rng, n_x, n_x);
    let rho = a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
    a *= rng.random_range(0.9..1.1) / rho;
    let b = random_matrix(rng, n_x, 1);
    let model = AffineParamModel::full_linear(n_x, 1);
    let mut theta = mpc_tune::linalg::row_major(&a);
    theta.extend(mpc_tune::linalg::row_major(&b));
    let x_box = vec![1.2; n_x];
    let plant = Plant {
        model: Arc::new(model),
        theta_true: DVector::from_vec(theta),
        noise: NoiseSpec::new(0.05, 1.0, 0.05).unwrap(),
        noise_law: NoiseLaw::Uniform,
        noise_input: b.clone(),
        exogenous: Vec::new(),
        x_constraint: Polytope::symmetric_box(&x_box),
        u_constraint: Polytope::symmetric_box(&[1.0]),
        horizon,
        x0_law: InitialState::Ball { center: DVector::zeros(n_x), radius: 1.5 },
    };
    let mpc = MpcConfig::new(4, Polytope::symmetric_box(&x_box), Polytope::symmetric_box(&[1.0]), 5.0, 5.0);
    let mut cost = UpperLevelCost::quadratic(DMatrix::identity(n_x, n_x) * 10.0, DMatrix::identity(1, 1), 20.0);
    cost.extra_terms.push(Arc::new(CubicInputPenalty { weight: 0.1 }));
    let q = DMatrix::identity(n_x, n_x) * 10.0;
    let param = DesignParameter::from_costs(&q, &DMatrix::identity(1, 1), &q, None).unwrap();
    (ClosedLoop { plant, mpc, cost }, param)
}

/// Central differences over every coordinate of `p` on a frozen trace.
fn fd_gradient(cl: &ClosedLoop, param: &DesignParameter, theta: &DVector<f64>, seed: u64, h: f64) -> (DVector<f64>, DVector<f64>, f64) {
    let base = rollout(cl, param, theta, seed, true).unwrap();
    let trace = base.noise_trace.clone();
    let v = param.to_vec();
    let fd = DVector::from_fn(v.len(), |i, _| {
        let mut plus = v.clone();
        plus[i] += h;
        let mut minus = v.clone();
        minus[i] -= h;
        let cp = rollout_with_trace(cl, &param.with_vec(&plus), theta, trace.clone(), false).unwrap().cost;
        let cm = rollout_with_trace(cl, &param.with_vec(&minus), theta, trace.clone(), false).unwrap().cost;
        (cp - cm) / (2.0 * h)
    });
    // A kink of the distance penalty sits at dist = 0.
    let margin = if base.dist > 0.0 && base.dist < 1e-6 { 0.0 } else { base.min_margin };
    (base.grad_p.unwrap(), fd, margin)
}

#[test]
fn linear_fixture_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for inst in 0..12 {
        let (cl, param) = random_linear_loop(&mut rng, 2 + inst % 2, 12);
        let theta = cl.plant.theta_true.clone();
        let (g, fd, margin) = fd_gradient(&cl, &param, &theta, 100 + inst as u64, 1e-6);
        if margin < 1e-6 {
            continue;
        }
        let err = (&g - &fd).norm() / fd.norm().max(1e-8);
        assert!(err <= 1e-4, "instance {inst}: relative error {err:e}\n{g}\n{fd}");
        checked += 1;
    }
    assert!(checked >= 8, "only {checked} instances away from active-set changes");
}

#[test]
fn joint_parameter_gradient_includes_model_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cl, base) = random_linear_loop(&mut rng, 2, 10);
    let theta = cl.plant.theta_true.clone();
    let q = base.q_mpc();
    let vartheta = &theta + DVector::from_fn(theta.len(), |_, _| rng.random_range(-0.05..0.05));
    let param = DesignParameter::from_costs(&q, &base.r_mpc(), &base.p_mpc(), Some(vartheta)).unwrap();
    let (g, fd, margin) = fd_gradient(&cl, &param, &theta, 3, 1e-6);
    assert!(margin >= 1e-6);
    let r = param.vartheta_range().unwrap();
    assert!(g.rows(r.start, r.len()).amax() > 0.0);
    let err = (&g - &fd).norm() / fd.norm();
    assert!(err <= 1e-4, "relative error {err:e}");
}

/// Pendulum-like: `x1+ = x1 + dt x2`, `x2+ = x2 + dt (theta0 sin x1 + theta1 u)`.
#[derive(Debug)]
struct Pendulum {
    dt: f64,
}

impl FeatureModel for Pendulum {
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_theta(&self) -> usize {
        2
    }
    fn features(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, self.dt * x[0].sin(), 0.0, self.dt * u[0]])
    }
    fn offset(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_row_slice(&[x[0] + self.dt * x[1], x[1]])
    }
    fn jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, self.dt, self.dt * theta[0] * x[0].cos(), 1.0])
    }
    fn jac_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, self.dt * theta[1]])
    }
}

#[test]
fn nonlinear_model_gradient_matches_fd() {
    let theta = DVector::from_row_slice(&[-9.0, 2.0]);
    let plant = Plant {
        model: Arc::new(Pendulum { dt: 0.1 }),
        theta_true: theta.clone(),
        noise: NoiseSpec::new(0.02, 1.0, 0.02).unwrap(),
        noise_law: NoiseLaw::Uniform,
        noise_input: DMatrix::identity(2, 2),
        exogenous: Vec::new(),
        x_constraint: Polytope::free(2),
        u_constraint: Polytope::symmetric_box(&[3.0]),
        horizon: 15,
        x0_law: InitialState::Fixed(DVector::from_row_slice(&[0.8, 0.0])),
    };
    let mpc = MpcConfig::new(5, Polytope::free(2), Polytope::symmetric_box(&[3.0]), 1.0, 1.0);
    let cl = ClosedLoop { plant, mpc, cost: UpperLevelCost::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, 0.0) };
    let q = DMatrix::identity(2, 2);
    let param = DesignParameter::from_costs(&q, &(DMatrix::identity(1, 1) * 0.5), &q, None).unwrap();
    let model_is_affine = cl.plant.model.is_affine();
    assert!(!model_is_affine);
    let (g, fd, margin) = fd_gradient(&cl, &param, &theta, 9, 1e-6);
    assert!(margin >= 1e-6, "margin {margin}");
    let err = (&g - &fd).norm() / fd.norm();
    assert!(err <= 1e-4, "relative error {err:e}\n{g}\n{fd}");
}
