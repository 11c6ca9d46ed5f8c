//! Benchmark plants: random 4-state single-input systems in controllable
//! canonical form and the linearized lateral vehicle dynamics.

use std::path::Path;
use std::sync::Arc;

use mpc_tune::closed_loop::{InitialState, NoiseLaw, Plant};
use mpc_tune::linalg::{row_major, uniform_on_unit_sphere};
use mpc_tune::model::{AffineParamModel, Polytope};
use mpc_tune::sysid::NoiseSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Companion matrix with characteristic polynomial `prod (s - p_i)`; the
/// input enters the last state.
pub fn companion_form(poles: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = poles.len();
    // Monic coefficients, lowest degree first.
    let mut coeff = vec![1.0];
    for &p in poles {
        let mut next = vec![0.0; coeff.len() + 1];
        for (i, &c) in coeff.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= p * c;
        }
        coeff = next;
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = -coeff[j];
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    (a, b)
}

fn augmented(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut blk = DMatrix::zeros(n + m, n + m);
    blk.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    blk.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    blk
}

fn split(e: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = e.ncols() - n;
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Zero-order-hold discretization via the exponential of `[[A, B], [0, 0]] dt`.
pub fn discretize_exact(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    split(&augmented(a, b, dt).exp(), a.nrows())
}

/// Same map through the truncated power series, for cross-checking.
pub fn discretize_series(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64, terms: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = augmented(a, b, dt);
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..terms {
        term = &term * &m / k as f64;
        sum += &term;
    }
    split(&sum, a.nrows())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomLinearSpec {
    pub n_x: usize,
    pub pole_bound: f64,
    pub dt: f64,
    pub noise_bound: f64,
    pub x0_radius: f64,
    pub horizon: usize,
    pub input_bound: f64,
    /// `|theta0 - theta| = model_error |theta|`.
    pub model_error: f64,
}

impl Default for RandomLinearSpec {
    fn default() -> Self {
        Self { n_x: 4, pole_bound: 0.1, dt: 0.15, noise_bound: 0.1, x0_radius: 1.5, horizon: 50, input_bound: 1.0, model_error: 0.3 }
    }
}

/// A generated system with its nominal model.
#[derive(Debug, Clone)]
pub struct GeneratedPlant {
    pub plant: Plant,
    pub theta_nominal: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// `x+ = A x + B (u + w)`, `theta` = row-major `(A, B)`, scalar `|w| <= bound`.
pub fn gen_random_linear(seed: u64, spec: &RandomLinearSpec) -> GeneratedPlant {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poles: Vec<f64> = (0..spec.n_x).map(|_| rng.random_range(-spec.pole_bound..=spec.pole_bound)).collect();
    let (ac, bc) = companion_form(&poles);
    let (a, b) = discretize_exact(&ac, &bc, spec.dt);
    let mut theta = row_major(&a);
    theta.extend(row_major(&b));
    let theta = DVector::from_vec(theta);
    let dir = uniform_on_unit_sphere(&mut rng, theta.len());
    let theta_nominal = &theta + dir * (spec.model_error * theta.norm());
    let n = spec.n_x;
    // Sub-Gaussian constant of each target row of B w.
    let r = spec.noise_bound * b.amax();
    let plant = Plant {
        model: Arc::new(AffineParamModel::full_linear(n, 1)),
        theta_true: theta.clone(),
        noise: NoiseSpec::new(r.max(f64::MIN_POSITIVE), spec.model_error * theta.norm() * (1.0 + 1e-9), spec.noise_bound)
            .expect("positive constants"),
        noise_law: NoiseLaw::Uniform,
        noise_input: b.clone(),
        exogenous: Vec::new(),
        x_constraint: Polytope::free(n),
        u_constraint: Polytope::symmetric_box(&[spec.input_bound]),
        horizon: spec.horizon,
        x0_law: InitialState::Ball { center: DVector::zeros(n), radius: spec.x0_radius },
    };
    GeneratedPlant { plant, theta_nominal, a, b }
}

/// Vehicle constants `theta = (a1, ..., a6, b1, b2)`.
pub const LATERAL_THETA: [f64; 8] = [-27.280, 272.798, 0.0, 0.0, 0.0, -29.388, 136.399, 126.129];
pub const LATERAL_VX: f64 = 10.0;
pub const LATERAL_DT: f64 = 0.01;
pub const LATERAL_X0: [f64; 4] = [0.75, 0.0, 0.0, 0.0];
pub const LATERAL_STATE_BOX: [f64; 4] = [1.0, 5.0, 1.0, 2.75];
pub const LATERAL_STEER_BOUND: f64 = std::f64::consts::PI / 5.0;

/// Forward-Euler lateral model, affine in `theta`.
pub fn lateral_model(dt: f64) -> AffineParamModel {
    let mut a0 = DMatrix::identity(4, 4);
    a0[(0, 1)] = dt;
    a0[(2, 3)] = dt;
    let entry = |r: usize, c: usize| {
        let mut m = DMatrix::zeros(4, 4);
        m[(r, c)] = dt;
        m
    };
    let input = |r: usize| {
        let mut m = DMatrix::zeros(4, 1);
        m[(r, 0)] = dt;
        m
    };
    let zero_a = DMatrix::zeros(4, 4);
    let zero_b = DMatrix::zeros(4, 1);
    let a_basis = vec![entry(1, 1), entry(1, 2), entry(1, 3), entry(3, 1), entry(3, 2), entry(3, 3), zero_a.clone(), zero_a];
    let b_basis = vec![zero_b.clone(), zero_b.clone(), zero_b.clone(), zero_b.clone(), zero_b.clone(), zero_b, input(1), input(3)];
    AffineParamModel::new(a0, DMatrix::zeros(4, 1), a_basis, b_basis)
}

/// Curvature disturbance `dt [0, a3 - vx, 0, a6] r` with `r = kappa vx`.
pub fn curvature_disturbance(theta: &DVector<f64>, kappa: &[f64], vx: f64, dt: f64) -> Vec<DVector<f64>> {
    kappa
        .iter()
        .map(|&k| {
            let r = k * vx;
            DVector::from_row_slice(&[0.0, dt * (theta[2] - vx) * r, 0.0, dt * theta[5] * r])
        })
        .collect()
}

pub fn read_curvature_csv(path: &Path) -> Result<Vec<f64>, BenchError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| BenchError::Config(e.to_string()))?;
        let v = rec
            .get(rec.len().saturating_sub(1))
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| BenchError::Config(format!("bad curvature row {rec:?}")))?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralSpec {
    pub horizon: usize,
    pub alpha_theta: f64,
    pub theta_seed: u64,
    #[serde(default = "default_vx")]
    pub vx: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_vx() -> f64 {
    LATERAL_VX
}

fn default_dt() -> f64 {
    LATERAL_DT
}

/// Lateral plant with curvature as known exogenous input; no stochastic noise.
/// The nominal model is `alpha (1 + e) * theta` with `|e| = 1`.
pub fn gen_lateral_plant(spec: &LateralSpec, kappa: &[f64]) -> GeneratedPlant {
    let theta = DVector::from_row_slice(&LATERAL_THETA);
    let model = lateral_model(spec.dt);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.theta_seed);
    let e = uniform_on_unit_sphere(&mut rng, theta.len());
    let theta_nominal = theta.zip_map(&e, |t, e| spec.alpha_theta * (1.0 + e) * t);
    let mut exogenous = curvature_disturbance(&theta, kappa, spec.vx, spec.dt);
    exogenous.truncate(spec.horizon);
    let x_box = Polytope::symmetric_box(&LATERAL_STATE_BOX);
    let (a, b) = (model.a_of(&theta), model.b_of(&theta));
    let plant = Plant {
        model: Arc::new(model),
        theta_true: theta.clone(),
        noise: NoiseSpec::new(1e-3, (&theta_nominal - &theta).norm().max(1e-9), 0.0).expect("positive constants"),
        noise_law: NoiseLaw::Uniform,
        noise_input: DMatrix::zeros(4, 1),
        exogenous,
        x_constraint: x_box,
        u_constraint: Polytope::symmetric_box(&[LATERAL_STEER_BOUND]),
        horizon: spec.horizon,
        x0_law: InitialState::Fixed(DVector::from_row_slice(&LATERAL_X0)),
    };
    GeneratedPlant { plant, theta_nominal, a, b }
}
