//! Random instance generators shared by property tests and acceptance runs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::qp::{QpDataDerivative, QpDataJacobian, QpProblem};

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// `M M' + shift I` with `M` uniform in `[-1, 1]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, shift: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    &m * m.transpose() + DMatrix::identity(n, n) * shift
}

pub fn random_symmetric<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    (&m + m.transpose()) * 0.5
}

/// Parameterized QP whose data is affine in `p` and whose solution at `p = 0`
/// is known and strictly complementary.
#[derive(Debug, Clone)]
pub struct PlantedQp {
    pub problem: QpProblem,
    pub data_jac: QpDataJacobian,
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub nu_star: DVector<f64>,
    pub active: Vec<usize>,
}

impl PlantedQp {
    /// Data at parameter `p` (affine extrapolation of the planted instance).
    pub fn at(&self, p: &DVector<f64>) -> QpProblem {
        let mut out = self.problem.clone();
        for (k, d) in self.data_jac.coords.iter().enumerate() {
            out = d.perturb(&out, p[k]);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.data_jac.len()
    }
}

/// Plants a solution with `n_active` strongly active inequalities, margin at
/// least `margin` in both slack and multiplier.
pub fn planted_qp<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    n_eq: usize,
    n_in: usize,
    n_active: usize,
    n_params: usize,
    margin: f64,
) -> PlantedQp {
    assert!(n_eq + n_active <= n && n_active <= n_in);
    let q_mat = random_spd(rng, n, 0.5);
    let f_mat = random_matrix(rng, n_eq, n);
    let g_mat = random_matrix(rng, n_in, n);
    let x_star = random_vector(rng, n);
    let nu_star = random_vector(rng, n_eq);
    let mut idx: Vec<usize> = (0..n_in).collect();
    for i in 0..n_in {
        let j = rng.random_range(i..n_in);
        idx.swap(i, j);
    }
    let mut active: Vec<usize> = idx[..n_active].to_vec();
    active.sort_unstable();
    let mut lambda_star = DVector::zeros(n_in);
    let mut g = &g_mat * &x_star;
    for i in 0..n_in {
        if active.contains(&i) {
            lambda_star[i] = rng.random_range(margin..margin + 1.5);
        } else {
            g[i] += rng.random_range(margin..margin + 1.5);
        }
    }
    let f = &f_mat * &x_star;
    let q = -(&q_mat * &x_star) - g_mat.tr_mul(&lambda_star) - f_mat.tr_mul(&nu_star);
    let problem = QpProblem::new(q_mat, q, f_mat, f, g_mat, g).expect("consistent shapes");

    let mut data_jac = QpDataJacobian::with_len(n_params);
    for d in data_jac.coords.iter_mut() {
        *d = QpDataDerivative {
            d_q_mat: Some(random_symmetric(rng, n) * 0.2),
            d_q: Some(random_vector(rng, n)),
            d_f_mat: (n_eq > 0).then(|| random_matrix(rng, n_eq, n) * 0.2),
            d_f: (n_eq > 0).then(|| random_vector(rng, n_eq)),
            d_g_mat: (n_in > 0).then(|| random_matrix(rng, n_in, n) * 0.2),
            d_g: (n_in > 0).then(|| random_vector(rng, n_in)),
        };
    }
    PlantedQp { problem, data_jac, x_star, lambda_star, nu_star, active }
}

/// Central finite-difference Jacobian of the primal solution of a planted QP.
pub fn planted_fd_jacobian(planted: &PlantedQp, step: f64) -> Result<DMatrix<f64>, crate::qp::QpError> {
    let n = planted.problem.n();
    let np = planted.n_params();
    let mut jac = DMatrix::zeros(n, np);
    for k in 0..np {
        let mut e = DVector::zeros(np);
        e[k] = step;
        let plus = crate::qp::qp_solve(&planted.at(&e), None)?;
        let minus = crate::qp::qp_solve(&planted.at(&(-&e)), None)?;
        jac.set_column(k, &((&plus.x - &minus.x) / (2.0 * step)));
    }
    Ok(jac)
}

/// `max |a - b| / max(1, max |b|)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
