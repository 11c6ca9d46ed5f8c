//! Recursive least-squares identification of `z_t = psi_t' theta + w_t` with
//! high-probability confidence ellipsoids.
//!
//! Vector-valued targets are handled by matrix regressors: `psi_t` is
//! `n_theta x n_z` and the updates use `psi psi'` and `psi z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{from_row_major, row_major, symmetrize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SysIdError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("information matrix is not positive definite")]
    SingularA,
    #[error("confidence parameter must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
}

/// Regularized least-squares state. `A >= lambda I` and `theta_hat = A^-1 b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub lambda_reg: f64,
    pub theta0: DVector<f64>,
    pub k: usize,
    pub total_samples: usize,
}

impl RlsState {
    /// Prior state `A = lambda I`, `b = lambda theta0`.
    pub fn new(theta0: DVector<f64>, lambda_reg: f64) -> Result<Self, SysIdError> {
        if !(lambda_reg > 0.0 && lambda_reg.is_finite()) {
            return Err(SysIdError::InvalidArguments(format!("lambda must be positive, got {lambda_reg}")));
        }
        let n = theta0.len();
        Ok(Self {
            a: DMatrix::identity(n, n) * lambda_reg,
            b: &theta0 * lambda_reg,
            theta_hat: theta0.clone(),
            lambda_reg,
            theta0,
            k: 0,
            total_samples: 0,
        })
    }

    pub fn n_theta(&self) -> usize {
        self.theta0.len()
    }

    /// Regularized least-squares objective minimized by `theta_hat`.
    pub fn objective(&self, theta: &DVector<f64>, features: &[DMatrix<f64>], targets: &[DVector<f64>]) -> f64 {
        let mut v = self.lambda_reg * (theta - &self.theta0).norm_squared();
        for (psi, z) in features.iter().zip(targets) {
            v += (z - psi.tr_mul(theta)).norm_squared();
        }
        v
    }

    pub fn log_det_a(&self) -> Result<f64, SysIdError> {
        let chol = self.a.clone().cholesky().ok_or(SysIdError::SingularA)?;
        Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetrize(&self.a).symmetric_eigenvalues().min()
    }

    /// Checks `A >= lambda I` (to `1e-10`) and `A theta_hat = b` (to `1e-9` relative).
    pub fn check_invariants(&self) -> Result<(), SysIdError> {
        if self.min_eigenvalue() < self.lambda_reg * (1.0 - 1e-10) - 1e-10 {
            return Err(SysIdError::SingularA);
        }
        let res = (&self.a * &self.theta_hat - &self.b).norm();
        if res > 1e-9 * (1.0 + self.b.norm()) {
            return Err(SysIdError::SingularA);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> RlsCheckpoint {
        RlsCheckpoint {
            a: row_major(&self.a),
            b: self.b.iter().copied().collect(),
            theta_hat: self.theta_hat.iter().copied().collect(),
            lambda: self.lambda_reg,
            theta0: self.theta0.iter().copied().collect(),
            k: self.k,
            total_samples: self.total_samples,
        }
    }
}

/// JSON checkpoint. `a` is row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RlsCheckpoint {
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub lambda: f64,
    pub theta0: Vec<f64>,
    pub k: usize,
    #[serde(default)]
    pub total_samples: usize,
}

impl RlsCheckpoint {
    pub fn restore(&self) -> Result<RlsState, SysIdError> {
        let n = self.theta0.len();
        if self.a.len() != n * n || self.b.len() != n || self.theta_hat.len() != n {
            return Err(SysIdError::DimensionMismatch("checkpoint arrays".into()));
        }
        let state = RlsState {
            a: from_row_major(n, n, &self.a),
            b: DVector::from_column_slice(&self.b),
            theta_hat: DVector::from_column_slice(&self.theta_hat),
            lambda_reg: self.lambda,
            theta0: DVector::from_column_slice(&self.theta0),
            k: self.k,
            total_samples: self.total_samples,
        };
        state.check_invariants()?;
        Ok(state)
    }
}

/// Absorbs one batch of regressors and targets and recomputes `theta_hat`.
pub fn rls_absorb(
    state: &RlsState,
    features: &[DMatrix<f64>],
    targets: &[DVector<f64>],
) -> Result<RlsState, SysIdError> {
    if features.len() != targets.len() {
        return Err(SysIdError::DimensionMismatch(format!(
            "{} regressors vs {} targets",
            features.len(),
            targets.len()
        )));
    }
    let n = state.n_theta();
    let mut next = state.clone();
    for (psi, z) in features.iter().zip(targets) {
        if psi.nrows() != n || psi.ncols() != z.len() {
            return Err(SysIdError::DimensionMismatch(format!(
                "regressor {}x{} for n_theta {n} and target length {}",
                psi.nrows(),
                psi.ncols(),
                z.len()
            )));
        }
        next.a += psi * psi.transpose();
        next.b += psi * z;
    }
    next.a = symmetrize(&next.a);
    next.k += 1;
    next.total_samples += features.len();
    if !features.is_empty() {
        let chol = next.a.clone().cholesky().ok_or(SysIdError::SingularA)?;
        next.theta_hat = chol.solve(&next.b);
    }
    Ok(next)
}

/// Per-batch persistency-of-excitation estimate `lambda_min(sum psi psi')`.
pub fn pe_estimate(features: &[DMatrix<f64>]) -> f64 {
    let Some(first) = features.first() else { return 0.0 };
    let n = first.nrows();
    let mut gram = DMatrix::zeros(n, n);
    for psi in features {
        gram += psi * psi.transpose();
    }
    symmetrize(&gram).symmetric_eigenvalues().min()
}

/// Noise assumptions: `R`-sub-Gaussian, `|theta - theta0|, |theta| <= S`, and
/// componentwise almost-sure bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpec {
    pub r: f64,
    pub s: f64,
    pub bound: f64,
}

impl NoiseSpec {
    pub fn new(r: f64, s: f64, bound: f64) -> Result<Self, SysIdError> {
        if !(r > 0.0 && s > 0.0 && bound >= 0.0) {
            return Err(SysIdError::InvalidArguments(format!("noise spec R={r}, S={s}, bound={bound}")));
        }
        Ok(Self { r, s, bound })
    }
}

fn check_delta(delta: f64) -> Result<(), SysIdError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(SysIdError::InvalidDelta(delta))
    }
}

/// Ellipsoid radius `c = R sqrt(log det A - n log lambda - 2 log delta) + sqrt(lambda) S`.
pub fn confidence_radius(state: &RlsState, noise: &NoiseSpec, delta: f64) -> Result<f64, SysIdError> {
    check_delta(delta)?;
    let n = state.n_theta() as f64;
    let log_ratio = state.log_det_a()? - n * state.lambda_reg.ln();
    let inner = (log_ratio.max(0.0) - 2.0 * delta.ln()).max(0.0);
    Ok(noise.r * inner.sqrt() + state.lambda_reg.sqrt() * noise.s)
}

/// Euclidean radius under persistency of excitation with per-iteration
/// constant `gamma_pe` and regressor bound `l_psi`, using `state.k` iterations
/// of `t_len` samples each.
pub fn euclid_radius(
    state: &RlsState,
    noise: &NoiseSpec,
    delta: f64,
    gamma_pe: f64,
    l_psi: f64,
    t_len: usize,
) -> Result<f64, SysIdError> {
    euclid_radius_at(state.n_theta(), state.k, state.lambda_reg, noise, delta, gamma_pe, l_psi, t_len)
}

#[allow(clippy::too_many_arguments)]
pub fn euclid_radius_at(
    n_theta: usize,
    k: usize,
    lambda_reg: f64,
    noise: &NoiseSpec,
    delta: f64,
    gamma_pe: f64,
    l_psi: f64,
    t_len: usize,
) -> Result<f64, SysIdError> {
    check_delta(delta)?;
    if k == 0 {
        return Err(SysIdError::InvalidArguments("k must be at least 1".into()));
    }
    if !(gamma_pe > 0.0) {
        return Err(SysIdError::InvalidArguments(format!("PE constant must be positive, got {gamma_pe}")));
    }
    let n = n_theta as f64;
    let kg = k as f64 * gamma_pe;
    let growth = (t_len as f64) * (k as f64) * l_psi * l_psi / (n * lambda_reg);
    let inner = (n * growth.ln_1p() - 2.0 * delta.ln()) / kg;
    Ok(noise.r * inner.sqrt() + lambda_reg.sqrt() * noise.s / kg.sqrt())
}

/// `{theta : (theta - center)' shape (theta - center) <= radius^2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceEllipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius: f64,
    pub delta: f64,
    /// Radius of a Euclidean ball around `center` containing the ellipsoid,
    /// `max(radius / sqrt(lambda_min(shape)), pe_radius)`.
    pub euclid_radius: f64,
    /// Persistency-of-excitation radius, when PE constants were supplied.
    pub pe_radius: Option<f64>,
}

/// Constants for the persistency-of-excitation radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeConstants {
    pub gamma: f64,
    pub l_psi: f64,
    pub t_len: usize,
}

impl ConfidenceEllipsoid {
    pub fn from_state(
        state: &RlsState,
        noise: &NoiseSpec,
        delta: f64,
        pe: Option<PeConstants>,
    ) -> Result<Self, SysIdError> {
        let radius = confidence_radius(state, noise, delta)?;
        let lmin = state.min_eigenvalue();
        if lmin <= 0.0 {
            return Err(SysIdError::SingularA);
        }
        let pe_radius = match pe {
            Some(c) if state.k > 0 && c.gamma > 0.0 => {
                Some(euclid_radius(state, noise, delta, c.gamma, c.l_psi, c.t_len)?)
            }
            _ => None,
        };
        let contain = radius / lmin.sqrt();
        Ok(Self {
            center: state.theta_hat.clone(),
            shape: state.a.clone(),
            radius,
            delta,
            euclid_radius: pe_radius.map_or(contain, |p| p.max(contain)),
            pe_radius,
        })
    }

    /// Ball of radius `radius` around `center` (identity shape).
    pub fn ball(center: DVector<f64>, radius: f64) -> Self {
        let n = center.len();
        Self {
            center,
            shape: DMatrix::identity(n, n),
            radius,
            delta: 0.5,
            euclid_radius: radius,
            pe_radius: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(theta - center)' shape (theta - center)`.
    pub fn quad_form(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.center;
        d.dot(&(&self.shape * &d))
    }

    pub fn membership(&self, theta: &DVector<f64>) -> Result<bool, SysIdError> {
        if theta.len() != self.dim() {
            return Err(SysIdError::DimensionMismatch(format!("{} vs {}", theta.len(), self.dim())));
        }
        Ok(self.quad_form(theta) <= self.radius * self.radius)
    }

    /// Membership with a relative slack on the squared radius.
    pub fn contains_with_tol(&self, theta: &DVector<f64>, rel_tol: f64) -> bool {
        self.quad_form(theta) <= self.radius * self.radius * (1.0 + rel_tol)
    }
}
