//! Sample-based upper bound on the gradient norm under a fixed nominal model.
//!
//! Models are drawn from the initial confidence set, one frozen-noise gradient
//! norm is recorded per draw, and the largest `k` norms are discarded while the
//! binomial tail condition stays below `beta`.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::uniform_in_unit_ball;
use crate::sysid::ConfidenceEllipsoid;

pub const DEFAULT_BETA: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("sample {index} fell outside the confidence set")]
    SamplerOutOfSet { index: usize },
    #[error("no discard count satisfies the condition; more samples are needed")]
    InsufficientSamples,
    #[error("gradient evaluation for sample {index} failed: {message}")]
    Evaluation { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub n_p: usize,
    pub n_theta: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidArguments(m));
        if self.m == 0 {
            return bad("M must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.n_p == 0 || self.n_theta == 0 {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Left-hand side of the discard condition, with its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionValue {
    pub lhs: f64,
    pub log_lhs: f64,
}

impl ConditionValue {
    pub fn holds(&self, beta: f64) -> bool {
        self.log_lhs <= beta.ln()
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|j| (((n - k + j) as f64) / j as f64).ln()).sum()
}

/// `C(k + n_p - 1, k) * sum_{i=0}^{k + n_theta - 1} C(M, i) eps^i (1 - eps)^(M - i)`,
/// evaluated in log space.
pub fn scenario_condition(k: usize, m: usize, epsilon: f64, n_p: usize, n_theta: usize) -> Result<ConditionValue, ScenarioError> {
    if k > m || m == 0 || n_p == 0 || n_theta == 0 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ScenarioError::InvalidArguments(format!(
            "k = {k}, M = {m}, epsilon = {epsilon}, n_p = {n_p}, n_theta = {n_theta}"
        )));
    }
    let prefactor = ln_binomial(k + n_p - 1, k);
    let top = (k + n_theta - 1).min(m);
    let (le, l1e) = (epsilon.ln(), (-epsilon).ln_1p());
    let mut ln_c = 0.0;
    let mut terms = Vec::with_capacity(top + 1);
    for i in 0..=top {
        if i > 0 {
            ln_c += ((m - i + 1) as f64 / i as f64).ln();
        }
        terms.push(ln_c + i as f64 * le + (m - i) as f64 * l1e);
    }
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail = peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    // The tail is a probability; rounding must not push it above one.
    let log_lhs = prefactor + tail.min(0.0);
    Ok(ConditionValue { lhs: log_lhs.exp(), log_lhs })
}

/// Largest `k in [0, M - 1]` for which the condition holds. The left-hand side
/// is nondecreasing in `k`, so the scan stops at the first failure.
pub fn k_max(m: usize, epsilon: f64, beta: f64, n_p: usize, n_theta: usize) -> Result<usize, ScenarioError> {
    let mut best = None;
    for k in 0..m {
        if scenario_condition(k, m, epsilon, n_p, n_theta)?.holds(beta) {
            best = Some(k);
        } else {
            break;
        }
    }
    best.ok_or(ScenarioError::InsufficientSamples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub epsilon: f64,
    pub beta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub k_max: usize,
    pub bound: f64,
    /// Sampled norms, largest first.
    pub norms: Vec<f64>,
    /// Each norm is the single Jacobian element the rollout returns rather
    /// than the maximum over the conservative set.
    pub single_element_approximation: bool,
}

impl ScenarioResult {
    /// Re-derives `k_max` and the bound for another risk level.
    pub fn at_epsilon(&self, epsilon: f64, n_p: usize, n_theta: usize) -> Result<(usize, f64), ScenarioError> {
        let k = k_max(self.m, epsilon, self.beta, n_p, n_theta)?;
        Ok((k, self.norms[k]))
    }
}

/// Sorts descending and applies the discard rule.
pub fn bound_from_norms(config: &ScenarioConfig, mut norms: Vec<f64>) -> Result<ScenarioResult, ScenarioError> {
    config.validate()?;
    if norms.len() != config.m {
        return Err(ScenarioError::InvalidArguments(format!("{} norms for M = {}", norms.len(), config.m)));
    }
    if let Some(i) = norms.iter().position(|v| !v.is_finite()) {
        return Err(ScenarioError::Evaluation { index: i, message: "non-finite norm".into() });
    }
    norms.sort_by(|a, b| b.total_cmp(a));
    let k = k_max(config.m, config.epsilon, config.beta, config.n_p, config.n_theta)?;
    Ok(ScenarioResult {
        epsilon: config.epsilon,
        beta: config.beta,
        m: config.m,
        k_max: k,
        bound: norms[k],
        norms,
        single_element_approximation: true,
    })
}

/// Uniform samples from the ellipsoid: `center + radius * L^{-T} u` with
/// `shape = L L'` and `u` uniform in the unit ball.
pub fn sample_ellipsoid(ell: &ConfidenceEllipsoid, count: usize, seed: u64) -> Result<Vec<DVector<f64>>, ScenarioError> {
    let chol = crate::linalg::symmetrize(&ell.shape)
        .cholesky()
        .ok_or_else(|| ScenarioError::InvalidArguments("shape matrix is not positive definite".into()))?;
    let lt = chol.l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let u = uniform_in_unit_ball(&mut rng, ell.dim());
        let step = lt
            .solve_upper_triangular(&(u * ell.radius))
            .ok_or_else(|| ScenarioError::InvalidArguments("singular shape factor".into()))?;
        let theta = &ell.center + step;
        if !ell.contains_with_tol(&theta, 1e-9) {
            return Err(ScenarioError::SamplerOutOfSet { index });
        }
        out.push(theta);
    }
    Ok(out)
}

/// Samples `M` models from `set`, evaluates the gradient norm at each in
/// parallel (results keep sample order) and applies the discard rule.
pub fn certify_bound<F, E>(config: &ScenarioConfig, set: &ConfidenceEllipsoid, grad_norm_at: F) -> Result<ScenarioResult, ScenarioError>
where
    F: Fn(&DVector<f64>) -> Result<f64, E> + Sync,
    E: std::fmt::Display,
{
    config.validate()?;
    if set.dim() != config.n_theta {
        return Err(ScenarioError::InvalidArguments(format!("set has dimension {}, n_theta = {}", set.dim(), config.n_theta)));
    }
    let samples = sample_ellipsoid(set, config.m, config.seed)?;
    let norms = samples
        .par_iter()
        .enumerate()
        .map(|(index, theta)| grad_norm_at(theta).map_err(|e| ScenarioError::Evaluation { index, message: e.to_string() }))
        .collect::<Result<Vec<_>, _>>()?;
    bound_from_norms(config, norms)
}

/// One row per risk level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub k_max: Option<usize>,
    pub bound: Option<f64>,
}

pub fn epsilon_sweep(result: &ScenarioResult, epsilons: &[f64], n_p: usize, n_theta: usize) -> Result<Vec<SweepPoint>, ScenarioError> {
    epsilons
        .iter()
        .map(|&epsilon| match result.at_epsilon(epsilon, n_p, n_theta) {
            Ok((k, b)) => Ok(SweepPoint { epsilon, k_max: Some(k), bound: Some(b) }),
            Err(ScenarioError::InsufficientSamples) => Ok(SweepPoint { epsilon, k_max: None, bound: None }),
            Err(e) => Err(e),
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epsilon", "k_max", "bound"])?;
    for p in points {
        w.write_record([
            p.epsilon.to_string(),
            p.k_max.map_or(String::new(), |k| k.to_string()),
            p.bound.map_or(String::new(), |b| b.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_term() {
        let v = scenario_condition(0, 10, 0.5, 1, 1).unwrap();
        assert_relative_eq!(v.lhs, 0.5f64.powi(10), max_relative = 1e-13);
    }

    #[test]
    fn small_epsilon_limit() {
        // Only the i = 0 term survives and tends to one.
        let v = scenario_condition(3, 50, 1e-14, 4, 2).unwrap();
        assert_relative_eq!(v.lhs, 20.0, max_relative = 1e-10);
    }

    #[test]
    fn tail_saturates_at_prefactor() {
        let v = scenario_condition(5, 5, 0.3, 2, 3).unwrap();
        assert_relative_eq!(v.lhs, 6.0, max_relative = 1e-12);
    }

    #[test]
    fn argument_checks() {
        assert!(scenario_condition(11, 10, 0.5, 1, 1).is_err());
        assert!(scenario_condition(0, 10, 1.0, 1, 1).is_err());
        assert!(scenario_condition(0, 10, 0.5, 0, 1).is_err());
        let cfg = ScenarioConfig { m: 0, epsilon: 0.1, beta: 0.1, n_p: 1, n_theta: 1, seed: 0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_norms() {
        let cfg = ScenarioConfig { m: 300, epsilon: 0.2, beta: 1e-6, n_p: 2, n_theta: 2, seed: 0 };
        let r = bound_from_norms(&cfg, vec![1.5; 300]).unwrap();
        assert!(r.k_max > 0);
        assert_eq!(r.bound, 1.5);
    }

    #[test]
    fn tiny_beta_keeps_maximum() {
        // With M = 40, eps = 0.3 only k = 0 passes at this beta.
        let m = 40;
        let beta = scenario_condition(0, m, 0.3, 1, 1).unwrap().lhs * 1.0001;
        assert!(!scenario_condition(1, m, 0.3, 1, 1).unwrap().holds(beta));
        let cfg = ScenarioConfig { m, epsilon: 0.3, beta, n_p: 1, n_theta: 1, seed: 0 };
        let norms: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let r = bound_from_norms(&cfg, norms).unwrap();
        assert_eq!(r.k_max, 0);
        assert_eq!(r.bound, 39.0);
    }

    #[test]
    fn insufficient_samples() {
        let cfg = ScenarioConfig { m: 5, epsilon: 0.01, beta: 1e-10, n_p: 3, n_theta: 3, seed: 0 };
        assert_eq!(bound_from_norms(&cfg, vec![1.0; 5]), Err(ScenarioError::InsufficientSamples));
    }

    #[test]
    fn ellipsoid_samples_stay_inside() {
        let mut e = ConfidenceEllipsoid::ball(DVector::from_row_slice(&[1.0, 2.0, 3.0]), 0.5);
        e.shape = nalgebra::DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let s = sample_ellipsoid(&e, 500, 7).unwrap();
        assert!(s.iter().all(|t| e.membership(t).unwrap() || e.contains_with_tol(t, 1e-12)));
        // Uniform in a 3-ellipsoid: E[q / r^2] = 3/5.
        let mean_q = s.iter().map(|t| e.quad_form(t)).sum::<f64>() / (500.0 * 0.25);
        assert!((mean_q - 0.6).abs() < 0.05, "{mean_q}");
    }

    #[test]
    fn certify_with_closure() {
        let e = ConfidenceEllipsoid::ball(DVector::zeros(2), 1.0);
        let cfg = ScenarioConfig { m: 200, epsilon: 0.1, beta: 1e-6, n_p: 2, n_theta: 2, seed: 3 };
        let r = certify_bound(&cfg, &e, |t| Ok::<_, String>(t.norm())).unwrap();
        assert!(r.bound <= 1.0 && r.bound > 0.5);
        assert!(r.norms.windows(2).all(|w| w[0] >= w[1]));
        let err = certify_bound(&cfg, &e, |_| Err::<f64, _>("boom")).unwrap_err();
        assert!(matches!(err, ScenarioError::Evaluation { .. }));
    }
}
