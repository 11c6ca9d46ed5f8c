//! Outer learning loops: projected stochastic gradient steps on the design
//! parameter, jointly with recursive identification.
//!
//! In joint mode the MPC predicts with the `vartheta` block of `p`, which is
//! kept inside the current confidence ellipsoid. In certainty-equivalence mode
//! `p` has no model block and the MPC predicts with the RLS estimate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{rollout, ClosedLoop, Rollout, RolloutError};
use crate::mpc::DesignParameter;
use crate::sysid::{pe_estimate, rls_absorb, ConfidenceEllipsoid, NoiseSpec, PeConstants, RlsState, SysIdError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("projection did not converge")]
    NoConvergence,
    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    SysId(#[from] SysIdError),
}

/// Euclidean projection onto `{z : (z - c)' A (z - c) <= r^2}`.
///
/// Solves `sum m_i d_i^2 / (1 + mu m_i)^2 = 1` for `mu >= 0` with `M = A / r^2`
/// in its eigenbasis by safeguarded Newton. The result is pulled onto the set
/// if rounding leaves it outside, so the map is idempotent.
pub fn project_onto_ellipsoid(ell: &ConfidenceEllipsoid, point: &DVector<f64>) -> Result<DVector<f64>, TuneError> {
    if point.len() != ell.dim() {
        return Err(TuneError::ConfigMismatch("projection dimension".into()));
    }
    let r2 = ell.radius * ell.radius;
    if ell.quad_form(point) <= r2 {
        return Ok(point.clone());
    }
    let m = crate::linalg::symmetrize(&ell.shape) / r2;
    let eig = m.symmetric_eigen();
    let lam = &eig.eigenvalues;
    if lam.min() <= 0.0 {
        return Err(TuneError::NoConvergence);
    }
    let d = point - &ell.center;
    let dt = eig.eigenvectors.tr_mul(&d);
    let phi = |mu: f64| -> (f64, f64) {
        let mut v = 0.0;
        let mut dv = 0.0;
        for i in 0..lam.len() {
            let den = 1.0 + mu * lam[i];
            let t = lam[i] * dt[i] * dt[i] / (den * den);
            v += t;
            dv -= 2.0 * t * lam[i] / den;
        }
        (v - 1.0, dv)
    };
    let (mut lo, mut hi) = (0.0, d.norm() / lam.min().sqrt());
    let mut mu = 0.0;
    let mut converged = false;
    for _ in 0..200 {
        let (v, dv) = phi(mu);
        if v.abs() <= 1e-12 {
            converged = true;
            break;
        }
        if v > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let newton = if dv < 0.0 { mu - v / dv } else { f64::NAN };
        mu = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TuneError::NoConvergence);
    }
    let scaled = DVector::from_fn(lam.len(), |i, _| dt[i] / (1.0 + mu * lam[i]));
    let mut z = &ell.center + &eig.eigenvectors * scaled;
    let q = ell.quad_form(&z);
    if q > r2 {
        let shrink = (r2 / q).sqrt();
        z = &ell.center + (&z - &ell.center) * shrink;
        // Rounding in the rescale can still overshoot; back off geometrically.
        let mut back = f64::EPSILON;
        while ell.quad_form(&z) > r2 {
            if back > 1e-6 {
                return Err(TuneError::NoConvergence);
            }
            z = &ell.center + (&z - &ell.center) * (1.0 - back);
            back *= 2.0;
        }
    }
    Ok(z)
}

/// Projection onto `Y_k = {p in P : vartheta in ellipsoid}`: the model block is
/// projected onto the ellipsoid, the remaining coordinates are clamped to the box.
pub fn project_onto_yk(param: &DesignParameter, ellipsoid: Option<&ConfidenceEllipsoid>) -> Result<DesignParameter, TuneError> {
    let mut v = param.to_vec();
    let range = param.vartheta_range();
    for i in 0..v.len() {
        if range.as_ref().is_some_and(|r| r.contains(&i)) {
            continue;
        }
        v[i] = v[i].clamp(param.lower[i], param.upper[i]);
    }
    if let (Some(r), Some(ell)) = (range, ellipsoid) {
        let block = DVector::from_iterator(r.len(), r.clone().map(|i| v[i]));
        let proj = project_onto_ellipsoid(ell, &block)?;
        for (k, i) in r.enumerate() {
            v[i] = proj[k];
        }
    }
    Ok(param.with_vec(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `c / k^gamma`, `gamma in (0.5, 1]`.
    RobbinsMonro { c: f64, gamma: f64 },
    /// `eta * rho^(k - 1)`.
    Geometric { eta: f64, rho: f64 },
    Constant { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, clip_norm: Option<f64>) -> Result<Self, TuneError> {
        let s = Self { kind, clip_norm };
        s.validate()?;
        Ok(s)
    }

    pub fn robbins_monro(c: f64, gamma: f64) -> Result<Self, TuneError> {
        Self::new(ScheduleKind::RobbinsMonro { c, gamma }, None)
    }

    pub fn geometric(eta: f64, rho: f64) -> Result<Self, TuneError> {
        Self::new(ScheduleKind::Geometric { eta, rho }, None)
    }

    pub fn constant(alpha: f64) -> Result<Self, TuneError> {
        Self::new(ScheduleKind::Constant { alpha }, None)
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self, TuneError> {
        self.clip_norm = Some(clip);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: String| Err(TuneError::InvalidSchedule(m));
        match self.kind {
            ScheduleKind::RobbinsMonro { c, gamma } => {
                if !(c > 0.0) {
                    return bad(format!("c must be positive, got {c}"));
                }
                if !(gamma > 0.5 && gamma <= 1.0) {
                    return bad(format!("gamma must lie in (0.5, 1], got {gamma}"));
                }
            }
            ScheduleKind::Geometric { eta, rho } => {
                if !(eta > 0.0 && rho > 0.0 && rho <= 1.0) {
                    return bad(format!("geometric schedule needs eta > 0, rho in (0, 1], got {eta}, {rho}"));
                }
            }
            ScheduleKind::Constant { alpha } => {
                if !(alpha > 0.0) {
                    return bad(format!("alpha must be positive, got {alpha}"));
                }
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Square-summable and not summable.
    pub fn is_admissible(&self) -> bool {
        matches!(self.kind, ScheduleKind::RobbinsMonro { .. })
    }
}

/// Step size at iteration `k >= 1`.
pub fn step_size(schedule: &StepSchedule, k: usize) -> Result<f64, TuneError> {
    schedule.validate()?;
    if k == 0 {
        return Err(TuneError::InvalidSchedule("iterations are counted from 1".into()));
    }
    Ok(match schedule.kind {
        ScheduleKind::RobbinsMonro { c, gamma } => c * (k as f64).powf(-gamma),
        ScheduleKind::Geometric { eta, rho } => eta * rho.powi(k as i32 - 1),
        ScheduleKind::Constant { alpha } => alpha,
    })
}

/// Scales `g` down to norm `clip` if it is longer. Returns whether it clipped.
pub fn clip_gradient(g: &DVector<f64>, clip: Option<f64>) -> (DVector<f64>, bool) {
    match clip {
        Some(c) if g.norm() > c => (g * (c / g.norm()), true),
        _ => (g.clone(), false),
    }
}

/// Output of one closed-loop episode as seen by the tuner.
#[derive(Debug, Clone)]
pub struct Episode {
    pub cost: f64,
    pub grad: DVector<f64>,
    pub features: Vec<DMatrix<f64>>,
    pub targets: Vec<DVector<f64>>,
}

/// Source of episodes; the closed loop is the production implementation.
pub trait EpisodeOracle: Sync {
    fn episode(&self, param: &DesignParameter, theta_model: &DVector<f64>, seed: u64) -> Result<Episode, RolloutError>;

    fn evaluate(&self, param: &DesignParameter, theta_model: &DVector<f64>, seeds: &[u64]) -> Result<Vec<f64>, RolloutError>;
}

impl EpisodeOracle for ClosedLoop {
    fn episode(&self, param: &DesignParameter, theta_model: &DVector<f64>, seed: u64) -> Result<Episode, RolloutError> {
        let Rollout { cost, grad_p, features, targets, .. } = rollout(self, param, theta_model, seed, true)?;
        Ok(Episode { cost, grad: grad_p.expect("gradient requested"), features, targets })
    }

    fn evaluate(&self, param: &DesignParameter, theta_model: &DVector<f64>, seeds: &[u64]) -> Result<Vec<f64>, RolloutError> {
        crate::closed_loop::mean_cost(self, param, theta_model, seeds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Joint tuning of costs and the prediction model.
    Alg1,
    /// Certainty equivalence: the MPC predicts with the RLS estimate.
    Ce,
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub mode: TuneMode,
    /// Update the RLS estimate from every episode.
    pub identify: bool,
    pub noise: NoiseSpec,
    pub delta: f64,
    /// Episode length and regressor bound for the PE radius (reported only).
    pub pe: Option<(usize, f64)>,
    pub eval_seeds: Vec<u64>,
    /// Evaluate every `eval_every` iterations (0 disables periodic evaluation).
    pub eval_every: usize,
    pub theta_true: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub k: usize,
    pub cost_train: f64,
    pub cost_eval: Option<f64>,
    pub grad_norm: f64,
    pub alpha: f64,
    pub radius_ck: f64,
    pub theta_err: Option<f64>,
    pub clipped: bool,
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TuneState {
    pub param: DesignParameter,
    pub rls: RlsState,
    /// Confidence set built from the current estimate.
    pub ellipsoid: ConfidenceEllipsoid,
    /// Set the model block was last projected onto.
    pub projection_set: ConfidenceEllipsoid,
    pub k: usize,
    pub alpha_scale: f64,
    pub history: Vec<HistoryRecord>,
}

impl TuneState {
    pub fn new(param: DesignParameter, rls: RlsState, noise: &NoiseSpec, delta: f64) -> Result<Self, TuneError> {
        let ellipsoid = ConfidenceEllipsoid::from_state(&rls, noise, delta, None)?;
        if let Some(v) = &param.vartheta {
            if v.len() != rls.n_theta() {
                return Err(TuneError::ConfigMismatch("model block length differs from RLS".into()));
            }
        }
        let param = project_onto_yk(&param, Some(&ellipsoid))?;
        Ok(Self {
            param,
            rls,
            projection_set: ellipsoid.clone(),
            ellipsoid,
            k: 0,
            alpha_scale: 1.0,
            history: Vec::new(),
        })
    }

    /// Model used by the sensitivity sweep (and, in CE mode, by the MPC).
    pub fn theta_model(&self) -> &DVector<f64> {
        &self.rls.theta_hat
    }

    /// `vartheta` inside the projection set and the rest inside the box.
    pub fn check_feasibility(&self) -> bool {
        let model_ok = self.param.vartheta.as_ref().is_none_or(|v| self.projection_set.contains_with_tol(v, 1e-9));
        let mut v = self.param.to_vec();
        if let Some(r) = self.param.vartheta_range() {
            for i in r {
                v[i] = 0.0;
            }
        }
        let mut lower = self.param.lower.clone();
        let mut upper = self.param.upper.clone();
        if let Some(r) = self.param.vartheta_range() {
            for i in r {
                lower[i] = f64::NEG_INFINITY;
                upper[i] = f64::INFINITY;
            }
        }
        model_ok && (0..v.len()).all(|i| v[i] >= lower[i] && v[i] <= upper[i])
    }

    pub fn write_history_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_history_csv(&self.history, out)
    }
}

pub fn write_history_csv<W: Write>(history: &[HistoryRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "cost_train", "cost_eval", "grad_norm", "alpha", "radius_ck", "theta_err", "clipped"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for h in history {
        w.write_record([
            h.k.to_string(),
            h.cost_train.to_string(),
            opt(h.cost_eval),
            h.grad_norm.to_string(),
            h.alpha.to_string(),
            h.radius_ck.to_string(),
            opt(h.theta_err),
            (h.clipped as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Joint-mode iteration: episode, clipped gradient step, projection onto
/// `Y_k`, then identification.
pub fn tune_step<O: EpisodeOracle + ?Sized>(
    state: &TuneState,
    oracle: &O,
    schedule: &StepSchedule,
    options: &TuneOptions,
    seed: u64,
) -> Result<TuneState, TuneError> {
    if state.param.vartheta.is_none() {
        return Err(TuneError::ConfigMismatch("joint mode needs a model block in p".into()));
    }
    step_impl(state, oracle, schedule, options, seed)
}

/// Certainty-equivalence iteration: as `tune_step` with the box as the only
/// constraint on `p`.
pub fn tune_step_ce<O: EpisodeOracle + ?Sized>(
    state: &TuneState,
    oracle: &O,
    schedule: &StepSchedule,
    options: &TuneOptions,
    seed: u64,
) -> Result<TuneState, TuneError> {
    if state.param.vartheta.is_some() {
        return Err(TuneError::ConfigMismatch("certainty equivalence excludes the model block".into()));
    }
    step_impl(state, oracle, schedule, options, seed)
}

fn step_impl<O: EpisodeOracle + ?Sized>(
    state: &TuneState,
    oracle: &O,
    schedule: &StepSchedule,
    options: &TuneOptions,
    seed: u64,
) -> Result<TuneState, TuneError> {
    let mut next = state.clone();
    next.k += 1;
    let k = next.k;
    let alpha = step_size(schedule, k)? * state.alpha_scale;
    let episode = match oracle.episode(&state.param, state.theta_model(), seed) {
        Ok(e) if e.grad.iter().all(|v| v.is_finite()) && e.cost.is_finite() => Some(e),
        Ok(_) | Err(RolloutError::NonFinite { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let Some(episode) = episode else {
        log::warn!("iteration {k}: non-finite episode, step skipped and step size halved");
        next.alpha_scale *= 0.5;
        next.history.push(HistoryRecord {
            k,
            cost_train: f64::NAN,
            cost_eval: None,
            grad_norm: f64::NAN,
            alpha,
            radius_ck: state.ellipsoid.radius,
            theta_err: theta_error(&state.rls.theta_hat, options),
            clipped: false,
            skipped: true,
        });
        return Ok(next);
    };

    let grad_norm = episode.grad.norm();
    let (g, clipped) = clip_gradient(&episode.grad, schedule.clip_norm);
    let stepped = state.param.with_vec(&(state.param.to_vec() - g * alpha));
    next.projection_set = state.ellipsoid.clone();
    next.param = project_onto_yk(&stepped, Some(&next.projection_set))?;

    if options.identify {
        next.rls = rls_absorb(&state.rls, &episode.features, &episode.targets)?;
        let pe = options.pe.map(|(t_len, l_psi)| PeConstants {
            gamma: pe_estimate(&episode.features),
            l_psi,
            t_len,
        });
        next.ellipsoid = ConfidenceEllipsoid::from_state(&next.rls, &options.noise, options.delta, pe)?;
    }

    let cost_eval = if options.eval_every > 0 && k % options.eval_every == 0 && !options.eval_seeds.is_empty() {
        Some(mean(&oracle.evaluate(&next.param, next.theta_model(), &options.eval_seeds)?))
    } else {
        None
    };
    next.history.push(HistoryRecord {
        k,
        cost_train: episode.cost,
        cost_eval,
        grad_norm,
        alpha,
        radius_ck: next.ellipsoid.radius,
        theta_err: theta_error(&next.rls.theta_hat, options),
        clipped,
        skipped: false,
    });
    Ok(next)
}

fn theta_error(theta: &DVector<f64>, options: &TuneOptions) -> Option<f64> {
    options.theta_true.as_ref().map(|t| (theta - t).norm() / t.norm().max(f64::MIN_POSITIVE))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs `iterations` steps with training seeds `seed_of(k)`.
pub fn tune<O: EpisodeOracle + ?Sized>(
    mut state: TuneState,
    oracle: &O,
    schedule: &StepSchedule,
    options: &TuneOptions,
    iterations: usize,
    seed_of: impl Fn(usize) -> u64,
) -> Result<TuneState, TuneError> {
    for _ in 0..iterations {
        let seed = seed_of(state.k + 1);
        state = match options.mode {
            TuneMode::Alg1 => tune_step(&state, oracle, schedule, options, seed)?,
            TuneMode::Ce => tune_step_ce(&state, oracle, schedule, options, seed)?,
        };
    }
    Ok(state)
}
