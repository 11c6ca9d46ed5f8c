use std::sync::Arc;

use mpc_tune::closed_loop::{ClosedLoop, InitialState, NoiseLaw, Plant, UpperLevelCost};
use mpc_tune::model::{AffineParamModel, Polytope};
use mpc_tune::mpc::{DesignParameter, MpcConfig};
use mpc_tune::sysid::{NoiseSpec, RlsState};
use mpc_tune::tuner::{mean, tune_step, tune_step_ce, EpisodeOracle, StepSchedule, TuneMode, TuneOptions, TuneState};
use nalgebra::{DMatrix, DVector};

/// Double integrator-like plant with a badly wrong nominal input gain.
fn setup(with_model_block: bool) -> (ClosedLoop, TuneState, TuneOptions) {
    let theta = DVector::from_row_slice(&[1.0, 0.1, 0.0, 1.0, 0.0, 0.1]);
    let theta0 = DVector::from_row_slice(&[1.0, 0.1, 0.0, 1.0, 0.0, 0.25]);
    let noise = NoiseSpec::new(0.05, (&theta0 - &theta).norm() * 1.01, 0.05).unwrap();
    let plant = Plant {
        model: Arc::new(AffineParamModel::full_linear(2, 1)),
        theta_true: theta.clone(),
        noise,
        noise_law: NoiseLaw::Uniform,
        noise_input: DMatrix::identity(2, 2),
        exogenous: Vec::new(),
        x_constraint: Polytope::free(2),
        u_constraint: Polytope::symmetric_box(&[2.0]),
        horizon: 25,
        x0_law: InitialState::Ball { center: DVector::zeros(2), radius: 1.0 },
    };
    let mpc = MpcConfig::new(4, Polytope::free(2), Polytope::symmetric_box(&[2.0]), 1.0, 1.0);
    let cost = UpperLevelCost::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, 0.0);
    let cl = ClosedLoop { plant, mpc, cost };
    let q = DMatrix::identity(2, 2);
    let param = DesignParameter::from_costs(&q, &(DMatrix::identity(1, 1) * 0.1), &q, with_model_block.then(|| theta0.clone()))
        .unwrap()
        .with_box(10.0, Some(&theta0), 1.0);
    let rls = RlsState::new(theta0, 1.0).unwrap();
    let options = TuneOptions {
        mode: if with_model_block { TuneMode::Alg1 } else { TuneMode::Ce },
        identify: true,
        noise,
        delta: 0.1,
        pe: Some((25, 3.0)),
        eval_seeds: (1000..1016).collect(),
        eval_every: 0,
        theta_true: Some(theta),
    };
    let state = TuneState::new(param, rls, &noise, 0.1).unwrap();
    (cl, state, options)
}

fn run(with_model_block: bool) -> (f64, f64, TuneState) {
    let (cl, mut state, options) = setup(with_model_block);
    let schedule = StepSchedule::robbins_monro(0.02, 0.6).unwrap().with_clip(5.0).unwrap();
    let before = mean(&cl.evaluate(&state.param, state.theta_model(), &options.eval_seeds).unwrap());
    for k in 1..=25u64 {
        state = if with_model_block {
            tune_step(&state, &cl, &schedule, &options, k).unwrap()
        } else {
            tune_step_ce(&state, &cl, &schedule, &options, k).unwrap()
        };
        assert!(state.check_feasibility(), "iteration {k} left the feasible set");
        assert!(state.param.in_box(1e-12) || with_model_block);
    }
    let after = mean(&cl.evaluate(&state.param, state.theta_model(), &options.eval_seeds).unwrap());
    (before, after, state)
}

#[test]
fn joint_tuning_reduces_cost_and_stays_feasible() {
    let (before, after, state) = run(true);
    assert!(after < before, "{before} -> {after}");
    assert_eq!(state.history.len(), 25);
    let err = state.history.last().unwrap().theta_err.unwrap();
    assert!(err < state.history[0].theta_err.unwrap());
}

#[test]
fn certainty_equivalence_reduces_cost() {
    let (before, after, _) = run(false);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn same_seeds_same_history() {
    let (_, _, a) = run(true);
    let (_, _, b) = run(true);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_history_csv(&mut ca).unwrap();
    b.write_history_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
}
