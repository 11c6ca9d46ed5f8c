use std::path::Path;

use mpc_tune::closed_loop::rollout;
use mpc_tune_bench::baselines::{dare_parameter, omniscient_bound};
use mpc_tune_bench::config::{ExperimentConfig, Mode};
use mpc_tune_bench::experiment::{build_instances, eval_seeds, initial_param, run_experiment};

fn small() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/random_linear.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    if let mpc_tune_bench::config::PlantConfig::RandomLinear { n_systems, spec } = &mut cfg.plant {
        *n_systems = 2;
        spec.horizon = 20;
    }
    cfg.evaluation.episodes = 6;
    cfg
}

#[test]
fn zero_iterations_leave_the_untrained_cost() {
    let cfg = small();
    let rep = run_experiment(&cfg, &[Mode::Alg1, Mode::Ce], 0).unwrap();
    for s in &rep.systems {
        for r in &s.runs {
            assert_eq!(r.trained.per_episode, s.untrained.per_episode, "{:?}", r.mode);
        }
    }
}

#[test]
fn omniscient_bounds_every_controller_per_episode() {
    let cfg = small();
    let rep = run_experiment(&cfg, &[Mode::Alg1, Mode::Ce], 5).unwrap();
    for s in &rep.systems {
        let mut costs = vec![&s.untrained];
        costs.extend(s.dare.as_ref());
        costs.extend(s.runs.iter().map(|r| &r.trained));
        for c in costs {
            for (o, v) in s.omniscient.per_episode.iter().zip(&c.per_episode) {
                assert!(o <= v, "omniscient {o} above {v}");
            }
        }
        assert!(s.untrained_suboptimality >= 0.0);
    }
}

#[test]
fn riccati_baseline_with_the_true_model() {
    let cfg = small();
    let inst = &build_instances(&cfg).unwrap()[0];
    let theta = &inst.cl.plant.theta_true;
    let p = dare_parameter(&inst.cl, theta).unwrap();
    for seed in eval_seeds(&cfg, 0) {
        let trace = inst.cl.plant.sample_trace(seed);
        let best = omniscient_bound(&inst.cl, &trace).unwrap().cost;
        let r = rollout(&inst.cl, &p, theta, seed, false).unwrap();
        assert!(best <= r.cost);
    }
    let p0 = initial_param(&cfg, inst, true).unwrap();
    assert_eq!(p0.vartheta.as_ref(), Some(&inst.theta_nominal));
}
