mod oracles;

use mpc_tune::scenario::{bound_from_norms, k_max, scenario_condition, ScenarioConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracles::exact_lhs_all;

fn exact_lhs(k: usize, m: usize, epsilon: f64, n_p: usize, n_theta: usize) -> f64 {
    exact_lhs_all(m, epsilon, n_p, n_theta)[k]
}

#[test]
fn matches_exact_rational_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for m in 1..=60 {
        for _ in 0..3 {
            let epsilon = rng.random_range(0.001..0.6);
            let n_p = rng.random_range(1..=12);
            let n_theta = rng.random_range(1..=12);
            let exact = exact_lhs_all(m, epsilon, n_p, n_theta);
            for (k, &want) in exact.iter().enumerate() {
                let got = scenario_condition(k, m, epsilon, n_p, n_theta).unwrap().lhs;
                if want == 0.0 {
                    assert!(got < 1e-300);
                    continue;
                }
                worst = worst.max((got - want).abs() / want);
            }
        }
    }
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

#[test]
fn reference_instance() {
    let got = scenario_condition(3, 40, 0.02, 5, 8).unwrap().lhs;
    let want = exact_lhs(3, 40, 0.02, 5, 8);
    assert!((got - want).abs() <= 1e-10 * want);
}

#[test]
fn k_max_matches_brute_force_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let norms: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..5.0)).collect();
    for &(epsilon, beta, n_p, n_theta) in &[(0.3, 1e-10, 3, 4), (0.25, 1e-6, 10, 2), (0.5, 1e-10, 41, 20), (0.2, 1e-3, 1, 1)] {
        let cfg = ScenarioConfig { m: 200, epsilon, beta, n_p, n_theta, seed: 0 };
        let r = bound_from_norms(&cfg, norms.clone()).unwrap();
        let exact = exact_lhs_all(200, epsilon, n_p, n_theta);
        let brute = (0..200).filter(|&k| exact[k] <= beta).max().unwrap();
        assert_eq!(r.k_max, brute, "epsilon {epsilon}");
        let mut sorted = norms.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(r.bound, sorted[brute]);
    }
}

#[test]
fn bound_is_monotone_in_epsilon_and_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let norms: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    let result = bound_from_norms(&ScenarioConfig { m: 400, epsilon: 0.2, beta: 1e-10, n_p: 6, n_theta: 6, seed: 0 }, norms).unwrap();
    let mut prev = f64::INFINITY;
    for i in 1..40 {
        let eps = 0.15 + 0.01 * i as f64;
        let (_, b) = result.at_epsilon(eps, 6, 6).unwrap();
        assert!(b <= prev);
        prev = b;
    }
    let mut prev_k = usize::MAX;
    for e in [-2, -4, -6, -8, -10, -12] {
        let k = k_max(400, 0.2, 10f64.powi(e), 6, 6).unwrap();
        assert!(k <= prev_k);
        prev_k = k;
    }
}

proptest! {
    #[test]
    fn lhs_nondecreasing_in_k(m in 1usize..150, epsilon in 0.001f64..0.9, n_p in 1usize..30, n_theta in 1usize..30) {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=m {
            let v = scenario_condition(k, m, epsilon, n_p, n_theta).unwrap().log_lhs;
            prop_assert!(v >= prev - 1e-12 * prev.abs().max(1.0));
            prev = v;
        }
    }
}
