use mpc_tune::sysid::{rls_absorb, ConfidenceEllipsoid, NoiseSpec, RlsState};
use mpc_tune::testkit::random_vector;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Regressors of `x+ = A x + B u` with `theta` = row-major `(A, B)`.
fn linear_regressor(x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let (nx, nu) = (x.len(), u.len());
    let n_theta = nx * nx + nx * nu;
    let mut psi = DMatrix::zeros(n_theta, nx);
    for i in 0..nx {
        for j in 0..nx {
            psi[(i * nx + j, i)] = x[j];
        }
        for j in 0..nu {
            psi[(nx * nx + i * nu + j, i)] = u[j];
        }
    }
    psi
}

struct Batch {
    features: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
}

fn simulate(rng: &mut ChaCha8Rng, theta: &DVector<f64>, nx: usize, nu: usize, t_len: usize, bound: f64) -> Batch {
    let mut x = random_vector(rng, nx);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..t_len {
        let u = DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0));
        let psi = linear_regressor(&x, &u);
        let w = DVector::from_fn(nx, |_, _| rng.random_range(-bound..=bound));
        let next = psi.tr_mul(theta) + w;
        features.push(psi);
        targets.push(next.clone());
        // Keep the state bounded whatever the system.
        x = if next.norm() > 3.0 { random_vector(rng, nx) } else { next };
    }
    Batch { features, targets }
}

fn stable_theta(rng: &mut ChaCha8Rng, nx: usize, nu: usize) -> DVector<f64> {
    DVector::from_fn(nx * nx + nx * nu, |_, _| rng.random_range(-0.4..0.4))
}

#[test]
fn estimate_solves_regularized_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = stable_theta(&mut rng, 3, 1);
    let theta0 = &theta + random_vector(&mut rng, 12) * 0.1;
    let lambda = 0.5;
    let mut state = RlsState::new(theta0.clone(), lambda).unwrap();
    let mut all = Batch { features: Vec::new(), targets: Vec::new() };
    for _ in 0..5 {
        let b = simulate(&mut rng, &theta, 3, 1, 20, 0.1);
        state = rls_absorb(&state, &b.features, &b.targets).unwrap();
        all.features.extend(b.features);
        all.targets.extend(b.targets);
    }
    let mut a = DMatrix::identity(12, 12) * lambda;
    let mut rhs = &theta0 * lambda;
    for (psi, z) in all.features.iter().zip(&all.targets) {
        a += psi * psi.transpose();
        rhs += psi * z;
    }
    let direct = a.lu().solve(&rhs).unwrap();
    assert!((&state.theta_hat - &direct).amax() < 1e-10);

    let single = rls_absorb(&RlsState::new(theta0, lambda).unwrap(), &all.features, &all.targets).unwrap();
    assert!((&single.theta_hat - &state.theta_hat).amax() < 1e-10);
    assert_eq!(state.k, 5);
    assert_eq!(single.total_samples, 100);

    let best = state.objective(&state.theta_hat, &all.features, &all.targets);
    for _ in 0..20 {
        let other = &state.theta_hat + random_vector(&mut rng, 12) * 1e-3;
        assert!(state.objective(&other, &all.features, &all.targets) >= best);
    }
}

#[test]
fn error_shrinks_with_excitation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = stable_theta(&mut rng, 4, 1);
    let mut state = RlsState::new(&theta + random_vector(&mut rng, 20) * 0.2, 1.0).unwrap();
    let mut errors = Vec::new();
    for _ in 0..40 {
        let b = simulate(&mut rng, &theta, 4, 1, 50, 0.1);
        state = rls_absorb(&state, &b.features, &b.targets).unwrap();
        errors.push((&state.theta_hat - &theta).norm() / theta.norm());
    }
    assert!(errors[39] < 0.5 * errors[4], "{errors:?}");
    // Estimator covariance is sigma_w^2 A^{-1} up to the prior.
    let sigma_w = 0.1 / 3f64.sqrt();
    let spread = sigma_w * state.a.clone().try_inverse().unwrap().trace().sqrt();
    let err = (&state.theta_hat - &theta).norm();
    assert!(err <= 3.0 * spread, "error {err:e}, spread {spread:e}");
}

#[test]
fn ellipsoid_covers_truth() {
    let delta = 0.1;
    let mut covered = 0;
    let runs = 100;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + run);
        let theta = stable_theta(&mut rng, 2, 1);
        let offset = random_vector(&mut rng, 6);
        let theta0 = &theta + offset.normalize() * 0.3 * theta.norm();
        let noise = NoiseSpec::new(0.1, 0.3 * theta.norm() * (1.0 + 1e-12), 0.1).unwrap();
        let mut state = RlsState::new(theta0, 1.0).unwrap();
        let mut always = ConfidenceEllipsoid::from_state(&state, &noise, delta, None).unwrap().membership(&theta).unwrap();
        for _ in 0..15 {
            let b = simulate(&mut rng, &theta, 2, 1, 20, 0.1);
            state = rls_absorb(&state, &b.features, &b.targets).unwrap();
            let ell = ConfidenceEllipsoid::from_state(&state, &noise, delta, None).unwrap();
            always &= ell.membership(&theta).unwrap();
        }
        covered += always as usize;
    }
    assert!(covered as f64 >= 0.85 * runs as f64, "covered {covered}/{runs}");
}

proptest! {
    #[test]
    fn information_matrix_grows(seed in any::<u64>(), lambda in 1e-6f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = stable_theta(&mut rng, 2, 1);
        let mut state = RlsState::new(DVector::zeros(6), lambda).unwrap();
        let mut log_det = state.log_det_a().unwrap();
        for _ in 0..4 {
            let b = simulate(&mut rng, &theta, 2, 1, 5, 0.1);
            state = rls_absorb(&state, &b.features, &b.targets).unwrap();
            state.check_invariants().unwrap();
            prop_assert!(state.min_eigenvalue() >= lambda * (1.0 - 1e-9));
            let next = state.log_det_a().unwrap();
            prop_assert!(next >= log_det - 1e-9);
            log_det = next;
        }
        let restored = state.checkpoint().restore().unwrap();
        prop_assert_eq!(restored.theta_hat, state.theta_hat);
    }
}
