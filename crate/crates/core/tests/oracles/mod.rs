//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use mpc_tune::sysid::ConfidenceEllipsoid;
use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub fn binomial(n: usize, k: usize) -> BigInt {
    let mut c = BigInt::one();
    for j in 0..k {
        c = c * BigInt::from(n - j) / BigInt::from(j + 1);
    }
    c
}

/// The condition's left-hand side for every `k in 0..=m` in exact arithmetic;
/// `epsilon` is taken as the exact rational value of the double.
pub fn exact_lhs_all(m: usize, epsilon: f64, n_p: usize, n_theta: usize) -> Vec<f64> {
    let e = BigRational::from_float(epsilon).unwrap();
    let one_minus = BigRational::one() - &e;
    let mut pow_e = vec![BigRational::one()];
    let mut pow_1 = vec![BigRational::one()];
    for i in 1..=m {
        pow_e.push(&pow_e[i - 1] * &e);
        pow_1.push(&pow_1[i - 1] * &one_minus);
    }
    let mut prefix = Vec::with_capacity(m + 1);
    let mut acc = BigRational::zero();
    for i in 0..=m {
        acc += BigRational::from_integer(binomial(m, i)) * &pow_e[i] * &pow_1[m - i];
        prefix.push(acc.clone());
    }
    (0..=m)
        .map(|k| {
            let tail = &prefix[(k + n_theta - 1).min(m)];
            (BigRational::from_integer(binomial(k + n_p - 1, k)) * tail).to_f64().unwrap()
        })
        .collect()
}

/// Projection through the dual: bisection on `mu` with
/// `z(mu) = c + (I + mu A / r^2)^{-1} d`, no eigendecomposition.
pub fn dual_bisection(ell: &ConfidenceEllipsoid, point: &DVector<f64>) -> DVector<f64> {
    let r2 = ell.radius * ell.radius;
    if ell.quad_form(point) <= r2 {
        return point.clone();
    }
    let n = ell.dim();
    let d = point - &ell.center;
    let z_of = |mu: f64| {
        let k = DMatrix::identity(n, n) + &ell.shape * (mu / r2);
        k.lu().solve(&d).unwrap()
    };
    let excess = |mu: f64| {
        let z = z_of(mu);
        z.dot(&(&ell.shape * &z)) - r2
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while excess(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    &ell.center + z_of(hi)
}
