//! Discrete algebraic Riccati equation
//! `P = Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("(A, B) is not stabilizable or the iteration diverged")]
    NotStabilizable,
    #[error("dimension mismatch")]
    DimensionMismatch,
}

pub const RESIDUAL_TOL: f64 = 1e-10;

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Right-hand side of the Riccati map at `p`.
pub fn riccati_map(q: &DMatrix<f64>, r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let pa = p * a;
    let k = s.cholesky()?.solve(&(b.transpose() * &pa));
    Some(sym(&(q + a.transpose() * &pa - pa.transpose() * b * k)))
}

/// Max-norm of `map(P) - P` relative to `max(1, |P|)`.
pub fn dare_residual(q: &DMatrix<f64>, r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_map(q, r, a, b, p) {
        Some(m) => (m - p).amax() / p.amax().max(1.0),
        None => f64::INFINITY,
    }
}

/// Optimal gain `K = (R + B'PB)^{-1} B'PA`, input `u = -K x`.
pub fn lqr_gain(r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    Some(s.cholesky()?.solve(&(b.transpose() * p * a)))
}

fn check(q: &DMatrix<f64>, r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), RiccatiError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(RiccatiError::DimensionMismatch);
    }
    Ok(())
}

fn closed_loop_stable(r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> bool {
    lqr_gain(r, a, b, p).is_some_and(|k| {
        let cl = a - b * k;
        cl.complex_eigenvalues().iter().all(|z| z.norm() < 1.0)
    })
}

/// Structure-preserving doubling, refined by a few fixed-point sweeps.
pub fn riccati_terminal(q_ul: &DMatrix<f64>, r_ul: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    check(q_ul, r_ul, a, b)?;
    let n = a.nrows();
    let r_inv = r_ul.clone().cholesky().ok_or(RiccatiError::NotStabilizable)?.inverse();
    let mut ak = a.clone();
    let mut gk = sym(&(b * r_inv * b.transpose()));
    let mut hk = sym(q_ul);
    for _ in 0..100 {
        let w = DMatrix::identity(n, n) + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu.solve(&ak).ok_or(RiccatiError::NotStabilizable)?;
        let w_inv_g = lu.solve(&gk).ok_or(RiccatiError::NotStabilizable)?;
        let h_next = sym(&(&hk + ak.transpose() * &hk * &w_inv_a));
        let g_next = sym(&(&gk + &ak * w_inv_g * ak.transpose()));
        ak = &ak * w_inv_a;
        let delta = (&h_next - &hk).amax() / h_next.amax().max(1.0);
        hk = h_next;
        gk = g_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(RiccatiError::NotStabilizable);
        }
        if delta < 1e-15 || ak.amax() < 1e-300 {
            break;
        }
    }
    let mut p = hk;
    for _ in 0..5 {
        if dare_residual(q_ul, r_ul, a, b, &p) <= 1e-14 {
            break;
        }
        p = riccati_map(q_ul, r_ul, a, b, &p).ok_or(RiccatiError::NotStabilizable)?;
    }
    if dare_residual(q_ul, r_ul, a, b, &p) > RESIDUAL_TOL || !closed_loop_stable(r_ul, a, b, &p) {
        return Err(RiccatiError::NotStabilizable);
    }
    Ok(p)
}

/// Value iteration from `P = Q`.
pub fn riccati_value_iteration(
    q_ul: &DMatrix<f64>,
    r_ul: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    max_iter: usize,
) -> Result<DMatrix<f64>, RiccatiError> {
    check(q_ul, r_ul, a, b)?;
    let mut p = sym(q_ul);
    for _ in 0..max_iter {
        let next = riccati_map(q_ul, r_ul, a, b, &p).ok_or(RiccatiError::NotStabilizable)?;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e15 {
            return Err(RiccatiError::NotStabilizable);
        }
        let done = (&next - &p).amax() <= 1e-14 * next.amax().max(1.0);
        p = next;
        if done {
            break;
        }
    }
    if dare_residual(q_ul, r_ul, a, b, &p) > RESIDUAL_TOL {
        return Err(RiccatiError::NotStabilizable);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{gen_random_linear, RandomLinearSpec};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn memoryless_system() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = riccati_terminal(&q, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert!((p - q).amax() < 1e-14);
    }

    #[test]
    fn scalar_root() {
        // p = 1 + 0.25 p - (0.5 p)^2 / (1 + p)  <=>  p^2 - 0.25 p - 1 = 0 after clearing.
        let p = riccati_terminal(&scalar(1.0), &scalar(1.0), &scalar(0.5), &scalar(1.0)).unwrap()[(0, 0)];
        let f = |p: f64| 1.0 + 0.25 * p - (0.5 * p).powi(2) / (1.0 + p) - p;
        let (mut lo, mut hi) = (1.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((p - lo).abs() < 1e-12, "{p} vs {lo}");
        assert!(f(p).abs() < 1e-12);
    }

    #[test]
    fn doubling_agrees_with_value_iteration() {
        for seed in 0..10 {
            let g = gen_random_linear(seed, &RandomLinearSpec::default());
            let q = DMatrix::identity(4, 4) * 10.0;
            let r = DMatrix::identity(1, 1);
            let sda = riccati_terminal(&q, &r, &g.a, &g.b).unwrap();
            let vi = riccati_value_iteration(&q, &r, &g.a, &g.b, 200_000).unwrap();
            assert!(dare_residual(&q, &r, &g.a, &g.b, &sda) <= RESIDUAL_TOL);
            assert!((&sda - &vi).amax() <= 1e-9 * sda.amax().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn uncontrollable_unstable_mode() {
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        assert_eq!(riccati_terminal(&q, &scalar(1.0), &a, &b), Err(RiccatiError::NotStabilizable));
        assert_eq!(riccati_value_iteration(&q, &scalar(1.0), &a, &b, 10_000), Err(RiccatiError::NotStabilizable));
    }
}
