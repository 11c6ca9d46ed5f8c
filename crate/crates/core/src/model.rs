//! Feature-map dynamics `f(x, u, theta) = psi(x, u)' theta + phi(x, u)` and
//! polytopic sets.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

use crate::qp::{qp_solve, QpError, QpProblem};

/// Dynamics that are linear in the parameter.
pub trait FeatureModel: Send + Sync + Debug {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_theta(&self) -> usize;

    /// Regressor `psi(x, u)`, `n_theta x n_x`.
    fn features(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// Offset `phi(x, u)`.
    fn offset(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `df/dx`, `n_x x n_x`.
    fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;

    /// `df/du`, `n_x x n_u`.
    fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;

    /// True when `df/dx` and `df/du` do not depend on `(x, u)`.
    fn is_affine(&self) -> bool {
        false
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.features(x, u).tr_mul(theta) + self.offset(x, u)
    }
}

/// `f = (A0 + sum theta_k A_k) x + (B0 + sum theta_k B_k) u`.
#[derive(Debug, Clone)]
pub struct AffineParamModel {
    pub a0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub a_basis: Vec<DMatrix<f64>>,
    pub b_basis: Vec<DMatrix<f64>>,
}

impl AffineParamModel {
    pub fn new(a0: DMatrix<f64>, b0: DMatrix<f64>, a_basis: Vec<DMatrix<f64>>, b_basis: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(a_basis.len(), b_basis.len(), "one (A_k, B_k) pair per parameter");
        Self { a0, b0, a_basis, b_basis }
    }

    /// `theta` = row-major entries of `A` followed by row-major entries of `B`.
    pub fn full_linear(n_x: usize, n_u: usize) -> Self {
        let mut a_basis = Vec::new();
        let mut b_basis = Vec::new();
        for i in 0..n_x {
            for j in 0..n_x {
                let mut e = DMatrix::zeros(n_x, n_x);
                e[(i, j)] = 1.0;
                a_basis.push(e);
                b_basis.push(DMatrix::zeros(n_x, n_u));
            }
        }
        for i in 0..n_x {
            for j in 0..n_u {
                let mut e = DMatrix::zeros(n_x, n_u);
                e[(i, j)] = 1.0;
                a_basis.push(DMatrix::zeros(n_x, n_x));
                b_basis.push(e);
            }
        }
        Self::new(DMatrix::zeros(n_x, n_x), DMatrix::zeros(n_x, n_u), a_basis, b_basis)
    }

    pub fn a_of(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a0.clone();
        for (k, ak) in self.a_basis.iter().enumerate() {
            let t = theta[k];
            if t != 0.0 {
                a.zip_apply(ak, |v, e| *v += t * e);
            }
        }
        a
    }

    pub fn b_of(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut b = self.b0.clone();
        for (k, bk) in self.b_basis.iter().enumerate() {
            let t = theta[k];
            if t != 0.0 {
                b.zip_apply(bk, |v, e| *v += t * e);
            }
        }
        b
    }
}

impl FeatureModel for AffineParamModel {
    fn n_x(&self) -> usize {
        self.a0.nrows()
    }

    fn n_u(&self) -> usize {
        self.b0.ncols()
    }

    fn n_theta(&self) -> usize {
        self.a_basis.len()
    }

    fn features(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.n_theta(), self.n_x());
        for k in 0..self.n_theta() {
            let row = &self.a_basis[k] * x + &self.b_basis[k] * u;
            psi.set_row(k, &row.transpose());
        }
        psi
    }

    fn offset(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a0 * x + &self.b0 * u
    }

    fn jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.a_of(theta)
    }

    fn jac_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.b_of(theta)
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.a_of(theta) * x + self.b_of(theta) * u
    }
}

/// `{z : h z <= b}`. Boxes keep their bounds for clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    bounds: Option<(DVector<f64>, DVector<f64>)>,
}

impl Polytope {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(h.nrows(), b.len());
        Self { h, b, bounds: None }
    }

    /// Whole space (no rows).
    pub fn free(n: usize) -> Self {
        Self { h: DMatrix::zeros(0, n), b: DVector::zeros(0), bounds: None }
    }

    /// `lo <= z <= hi`; infinite bounds produce no row.
    pub fn from_box(lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = lo.len();
        assert_eq!(hi.len(), n);
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            assert!(lo[i] <= hi[i], "empty box");
            if hi[i].is_finite() {
                rows.push((i, 1.0, hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, -lo[i]));
            }
        }
        let mut h = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, &(i, s, v)) in rows.iter().enumerate() {
            h[(r, i)] = s;
            b[r] = v;
        }
        Self { h, b, bounds: Some((lo.clone(), hi.clone())) }
    }

    pub fn symmetric_box(half_widths: &[f64]) -> Self {
        let hi = DVector::from_column_slice(half_widths);
        Self::from_box(&(-&hi), &hi)
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn box_bounds(&self) -> Option<&(DVector<f64>, DVector<f64>)> {
        self.bounds.as_ref()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        (&self.h * z - &self.b).iter().all(|&v| v <= tol)
    }

    /// Euclidean projection: clamping for boxes, a QP otherwise.
    pub fn project(&self, z: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        if let Some((lo, hi)) = &self.bounds {
            return Ok(z.zip_zip_map(lo, hi, |v, l, h| v.clamp(l, h)));
        }
        if self.n_rows() == 0 || self.contains(z, 0.0) {
            return Ok(z.clone());
        }
        Ok(qp_solve(&QpProblem::projection(z, &self.h, &self.b), None)?.x)
    }
}
