//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from row vectors. An empty slice gives a `0 x ncols` matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Option<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Some(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    matrix_to_rows(m).into_iter().flatten().collect()
}

pub fn from_row_major(nrows: usize, ncols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(nrows, ncols, data)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Block-diagonal matrix.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Concatenates vectors.
pub fn vstack(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut o = 0;
    for p in parts {
        out.rows_mut(o, p.len()).copy_from(p);
        o += p.len();
    }
    out
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn matrix_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Uniform sample from the unit Euclidean ball in `R^n`.
pub fn uniform_in_unit_ball<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
            return g * (r / norm);
        }
    }
}

/// Uniform sample from the unit sphere in `R^n`.
pub fn uniform_on_unit_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            return g / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = matrix_to_rows(&m);
        assert_eq!(rows[1], vec![4.0, 5.0, 6.0]);
        assert_eq!(matrix_from_rows(&rows, 3).unwrap(), m);
        assert_eq!(row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matrix_from_rows(&[vec![1.0]], 2).is_none());
        assert_eq!(matrix_from_rows(&[], 4).unwrap().shape(), (0, 4));
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(2, 2, 3.0);
        let m = block_diag(&[&a, &b]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(2, 1)], 3.0);
    }
}
