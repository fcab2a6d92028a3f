//! Small dense helpers shared by the blocks: half-vectorization and
//! symmetric-matrix utilities.
//!
//! `vech` stacks the lower triangle column by column, so a 2x2 matrix maps to
//! `(a11, a21, a22)`. Off-diagonal entries appear once.

use nalgebra::{DMatrix, DVector};

pub fn vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Iterator over the `(row, col)` pairs in vech order.
pub fn vech_indices(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |j| (j..d).map(move |i| (i, j)))
}

pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    vech_indices(m.nrows()).map(|(i, j)| m[(i, j)]).collect()
}

pub fn unvech(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), vech_len(d));
    let mut m = DMatrix::zeros(d, d);
    for (k, (i, j)) in vech_indices(d).enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

/// Position of `(i, j)` (either order) inside the vech vector.
pub fn vech_pos(i: usize, j: usize, d: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    // columns before c contribute d + (d-1) + ... + (d-c+1) entries
    c * d - c * c.saturating_sub(1) / 2 + r - c
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && m.iter().all(|x| x.is_finite()) && m.clone().cholesky().is_some()
}

/// Log determinant of a symmetric positive-definite matrix via Cholesky.
pub fn ln_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

pub fn inverse_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some(symmetrize(&inv))
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
