//! Shape-matrix hygiene shared by the set operations.

use crate::Matrix;

/// Eigenvalues below this are clamped to zero during PSD repair.
pub const PSD_CLAMP: f64 = -1e-10;

/// `(S + Sᵀ) / 2`.
pub fn symmetrize(s: &Matrix) -> Matrix {
    (s + s.transpose()) * 0.5
}

/// Symmetrize and clamp slightly negative eigenvalues to zero.
///
/// The eigendecomposition is skipped when a Cholesky factorisation of
/// `S + 1e-10·I` succeeds, which already certifies every eigenvalue is above
/// the clamp threshold.
pub fn psd_repair(s: &Matrix) -> Matrix {
    let sym = symmetrize(s);
    let n = sym.nrows();
    if n == 0 {
        return sym;
    }
    let shifted = &sym + Matrix::identity(n, n) * (-PSD_CLAMP);
    if shifted.cholesky().is_some() {
        return sym;
    }
    let eig = sym.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    let mut changed = false;
    for v in vals.iter_mut() {
        if *v < PSD_CLAMP {
            *v = 0.0;
            changed = true;
        }
    }
    if !changed {
        return sym;
    }
    let q = &eig.eigenvectors;
    symmetrize(&(q * Matrix::from_diagonal(&vals) * q.transpose()))
}

/// Quadratic form `hᵀ S h` for a row vector `h` given as a slice.
pub fn quad_form_row(h: &[f64], s: &Matrix) -> f64 {
    let n = h.len();
    let mut acc = 0.0;
    for i in 0..n {
        if h[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..n {
            row += s[(i, j)] * h[j];
        }
        acc += h[i] * row;
    }
    acc
}
