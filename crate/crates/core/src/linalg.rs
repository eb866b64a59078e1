//! Dense linear-algebra helpers on top of nalgebra: a Cholesky that reports the
//! failing pivot, triangular solves in the `P \ Q` form, and a PSD square root
//! with jitter escalation and spectral fallback.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `L L^T = a`.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of {}x{} matrix", n, a.ncols())));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// `L \ b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(l.nrows(), b.nrows());
    l.solve_lower_triangular(b).expect("triangular factor has a zero diagonal")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has a zero diagonal")
}

/// `L^T \ b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a zero diagonal")
}

pub fn solve_lower_transpose_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a zero diagonal")
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Column-wise sums of squares: `diag(v^T v)`.
pub fn col_sq_norms(v: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(v.ncols(), v.column_iter().map(|c| c.norm_squared()))
}

/// How a covariance square root was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SqrtMethod {
    Cholesky { jitter: f64 },
    Spectral { clipped: usize },
}

/// A matrix `R` with `R R^T = sigma` (up to the reported jitter or clipping).
///
/// Plain Cholesky is tried first, then jitter 1e-12, 1e-10, 1e-8, 1e-6 scaled by
/// the mean diagonal, and finally a symmetric eigendecomposition with negative
/// eigenvalues clipped to zero.
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, SqrtMethod)> {
    let n = sigma.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), SqrtMethod::Cholesky { jitter: 0.0 }));
    }
    if let Ok(l) = cholesky(sigma) {
        return Ok((l, SqrtMethod::Cholesky { jitter: 0.0 }));
    }
    let scale = (sigma.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    for exp in [-12, -10, -8, -6] {
        let jitter = 10f64.powi(exp) * scale;
        let mut s = sigma.clone();
        for i in 0..n {
            s[(i, i)] += jitter;
        }
        if let Ok(l) = cholesky(&s) {
            return Ok((l, SqrtMethod::Cholesky { jitter }));
        }
    }
    let mut s = sigma.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { pivot: 0 });
    }
    let mut clipped = 0;
    let mut r = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let w = if lam > 0.0 {
            lam.sqrt()
        } else {
            clipped += 1;
            0.0
        };
        r.column_mut(j).scale_mut(w);
    }
    Ok((r, SqrtMethod::Spectral { clipped }))
}

/// Smallest eigenvalue of a symmetric matrix (diagnostics only).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}
