//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) const JITTER_START: f64 = 1e-6;
pub(crate) const JITTER_MAX: f64 = 1e-2;

/// Cholesky factor of `k + jitter·I`, starting at `start` and escalating ×10 up to 1e-2.
pub(crate) fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    start: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = start;
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Factorization(format!(
                "{}×{} kernel matrix not positive definite with jitter up to {JITTER_MAX:e}",
                k.nrows(),
                k.ncols()
            )));
        }
    }
}

/// Least-norm solution of the symmetric positive semidefinite system `g x = b`.
///
/// Eigenvalues below `1e-10 · λ_max` are treated as zero.
pub(crate) fn psd_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = g.nrows();
    if k == 0 {
        return DVector::zeros(0);
    }
    let eig = g.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let tol = lmax * 1e-10;
    let proj = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        k,
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&p, &l)| if l > tol { p / l } else { 0.0 }),
    );
    &eig.eigenvectors * scaled
}

/// Least-norm least-squares coefficients of `y ≈ x β` via SVD.
pub(crate) fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    if x.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let eps = smax * 1e-12 * (x.nrows().max(x.ncols()) as f64);
    svd.solve(y, eps).expect("both factors were computed")
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}
