//! Small dense numerics shared by the density, KL and Fréchet code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(sum(exp(values)))`, exact for all-`-inf` input (returns `-inf`).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{what} ({}x{})", m.nrows(), m.ncols())))
}

/// `ln det` from a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues clamped below at `floor`,
/// reassembled as `V diag(max(λ, floor)) Vᵀ`.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let lambda = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&lambda) * v.transpose()))
}

/// Principal square root of a symmetric PSD matrix; eigenvalues below zero
/// (rounding residue) are clamped to zero, larger negative ones are an error.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -1e-8 * scale) {
        return Err(Error::Numerical(format!(
            "matrix square root of a non-PSD matrix (eigenvalue {bad:.3e})"
        )));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&root) * v.transpose())))
}

/// Copies a column-major `n x d` matrix into row-major storage.
pub fn rows_of(data: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = data.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend(data.row(i).iter());
    }
    out
}

pub fn from_rows(n: usize, d: usize, rows: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, d, rows)
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, 0.0]) - 0.0).abs() < 1e-300);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let vals = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(vals), 1.0);
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_psd(&m).unwrap();
        assert!((&r * &r - &m).abs().max() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sqrt_psd(&bad).is_err());
    }

    #[test]
    fn clamp_eigenvalues_floors_spectrum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = clamp_eigenvalues(&m, 0.1);
        let eig = c.symmetric_eigen();
        assert!(eig.eigenvalues.min() >= 0.1 - 1e-12);
    }
}
