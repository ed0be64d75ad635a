use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceType {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(m) => m.diagonal(),
        }
    }
}

/// Mixture parameters `(π_k, μ_k, Σ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<Covariance>,
}

/// Per-component log-density evaluator.
pub(crate) enum Density {
    Diagonal {
        log_const: f64,
        mean: Vec<f64>,
        inv_var: Vec<f64>,
    },
    Full {
        log_const: f64,
        mean: Vec<f64>,
        // lower Cholesky factor, row-major
        chol: Vec<f64>,
    },
}

impl Density {
    pub(crate) fn log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        match self {
            Density::Diagonal {
                log_const,
                mean,
                inv_var,
            } => {
                let mut q = 0.0;
                for j in 0..x.len() {
                    let r = x[j] - mean[j];
                    q += r * r * inv_var[j];
                }
                log_const - 0.5 * q
            }
            Density::Full {
                log_const,
                mean,
                chol,
            } => {
                // forward-solve L y = x − μ
                let d = x.len();
                let mut q = 0.0;
                for i in 0..d {
                    let mut v = x[i] - mean[i];
                    for j in 0..i {
                        v -= chol[i * d + j] * scratch[j];
                    }
                    let y = v / chol[i * d + i];
                    scratch[i] = y;
                    q += y * y;
                }
                log_const - 0.5 * q
            }
        }
    }
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dimension(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn cov_type(&self) -> CovarianceType {
        match self.covariances.first() {
            Some(Covariance::Full(_)) => CovarianceType::Full,
            _ => CovarianceType::Diagonal,
        }
    }

    pub fn component_cov(&self, k: usize) -> DMatrix<f64> {
        self.covariances[k].to_matrix()
    }

    pub(crate) fn densities(&self) -> Result<Vec<Density>> {
        let d = self.dimension();
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(mean, cov)| match cov {
                Covariance::Diagonal(v) => {
                    if v.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
                        return Err(Error::NotPositiveDefinite("diagonal covariance".into()));
                    }
                    let log_det: f64 = v.iter().map(|c| c.ln()).sum();
                    Ok(Density::Diagonal {
                        log_const: -0.5 * (d as f64 * LN_2PI + log_det),
                        mean: mean.iter().copied().collect(),
                        inv_var: v.iter().map(|c| 1.0 / c).collect(),
                    })
                }
                Covariance::Full(m) => {
                    let chol = linalg::cholesky(m, "mixture covariance")?;
                    let log_det = linalg::chol_log_det(&chol);
                    let l = chol.l();
                    let mut rows = Vec::with_capacity(d * d);
                    for i in 0..d {
                        rows.extend(l.row(i).iter());
                    }
                    Ok(Density::Full {
                        log_const: -0.5 * (d as f64 * LN_2PI + log_det),
                        mean: mean.iter().copied().collect(),
                        chol: rows,
                    })
                }
            })
            .collect()
    }

    /// Checks the weight simplex, shapes, and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_components();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidArgument("inconsistent mixture component counts".into()));
        }
        let d = self.dimension();
        for (m, c) in self.means.iter().zip(&self.covariances) {
            let cd = match c {
                Covariance::Diagonal(v) => v.len(),
                Covariance::Full(m) => m.nrows(),
            };
            if m.len() != d || cd != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.len().min(cd),
                });
            }
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument("mixture weight outside [0, 1]".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {s}")));
        }
        self.densities().map(|_| ())
    }
}

/// Draws `n` points from component `k`; row `i` uses stream `(seed, i)`.
pub fn gmm_sample(model: &GmmModel, component: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if component >= model.n_components() {
        return Err(Error::InvalidArgument(format!(
            "component {component} out of range for {} components",
            model.n_components()
        )));
    }
    let d = model.dimension();
    let mean = &model.means[component];
    let factor = match &model.covariances[component] {
        Covariance::Diagonal(v) => DMatrix::from_diagonal(&v.map(f64::sqrt)),
        Covariance::Full(m) => linalg::cholesky(m, "mixture covariance")?.l(),
    };
    let mut rows = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, tag::GMM_SAMPLE, i as u64);
        rng::fill_normal(&mut r, &mut z);
        let x = mean + &factor * DVector::from_column_slice(&z);
        rows.extend(x.iter());
    }
    Ok(DMatrix::from_row_slice(n, d, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(cov: Covariance) -> GmmModel {
        GmmModel {
            weights: vec![1.0],
            means: vec![DVector::from_column_slice(&[1.0, -2.0])],
            covariances: vec![cov],
        }
    }

    #[test]
    fn diagonal_and_full_densities_agree() {
        let diag = model(Covariance::Diagonal(DVector::from_column_slice(&[0.5, 2.0])));
        let full = model(Covariance::Full(DMatrix::from_diagonal(&DVector::from_column_slice(&[
            0.5, 2.0,
        ]))));
        let mut s = [0.0; 2];
        let x = [0.3, 0.1];
        let a = diag.densities().unwrap()[0].log_pdf(&x, &mut s);
        let b = full.densities().unwrap()[0].log_pdf(&x, &mut s);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sample_moments_and_degenerate_component() {
        let m = model(Covariance::Full(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])));
        let n = 100_000;
        let x = gmm_sample(&m, 0, n, 4).unwrap();
        for j in 0..2 {
            let mean = x.column(j).mean();
            let se = (m.component_cov(0)[(j, j)] / n as f64).sqrt();
            assert!((mean - m.means[0][j]).abs() < 4.0 * se);
        }
        assert_eq!(x, gmm_sample(&m, 0, n, 4).unwrap());
        assert!(gmm_sample(&m, 1, 3, 4).is_err());

        let tiny = model(Covariance::Diagonal(DVector::from_element(2, 1e-6)));
        let y = gmm_sample(&tiny, 0, 100, 1).unwrap();
        for i in 0..100 {
            assert!((y[(i, 0)] - 1.0).abs() < 1e-2 && (y[(i, 1)] + 2.0).abs() < 1e-2);
        }
    }
}
