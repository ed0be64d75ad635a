#![allow(dead_code)]

use fairdiff::population::{build_population, ComponentEntry, LabelEntry, Population, PopulationFile};
use fairdiff::rng;
use nalgebra::{DMatrix, DVector};

pub fn labels(age: usize, gender: usize, race: usize) -> LabelEntry {
    LabelEntry {
        age: Some(age),
        gender: Some(gender),
        race: Some(race),
    }
}

/// Two gender classes at `±sep/2` along coordinate 0, unit variance.
pub fn gender_pair(weights: [f64; 2], sep: f64, d: usize) -> Population {
    build_population(&PopulationFile {
        dimension: d,
        components: (0..2)
            .map(|g| {
                let mut mean = vec![0.0; d];
                mean[0] = (g as f64 - 0.5) * sep;
                ComponentEntry {
                    mean,
                    cov_diag: vec![1.0; d],
                    weight: weights[g],
                    labels: labels(0, g, 0),
                }
            })
            .collect(),
    })
    .unwrap()
}

pub fn single_gaussian(mean: &[f64], var: &[f64]) -> Population {
    build_population(&PopulationFile {
        dimension: mean.len(),
        components: vec![ComponentEntry {
            mean: mean.to_vec(),
            cov_diag: var.to_vec(),
            weight: 1.0,
            labels: labels(0, 0, 0),
        }],
    })
    .unwrap()
}

/// Mean and unbiased covariance, written out independently of the crate.
pub fn sample_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[(i, j)];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Random symmetric positive-definite matrix `A Aᵀ + c I`.
pub fn random_spd(d: usize, seed: u64, index: u64, ridge: f64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 0xabcd, index);
    let mut a = vec![0.0; d * d];
    rng::fill_normal(&mut r, &mut a);
    let a = DMatrix::from_row_slice(d, d, &a);
    &a * a.transpose() * 0.5 + DMatrix::identity(d, d) * ridge
}

pub fn random_vector(d: usize, seed: u64, index: u64, scale: f64) -> DVector<f64> {
    let mut r = rng::stream(seed, 0xbcde, index);
    let mut v = vec![0.0; d];
    rng::fill_normal(&mut r, &mut v);
    DVector::from_vec(v) * scale
}

/// `n` draws from `N(mean, cov)` via an explicit Cholesky factor.
pub fn mvn_draws(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("spd").l();
    let mut out = DMatrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, 0xcdef, i as u64);
        rng::fill_normal(&mut r, &mut z);
        let x = mean + &l * DVector::from_column_slice(&z);
        out.set_row(i, &x.transpose());
    }
    out
}

/// `log N(x; mean, cov)` by explicit inverse and determinant.
pub fn log_normal_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let inv = cov.clone().try_inverse().expect("invertible");
    let r = x - mean;
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}
