use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Covariance, CovarianceType, GmmModel};
use crate::error::{Error, Result};
use crate::linalg::{self, compensated_sum, log_sum_exp};
use crate::rng::{self, tag};

pub const DEFAULT_REG_FLOOR: f64 = 1e-6;

/// A component whose effective count falls below this fraction of `N` is
/// treated as empty.
const EMPTY_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    RandomPoints,
    #[default]
    FarthestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Absolute log-likelihood change that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub n_restarts: usize,
    pub seed: u64,
    pub reg_floor: f64,
    pub init: InitStrategy,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-6,
            max_iter: 500,
            n_restarts: 4,
            seed: 0,
            reg_floor: DEFAULT_REG_FLOOR,
            init: InitStrategy::FarthestFirst,
        }
    }
}

/// Posterior component memberships `τ[n, k]` with effective counts `N_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub tau: DMatrix<f64>,
    pub counts: Vec<f64>,
}

impl Responsibilities {
    /// Builds responsibilities from an `N x K` matrix whose rows sum to one.
    pub fn from_matrix(tau: DMatrix<f64>) -> Responsibilities {
        let counts = (0..tau.ncols()).map(|k| tau.column(k).sum()).collect();
        Responsibilities { tau, counts }
    }

    /// Hard assignment per row (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.tau.nrows())
            .map(|n| {
                let row = self.tau.row(n);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood of the initial model followed by one entry per M-step.
    pub loglik_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    pub responsibilities: Responsibilities,
}

impl GmmFit {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace has the initial entry")
    }
}

fn check_dims(model: &GmmModel, data: &DMatrix<f64>) -> Result<()> {
    if data.ncols() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            actual: data.ncols(),
        });
    }
    Ok(())
}

/// Per-row log joint `log π_k + log N(x_n; μ_k, Σ_k)` and the row
/// log-likelihood, both shared by the E-step and `log_likelihood`.
fn row_terms(model: &GmmModel, data: &DMatrix<f64>) -> Result<Vec<(Vec<f64>, f64)>> {
    check_dims(model, data)?;
    let dens = model.densities()?;
    let log_w: Vec<f64> = model
        .weights
        .iter()
        .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let rows = linalg::rows_of(data);
    let d = data.ncols();
    Ok(rows
        .par_chunks(d.max(1))
        .take(data.nrows())
        .map(|x| {
            let mut scratch = vec![0.0; d];
            let joint: Vec<f64> = dens
                .iter()
                .zip(&log_w)
                .map(|(den, lw)| lw + den.log_pdf(x, &mut scratch))
                .collect();
            let ll = log_sum_exp(&joint);
            (joint, ll)
        })
        .collect())
}

/// E-step: `τ_n^k = π_k N(x_n; θ_k) / Σ_j π_j N(x_n; θ_j)` and the total
/// log-likelihood, all in log space.
pub fn e_step(model: &GmmModel, data: &DMatrix<f64>) -> Result<(Responsibilities, f64)> {
    let terms = row_terms(model, data)?;
    let k = model.n_components();
    let mut tau = DMatrix::zeros(data.nrows(), k);
    for (n, (joint, ll)) in terms.iter().enumerate() {
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("row {n} has log-likelihood {ll}")));
        }
        for (j, lj) in joint.iter().enumerate() {
            tau[(n, j)] = (lj - ll).exp();
        }
    }
    let loglik = compensated_sum(terms.iter().map(|(_, ll)| *ll));
    Ok((Responsibilities::from_matrix(tau), loglik))
}

/// `Σ_n log Σ_k π_k N(x_n; μ_k, Σ_k)`.
pub fn log_likelihood(model: &GmmModel, data: &DMatrix<f64>) -> Result<f64> {
    let terms = row_terms(model, data)?;
    Ok(compensated_sum(terms.iter().map(|(_, ll)| *ll)))
}

/// M-step: responsibility-weighted means, covariances and weights.
///
/// Diagonal mode keeps only the per-coordinate variances, floored at
/// `reg_floor`. Full mode clamps the eigenvalues of the weighted scatter
/// at `reg_floor`, which is the constrained maximizer, so EM stays monotone.
pub fn m_step(
    data: &DMatrix<f64>,
    resp: &Responsibilities,
    cov_type: CovarianceType,
    reg_floor: f64,
) -> Result<GmmModel> {
    let (n, d) = data.shape();
    if resp.tau.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: resp.tau.nrows(),
        });
    }
    if !(reg_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("reg_floor must be positive, got {reg_floor}")));
    }
    let k = resp.tau.ncols();
    let rows = linalg::rows_of(data);
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    let total: f64 = resp.counts.iter().sum();
    for c in 0..k {
        let nk = resp.counts[c];
        if !(nk >= EMPTY_FRACTION * n as f64) || nk <= 0.0 {
            return Err(Error::EmptyComponent { k: c, count: nk });
        }
        let mut mean = DVector::zeros(d);
        for (i, x) in rows.chunks_exact(d).enumerate() {
            let w = resp.tau[(i, c)];
            for j in 0..d {
                mean[j] += w * x[j];
            }
        }
        mean /= nk;
        let cov = match cov_type {
            CovarianceType::Diagonal => {
                let mut var: DVector<f64> = DVector::zeros(d);
                for (i, x) in rows.chunks_exact(d).enumerate() {
                    let w = resp.tau[(i, c)];
                    for j in 0..d {
                        let r = x[j] - mean[j];
                        var[j] += w * r * r;
                    }
                }
                Covariance::Diagonal(var.map(|v| (v / nk).max(reg_floor)))
            }
            CovarianceType::Full => {
                let mut s = DMatrix::zeros(d, d);
                let mut r = vec![0.0; d];
                for (i, x) in rows.chunks_exact(d).enumerate() {
                    let w = resp.tau[(i, c)];
                    for j in 0..d {
                        r[j] = x[j] - mean[j];
                    }
                    for a in 0..d {
                        let wa = w * r[a];
                        for b in a..d {
                            s[(a, b)] += wa * r[b];
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..a {
                        s[(a, b)] = s[(b, a)];
                    }
                }
                s /= nk;
                Covariance::Full(linalg::clamp_eigenvalues(&s, reg_floor))
            }
        };
        weights.push(nk / total);
        means.push(mean);
        covariances.push(cov);
    }
    Ok(GmmModel {
        weights,
        means,
        covariances,
    })
}

/// Initial model: means from data points, covariances equal to the data's
/// per-coordinate variance, uniform weights.
pub fn init_params(
    data: &DMatrix<f64>,
    k: usize,
    strategy: InitStrategy,
    cov_type: CovarianceType,
    seed: u64,
) -> Result<GmmModel> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("need N >= K, got N = {n}, K = {k}")));
    }
    let mut r = rng::stream(seed, tag::GMM_INIT, 0);
    let picks: Vec<usize> = match strategy {
        InitStrategy::RandomPoints => rand::seq::index::sample(&mut r, n, k).into_vec(),
        InitStrategy::FarthestFirst => {
            let rows = linalg::rows_of(data);
            let first = rand::Rng::random_range(&mut r, 0..n);
            let mut picks = vec![first];
            let dist = |a: usize, b: usize| -> f64 {
                rows[a * d..(a + 1) * d]
                    .iter()
                    .zip(&rows[b * d..(b + 1) * d])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum()
            };
            let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, first)).collect();
            while picks.len() < k {
                let mut best = 0;
                for i in 1..n {
                    if nearest[i] > nearest[best] {
                        best = i;
                    }
                }
                picks.push(best);
                for (i, v) in nearest.iter_mut().enumerate() {
                    *v = v.min(dist(i, best));
                }
            }
            picks
        }
    };
    let mean = data.row_mean();
    let mut var: DVector<f64> = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            var[j] += (data[(i, j)] - mean[j]).powi(2);
        }
    }
    let var = var.map(|v| (v / n as f64).max(DEFAULT_REG_FLOOR));
    let cov = match cov_type {
        CovarianceType::Diagonal => Covariance::Diagonal(var),
        CovarianceType::Full => Covariance::Full(DMatrix::from_diagonal(&var)),
    };
    Ok(GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: picks.iter().map(|i| data.row(*i).transpose()).collect(),
        covariances: vec![cov; k],
    })
}

/// Runs EM from a given model until the log-likelihood changes by less than
/// `opts.tol` or `opts.max_iter` M-steps have been taken.
pub fn em_refine(model: GmmModel, data: &DMatrix<f64>, opts: &EmOptions) -> Result<GmmFit> {
    let cov_type = model.cov_type();
    let mut model = model;
    let (mut resp, mut ll) = e_step(&model, data)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let next = m_step(data, &resp, cov_type, opts.reg_floor)?;
        iterations += 1;
        let (r, l) = e_step(&next, data)?;
        model = next;
        resp = r;
        trace.push(l);
        let delta = (l - ll).abs();
        ll = l;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(GmmFit {
        model,
        loglik_trace: trace,
        iterations,
        converged,
        responsibilities: resp,
    })
}

/// Fits a `k`-component mixture with `opts.n_restarts` seeded
/// initializations and keeps the highest final log-likelihood (earliest
/// restart on ties). Restarts that hit an empty component are skipped.
pub fn em_fit(
    data: &DMatrix<f64>,
    k: usize,
    cov_type: CovarianceType,
    opts: &EmOptions,
) -> Result<GmmFit> {
    if opts.n_restarts == 0 {
        return Err(Error::InvalidArgument("n_restarts must be at least 1".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {}", opts.tol)));
    }
    let mut best: Option<GmmFit> = None;
    let mut last_err = None;
    for restart in 0..opts.n_restarts {
        let seed = rng::derive(opts.seed ^ rng::splitmix64(restart as u64), tag::RESTART);
        let attempt = init_params(data, k, opts.init, cov_type, seed)
            .and_then(|init| em_refine(init, data, opts));
        match attempt {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.final_loglik() > b.final_loglik()) {
                    best = Some(fit);
                }
            }
            Err(e @ Error::EmptyComponent { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: f64, var: f64) -> GmmModel {
        GmmModel {
            weights: vec![1.0],
            means: vec![DVector::from_element(1, mean)],
            covariances: vec![Covariance::Diagonal(DVector::from_element(1, var))],
        }
    }

    fn two_1d() -> GmmModel {
        GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)],
            covariances: vec![Covariance::Diagonal(DVector::from_element(1, 1.0)); 2],
        }
    }

    #[test]
    fn e_step_spot_values() {
        let (r, ll) = e_step(&two_1d(), &DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert!((r.tau[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((r.tau[(0, 1)] - 0.5).abs() < 1e-12);
        assert!(ll.is_finite());

        let (r, ll) = e_step(&single(0.0, 1.0), &DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert_eq!(r.tau[(0, 0)], 1.0);
        // −½ log(2π)
        assert!((ll + 0.918939).abs() < 1e-6);
        let l1 = log_likelihood(&single(0.0, 1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((l1 + 1.418939).abs() < 1e-6);
        assert!(e_step(&single(0.0, 1.0), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn log_likelihood_is_additive() {
        let m = two_1d();
        let a = DMatrix::from_column_slice(2, 1, &[0.3, -2.0]);
        let b = DMatrix::from_column_slice(3, 1, &[0.3, -2.0, -2.0]);
        let la = log_likelihood(&m, &a).unwrap();
        let lb = log_likelihood(&m, &b).unwrap();
        let single_pt = log_likelihood(&m, &DMatrix::from_element(1, 1, -2.0)).unwrap();
        assert!((lb - la - single_pt).abs() < 1e-12);
    }

    #[test]
    fn m_step_reductions() {
        let data = DMatrix::from_row_slice(4, 1, &[0.0, 2.0, 10.0, 14.0]);
        let hard = Responsibilities::from_matrix(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        ));
        let m = m_step(&data, &hard, CovarianceType::Diagonal, 1e-6).unwrap();
        assert_eq!(m.means[0][0], 1.0);
        assert_eq!(m.means[1][0], 12.0);

        let uniform = Responsibilities::from_matrix(DMatrix::from_element(4, 2, 0.5));
        let m = m_step(&data, &uniform, CovarianceType::Full, 1e-6).unwrap();
        assert_eq!(m.weights, vec![0.5, 0.5]);
        assert_eq!(m.means[0], m.means[1]);
        assert!((m.means[0][0] - 6.5).abs() < 1e-12);
        let var = [0.0, 2.0, 10.0, 14.0].iter().map(|x: &f64| (x - 6.5).powi(2)).sum::<f64>() / 4.0;
        assert!((m.component_cov(0)[(0, 0)] - var).abs() < 1e-9);

        let same = DMatrix::from_element(5, 3, 2.5);
        let one = Responsibilities::from_matrix(DMatrix::from_element(5, 1, 1.0));
        for ct in [CovarianceType::Diagonal, CovarianceType::Full] {
            let m = m_step(&same, &one, ct, 1e-6).unwrap();
            let c = m.component_cov(0);
            assert!((c - DMatrix::identity(3, 3) * 1e-6).abs().max() < 1e-15);
        }

        let empty = Responsibilities::from_matrix(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        ));
        assert!(matches!(
            m_step(&data, &empty, CovarianceType::Diagonal, 1e-6),
            Err(Error::EmptyComponent { k: 1, .. })
        ));
    }

    #[test]
    fn init_variants() {
        let mut rows = Vec::new();
        for i in 0..20 {
            rows.extend([i as f64 * 0.01, 0.0]);
        }
        for i in 0..20 {
            rows.extend([50.0 + i as f64 * 0.01, 1.0]);
        }
        let data = DMatrix::from_row_slice(40, 2, &rows);
        for seed in 0..10 {
            let m = init_params(&data, 2, InitStrategy::FarthestFirst, CovarianceType::Diagonal, seed).unwrap();
            let sides: Vec<bool> = m.means.iter().map(|v| v[0] > 25.0).collect();
            assert_ne!(sides[0], sides[1], "both seeds landed in one cluster");
        }
        let a = init_params(&data, 3, InitStrategy::RandomPoints, CovarianceType::Full, 5).unwrap();
        let b = init_params(&data, 3, InitStrategy::RandomPoints, CovarianceType::Full, 5).unwrap();
        assert_eq!(a, b);
        let one = init_params(&data, 1, InitStrategy::FarthestFirst, CovarianceType::Diagonal, 2).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        assert!((0..40).any(|i| data.row(i).transpose() == one.means[0]));
        assert!(init_params(&data, 41, InitStrategy::RandomPoints, CovarianceType::Diagonal, 0).is_err());
    }

    #[test]
    fn single_component_fit_is_the_mle() {
        let data = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 1.0, -1.0, 0.5, 3.0, 3.0]);
        let fit = em_fit(&data, 1, CovarianceType::Diagonal, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
        let mean = data.row_mean();
        for j in 0..2 {
            assert!((fit.model.means[0][j] - mean[j]).abs() < 1e-12);
            let var = data.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / 5.0;
            assert!((fit.model.component_cov(0)[(j, j)] - var).abs() < 1e-12);
        }
        assert_eq!(fit.model.weights, vec![1.0]);
    }
}
