//! Bias-corrected sampling: fit a mixture on reverse-process latents at
//! `t★`, then inject equal numbers of latents drawn from each component and
//! finish the reverse chain with the unmodified denoiser.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_from, Denoiser, NoiseSchedule, SampleBatch};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, gmm_sample, m_step, Covariance, CovarianceType, EmOptions, GmmFit, GmmModel};
use crate::population::{bayes_classify, Attribute, Population};
use crate::rng::{self, tag};

pub const DEFAULT_T_STAR: usize = 350;

/// Covariance of the injected latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionCov {
    /// The fitted component covariance.
    #[default]
    Fitted,
    /// `(1 − ᾱ_{t★}) I` around the component mean.
    IsotropicResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionPlan {
    pub t_star: usize,
    pub fit: GmmFit,
    pub quotas: Vec<usize>,
    pub injection_cov: InjectionCov,
}

impl CorrectionPlan {
    /// Plan with equal quotas summing to `n`.
    pub fn equal(t_star: usize, fit: GmmFit, n: usize, injection_cov: InjectionCov) -> CorrectionPlan {
        let quotas = make_quotas(n, fit.model.n_components());
        CorrectionPlan {
            t_star,
            fit,
            quotas,
            injection_cov,
        }
    }

    pub fn total(&self) -> usize {
        self.quotas.iter().sum()
    }
}

/// Splits `n` into `k` quotas differing by at most one, larger first.
pub fn make_quotas(n: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let (base, extra) = (n / k, n % k);
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// States at noise level `t_star` of `n` reverse trajectories started from
/// the prior. With the same seed these are exactly the latents
/// `sample_reverse` records at `t_star`.
pub fn calibration_latents<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    t_star: usize,
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    sched.check_step(t_star)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n_calib must be at least 1".into()));
    }
    let d = den.dimension();
    let mut rows = Vec::with_capacity(n * d);
    let mut x = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, tag::PRIOR, i as u64);
        rng::fill_normal(&mut r, &mut x);
        rows.extend_from_slice(&x);
    }
    let start = DMatrix::from_row_slice(n, d, &rows);
    let steps = sched.steps();
    if t_star == steps {
        return Ok(start);
    }
    Ok(denoise_from(den, sched, &start, steps, t_star, seed, &[])?.points)
}

fn check_calibration_size(n_calib: usize, k: usize) -> Result<()> {
    if n_calib < 10 * k {
        return Err(Error::InvalidArgument(format!(
            "n_calib = {n_calib} is below 10 x K = {}",
            10 * k
        )));
    }
    Ok(())
}

/// Fits a `k`-component mixture to calibration latents at `t_star`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    t_star: usize,
    n_calib: usize,
    k: usize,
    cov_type: CovarianceType,
    opts: &EmOptions,
    seed: u64,
) -> Result<GmmFit> {
    check_calibration_size(n_calib, k)?;
    let latents = calibration_latents(den, sched, t_star, n_calib, seed)?;
    em_fit(&latents, k, cov_type, opts)
}

/// Calibration latents plus one fit per requested component count.
#[derive(Debug, Clone)]
pub struct AttributeCalibration {
    pub latents: DMatrix<f64>,
    pub fits: Vec<GmmFit>,
}

/// Fits one mixture per entry of `ks` on the same calibration latents.
///
/// Fits run on deflated latents, fewest components first (ties in list
/// order), so the result does not depend on how `ks` is ordered beyond
/// that. After each fit the working latents are restricted to the
/// orthogonal complement of its centred component means, so later fits only
/// see directions the earlier ones did not explain. Each returned model is re-expressed on
/// the original latents by one M-step with the deflated fit's
/// responsibilities, so all fits share one coordinate frame. `fits[i]`
/// belongs to `ks[i]`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_attributes<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    t_star: usize,
    n_calib: usize,
    ks: &[usize],
    cov_type: CovarianceType,
    opts: &EmOptions,
    seed: u64,
) -> Result<AttributeCalibration> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    check_calibration_size(n_calib, kmax)?;
    let latents = calibration_latents(den, sched, t_star, n_calib, seed)?;
    let mut order: Vec<usize> = (0..ks.len()).collect();
    order.sort_by_key(|&i| (ks[i], i));

    let mut working = latents.clone();
    let mut fits: Vec<Option<GmmFit>> = vec![None; ks.len()];
    for (stage, &i) in order.iter().enumerate() {
        let stage_opts = EmOptions {
            seed: if stage == 0 { opts.seed } else { rng::derive(opts.seed, stage as u64) },
            ..*opts
        };
        let fit = em_fit(&working, ks[i], cov_type, &stage_opts)?;
        if stage + 1 < order.len() {
            working = deflate(&working, &fit.model)?;
        }
        let model = if stage == 0 {
            fit.model.clone()
        } else {
            m_step(&latents, &fit.responsibilities, cov_type, opts.reg_floor)?
        };
        fits[i] = Some(GmmFit { model, ..fit });
    }
    Ok(AttributeCalibration {
        latents,
        fits: fits.into_iter().map(|f| f.expect("every fit visited")).collect(),
    })
}

/// Re-expresses `x` in an orthonormal basis of the complement of the span
/// of the model's weighted-centred component means. The basis comes from
/// Gram-Schmidt over the coordinate axes, so axes orthogonal to that span
/// are kept as they are.
fn deflate(x: &DMatrix<f64>, model: &GmmModel) -> Result<DMatrix<f64>> {
    let (k, d) = (model.n_components(), model.dimension());
    let centre: DVector<f64> = model
        .weights
        .iter()
        .zip(&model.means)
        .fold(DVector::zeros(d), |acc, (w, m)| acc + m * *w);
    let dirs = DMatrix::from_fn(d, k, |j, c| model.means[c][j] - centre[j]);
    let svd = dirs.svd(true, false);
    let top = svd.singular_values.max().max(f64::MIN_POSITIVE);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD of component means failed".into()))?;
    let mut basis: Vec<DVector<f64>> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > 1e-9 * top)
        .map(|c| u.column(c).into_owned())
        .collect();
    let spanned = basis.len();
    if spanned >= d {
        return Err(Error::InvalidArgument(format!(
            "component means span all {d} latent dimensions; nothing left for further fits"
        )));
    }
    let mut kept = Vec::with_capacity(d - spanned);
    for j in 0..d {
        let mut v = DVector::zeros(d);
        v[j] = 1.0;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            v /= norm;
            basis.push(v.clone());
            kept.push(v);
        }
        if kept.len() == d - spanned {
            break;
        }
    }
    let v = DMatrix::from_columns(&kept);
    Ok(x * v)
}

/// Corrected outputs tagged by the component their latent was drawn from.
/// `batch.recorded_latents[t_star]` holds the injected latents.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedBatch {
    pub batch: SampleBatch,
    pub source_component: Vec<usize>,
}

/// Draws `quota_k` latents at `t★` from every component `k` and completes
/// the reverse chain from `t★` with `den`.
pub fn corrected_sample<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    plan: &CorrectionPlan,
    seed: u64,
) -> Result<CorrectedBatch> {
    sched.check_step(plan.t_star)?;
    let model = &plan.fit.model;
    let k = model.n_components();
    if plan.quotas.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} quotas for a {k}-component plan",
            plan.quotas.len()
        )));
    }
    if plan.total() == 0 {
        return Err(Error::InvalidArgument("plan requests no samples".into()));
    }
    if model.dimension() != den.dimension() {
        return Err(Error::DimensionMismatch {
            expected: den.dimension(),
            actual: model.dimension(),
        });
    }
    let injection = match plan.injection_cov {
        InjectionCov::Fitted => model.clone(),
        InjectionCov::IsotropicResidual => {
            let var = 1.0 - sched.alpha_bar(plan.t_star);
            GmmModel {
                covariances: vec![Covariance::Diagonal(DVector::from_element(model.dimension(), var)); k],
                ..model.clone()
            }
        }
    };
    let d = den.dimension();
    let mut rows = Vec::with_capacity(plan.total() * d);
    let mut source = Vec::with_capacity(plan.total());
    for (c, &q) in plan.quotas.iter().enumerate() {
        if q == 0 {
            continue;
        }
        let draws = gmm_sample(&injection, c, q, rng::derive(seed ^ rng::splitmix64(c as u64), tag::CORRECT))?;
        for i in 0..q {
            rows.extend(draws.row(i).iter());
        }
        source.extend(std::iter::repeat_n(c, q));
    }
    let start = DMatrix::from_row_slice(source.len(), d, &rows);
    let batch = denoise_from(den, sched, &start, plan.t_star, 0, seed, &[plan.t_star])?;
    Ok(CorrectedBatch {
        batch,
        source_component: source,
    })
}

/// Fraction of outputs whose Bayes class equals the class named for their
/// source component.
pub fn purity(
    pop: &Population,
    attribute: Attribute,
    corrected: &CorrectedBatch,
    component_classes: &[usize],
) -> Result<f64> {
    let points = &corrected.batch.points;
    let n = points.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &c) in corrected.source_component.iter().enumerate() {
        let x: Vec<f64> = points.row(i).iter().copied().collect();
        if bayes_classify(pop, attribute, &x)?.class == component_classes[c] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
