//! Attribute localization: closed-form Gaussian KL divergence, mixture
//! separability, assignment of fitted mixtures to attributes under the
//! age > gender > race expressivity hierarchy, and naming of components by
//! the class their samples decode to.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_from, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gmm::{gmm_sample, GmmFit, GmmModel};
use crate::linalg;
use crate::population::{bayes_classify, Attribute, Population};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianComponent> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        Ok(GaussianComponent { mean, cov })
    }

    pub fn from_model(model: &GmmModel, k: usize) -> GaussianComponent {
        GaussianComponent {
            mean: model.means[k].clone(),
            cov: model.component_cov(k),
        }
    }
}

fn kl_directed(p: &GaussianComponent, q: &GaussianComponent) -> Result<f64> {
    let d = p.mean.len();
    if q.mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: q.mean.len(),
        });
    }
    let cp = linalg::cholesky(&p.cov, "KL argument p")?;
    let cq = linalg::cholesky(&q.cov, "KL argument q")?;
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&cq.solve(&diff));
    let log_ratio = linalg::chol_log_det(&cq) - linalg::chol_log_det(&cp);
    let kl = 0.5 * (trace + maha - d as f64 + log_ratio);
    // rounding can leave a tiny negative residue at p = q
    Ok(if kl < 0.0 && kl > -1e-10 { 0.0 } else { kl })
}

/// `KL(p ‖ q)` between Gaussians, or `½(KL(p‖q) + KL(q‖p))` when
/// `symmetric` is set.
pub fn kl_gaussian(p: &GaussianComponent, q: &GaussianComponent, symmetric: bool) -> Result<f64> {
    let forward = kl_directed(p, q)?;
    if !symmetric {
        return Ok(forward);
    }
    Ok(0.5 * (forward + kl_directed(q, p)?))
}

/// Directed KL between every ordered pair of components; `table[i][j]` is
/// `KL(P_i ‖ P_j)`.
pub fn pairwise_kl(model: &GmmModel) -> Result<Vec<Vec<f64>>> {
    let comps: Vec<GaussianComponent> = (0..model.n_components())
        .map(|k| GaussianComponent::from_model(model, k))
        .collect();
    comps
        .iter()
        .map(|p| comps.iter().map(|q| kl_directed(p, q)).collect())
        .collect()
}

/// Minimum pairwise symmetric KL over the mixture's components.
pub fn separability(model: &GmmModel) -> Result<f64> {
    let k = model.n_components();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "separability needs at least 2 components, got {k}"
        )));
    }
    let comps: Vec<GaussianComponent> = (0..k).map(|c| GaussianComponent::from_model(model, c)).collect();
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            best = best.min(kl_gaussian(&comps[i], &comps[j], true)?);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedAttribute {
    pub attribute: Attribute,
    pub fit_index: usize,
    pub n_components: usize,
    pub separability: f64,
    /// `kl_table[i][j] = KL(P_i ‖ P_j)` for the assigned fit.
    pub kl_table: Vec<Vec<f64>>,
    /// Class index per component, filled in by [`name_components`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAssignment {
    /// One entry per attribute, in hierarchy order.
    pub entries: Vec<AssignedAttribute>,
}

impl AttributeAssignment {
    pub fn fit_for(&self, attribute: Attribute) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.attribute == attribute)
            .map(|e| e.fit_index)
    }

    pub fn entry_mut(&mut self, attribute: Attribute) -> Option<&mut AssignedAttribute> {
        self.entries.iter_mut().find(|e| e.attribute == attribute)
    }
}

/// The assignment rule on precomputed `(K, separability)` pairs.
///
/// Fits whose K matches exactly one attribute's class count are assigned
/// structurally. Fits sharing a K value with several attributes are ranked
/// by separability (descending, ties by list index) and handed out in
/// hierarchy order. Returns the fit index per hierarchy entry.
pub fn assign_from_scores(
    ks: &[usize],
    separabilities: &[f64],
    hierarchy: &[Attribute],
) -> Result<Vec<usize>> {
    if ks.len() != separabilities.len() {
        return Err(Error::InvalidArgument("one separability per fit is required".into()));
    }
    if ks.len() != hierarchy.len() {
        return Err(Error::Assignment(format!(
            "{} fits for {} attributes",
            ks.len(),
            hierarchy.len()
        )));
    }
    let mut expected: Vec<usize> = hierarchy.iter().map(|a| a.class_count()).collect();
    let mut given = ks.to_vec();
    expected.sort_unstable();
    given.sort_unstable();
    if expected != given {
        return Err(Error::Assignment(format!(
            "fit component counts {ks:?} do not match class counts {expected:?}"
        )));
    }
    if let Some(i) = separabilities.iter().position(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("fit {i} has NaN separability")));
    }
    let mut out = vec![usize::MAX; hierarchy.len()];
    let mut seen = Vec::new();
    for &k in ks {
        if seen.contains(&k) {
            continue;
        }
        seen.push(k);
        let slots: Vec<usize> = (0..hierarchy.len())
            .filter(|&i| hierarchy[i].class_count() == k)
            .collect();
        let mut fits: Vec<usize> = (0..ks.len()).filter(|&i| ks[i] == k).collect();
        // stable sort keeps list order among equal scores
        fits.sort_by(|a, b| separabilities[*b].total_cmp(&separabilities[*a]));
        for (slot, fit) in slots.into_iter().zip(fits) {
            out[slot] = fit;
        }
    }
    Ok(out)
}

/// Maps fitted mixtures onto the attributes of `hierarchy` (most
/// expressive first).
pub fn assign_attributes(fits: &[GmmFit], hierarchy: &[Attribute]) -> Result<AttributeAssignment> {
    let ks: Vec<usize> = fits.iter().map(|f| f.model.n_components()).collect();
    let seps = fits
        .iter()
        .map(|f| {
            if f.model.n_components() < 2 {
                Ok(0.0)
            } else {
                separability(&f.model)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let chosen = assign_from_scores(&ks, &seps, hierarchy)?;
    let entries = hierarchy
        .iter()
        .zip(chosen)
        .map(|(attr, i)| {
            Ok(AssignedAttribute {
                attribute: *attr,
                fit_index: i,
                n_components: ks[i],
                separability: seps[i],
                kl_table: pairwise_kl(&fits[i].model)?,
                component_classes: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributeAssignment { entries })
}

/// Which class each mixture component decodes to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentNaming {
    pub classes: Vec<usize>,
    /// `counts[k][c]`: probes from component `k` classified as class `c`.
    pub counts: Vec<Vec<usize>>,
    pub majority_fraction: Vec<f64>,
}

/// Probes every component: draws `n_probe` latents at `t_star` from it,
/// completes the reverse chain with `den`, classifies the outputs with the
/// population's Bayes classifier and names the component by majority
/// class. Two components claiming one class is an error.
#[allow(clippy::too_many_arguments)]
pub fn name_components<D: Denoiser + ?Sized>(
    fit: &GmmFit,
    den: &D,
    sched: &NoiseSchedule,
    pop: &Population,
    attribute: Attribute,
    t_star: usize,
    n_probe: usize,
    seed: u64,
) -> Result<ComponentNaming> {
    let classes = attribute.class_count();
    let k = fit.model.n_components();
    if k != classes {
        return Err(Error::InvalidArgument(format!(
            "{attribute} has {classes} classes but the fit has {k} components"
        )));
    }
    if n_probe == 0 {
        return Err(Error::InvalidArgument("n_probe must be at least 1".into()));
    }
    let mut counts = Vec::with_capacity(k);
    for c in 0..k {
        let probe_seed = rng::derive(seed ^ rng::splitmix64(c as u64), tag::PROBE);
        let latents = gmm_sample(&fit.model, c, n_probe, probe_seed)?;
        let out = denoise_from(den, sched, &latents, t_star, 0, probe_seed, &[])?;
        let mut hist = vec![0usize; classes];
        for i in 0..n_probe {
            let x: Vec<f64> = out.points.row(i).iter().copied().collect();
            hist[bayes_classify(pop, attribute, &x)?.class] += 1;
        }
        counts.push(hist);
    }
    let mut names = Vec::with_capacity(k);
    let mut fractions = Vec::with_capacity(k);
    for hist in &counts {
        let mut best = 0;
        for c in 1..classes {
            if hist[c] > hist[best] {
                best = c;
            }
        }
        names.push(best);
        fractions.push(hist[best] as f64 / n_probe as f64);
    }
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::AmbiguousNaming(format!(
            "{attribute}: components decode to classes {names:?} (probe counts {counts:?})"
        )));
    }
    Ok(ComponentNaming {
        classes: names,
        counts,
        majority_fraction: fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::Covariance;

    fn g1(mean: f64, var: f64) -> GaussianComponent {
        GaussianComponent::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn model_1d(means: &[f64]) -> GmmModel {
        GmmModel {
            weights: vec![1.0 / means.len() as f64; means.len()],
            means: means.iter().map(|m| DVector::from_element(1, *m)).collect(),
            covariances: vec![Covariance::Diagonal(DVector::from_element(1, 1.0)); means.len()],
        }
    }

    #[test]
    fn kl_spot_values() {
        assert_eq!(kl_gaussian(&g1(0.3, 2.0), &g1(0.3, 2.0), false).unwrap(), 0.0);
        assert!((kl_gaussian(&g1(0.0, 1.0), &g1(1.0, 1.0), false).unwrap() - 0.5).abs() < 1e-12);
        let p = GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let q = GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2) * 2.0).unwrap();
        // ½(ln 4 − 2 + 1)
        assert!((kl_gaussian(&p, &q, false).unwrap() - 0.193147).abs() < 1e-6);
        let sym = kl_gaussian(&p, &q, true).unwrap();
        let back = kl_gaussian(&q, &p, false).unwrap();
        assert!((sym - 0.5 * (0.193147 + back)).abs() < 1e-6);
        let singular = GaussianComponent::new(DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        assert!(kl_gaussian(&p, &singular, false).is_err());
    }

    #[test]
    fn separability_cases() {
        assert_eq!(separability(&model_1d(&[2.0, 2.0])).unwrap(), 0.0);
        assert!((separability(&model_1d(&[0.0, 6.0])).unwrap() - 18.0).abs() < 1e-12);
        assert!(separability(&model_1d(&[0.0, 6.0, 100.0])).unwrap() >= 18.0 - 1e-12);
        assert!(separability(&model_1d(&[0.0])).is_err());
    }

    #[test]
    fn assignment_rule() {
        use Attribute::*;
        let h = [Age, Gender, Race];
        assert_eq!(assign_from_scores(&[2, 2, 3], &[10.0, 4.0, 1.5], &h).unwrap(), vec![0, 1, 2]);
        assert_eq!(assign_from_scores(&[2, 3, 2], &[4.0, 1.5, 10.0], &h).unwrap(), vec![2, 0, 1]);
        assert_eq!(assign_from_scores(&[2, 2, 3], &[5.0, 5.0, 1.0], &h).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            assign_from_scores(&[2, 2], &[1.0, 2.0], &[Age, Gender, Race]),
            Err(Error::Assignment(_))
        ));
        assert!(matches!(
            assign_from_scores(&[2, 2, 2], &[1.0, 2.0, 3.0], &h),
            Err(Error::Assignment(_))
        ));
    }
}
