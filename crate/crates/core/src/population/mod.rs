//! The labeled Gaussian-mixture population that stands in for a face
//! dataset, exact sampling from it, and its Bayes-optimal attribute
//! classifier.

mod presets;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, LN_2PI};
use crate::rng::{self, StreamRng};

pub use presets::{Preset, PresetParams, Separations};

/// Floor applied to every covariance diagonal entry.
pub const COV_FLOOR: f64 = 1e-6;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Age,
    Gender,
    Race,
}

impl Attribute {
    /// Hierarchy order: most expressive first.
    pub const ALL: [Attribute; 3] = [Attribute::Age, Attribute::Gender, Attribute::Race];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn class_count(self) -> usize {
        match self {
            Attribute::Age | Attribute::Gender => 2,
            Attribute::Race => 3,
        }
    }

    /// Nominal class names; the synthetic classes carry no real semantics.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Attribute::Age => &["young", "old"],
            Attribute::Gender => &["male", "female"],
            Attribute::Race => &["white", "black", "other"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Gender => "gender",
            Attribute::Race => "race",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age" => Ok(Attribute::Age),
            "gender" => Ok(Attribute::Gender),
            "race" => Ok(Attribute::Race),
            other => Err(Error::InvalidArgument(format!("unknown attribute `{other}`"))),
        }
    }
}

/// One class index per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub age: usize,
    pub gender: usize,
    pub race: usize,
}

impl Labels {
    pub fn new(age: usize, gender: usize, race: usize) -> Self {
        Labels { age, gender, race }
    }

    pub fn get(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Age => self.age,
            Attribute::Gender => self.gender,
            Attribute::Race => self.race,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub weight: f64,
    pub labels: Labels,
}

impl ComponentSpec {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), ci) in x.iter().zip(&self.mean).zip(&self.cov_diag) {
            let r = xi - mi;
            acc += LN_2PI + ci.ln() + r * r / ci;
        }
        -0.5 * acc
    }
}

/// A validated labeled Gaussian mixture with diagonal component covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    dimension: usize,
    components: Vec<ComponentSpec>,
}

/// A batch of labeled draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub points: DMatrix<f64>,
    pub labels: Vec<Labels>,
    pub source_component: Vec<usize>,
}

/// On-disk description of a population (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFile {
    pub dimension: usize,
    pub components: Vec<ComponentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub weight: f64,
    pub labels: LabelEntry,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gender: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub race: Option<usize>,
}

/// Validates a population description.
///
/// Weights summing to within 1e-9 of one are renormalized; anything further
/// off is rejected. Covariance entries must be finite and non-negative and
/// are floored at [`COV_FLOOR`].
pub fn build_population(spec: &PopulationFile) -> Result<Population> {
    let d = spec.dimension;
    if d == 0 {
        return Err(Error::Population("dimension must be at least 1".into()));
    }
    if spec.components.is_empty() {
        return Err(Error::Population("at least one component is required".into()));
    }
    let mut components = Vec::with_capacity(spec.components.len());
    for (k, entry) in spec.components.iter().enumerate() {
        if entry.mean.len() != d {
            return Err(Error::Population(format!(
                "components[{k}].mean has length {}, expected {d}",
                entry.mean.len()
            )));
        }
        if entry.cov_diag.len() != d {
            return Err(Error::Population(format!(
                "components[{k}].cov_diag has length {}, expected {d}",
                entry.cov_diag.len()
            )));
        }
        if entry.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Population(format!("components[{k}].mean is not finite")));
        }
        if let Some(bad) = entry.cov_diag.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "components[{k}].cov_diag contains {bad}"
            )));
        }
        if !(0.0..=1.0).contains(&entry.weight) {
            return Err(Error::Population(format!(
                "components[{k}].weight {} is outside [0, 1]",
                entry.weight
            )));
        }
        let label = |attr: Attribute, v: Option<usize>| -> Result<usize> {
            let v = v.ok_or_else(|| {
                Error::Population(format!("components[{k}].labels.{attr} is missing"))
            })?;
            if v >= attr.class_count() {
                return Err(Error::Population(format!(
                    "components[{k}].labels.{attr} = {v} exceeds {} classes",
                    attr.class_count()
                )));
            }
            Ok(v)
        };
        let labels = Labels {
            age: label(Attribute::Age, entry.labels.age)?,
            gender: label(Attribute::Gender, entry.labels.gender)?,
            race: label(Attribute::Race, entry.labels.race)?,
        };
        components.push(ComponentSpec {
            mean: entry.mean.clone(),
            cov_diag: entry.cov_diag.iter().map(|c| c.max(COV_FLOOR)).collect(),
            weight: entry.weight,
            labels,
        });
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        let shown = (total * 1e12).round() / 1e12;
        return Err(Error::Population(format!("weights sum to {shown}")));
    }
    for c in &mut components {
        c.weight /= total;
    }
    Ok(Population {
        dimension: d,
        components,
    })
}

impl Population {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Same geometry and labels with new weights; used by mixture sharpening.
    pub(crate) fn with_weights(&self, weights: &[f64]) -> Population {
        let mut out = self.clone();
        for (c, w) in out.components.iter_mut().zip(weights) {
            c.weight = *w;
        }
        out
    }

    pub fn to_file(&self) -> PopulationFile {
        PopulationFile {
            dimension: self.dimension,
            components: self
                .components
                .iter()
                .map(|c| ComponentEntry {
                    mean: c.mean.clone(),
                    cov_diag: c.cov_diag.clone(),
                    weight: c.weight,
                    labels: LabelEntry {
                        age: Some(c.labels.age),
                        gender: Some(c.labels.gender),
                        race: Some(c.labels.race),
                    },
                })
                .collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Population> {
        let spec: PopulationFile = toml::from_str(text)
            .map_err(|e| Error::Population(format!("population description: {e}")))?;
        build_population(&spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_file()).expect("population file serializes")
    }

    pub fn load(path: &Path) -> Result<Population> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Population::from_toml_str(&text)
    }

    /// Exact per-class sums of component weights for one attribute.
    pub fn attribute_marginal(&self, attribute: Attribute) -> Vec<f64> {
        let mut out = vec![0.0; attribute.class_count()];
        for c in &self.components {
            out[c.labels.get(attribute)] += c.weight;
        }
        out
    }

    /// Marginals for age, gender and race, in that order.
    pub fn attribute_marginals(&self) -> [Vec<f64>; 3] {
        Attribute::ALL.map(|a| self.attribute_marginal(a))
    }

    /// Attributes with at least two classes of nonzero weight, in hierarchy order.
    pub fn active_attributes(&self) -> Vec<Attribute> {
        Attribute::ALL
            .into_iter()
            .filter(|a| self.attribute_marginal(*a).iter().filter(|w| **w > 0.0).count() >= 2)
            .collect()
    }

    /// Draws one point into `out` and returns the chosen component.
    pub(crate) fn draw_point(&self, rng: &mut StreamRng, out: &mut [f64]) -> usize {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut chosen = None;
        for (k, c) in self.components.iter().enumerate() {
            if c.weight <= 0.0 {
                continue;
            }
            acc += c.weight;
            chosen = Some(k);
            if u < acc {
                break;
            }
        }
        let k = chosen.expect("population has positive total weight");
        rng::fill_normal(rng, out);
        let c = &self.components[k];
        for ((o, m), v) in out.iter_mut().zip(&c.mean).zip(&c.cov_diag) {
            *o = m + v.sqrt() * *o;
        }
        k
    }

    /// Class-conditional moments of the population restricted to one class
    /// (mean and full covariance of the class sub-mixture). `None` when the
    /// class has zero weight.
    pub fn class_moments(
        &self,
        attribute: Attribute,
        class: usize,
    ) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let d = self.dimension;
        let members: Vec<&ComponentSpec> = self
            .components
            .iter()
            .filter(|c| c.labels.get(attribute) == class && c.weight > 0.0)
            .collect();
        let total: f64 = members.iter().map(|c| c.weight).sum();
        if total <= 0.0 {
            return None;
        }
        let mut mean = vec![0.0; d];
        for c in &members {
            for (m, v) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight / total * v;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for c in &members {
            let w = c.weight / total;
            for i in 0..d {
                cov[(i, i)] += w * c.cov_diag[i];
                for j in 0..d {
                    cov[(i, j)] += w * (c.mean[i] - mean[i]) * (c.mean[j] - mean[j]);
                }
            }
        }
        Some((mean, cov))
    }
}

/// Draws `n` labeled points; point `i` uses stream `(seed, i)` only.
pub fn sample_population(pop: &Population, n: usize, seed: u64) -> Result<LabeledBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let d = pop.dimension;
    let draws: Vec<(Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, rng::tag::POPULATION, i as u64);
            let mut x = vec![0.0; d];
            let k = pop.draw_point(&mut rng, &mut x);
            (x, k)
        })
        .collect();
    let mut rows = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    for (x, k) in draws {
        rows.extend_from_slice(&x);
        labels.push(pop.components[k].labels);
        source.push(k);
    }
    Ok(LabeledBatch {
        points: DMatrix::from_row_slice(n, d, &rows),
        labels,
        source_component: source,
    })
}

/// Exact class posterior for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Bayes-optimal classification of `x` under the population. Ties in the
/// argmax go to the lowest class index.
pub fn bayes_classify(pop: &Population, attribute: Attribute, x: &[f64]) -> Result<Posterior> {
    if x.len() != pop.dimension {
        return Err(Error::DimensionMismatch {
            expected: pop.dimension,
            actual: x.len(),
        });
    }
    let classes = attribute.class_count();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for c in &pop.components {
        if c.weight > 0.0 {
            per_class[c.labels.get(attribute)].push(c.weight.ln() + c.log_density(x));
        }
    }
    let class_log: Vec<f64> = per_class.iter().map(|v| log_sum_exp(v)).collect();
    let total = log_sum_exp(&class_log);
    let probabilities: Vec<f64> = class_log.iter().map(|l| (l - total).exp()).collect();
    let mut class = 0;
    for (i, p) in probabilities.iter().enumerate() {
        if *p > probabilities[class] {
            class = i;
        }
    }
    Ok(Posterior {
        probabilities,
        class,
    })
}
