//! Class proportions, bias relative to the training distribution, and the
//! Fréchet distance between Gaussians computed on raw coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg;
use crate::localization::{AttributeAssignment, ComponentNaming};
use crate::population::{bayes_classify, Attribute, Population};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Largest deviation from `1/K` for a corrected distribution to count as
/// equalized.
pub const EQUALIZED_TOLERANCE: f64 = 0.03;

pub const CSV_HEADER: &str = "attribute,class,train,gen_uncorrected,gen_corrected,delta,ratio";

/// Bayes-classified class counts of `samples` for one attribute.
pub fn class_counts(pop: &Population, attribute: Attribute, samples: &DMatrix<f64>) -> Result<Vec<usize>> {
    let mut counts = vec![0; attribute.class_count()];
    if samples.nrows() == 0 {
        return Ok(counts);
    }
    if samples.ncols() != pop.dimension() {
        return Err(Error::DimensionMismatch {
            expected: pop.dimension(),
            actual: samples.ncols(),
        });
    }
    let mut x = vec![0.0; samples.ncols()];
    for i in 0..samples.nrows() {
        for (j, v) in x.iter_mut().enumerate() {
            *v = samples[(i, j)];
        }
        counts[bayes_classify(pop, attribute, &x)?.class] += 1;
    }
    Ok(counts)
}

/// Counts divided by their total (all zeros for an empty histogram).
pub fn proportions(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|c| *c as f64 / total as f64).collect()
}

/// `gen / train`, infinite when the training proportion is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio(pub f64);

impl Ratio {
    fn of(gen: f64, train: f64) -> Ratio {
        if train == 0.0 {
            Ratio(f64::INFINITY)
        } else {
            Ratio(gen / train)
        }
    }

    fn render(self) -> String {
        if self.0.is_infinite() {
            "inf".into()
        } else {
            self.0.to_string()
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Ratio, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio(v)),
            Raw::Text(t) if t == "inf" => Ok(Ratio(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad ratio `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_digest: String,
    pub seed: u64,
    /// Derived per-stage seeds.
    pub stage_seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub t_star: usize,
    pub assignment: AttributeAssignment,
    pub naming: Option<ComponentNaming>,
    /// Set when two components decoded to one class; the correction still
    /// runs and class counts are unaffected.
    pub naming_ambiguous: bool,
    pub naming_error: Option<String>,
    pub quotas: Vec<usize>,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub schema_version: u32,
    pub attribute: Attribute,
    pub classes: Vec<String>,
    pub train_props: Vec<f64>,
    pub gen_props_uncorrected: Vec<f64>,
    pub gen_props_corrected: Option<Vec<f64>>,
    pub delta_uncorrected: Vec<f64>,
    pub ratio_uncorrected: Vec<Ratio>,
    pub delta_corrected: Option<Vec<f64>>,
    pub ratio_corrected: Option<Vec<Ratio>>,
    pub equalized_to_uniform: Option<bool>,
    pub counts_uncorrected: Option<Vec<usize>>,
    pub counts_corrected: Option<Vec<usize>>,
    /// Per class: Fréchet distance between generated samples of that class
    /// and the population restricted to it (`None` with fewer than 2 samples).
    pub frechet_uncorrected: Option<Vec<Option<f64>>>,
    pub frechet_corrected: Option<Vec<Option<f64>>>,
    pub localization: Option<LocalizationSummary>,
    pub metadata: RunMetadata,
}

fn check_props(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            actual: v.len(),
        });
    }
    let s: f64 = v.iter().sum();
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "{name} must be a probability vector (sums to {s})"
        )));
    }
    Ok(())
}

/// Per-class deltas `gen − train` and ratios `gen / train` for the
/// uncorrected and, when given, corrected distributions.
pub fn bias_report(
    attribute: Attribute,
    train: &[f64],
    uncorrected: &[f64],
    corrected: Option<&[f64]>,
) -> Result<BiasReport> {
    let k = train.len();
    check_props("train proportions", train, k)?;
    check_props("uncorrected proportions", uncorrected, k)?;
    if let Some(c) = corrected {
        check_props("corrected proportions", c, k)?;
    }
    let delta = |g: &[f64]| g.iter().zip(train).map(|(g, t)| g - t).collect::<Vec<f64>>();
    let ratio = |g: &[f64]| g.iter().zip(train).map(|(g, t)| Ratio::of(*g, *t)).collect::<Vec<_>>();
    let names = attribute.class_names();
    let classes = (0..k)
        .map(|i| names.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string()))
        .collect();
    Ok(BiasReport {
        schema_version: REPORT_SCHEMA_VERSION,
        attribute,
        classes,
        train_props: train.to_vec(),
        gen_props_uncorrected: uncorrected.to_vec(),
        gen_props_corrected: corrected.map(<[f64]>::to_vec),
        delta_uncorrected: delta(uncorrected),
        ratio_uncorrected: ratio(uncorrected),
        delta_corrected: corrected.map(delta),
        ratio_corrected: corrected.map(ratio),
        equalized_to_uniform: corrected.map(|c| {
            c.iter().all(|p| (p - 1.0 / k as f64).abs() <= EQUALIZED_TOLERANCE)
        }),
        counts_uncorrected: None,
        counts_corrected: None,
        frechet_uncorrected: None,
        frechet_corrected: None,
        localization: None,
        metadata: RunMetadata::default(),
    })
}

/// Sample mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

pub fn moments(samples: &DMatrix<f64>) -> Result<MomentSummary> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("moments need at least 2 samples, got {n}")));
    }
    let mean = samples.row_mean().transpose();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = samples.row(i).transpose() - &mean;
        cov += &r * r.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(MomentSummary {
        mean,
        covariance: linalg::symmetrize(&cov),
        n,
    })
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`, with the cross term taken as
/// `tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_gaussian(a: &MomentSummary, b: &MomentSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: a.mean.len(),
            actual: b.mean.len(),
        });
    }
    let root_a = linalg::sqrt_psd(&a.covariance)?;
    // sqrt_psd also rejects a non-PSD second argument
    linalg::sqrt_psd(&b.covariance)?;
    let inner = &root_a * &b.covariance * &root_a;
    let cross = linalg::sqrt_psd(&inner)?.trace();
    let dist = (&a.mean - &b.mean).norm_squared() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if dist < 0.0 {
        if dist > -1e-8 {
            return Ok(0.0);
        }
        return Err(Error::Numerical(format!("negative Fréchet distance {dist:.3e}")));
    }
    Ok(dist)
}

/// Per-class Fréchet distances between the Bayes-classified samples of each
/// class and the population restricted to that class.
pub fn frechet_per_class(
    pop: &Population,
    attribute: Attribute,
    samples: &DMatrix<f64>,
) -> Result<Vec<Option<f64>>> {
    let d = pop.dimension();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); attribute.class_count()];
    let mut x = vec![0.0; d];
    for i in 0..samples.nrows() {
        for (j, v) in x.iter_mut().enumerate() {
            *v = samples[(i, j)];
        }
        buckets[bayes_classify(pop, attribute, &x)?.class].extend_from_slice(&x);
    }
    buckets
        .iter()
        .enumerate()
        .map(|(class, rows)| {
            let n = rows.len() / d;
            let Some((mean, cov)) = pop.class_moments(attribute, class) else {
                return Ok(None);
            };
            if n < 2 {
                return Ok(None);
            }
            let gen = moments(&DMatrix::from_row_slice(n, d, rows))?;
            let reference = MomentSummary {
                mean: DVector::from_vec(mean),
                covariance: cov,
                n: 0,
            };
            frechet_gaussian(&gen, &reference).map(Some)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn report_json(report: &BiasReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_csv(report: &BiasReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, class) in report.classes.iter().enumerate() {
        let corrected = report
            .gen_props_corrected
            .as_ref()
            .map_or_else(String::new, |c| c[i].to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            report.attribute,
            class,
            report.train_props[i],
            report.gen_props_uncorrected[i],
            corrected,
            report.delta_uncorrected[i],
            report.ratio_uncorrected[i].render()
        );
    }
    out
}

/// Writes the report. JSON carries every field; CSV has one row per class
/// with `delta`/`ratio` taken from the uncorrected series.
pub fn emit_report(report: &BiasReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report),
        ReportFormat::Csv => report_csv(report),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON report, rejecting other schema versions.
pub fn read_report(path: &Path) -> Result<BiasReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Parse {
        path: path.into(),
        message: "missing schema_version".into(),
    })?;
    if version != u64::from(REPORT_SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            expected: REPORT_SCHEMA_VERSION,
            found: version as u32,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{build_population, ComponentEntry, LabelEntry, PopulationFile};

    fn gaussian(mean: &[f64], cov: &[f64]) -> MomentSummary {
        let d = mean.len();
        MomentSummary {
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::from_row_slice(d, d, cov),
            n: 0,
        }
    }

    #[test]
    fn frechet_spot_values() {
        let a = gaussian(&[0.0, 1.0], &[1.0, 0.2, 0.2, 2.0]);
        assert!(frechet_gaussian(&a, &a).unwrap().abs() < 1e-12);
        let i0 = gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let im = gaussian(&[3.0, -4.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((frechet_gaussian(&i0, &im).unwrap() - 25.0).abs() < 1e-12);
        let f = frechet_gaussian(&gaussian(&[0.0], &[1.0]), &gaussian(&[1.0], &[4.0])).unwrap();
        assert!((f - 2.0).abs() < 1e-12);
        let bad = gaussian(&[0.0], &[-1.0]);
        assert!(frechet_gaussian(&i0, &gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(frechet_gaussian(&gaussian(&[0.0], &[1.0]), &bad).is_err());
    }

    #[test]
    fn moment_cases() {
        let m = moments(&DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0])).unwrap();
        assert_eq!(m.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(m.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(moments(&DMatrix::zeros(1, 2)).is_err());

        // duplicating every row keeps the mean; the unbiased covariance
        // scales by 2(n − 1)/(2n − 1)
        let data = DMatrix::from_row_slice(3, 1, &[1.0, 4.0, 10.0]);
        let mut doubled = DMatrix::zeros(6, 1);
        for i in 0..3 {
            doubled[(i, 0)] = data[(i, 0)];
            doubled[(i + 3, 0)] = data[(i, 0)];
        }
        let a = moments(&data).unwrap();
        let b = moments(&doubled).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
        let factor = 2.0 * 2.0 / 5.0;
        assert!((b.covariance[(0, 0)] - factor * a.covariance[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn report_arithmetic() {
        let r = bias_report(Attribute::Gender, &[0.5, 0.5], &[0.5, 0.5], None).unwrap();
        assert_eq!(r.delta_uncorrected, vec![0.0, 0.0]);
        assert_eq!(r.ratio_uncorrected, vec![Ratio(1.0), Ratio(1.0)]);

        let r = bias_report(Attribute::Gender, &[0.7, 0.3], &[0.845, 0.155], Some(&[0.5, 0.5])).unwrap();
        assert!((r.delta_uncorrected[0] - 0.145).abs() < 1e-3);
        assert!((r.delta_uncorrected[1] + 0.145).abs() < 1e-3);
        let dc = r.delta_corrected.as_ref().unwrap();
        assert!((dc[0] + 0.2).abs() < 1e-12 && (dc[1] - 0.2).abs() < 1e-12);
        assert_eq!(r.equalized_to_uniform, Some(true));

        let r = bias_report(Attribute::Race, &[0.5, 0.5, 0.0], &[0.4, 0.4, 0.2], None).unwrap();
        assert!(r.ratio_uncorrected[2].0.is_infinite());
        assert!(bias_report(Attribute::Gender, &[0.5, 0.5], &[1.0], None).is_err());
        assert!(bias_report(Attribute::Gender, &[0.5, 0.5], &[0.7, 0.7], None).is_err());
    }

    #[test]
    fn counts_cases() {
        let pop = build_population(&PopulationFile {
            dimension: 1,
            components: (0..2)
                .map(|k| ComponentEntry {
                    mean: vec![if k == 0 { -30.0 } else { 30.0 }],
                    cov_diag: vec![1.0],
                    weight: 0.5,
                    labels: LabelEntry {
                        age: Some(0),
                        gender: Some(k),
                        race: Some(0),
                    },
                })
                .collect(),
        })
        .unwrap();
        let at_zero = DMatrix::from_element(5, 1, -30.0);
        assert_eq!(class_counts(&pop, Attribute::Gender, &at_zero).unwrap(), vec![5, 0]);
        assert_eq!(class_counts(&pop, Attribute::Gender, &DMatrix::zeros(0, 1)).unwrap(), vec![0, 0]);
        assert!(class_counts(&pop, Attribute::Gender, &DMatrix::zeros(2, 3)).is_err());
    }
}
