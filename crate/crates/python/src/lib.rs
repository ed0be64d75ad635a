//! Python bindings. Vectors and matrices cross the boundary as plain
//! (nested) lists of floats, row-major.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fairdiff::config::ExperimentConfig;
use fairdiff::diffusion::{self, ExactDenoiser, ScheduleKind, SigmaRule};
use fairdiff::gmm::{self, CovarianceType, EmOptions, InitStrategy};
use fairdiff::harness::{self, ConfigSource, Run};
use fairdiff::localization::{self, GaussianComponent};
use fairdiff::metrics::{self, MomentSummary};
use fairdiff::population::{self, Attribute, Preset, PresetParams};
use fairdiff::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn attribute(name: &str) -> PyResult<Attribute> {
    name.parse().map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02, sigma_rule = "sqrt_beta"))]
    fn new(steps: usize, beta_start: f64, beta_end: f64, sigma_rule: &str) -> PyResult<Self> {
        let rule = match sigma_rule {
            "sqrt_beta" => SigmaRule::SqrtBeta,
            "tilde_beta" => SigmaRule::TildeBeta,
            other => return Err(PyValueError::new_err(format!("unknown sigma rule `{other}`"))),
        };
        let inner = diffusion::build_schedule(steps, beta_start, beta_end, ScheduleKind::Linear, rule).map_err(py_err)?;
        Ok(PySchedule { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(py_err)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(py_err)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(py_err)?;
        Ok(self.inner.sigma(t))
    }

    fn forward_diffuse(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        diffusion::forward_diffuse(&x0, t, &self.inner, &eps).map_err(py_err)
    }

    fn reverse_step(&self, x_t: Vec<f64>, t: usize, eps_hat: Vec<f64>, z: Vec<f64>) -> PyResult<Vec<f64>> {
        diffusion::reverse_step(&x_t, t, &eps_hat, &self.inner, &z).map_err(py_err)
    }
}

#[pyclass(name = "Population", frozen)]
struct PyPopulation {
    inner: population::Population,
}

#[pymethods]
impl PyPopulation {
    /// One of `balanced`, `fairface-like`, `gender-imbalanced`,
    /// `race-imbalanced`.
    #[staticmethod]
    #[pyo3(signature = (name, dimension = None, gender_weights = None, race_weights = None, age_weights = None))]
    fn preset(
        name: &str,
        dimension: Option<usize>,
        gender_weights: Option<Vec<f64>>,
        race_weights: Option<Vec<f64>>,
        age_weights: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let preset: Preset = name.parse().map_err(py_err)?;
        let params = PresetParams {
            dimension,
            age_weights,
            gender_weights,
            race_weights,
            separation: None,
        };
        Ok(PyPopulation {
            inner: preset.build(&params).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyPopulation {
            inner: population::Population::from_toml_str(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights()
    }

    fn marginal(&self, attribute_name: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.attribute_marginal(attribute(attribute_name)?))
    }

    fn sharpen(&self, gamma: f64) -> PyResult<Self> {
        Ok(PyPopulation {
            inner: diffusion::sharpen_mixture(&self.inner, gamma).map_err(py_err)?,
        })
    }

    /// `(points, source_components)`.
    fn sample(&self, py: Python<'_>, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let batch = py
            .detach(|| population::sample_population(&self.inner, n, seed))
            .map_err(py_err)?;
        Ok((rows(&batch.points), batch.source_component))
    }

    /// `(class, posterior)`.
    fn classify(&self, attribute_name: &str, x: Vec<f64>) -> PyResult<(usize, Vec<f64>)> {
        let p = population::bayes_classify(&self.inner, attribute(attribute_name)?, &x).map_err(py_err)?;
        Ok((p.class, p.probabilities))
    }

    fn class_counts(&self, attribute_name: &str, points: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        metrics::class_counts(&self.inner, attribute(attribute_name)?, &matrix(&points)?).map_err(py_err)
    }

    fn exact_epsilon(&self, x_t: Vec<f64>, t: usize, schedule: &PySchedule) -> PyResult<Vec<f64>> {
        diffusion::exact_epsilon(&self.inner, &x_t, t, &schedule.inner).map_err(py_err)
    }

    /// Reverse-process samples from the exact denoiser of this population.
    fn sample_reverse(&self, py: Python<'_>, schedule: &PySchedule, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let batch = py
            .detach(|| {
                let den = ExactDenoiser::new(&self.inner, &schedule.inner)?;
                diffusion::sample_reverse(&den, &schedule.inner, n, seed, &[])
            })
            .map_err(py_err)?;
        Ok(rows(&batch.points))
    }

    /// Monte-Carlo noise-prediction loss of the exact denoiser.
    fn dm_loss(&self, py: Python<'_>, schedule: &PySchedule, n_mc: usize, seed: u64) -> PyResult<f64> {
        py.detach(|| {
            let den = ExactDenoiser::new(&self.inner, &schedule.inner)?;
            diffusion::dm_loss(&den, &self.inner, &schedule.inner, n_mc, seed)
        })
        .map_err(py_err)
    }
}

#[pyclass(name = "GmmFit", frozen)]
struct PyGmmFit {
    inner: gmm::GmmFit,
}

#[pymethods]
impl PyGmmFit {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.model.weights.clone()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.model.means.iter().map(|m| m.iter().copied().collect()).collect()
    }

    /// Full covariance matrices, one per component.
    #[getter]
    fn covariances(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.inner.model.n_components())
            .map(|k| rows(&self.inner.model.component_cov(k)))
            .collect()
    }

    #[getter]
    fn loglik_trace(&self) -> Vec<f64> {
        self.inner.loglik_trace.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn separability(&self) -> PyResult<f64> {
        localization::separability(&self.inner.model).map_err(py_err)
    }

    fn sample(&self, component: usize, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&gmm::gmm_sample(&self.inner.model, component, n, seed).map_err(py_err)?))
    }
}

#[pyfunction]
#[pyo3(signature = (data, k, cov_type = "diagonal", seed = 0, tol = 1e-6, max_iter = 500, restarts = 4, init = "farthest_first"))]
#[allow(clippy::too_many_arguments)]
fn em_fit(
    py: Python<'_>,
    data: Vec<Vec<f64>>,
    k: usize,
    cov_type: &str,
    seed: u64,
    tol: f64,
    max_iter: usize,
    restarts: usize,
    init: &str,
) -> PyResult<PyGmmFit> {
    let cov = match cov_type {
        "diagonal" => CovarianceType::Diagonal,
        "full" => CovarianceType::Full,
        other => return Err(PyValueError::new_err(format!("unknown covariance type `{other}`"))),
    };
    let init = match init {
        "farthest_first" => InitStrategy::FarthestFirst,
        "random_points" => InitStrategy::RandomPoints,
        other => return Err(PyValueError::new_err(format!("unknown init `{other}`"))),
    };
    let data = matrix(&data)?;
    let opts = EmOptions {
        tol,
        max_iter,
        n_restarts: restarts,
        seed,
        init,
        ..EmOptions::default()
    };
    let inner = py.detach(|| gmm::em_fit(&data, k, cov, &opts)).map_err(py_err)?;
    Ok(PyGmmFit { inner })
}

#[pyfunction]
#[pyo3(signature = (mean_p, cov_p, mean_q, cov_q, symmetric = false))]
fn kl_gaussian(
    mean_p: Vec<f64>,
    cov_p: Vec<Vec<f64>>,
    mean_q: Vec<f64>,
    cov_q: Vec<Vec<f64>>,
    symmetric: bool,
) -> PyResult<f64> {
    let p = GaussianComponent::new(DVector::from_vec(mean_p), matrix(&cov_p)?).map_err(py_err)?;
    let q = GaussianComponent::new(DVector::from_vec(mean_q), matrix(&cov_q)?).map_err(py_err)?;
    localization::kl_gaussian(&p, &q, symmetric).map_err(py_err)
}

#[pyfunction]
fn frechet_gaussian(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = MomentSummary {
        mean: DVector::from_vec(mean_a),
        covariance: matrix(&cov_a)?,
        n: 0,
    };
    let b = MomentSummary {
        mean: DVector::from_vec(mean_b),
        covariance: matrix(&cov_b)?,
        n: 0,
    };
    metrics::frechet_gaussian(&a, &b).map_err(py_err)
}

#[pyfunction]
fn make_quotas(n: usize, k: usize) -> Vec<usize> {
    fairdiff::corrector::make_quotas(n, k)
}

/// Bias report as a JSON string.
#[pyfunction]
#[pyo3(signature = (attribute_name, train, uncorrected, corrected = None))]
fn bias_report(
    attribute_name: &str,
    train: Vec<f64>,
    uncorrected: Vec<f64>,
    corrected: Option<Vec<f64>>,
) -> PyResult<String> {
    let r = metrics::bias_report(attribute(attribute_name)?, &train, &uncorrected, corrected.as_deref())
        .map_err(py_err)?;
    Ok(metrics::report_json(&r))
}

/// Runs `synth`, `baseline` or `correct` and returns the run directory.
#[pyfunction]
#[pyo3(signature = (command, config, overrides = Vec::new(), seed = None, out = None))]
fn run_experiment(
    py: Python<'_>,
    command: &str,
    config: PathBuf,
    overrides: Vec<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let cmd = match command {
        "synth" => harness::cmd_synth,
        "baseline" => harness::cmd_baseline,
        "correct" => harness::cmd_correct,
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    let source = ConfigSource {
        path: Some(config),
        overrides,
        seed,
    };
    let outcome = py
        .detach(|| {
            let mut cfg: ExperimentConfig = source.load()?;
            if let Some(out) = out {
                cfg.out = std::env::current_dir().map_err(|e| Error::Io { path: ".".into(), source: e })?.join(out);
            }
            cmd(Run::new(cfg, source)?)
        })
        .map_err(py_err)?;
    Ok(outcome.dir.display().to_string())
}

/// Long-format CSV merging several report files.
#[pyfunction]
fn merge_reports(paths: Vec<PathBuf>) -> PyResult<String> {
    harness::merge_reports(&paths).map_err(py_err)
}

#[pymodule]
fn fairdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyPopulation>()?;
    m.add_class::<PyGmmFit>()?;
    m.add_function(wrap_pyfunction!(em_fit, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(make_quotas, m)?)?;
    m.add_function(wrap_pyfunction!(bias_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(merge_reports, m)?)?;
    Ok(())
}
