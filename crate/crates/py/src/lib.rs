//! Python bindings: run configs, the pipeline, served artifacts, model
//! persistence and a few numeric building blocks.

use std::path::PathBuf;

use contest_ite::config::RunConfig as CoreConfig;
use contest_ite::eval;
use contest_ite::models::{self, LassoOptions, ModelFamily, TrainedModel};
use contest_ite::pipeline::{self, Artifacts as CoreArtifacts, EnumerateRequest, RunOptions, SimulateRequest};
use contest_ite::simulate::{DesignOverride, NoiseLevel};
use contest_ite::types::ContestId;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn core_err(e: contest_ite::Error) -> PyErr {
    match e {
        contest_ite::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(value_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Full run configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: CoreConfig::default(),
        }
    }

    /// Three small contests and a small model grid.
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: CoreConfig::tiny(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::from_toml(text).map_err(core_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(core_err)
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.inner.fingerprint().map_err(core_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

/// Runs every stage into `out_dir` and returns the run summary.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, force = false, resume = false))]
fn run_pipeline<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    config: Option<PyRunConfig>,
    force: bool,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map_or_else(CoreConfig::default, |c| c.inner);
    let summary = py
        .detach(|| pipeline::run_pipeline(&out_dir, &cfg, RunOptions { force, resume }))
        .map_err(core_err)?;
    to_py(py, &summary)
}

/// A finished run directory, ready for what-if simulation.
#[pyclass(name = "Artifacts")]
struct PyArtifacts {
    inner: CoreArtifacts,
}

fn request_err(e: pipeline::RequestError) -> PyErr {
    match e.kind {
        pipeline::RequestErrorKind::NotFound => PyKeyError::new_err(e.message),
        pipeline::RequestErrorKind::Internal => PyRuntimeError::new_err(e.message),
        _ => PyValueError::new_err(e.message),
    }
}

#[pymethods]
impl PyArtifacts {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreArtifacts::load(&path).map_err(core_err)?,
        })
    }

    fn contests<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.contests)
    }

    fn model_card<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.card)
    }

    /// Simulated ATE and ROI of one contest under `overrides`, a dict with
    /// keys such as `captain_bonus`, `fifth_team_bonus`,
    /// `worst_member_included`, `prize_schedule`.
    #[pyo3(signature = (contest_id, overrides = None, noise_level = "none", n_boot = None, seed = None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        contest_id: u64,
        overrides: Option<Bound<'py, PyAny>>,
        noise_level: &str,
        n_boot: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let overrides: DesignOverride = match overrides {
            Some(o) => from_py(py, &o)?,
            None => DesignOverride::default(),
        };
        let req = SimulateRequest {
            contest_id: ContestId(contest_id),
            overrides,
            noise_level: noise_level.parse::<NoiseLevel>().map_err(core_err)?,
            n_boot,
            seed,
        };
        let result = py.detach(|| self.inner.simulate(&req)).map_err(request_err)?;
        to_py(py, &result)
    }

    /// Every on/off combination of the captain bonus, 5th-team bonus and
    /// worst-member rules, best first.
    #[pyo3(signature = (contest_id, noise_level = "none", n_boot = None, seed = None))]
    fn enumerate_designs<'py>(
        &self,
        py: Python<'py>,
        contest_id: u64,
        noise_level: &str,
        n_boot: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = EnumerateRequest {
            contest_id: ContestId(contest_id),
            dimensions: None,
            noise_level: noise_level.parse::<NoiseLevel>().map_err(core_err)?,
            n_boot,
            seed,
        };
        let ranked = py.detach(|| self.inner.enumerate(&req)).map_err(request_err)?;
        to_py(py, &ranked)
    }
}

/// A persisted regressor.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainedModel::load(&path).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainedModel::from_json(text).map_err(core_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(core_err)
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family().name()
    }

    fn feature_names(&self) -> Vec<String> {
        self.inner.schema.names().map(str::to_string).collect()
    }

    /// Predictions for raw (unscaled) feature rows in schema order.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        if rows.iter().any(|r| r.len() != self.inner.schema.len()) {
            return Err(value_err(format!(
                "rows must have {} features",
                self.inner.schema.len()
            )));
        }
        self.inner.predict_values(&matrix(&rows)?).map_err(core_err)
    }

    /// (name, score, sign) for selected features, highest score first.
    fn importance(&self) -> PyResult<Vec<(String, f64, i8)>> {
        let imp = self.inner.importance().map_err(core_err)?;
        Ok(imp
            .selected()
            .map(|f| (f.name.clone(), f.score, f.sign))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(family={:?})", self.inner.family().name())
    }
}

/// Lasso fit on raw rows: returns (intercept, coefficients, converged).
#[pyfunction]
fn fit_lasso(x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<(f64, Vec<f64>, bool)> {
    let m = models::fit_lasso(&matrix(&x)?, &y, lam, &LassoOptions::default(), None).map_err(core_err)?;
    Ok((m.intercept, m.coefficients, m.diagnostics.converged))
}

/// Ridge fit on raw rows: returns (intercept, coefficients).
#[pyfunction]
fn fit_ridge(x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    let m = models::fit_ridge(&matrix(&x)?, &y, lam).map_err(core_err)?;
    Ok((m.intercept, m.coefficients))
}

/// RMSE pooled over contests of the given row counts.
#[pyfunction]
fn pooled_rmse(predictions: Vec<f64>, labels: Vec<f64>, contest_sizes: Vec<usize>) -> PyResult<f64> {
    eval::rmse(&predictions, &labels, &contest_sizes).map_err(core_err)
}

/// Paired sign-flip permutation p-value for mean(a - b) = 0.
#[pyfunction]
#[pyo3(signature = (a, b, n_permutations = 9999, seed = 0))]
fn sign_flip_test(a: Vec<f64>, b: Vec<f64>, n_permutations: usize, seed: u64) -> PyResult<f64> {
    eval::sign_flip_test(&a, &b, n_permutations, seed).map_err(core_err)
}

#[pyfunction]
fn model_families() -> Vec<&'static str> {
    ModelFamily::ALL.iter().map(|f| f.name()).collect()
}

#[pymodule]
#[pyo3(name = "contest_ite")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyArtifacts>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lasso, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ridge, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(sign_flip_test, m)?)?;
    m.add_function(wrap_pyfunction!(model_families, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
