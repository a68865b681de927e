//! Python bindings. Configs travel as JSON text, results come back as
//! plain dicts and lists.

use std::path::PathBuf;

use federico::harness::cli::run_to_dir as run_into;
use federico::mixture::posterior_from_scratch;
use federico::models::{ModelSpec, ParamVector};
use federico::protocol::sample_neighbors as sample;
use federico::{ExperimentConfig, FedError, SamplerConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: FedError) -> PyErr {
    match e {
        FedError::Config { .. } | FedError::Dimension(_) | FedError::Data(_) => PyValueError::new_err(e.to_string()),
        FedError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(text: &str, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(text).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Validates a config and returns it with every default filled in.
#[pyfunction]
fn normalize_config(config_json: &str) -> PyResult<String> {
    Ok(config(config_json, None)?.to_json())
}

/// Runs one experiment in memory and returns its result as a dict.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None, workers=None))]
fn run<'py>(py: Python<'py>, config_json: &str, seed: Option<u64>, workers: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json, seed)?;
    let result = py.detach(|| federico::run_experiment(&cfg, workers)).map_err(to_py)?;
    json_to_py(py, &result)
}

/// Runs one experiment and writes its trace files into `out`.
#[pyfunction]
#[pyo3(signature = (config_json, out, seed=None, workers=None))]
fn run_to_dir(py: Python<'_>, config_json: &str, out: PathBuf, seed: Option<u64>, workers: Option<usize>) -> PyResult<f64> {
    let cfg = config(config_json, seed)?;
    let result = py.detach(|| run_into(&cfg, &out, workers)).map_err(to_py)?;
    Ok(result.weighted_average)
}

#[pyfunction]
fn posterior(prior: Vec<f64>, losses: Vec<f64>) -> PyResult<Vec<f64>> {
    posterior_from_scratch(&prior, &losses).map_err(to_py)
}

/// One ε-greedy draw of `m` neighbors for client `self_id`.
#[pyfunction]
fn sample_neighbors(weights: Vec<f64>, self_id: usize, m: usize, epsilon: f64, seed: u64) -> PyResult<Vec<usize>> {
    let cfg = SamplerConfig {
        neighbors: m,
        epsilon,
    };
    cfg.validate(weights.len()).map_err(to_py)?;
    if self_id >= weights.len() {
        return Err(PyValueError::new_err(format!("self_id {self_id} is out of range")));
    }
    Ok(sample(&weights, self_id, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn spec(spec_json: &str) -> PyResult<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    spec.validate().map_err(to_py)?;
    Ok(spec)
}

#[pyfunction]
fn init_params(spec_json: &str, seed: u64) -> PyResult<Vec<f64>> {
    let spec = spec(spec_json)?;
    Ok(spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).into_inner())
}

#[pyfunction]
fn predict(spec_json: &str, params: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    spec(spec_json)?.predict(&ParamVector::new(params), &x).map_err(to_py)
}

#[pymodule]
fn federico_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(sample_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(init_params, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
