//! Python bindings: corpus generation, domain words, ROUGE and single
//! prefix runs. Configs cross the boundary as JSON text.

use dop_core::data::{serialize_state as render_state, DialogueState};
use dop_core::domain_words::extract_domain_words;
use dop_core::evaluation::rouge as rouge_score;
use dop_core::experiments::{Bench, ExperimentConfig, Method};
use dop_core::DopError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: DopError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config(json: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Parses JSON text into Python objects through the stdlib module.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// ROUGE-1/2/L as `{"r1": (p, r, f), ...}`.
#[pyfunction]
fn rouge<'py>(py: Python<'py>, candidate: &str, reference: &str) -> PyResult<Bound<'py, PyDict>> {
    let s = rouge_score(candidate, reference);
    let d = PyDict::new(py);
    for (k, v) in [("r1", s.r1), ("r2", s.r2), ("rl", s.rl)] {
        d.set_item(k, (v.precision, v.recall, v.f1))?;
    }
    Ok(d)
}

#[pyfunction]
fn serialize_state(intent: &str, slots: Vec<(String, String)>) -> String {
    let pairs: Vec<(&str, &str)> = slots.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    render_state(&DialogueState::new(intent, &pairs))
}

/// The configured corpus as a list of example dicts.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn generate_corpus<'py>(py: Python<'py>, config_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let corpus = config(config_json)?.load_corpus().map_err(err)?;
    to_py(py, &corpus.examples())
}

/// Top `k` LDA words per domain.
#[pyfunction]
#[pyo3(signature = (k, config_json=None))]
fn domain_words<'py>(py: Python<'py>, k: usize, config_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(config_json)?;
    let corpus = cfg.load_corpus().map_err(err)?;
    let d = PyDict::new(py);
    for l in extract_domain_words(&corpus, &cfg.lda, k).map_err(err)? {
        d.set_item(l.domain, l.words)?;
    }
    Ok(d)
}

/// Trains one domain-oriented prefix for `target` and scores it.
#[pyfunction]
#[pyo3(signature = (target, seed=0, config_json=None))]
fn train_prefix<'py>(py: Python<'py>, target: &str, seed: u64, config_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(config_json)?;
    let flags = cfg.flags;
    let mut bench = Bench::new(cfg, None).map_err(err)?;
    let spec = bench.spec(Method::Prefix, target, seed, flags);
    let out = bench.run(&spec).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("scores", out.scores.to_vec())?;
    d.set_item("predictions", to_py(py, &out.predictions)?)?;
    d.set_item("aborted", out.aborted)?;
    Ok(d)
}

#[pymodule]
fn dop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_state, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(domain_words, m)?)?;
    m.add_function(wrap_pyfunction!(train_prefix, m)?)?;
    Ok(())
}
