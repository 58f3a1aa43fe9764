use std::path::PathBuf;

use dlccp_core::evaluation::{compute_metrics as metrics_of, ConfusionMatrix};
use dlccp_core::losses::Ablation;
use dlccp_core::model::argmax;
use dlccp_core::pipeline::{self, TrainOverrides};
use dlccp_core::text::{TokenSeq, Vocab};
use dlccp_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(dlccp, DlccpError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config { .. } | Error::Shape(_) | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => DlccpError::new_err(e.to_string()),
    }
}

/// Round-trips a serializable value through `json.loads`.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DlccpError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A trained model with its vocabulary.
#[pyclass(frozen)]
struct Model {
    model: dlccp_core::model::Model,
    vocab: Vocab,
    max_len: usize,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint; the vocabulary defaults to `vocab.tsv` beside it.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, vocab=None))]
    fn load(checkpoint: PathBuf, vocab: Option<PathBuf>) -> PyResult<Self> {
        let (ckpt, model, vocab) = pipeline::load_checkpoint(&checkpoint, vocab.as_deref()).map_err(to_py)?;
        Ok(Model {
            model,
            vocab,
            max_len: ckpt.config.max_len,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.dims().num_classes
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }

    #[getter]
    fn tensor_names(&self) -> Vec<String> {
        self.model.names().to_vec()
    }

    fn predict_proba(&self, text: &str) -> PyResult<Vec<f64>> {
        let seq = TokenSeq::encode(text, &self.vocab, self.max_len).map_err(to_py)?;
        self.model.predict_proba(&seq).map_err(to_py)
    }

    fn predict(&self, text: &str) -> PyResult<usize> {
        Ok(argmax(&self.predict_proba(text)?))
    }

    fn __repr__(&self) -> String {
        let d = self.model.dims();
        format!(
            "Model(num_classes={}, vocab={}, content_dim={}, style_dim={})",
            d.num_classes, d.vocab_size, d.content_dim, d.style_dim
        )
    }
}

/// Writes the synthetic corpus to `out`; returns the written paths.
#[pyfunction]
#[pyo3(signature = (out, spec=None))]
fn generate_corpus(py: Python<'_>, out: PathBuf, spec: Option<PathBuf>) -> PyResult<Vec<(String, PathBuf)>> {
    let files = py.detach(|| pipeline::cmd_gen(spec.as_deref(), &out)).map_err(to_py)?;
    Ok(vec![
        ("source".into(), files.source),
        ("target".into(), files.target),
        ("ce".into(), files.ce),
        ("factors".into(), files.factors),
        ("manifest".into(), files.manifest),
    ])
}

/// Trains one model per seed and returns the multi-seed test report.
#[pyfunction]
#[pyo3(signature = (config, seeds=None, shots=None, ablation=None, out=None))]
fn train<'py>(
    py: Python<'py>,
    config: PathBuf,
    seeds: Option<Vec<u64>>,
    shots: Option<usize>,
    ablation: Option<&str>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let ablation = ablation.map(str::parse::<Ablation>).transpose().map_err(to_py)?;
    let overrides = TrainOverrides {
        shots,
        ablation,
        seeds,
        out_dir: out,
    };
    let summary = py.detach(|| pipeline::cmd_train(&config, &overrides)).map_err(to_py)?;
    to_object(py, &summary.report)
}

/// Evaluates checkpoints on a JSONL dataset.
#[pyfunction]
#[pyo3(signature = (checkpoints, data, vocab=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoints: Vec<PathBuf>,
    data: PathBuf,
    vocab: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| pipeline::cmd_eval(&checkpoints, &data, vocab.as_deref()))
        .map_err(to_py)?;
    to_object(py, &report)
}

/// Accuracy and macro P/R/F1 of a confusion matrix (rows are true classes).
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, confusion: Vec<Vec<u64>>) -> PyResult<Bound<'py, PyAny>> {
    let cm = ConfusionMatrix::from_rows(&confusion).map_err(to_py)?;
    to_object(py, &metrics_of(&cm).map_err(to_py)?)
}

/// Finite-difference check of the full objective; returns
/// `(max_rel_error, entries_checked)`.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(f64, usize)> {
    let report = py.detach(|| pipeline::cmd_gradcheck(seed)).map_err(to_py)?;
    Ok((report.max_rel_error, report.checked))
}

/// Re-hashes a manifest's inputs; returns the combined input hash.
#[pyfunction]
fn verify(manifest: PathBuf) -> PyResult<String> {
    Ok(pipeline::cmd_verify(&manifest).map_err(to_py)?.input_hash)
}

#[pymodule]
fn dlccp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DlccpError", m.py().get_type::<DlccpError>())?;
    m.add("GRADCHECK_TOLERANCE", pipeline::GRADCHECK_TOLERANCE)?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
