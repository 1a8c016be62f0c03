//! Python bindings: quantizers, partitions, configs, training and model files.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqtrain::checkpoint::{export_quantized, load_model, ModelFile};
use sqtrain::config::TrainConfig;
use sqtrain::data::Split;
use sqtrain::inspect::inspect_network;
use sqtrain::nn::Network;
use sqtrain::partition::{self, ProbabilityFn, ProbabilityKind};
use sqtrain::quant::{self, QuantKind, QuantScheme};
use sqtrain::run::{load_data, run_training};
use sqtrain::schedule::{ScheduleMode, SqSchedule};
use sqtrain::trainer::{evaluate, install_inference_weights, EvalWeights};
use sqtrain::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Config(_) | Error::Argument(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Hands a serializable value to Python as plain dicts and lists.
fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Quantizes one row. Returns `(codes, alpha, reconstruction)`; `seed`
/// drives the stochastic binary quantizer.
#[pyfunction]
#[pyo3(signature = (row, kind = "twn", seed = 0))]
fn quantize(row: Vec<f64>, kind: &str, seed: u64) -> PyResult<(Vec<i8>, f64, Vec<f64>)> {
    let scheme = QuantScheme::new(parse::<QuantKind>(kind)?);
    let q = scheme.quantize_row(&row, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((q.codes, q.alpha, q.reconstruction))
}

/// Normalized L1 distance between a row and its reconstruction.
#[pyfunction]
fn quantization_error(row: Vec<f64>, reconstruction: Vec<f64>) -> PyResult<f64> {
    quant::quantization_error(&row, &reconstruction).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (errors, kind = "linear"))]
fn quantization_probabilities(errors: Vec<f64>, kind: &str) -> PyResult<Vec<f64>> {
    let f = ProbabilityFn::new(parse::<ProbabilityKind>(kind)?);
    partition::quantization_probabilities(&errors, &f).map_err(py_err)
}

/// Roulette selection without replacement; returns `(quantized, real)`.
#[pyfunction]
#[pyo3(signature = (probabilities, ratio, seed = 0))]
fn roulette_partition(probabilities: Vec<f64>, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = partition::roulette_partition(&probabilities, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
    Ok((p.quantized_indices().to_vec(), p.real_indices().to_vec()))
}

#[pyfunction]
fn deterministic_partition(errors: Vec<f64>, ratio: f64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = partition::deterministic_partition(&errors, ratio).map_err(py_err)?;
    Ok((p.quantized_indices().to_vec(), p.real_indices().to_vec()))
}

/// `(ratio, iterations)` of every stage.
#[pyfunction]
fn schedule(mode: &str, iters_per_stage: u64) -> PyResult<Vec<(f64, u64)>> {
    let s = SqSchedule::new(parse::<ScheduleMode>(mode)?, iters_per_stage).map_err(py_err)?;
    Ok(s.stages().iter().map(|st| (st.ratio, st.iterations)).collect())
}

/// A run configuration in the `key = value` format.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::parse(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).map_err(py_err)?,
        })
    }

    /// Sets one key and re-validates.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn to_dict(&self) -> HashMap<String, String> {
        self.inner
            .canonical_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn __getitem__(&self, key: &str) -> PyResult<String> {
        self.to_dict()
            .remove(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn text(&self) -> String {
        self.inner.canonical_text()
    }

    fn digest(&self) -> String {
        self.inner.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn __repr__(&self) -> String {
        format!("Config(scheme={}, schedule={}, seed={})", self.inner.scheme, self.inner.schedule, self.inner.seed)
    }
}

/// Runs the full staged training loop and returns the run summary.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let summary = py.detach(|| run_training(&cfg, |_| {})).map_err(py_err)?;
    to_python(py, &summary)
}

/// A trained checkpoint or quantized export.
#[pyclass(name = "Model")]
struct PyModel {
    config: TrainConfig,
    net: Network,
    exported: bool,
}

impl PyModel {
    fn weights(&self) -> EvalWeights {
        if self.exported {
            EvalWeights::AsStored
        } else {
            EvalWeights::Quantize(self.config.scheme)
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(match load_model(&path).map_err(py_err)? {
            ModelFile::Checkpoint(c) => Self {
                config: c.config,
                net: c.trainer.net,
                exported: false,
            },
            ModelFile::Export(m) => Self {
                config: m.config,
                net: m.net,
                exported: true,
            },
        })
    }

    #[getter]
    fn exported(&self) -> bool {
        self.exported
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn layer_names(&self) -> Vec<String> {
        self.net.layers().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Full-precision (or, for exports, dequantized) values of a named tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.net
            .state_tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| (t.shape().to_vec(), t.data().to_vec()))
            .ok_or_else(|| PyValueError::new_err(format!("no tensor named `{name}`")))
    }

    /// Logits for a flat batch of inputs, using the deployed weights.
    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let sample: usize = self.net.input_shape().iter().product();
        if images.is_empty() || !images.len().is_multiple_of(sample) {
            return Err(PyValueError::new_err(format!(
                "{} values is not a whole number of {sample}-value samples",
                images.len()
            )));
        }
        let mut shape = vec![images.len() / sample];
        shape.extend_from_slice(self.net.input_shape());
        let x = Tensor::new(shape, images).map_err(py_err)?;
        let mut net = self.net.clone();
        install_inference_weights(&mut net, self.weights()).map_err(py_err)?;
        let logits = net.forward(&x, false).map_err(py_err)?;
        let classes = logits.shape()[1];
        Ok(logits.data().chunks(classes).map(<[f64]>::to_vec).collect())
    }

    /// Top-1 error and mean loss on a split of the model's dataset.
    #[pyo3(signature = (split = "test", data_dir = None))]
    fn evaluate(&self, py: Python<'_>, split: &str, data_dir: Option<PathBuf>) -> PyResult<Py<PyAny>> {
        let split: Split = parse(split)?;
        let mut cfg = self.config.clone();
        if let Some(dir) = data_dir {
            cfg.data_dir = dir;
        }
        let mut net = self.net.clone();
        let weights = self.weights();
        let (result, samples) = py
            .detach(|| {
                let (train, test) = load_data(&cfg)?;
                let data = if split == Split::Train { train } else { test };
                evaluate(&mut net, &data, weights).map(|r| (r, data.len()))
            })
            .map_err(py_err)?;
        let out = serde_json::json!({
            "top1_error": result.top1_error,
            "mean_loss": result.mean_loss,
            "samples": samples,
        });
        to_python(py, &out)
    }

    /// Per-layer quantization errors and selection probabilities.
    #[pyo3(signature = (quantizer = None))]
    fn inspect(&self, py: Python<'_>, quantizer: Option<&str>) -> PyResult<Py<PyAny>> {
        let kind = match quantizer {
            Some(q) => parse(q)?,
            None => self.config.scheme.quant_kind().unwrap_or(QuantKind::Twn),
        };
        to_python(py, &inspect_network(&self.net, kind).map_err(py_err)?)
    }

    /// Writes the quantized codes and scales.
    fn export(&self, path: PathBuf) -> PyResult<()> {
        if self.exported {
            return Err(PyValueError::new_err("model is already a quantized export"));
        }
        export_quantized(&path, &self.config, &self.net).map_err(py_err)
    }
}

#[pymodule]
fn sqtrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_error, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(roulette_partition, m)?)?;
    m.add_function(wrap_pyfunction!(deterministic_partition, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
