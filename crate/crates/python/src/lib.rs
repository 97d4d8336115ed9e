//! Python bindings: synthetic data, models, the three training stages,
//! checkpoints and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use essa_core::checkpoint::Checkpoint;
use essa_core::data::{self, Domain, Split, SynthSpec};
use essa_core::eval::{self, ConfusionMatrix, Metric};
use essa_core::model::Model;
use essa_core::peft::{closed_form_trainable_count, AdapterSpec};
use essa_core::pipeline::{self, EpochRecord, SaMode, StageConfig};
use essa_core::vit::ViTConfig;
use essa_core::{Error, Image};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Data(_) | Error::Format(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// `"full"`, `"lora"`, `"vpt"`, `"bitfit"`, `"apla"` for the defaults, or a JSON
/// object such as `{"kind": "lora", "rank": 2, "alpha": 4, "targets": ["q", "v"]}`.
fn parse_adapter(s: &str, seed: u64) -> PyResult<AdapterSpec> {
    let spec = match s.trim() {
        "full" => AdapterSpec::Full,
        "lora" => AdapterSpec::lora_default(),
        "vpt" => AdapterSpec::vpt_default(),
        "bitfit" => AdapterSpec::BitFit,
        "apla" => AdapterSpec::apla_default(seed),
        json if json.starts_with('{') => {
            serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("adapter spec: {e}")))?
        }
        other => return Err(PyValueError::new_err(format!("unknown adapter `{other}`"))),
    };
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split `{s}`"))),
    }
}

fn parse_domain(s: &str) -> PyResult<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(PyValueError::new_err(format!("unknown domain `{s}`"))),
    }
}

fn records_json(records: &[EpochRecord]) -> PyResult<Vec<String>> {
    records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .collect()
}

#[pyclass(name = "Dataset", module = "essa", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: data::Dataset::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Channel-major pixel values in [0, 1].
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range for {} images", self.inner.len())));
        }
        Ok(self.inner.image(i).data)
    }

    fn labels(&self) -> Option<Vec<u16>> {
        self.inner.labels().map(<[u16]>::to_vec)
    }

    fn without_labels(&self) -> Self {
        PyDataset { inner: self.inner.without_labels() }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels, self.inner.height, self.inner.width)
    }
}

/// Generates one split of one domain from a JSON generator spec (`"{}"` for defaults).
#[pyfunction]
#[pyo3(signature = (spec_json, split, domain))]
fn synth(spec_json: &str, split: &str, domain: &str) -> PyResult<PyDataset> {
    let spec: SynthSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(format!("synth spec: {e}")))?;
    let inner = data::generate(&spec, parse_split(split)?, parse_domain(domain)?).map_err(py_err)?;
    Ok(PyDataset { inner })
}

#[pyclass(name = "Model", module = "essa", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// A freshly initialised backbone for the `tiny` or `small` preset.
    #[new]
    #[pyo3(signature = (preset = "tiny", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = ViTConfig::preset(preset).map_err(py_err)?;
        Ok(PyModel { inner: Model::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel { inner: ck.model().map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner).save(&path).map_err(py_err)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    fn num_params(&self) -> usize {
        self.inner.params.numel()
    }

    fn has_head(&self) -> bool {
        self.inner.has_head()
    }

    /// Class-token embedding of a channel-major image with values in [0, 1].
    fn embed(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let c = &self.inner.config;
        let img = Image::new(c.channels, c.image_size, c.image_size, pixels).map_err(py_err)?;
        self.inner.embed(&img).map_err(py_err)
    }

    fn predict(&self, pixels: Vec<f64>) -> PyResult<usize> {
        let c = &self.inner.config;
        let img = Image::new(c.channels, c.image_size, c.image_size, pixels).map_err(py_err)?;
        self.inner.predict(&img).map_err(py_err)
    }
}

#[allow(clippy::too_many_arguments)]
fn stage_config(
    base: StageConfig,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    warmup_epochs: Option<usize>,
    seed: u64,
    tau_teacher: Option<f64>,
) -> StageConfig {
    let mut c = StageConfig { seed, ..base };
    if let Some(e) = epochs {
        c.epochs = e;
        c.warmup_epochs = warmup_epochs.unwrap_or(e / 10);
    } else if let Some(w) = warmup_epochs {
        c.warmup_epochs = w;
    }
    if let Some(b) = batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = base_lr {
        c.base_lr = lr;
    }
    if let Some(t) = tau_teacher {
        c.ssl.tau_teacher = t;
    }
    c
}

/// Self-supervised adaptation. Returns the adapted model and JSON epoch records.
#[pyfunction]
#[pyo3(signature = (model, data, adapter = "full", epochs = None, batch_size = None, base_lr = None, warmup_epochs = None, seed = 0, tau_teacher = None))]
#[allow(clippy::too_many_arguments)]
fn run_essa(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    adapter: &str,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    warmup_epochs: Option<usize>,
    seed: u64,
    tau_teacher: Option<f64>,
) -> PyResult<(PyModel, Vec<String>)> {
    let spec = parse_adapter(adapter, seed)?;
    let cfg = stage_config(StageConfig::essa(spec), epochs, batch_size, base_lr, warmup_epochs, seed, tau_teacher);
    let (m, d) = (model.inner.clone(), data.inner.clone());
    let (out, recs) = py.detach(move || pipeline::run_essa(m, cfg, &d)).map_err(py_err)?;
    Ok((PyModel { inner: out }, records_json(&recs)?))
}

/// Supervised adaptation with a new prediction head; `peft=True` tunes only the adapter's set.
#[pyfunction]
#[pyo3(signature = (model, data, adapter = "full", peft = false, epochs = None, batch_size = None, base_lr = None, warmup_epochs = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_sa(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    adapter: &str,
    peft: bool,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    warmup_epochs: Option<usize>,
    seed: u64,
) -> PyResult<(PyModel, Vec<String>)> {
    let spec = parse_adapter(adapter, seed)?;
    let mode = if peft { SaMode::Peft } else { SaMode::Full };
    let cfg = stage_config(StageConfig::sa(spec, mode), epochs, batch_size, base_lr, warmup_epochs, seed, None);
    let (m, d) = (model.inner.clone(), data.inner.clone());
    let (out, recs) = py.detach(move || pipeline::run_sa(m, cfg, &d)).map_err(py_err)?;
    Ok((PyModel { inner: out }, records_json(&recs)?))
}

/// Test-time training on unlabeled data; the prediction head is left untouched.
#[pyfunction]
#[pyo3(signature = (model, data, adapter = "bitfit", epochs = None, batch_size = None, base_lr = None, warmup_epochs = None, seed = 0, tau_teacher = None))]
#[allow(clippy::too_many_arguments)]
fn run_ttt(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    adapter: &str,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    warmup_epochs: Option<usize>,
    seed: u64,
    tau_teacher: Option<f64>,
) -> PyResult<(PyModel, Vec<String>)> {
    let spec = parse_adapter(adapter, seed)?;
    let cfg = stage_config(StageConfig::ttt(spec), epochs, batch_size, base_lr, warmup_epochs, seed, tau_teacher);
    let (m, d) = (model.inner.clone(), data.inner.clone());
    let (out, recs) = py.detach(move || pipeline::run_ttt(m, cfg, &d)).map_err(py_err)?;
    Ok((PyModel { inner: out }, records_json(&recs)?))
}

/// Weighted k-NN evaluation over frozen embeddings: `train` is the gallery.
#[pyfunction]
#[pyo3(signature = (model, train, test, k = 20, tau = 0.07, metric = "accuracy"))]
fn knn_eval(model: &PyModel, train: &PyDataset, test: &PyDataset, k: usize, tau: f64, metric: &str) -> PyResult<f64> {
    let metric = Metric::parse(metric).map_err(py_err)?;
    Ok(eval::evaluate_knn_protocol(&model.inner, &train.inner, &test.inner, k, tau, metric).map_err(py_err)?.value)
}

/// Metric of the model's prediction head on `test`.
#[pyfunction]
#[pyo3(signature = (model, test, metric = "accuracy"))]
fn head_eval(model: &PyModel, test: &PyDataset, metric: &str) -> PyResult<f64> {
    let metric = Metric::parse(metric).map_err(py_err)?;
    Ok(eval::evaluate_head(&model.inner, &test.inner, metric).map_err(py_err)?.value)
}

/// Quadratic-weighted kappa of a confusion matrix; NaN when undefined.
#[pyfunction]
fn quadratic_kappa(counts: Vec<Vec<u64>>) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_counts(&counts).map_err(py_err)?;
    Ok(eval::quadratic_kappa(&cm).map_err(py_err)?.value())
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(py_err)
}

/// Trainable values for an adapter on a preset, heads excluded.
#[pyfunction]
#[pyo3(signature = (adapter, preset = "tiny"))]
fn trainable_count(adapter: &str, preset: &str) -> PyResult<usize> {
    let cfg = ViTConfig::preset(preset).map_err(py_err)?;
    Ok(closed_form_trainable_count(&parse_adapter(adapter, 0)?, &cfg))
}

#[pymodule]
fn essa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_essa, m)?)?;
    m.add_function(wrap_pyfunction!(run_sa, m)?)?;
    m.add_function(wrap_pyfunction!(run_ttt, m)?)?;
    m.add_function(wrap_pyfunction!(knn_eval, m)?)?;
    m.add_function(wrap_pyfunction!(head_eval, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(trainable_count, m)?)?;
    Ok(())
}
