//! Python module `hvc`: datasets, training, inference, metrics and
//! ensembling over the native library.

use std::collections::{BTreeMap, BTreeSet};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use hvc::checkpoint::Checkpoint;
use hvc::data::{self, DatasetSpec, Manifest, VideoExample};
use hvc::heads::Taxonomy;
use hvc::metrics::PredictionList;
use hvc::model::{DataDims, ModelConfig};
use hvc::predictions::{average_predictions, PredictionFile};
use hvc::{training, Tensor};

create_exception!(
    hvc,
    HvcError,
    PyException,
    "Raised for any error reported by the native library."
);

fn err(e: hvc::Error) -> PyErr {
    HvcError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| HvcError::new_err(format!("bad JSON: {e}")))
}

fn config_from(preset_or_json: &str) -> PyResult<ModelConfig> {
    if preset_or_json.trim_start().starts_with('{') {
        parse(preset_or_json)
    } else {
        ModelConfig::preset(preset_or_json).map_err(err)
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(HvcError::new_err(format!("{what} rows have unequal lengths")));
    }
    Tensor::from_rows(&rows, cols).map_err(err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Names of the built-in model presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    hvc::model::PRESETS.to_vec()
}

/// JSON text of a preset config.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let c = ModelConfig::preset(name).map_err(err)?;
    serde_json::to_string_pretty(&c).map_err(|e| err(e.into()))
}

/// Writes `count` synthetic videos starting at index `skip` plus the
/// manifest sidecar; returns the per-video checksums.
#[pyfunction]
#[pyo3(signature = (path, count, skip = 0, spec_json = None))]
fn generate_dataset(path: &str, count: usize, skip: u64, spec_json: Option<&str>) -> PyResult<Vec<String>> {
    let spec: DatasetSpec = match spec_json {
        Some(j) => parse(j)?,
        None => DatasetSpec::default(),
    };
    let (world, examples) = data::generate(&spec, skip, count).map_err(err)?;
    let sums = data::write_records(path, &examples).map_err(err)?;
    let mut m = Manifest::new(sums.clone());
    m.first_index = Some(skip);
    m.spec = Some(spec);
    m.taxonomy = Some(world.taxonomy);
    data::write_manifest(data::manifest_path(path), &m).map_err(err)?;
    Ok(sums)
}

/// One decoded video.
#[pyclass(name = "Video", module = "hvc", get_all, from_py_object)]
#[derive(Clone)]
struct PyVideo {
    id: String,
    labels: Vec<usize>,
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
}

#[pymethods]
impl PyVideo {
    #[new]
    fn new(id: String, labels: Vec<usize>, visual: Vec<Vec<f64>>, audio: Vec<Vec<f64>>) -> Self {
        PyVideo {
            id,
            labels,
            visual,
            audio,
        }
    }

    #[getter]
    fn frames(&self) -> usize {
        self.visual.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Video(id={:?}, frames={}, labels={:?})",
            self.id,
            self.visual.len(),
            self.labels
        )
    }
}

impl PyVideo {
    fn from_example(e: &VideoExample) -> Self {
        PyVideo {
            id: e.id.clone(),
            labels: e.fine_labels.iter().copied().collect(),
            visual: rows_of(&e.visual),
            audio: rows_of(&e.audio),
        }
    }

    fn to_example(&self) -> PyResult<VideoExample> {
        let visual = matrix(self.visual.clone(), "visual")?;
        let audio = if self.audio.is_empty() {
            Tensor::zeros(&[visual.rows(), 0])
        } else {
            matrix(self.audio.clone(), "audio")?
        };
        Ok(VideoExample {
            id: self.id.clone(),
            visual,
            audio,
            fine_labels: self.labels.iter().copied().collect(),
        })
    }
}

#[pyfunction]
fn read_records(path: &str) -> PyResult<Vec<PyVideo>> {
    Ok(data::read_records(path)
        .map_err(err)?
        .iter()
        .map(PyVideo::from_example)
        .collect())
}

#[pyfunction]
fn write_records(path: &str, videos: Vec<PyVideo>) -> PyResult<Vec<String>> {
    let examples = videos.iter().map(PyVideo::to_example).collect::<PyResult<Vec<_>>>()?;
    data::write_records(path, &examples).map_err(err)
}

/// A model with its parameters, built from a preset or loaded from a
/// checkpoint.
#[pyclass(name = "Model", module = "hvc")]
struct PyModel {
    inner: hvc::model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model for `visual_dim`/`audio_dim` features and a taxonomy
    /// given as the coarse class of every fine class.
    #[new]
    #[pyo3(signature = (config, visual_dim, audio_dim, coarse_of, seed = None))]
    fn new(
        config: &str,
        visual_dim: usize,
        audio_dim: usize,
        coarse_of: Vec<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = config_from(config)?;
        if let Some(s) = seed {
            c.seed = s;
        }
        let coarse_count = coarse_of.iter().max().map_or(0, |m| m + 1);
        let dims = DataDims {
            visual_dim,
            audio_dim,
            taxonomy: Taxonomy::new(coarse_of, coarse_count).map_err(err)?,
        };
        let inner = hvc::model::Model::new(c, dims, None).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = Checkpoint::read(path).map_err(err)?.into_model().map_err(err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_model(&self.inner).write(path).map_err(err)
    }

    /// Content hash of the serialized checkpoint.
    fn checkpoint_id(&self) -> PyResult<String> {
        Checkpoint::from_model(&self.inner).id().map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.dims.classes()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.config).map_err(|e| err(e.into()))
    }

    /// Inference-mode fine-class probabilities for one video.
    fn scores(&self, video: &PyVideo) -> PyResult<Vec<f64>> {
        Ok(self.inner.scores(&video.to_example()?).map_err(err)?.0)
    }

    /// Coarse-class probabilities, or `None` without a coarse head.
    fn coarse_scores(&self, video: &PyVideo) -> PyResult<Option<Vec<f64>>> {
        Ok(self.inner.scores(&video.to_example()?).map_err(err)?.1)
    }

    /// Top-`k` `(class, score)` pairs for one video.
    #[pyo3(signature = (video, k = 20))]
    fn top_k(&self, video: &PyVideo, k: usize) -> PyResult<Vec<(usize, f64)>> {
        let s = self.scores(video)?;
        Ok(hvc::metrics::topk_truncate(&s, k))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(classes={}, parameters={})",
            self.inner.dims.classes(),
            self.inner.store.num_scalars()
        )
    }
}

/// Trains from record files and writes the checkpoint; returns the report
/// as JSON text.
#[pyfunction]
#[pyo3(signature = (config, train_path, valid_path, checkpoint_path, epochs = None, seed = None))]
fn train(
    py: Python<'_>,
    config: &str,
    train_path: &str,
    valid_path: &str,
    checkpoint_path: &str,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<String> {
    let mut c = config_from(config)?;
    if let Some(e) = epochs {
        c.optimizer.epochs = e;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    let (report, ck) = py.detach(|| training::train(c, train_path, valid_path)).map_err(err)?;
    ck.write(checkpoint_path).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| err(e.into()))
}

/// Writes a top-`k` prediction file for a dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint_path, data_path, out_path, k = 20))]
fn predict(checkpoint_path: &str, data_path: &str, out_path: &str, k: usize) -> PyResult<()> {
    let model = Checkpoint::read(checkpoint_path)
        .map_err(err)?
        .into_model()
        .map_err(err)?;
    let examples = data::read_records(data_path).map_err(err)?;
    training::predict(&model, &examples, k)
        .map_err(err)?
        .write(out_path)
        .map_err(err)
}

/// Reads a prediction file as `{video: [(class, score), ...]}`.
#[pyfunction]
fn read_predictions(path: &str) -> PyResult<BTreeMap<String, Vec<(usize, f64)>>> {
    let f = PredictionFile::read(path).map_err(err)?;
    Ok(f.list.videos.into_iter().map(|v| (v.video, v.entries)).collect())
}

/// GAP@k of in-memory predictions against `{video: [labels]}`.
#[pyfunction]
#[pyo3(signature = (predictions, truth, k = 20))]
fn gap_at_k(
    predictions: BTreeMap<String, Vec<(usize, f64)>>,
    truth: BTreeMap<String, Vec<usize>>,
    k: usize,
) -> PyResult<f64> {
    let mut list = PredictionList::default();
    for (v, entries) in predictions {
        list.push(v, entries);
    }
    let truth: BTreeMap<String, BTreeSet<usize>> =
        truth.into_iter().map(|(v, ls)| (v, ls.into_iter().collect())).collect();
    hvc::metrics::gap_at_k(&list, &truth, k).map_err(err)
}

/// GAP@k of a prediction file against a record file's labels.
#[pyfunction]
#[pyo3(signature = (predictions_path, truth_path, k = 20))]
fn evaluate(predictions_path: &str, truth_path: &str, k: usize) -> PyResult<f64> {
    let preds = PredictionFile::read(predictions_path).map_err(err)?;
    let truth = data::ground_truth(&data::read_records(truth_path).map_err(err)?);
    hvc::metrics::gap_at_k(&preds.list, &truth, k).map_err(err)
}

/// Averages prediction files into `out_path`.
#[pyfunction]
fn ensemble(out_path: &str, inputs: Vec<String>) -> PyResult<()> {
    let files = inputs
        .iter()
        .map(PredictionFile::read)
        .collect::<hvc::Result<Vec<_>>>()
        .map_err(err)?;
    average_predictions(&files).map_err(err)?.write(out_path).map_err(err)
}

/// Maximum relative error of a whole-pipeline finite-difference check.
#[pyfunction]
#[pyo3(signature = (config, trials = 20, eps = 1e-5, seed = 0))]
fn gradcheck(config: &str, trials: usize, eps: f64, seed: u64) -> PyResult<f64> {
    let c = config_from(config)?;
    let reports = training::pipeline_gradcheck(&c, trials, eps, seed).map_err(err)?;
    Ok(hvc::gradcheck::max_rel_error(&reports))
}

#[pymodule]
#[pyo3(name = "hvc")]
fn hvc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HvcError", m.py().get_type::<HvcError>())?;
    m.add_class::<PyVideo>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_records, m)?)?;
    m.add_function(wrap_pyfunction!(write_records, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(read_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(gap_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
