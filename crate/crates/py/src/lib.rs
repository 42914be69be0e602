//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists; configs are passed as JSON strings with the same schema the
//! command line uses.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use roadsafe::da::{self, FeatureBatch};
use roadsafe::dam::{self, image_tensor, DamConfig, Dataset, TrainConfig};
use roadsafe::eval;
use roadsafe::geo::{self, DatasetManifest, LabelingConfig, Split, SynthConfig};
use roadsafe::imageio::RgbImage;
use roadsafe::{Error, Label, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn labels(v: &[usize]) -> PyResult<Vec<Label>> {
    v.iter()
        .map(|&i| Label::from_index(i).ok_or_else(|| PyValueError::new_err(format!("label {i} is not 0 or 1"))))
        .collect()
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Accuracy, FPR, precision, recall and F1 with safe (0) as the positive class.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, predictions: Vec<usize>, labels_: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let m = eval::metrics(&labels(&predictions)?, &labels(&labels_)?).map_err(err)?;
    to_py(py, &m)
}

/// Like `metrics`, where `None` predictions count as abstentions.
#[pyfunction]
fn metrics_with_abstentions<'py>(
    py: Python<'py>,
    predictions: Vec<Option<usize>>,
    labels_: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let preds = predictions
        .into_iter()
        .map(|p| p.map(|i| labels(&[i]).map(|v| v[0])).transpose())
        .collect::<PyResult<Vec<_>>>()?;
    let m = eval::metrics_with_abstentions(&preds, &labels(&labels_)?).map_err(err)?;
    to_py(py, &m)
}

/// Two-means binning of safety scores. Returns labels, centroids and the
/// degenerate flag.
#[pyfunction]
fn kmeans_bin<'py>(py: Python<'py>, scores: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let b = geo::kmeans_bin(&scores, &LabelingConfig::default()).map_err(err)?;
    #[derive(Serialize)]
    struct Out {
        labels: Vec<Label>,
        centroids: [f64; 2],
        degenerate: bool,
    }
    to_py(
        py,
        &Out {
            labels: b.assignments,
            centroids: b.centroids,
            degenerate: b.degenerate,
        },
    )
}

#[pyfunction]
fn cov_within(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix(&da::cov_within_matrix(&FeatureBatch { x, y }).map_err(err)?))
}

#[pyfunction]
fn cov_between(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix(&da::cov_between_matrix(&FeatureBatch { x, y }).map_err(err)?))
}

/// Class-conditional alignment loss between a source and a target batch,
/// each given as its safe rows and its dangerous rows.
#[pyfunction]
fn loss_da(
    source_safe: Vec<Vec<f64>>,
    source_dangerous: Vec<Vec<f64>>,
    target_safe: Vec<Vec<f64>>,
    target_dangerous: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let s = FeatureBatch {
        x: source_safe,
        y: source_dangerous,
    };
    let t = FeatureBatch {
        x: target_safe,
        y: target_dangerous,
    };
    da::loss_da_value(&s, &t).map_err(err)
}

#[pyfunction]
fn loss_coral(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    da::loss_coral_value(&source, &target).map_err(err)
}

/// Generates a synthetic dataset into `out_dir` and returns the file names.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn synth_generate(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<Vec<String>> {
    let cfg: SynthConfig = parse(config_json)?;
    let set = geo::synth_generate(&cfg).map_err(err)?;
    geo::write_synth(&set, out_dir, "manifest.jsonl").map_err(err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    roadsafe::cli::run(std::iter::once("roadsafe".to_string()).chain(args))
}

/// The attention classifier.
#[pyclass(name = "DamModel")]
struct PyDamModel {
    inner: dam::DamModel,
}

#[pymethods]
impl PyDamModel {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: DamConfig = parse(config_json)?;
        Ok(Self {
            inner: dam::DamModel::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dam::DamModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_values()
    }

    /// `(label, probabilities)` for each PPM image.
    fn predict_ppm(&self, paths: Vec<PathBuf>) -> PyResult<Vec<(usize, Vec<f64>)>> {
        let imgs = paths
            .iter()
            .map(|p| RgbImage::read_ppm(p).map(|i| image_tensor(&i)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let batch = Tensor::stack(&imgs).map_err(|e| err(e.into()))?;
        let preds = self.inner.predict(&batch).map_err(err)?;
        Ok(preds.into_iter().map(|p| (p.label, p.probs)).collect())
    }

    /// Class activation map of one PPM image as rows of values in `[0, 1]`.
    #[pyo3(signature = (path, class_index=1))]
    fn cam(&self, path: PathBuf, class_index: usize) -> PyResult<Vec<Vec<f64>>> {
        let img = RgbImage::read_ppm(path).map_err(err)?;
        let map = eval::cam(&self.inner, &image_tensor(&img), class_index).map_err(err)?;
        Ok(map.values.chunks(map.width).map(<[f64]>::to_vec).collect())
    }

    /// Trains on the train split of a manifest (validating on its val split)
    /// and returns the per-epoch metric rows.
    #[pyo3(signature = (manifest, train_config_json=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        manifest: PathBuf,
        train_config_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = parse(train_config_json)?;
        let m = DatasetManifest::read(&manifest).map_err(err)?;
        let dir = manifest.parent().map(PathBuf::from).unwrap_or_default();
        let train = Dataset::from_manifest(&m.split(Split::Train), &dir).map_err(err)?;
        let val_m = m.split(Split::Val);
        let val = if val_m.entries.is_empty() {
            None
        } else {
            Some(Dataset::from_manifest(&val_m, &dir).map_err(err)?)
        };
        let rows = py
            .detach(|| dam::train_dam(&mut self.inner, &train, val.as_ref(), &cfg))
            .map_err(err)?;
        to_py(py, &rows)
    }
}

#[pymodule]
fn pyroadsafe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDamModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_with_abstentions, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_bin, m)?)?;
    m.add_function(wrap_pyfunction!(cov_within, m)?)?;
    m.add_function(wrap_pyfunction!(cov_between, m)?)?;
    m.add_function(wrap_pyfunction!(loss_da, m)?)?;
    m.add_function(wrap_pyfunction!(loss_coral, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
