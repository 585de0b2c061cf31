//! Python bindings for the yield prediction core: numeric primitives,
//! metrics, dataset generation and the gradient-check sweep.
//!
//! Configs and crop specs cross the boundary as JSON strings, matching
//! the on-disk formats, so Python callers can build them with plain dicts
//! and `json.dumps`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pheno_core::config::RunConfig;
use pheno_core::datagen::{self, CropSpec, Dataset};
use pheno_core::decoder;
use pheno_core::evalkit;
use pheno_core::numerics;

fn err(e: pheno_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("json error: {e}"))
}

/// Row-softmax over a flat logit vector.
#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax(&logits).map_err(err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numerics::cosine_similarity(&a, &b).map_err(err)
}

/// Edge-replicated moving average over the rows of a flat T x D sequence.
#[pyfunction]
fn moving_average(seq: Vec<f64>, t: usize, d: usize, k: usize) -> PyResult<Vec<f64>> {
    numerics::moving_average(&seq, t, d, k).map_err(err)
}

/// Mean squared error between log predictions and log targets.
#[pyfunction]
fn mse_log_loss(predictions: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    decoder::mse_log_loss(&predictions, &targets).map_err(err)
}

/// Additive attention mask: 0 inside [sos, eos], -inf outside.
#[pyfunction]
fn growing_season_mask(t: usize, sos: usize, eos: usize) -> PyResult<Vec<f64>> {
    decoder::growing_season_mask(t, sos, eos).map_err(err)
}

/// Normalized greenness at timestep `t` for a crop spec given as JSON.
#[pyfunction]
fn phenology_curve(spec_json: &str, t: usize, amplitude: f64) -> PyResult<f64> {
    let spec: CropSpec = serde_json::from_str(spec_json).map_err(json_err)?;
    datagen::phenology_curve(&spec, t, amplitude).map_err(err)
}

/// RMSE, R-squared and Pearson correlation over paired predictions.
#[pyclass(name = "MetricTriple", skip_from_py_object)]
#[derive(Clone)]
struct PyMetricTriple {
    #[pyo3(get)]
    rmse: f64,
    #[pyo3(get)]
    r2: Option<f64>,
    #[pyo3(get)]
    corr: Option<f64>,
    #[pyo3(get)]
    n: usize,
}

#[pymethods]
impl PyMetricTriple {
    fn __repr__(&self) -> String {
        format!(
            "MetricTriple(rmse={}, r2={:?}, corr={:?}, n={})",
            self.rmse, self.r2, self.corr, self.n
        )
    }
}

#[pyfunction]
fn compute_metrics(predictions: Vec<f64>, targets: Vec<f64>) -> PyResult<PyMetricTriple> {
    let m = evalkit::compute_metrics(&predictions, &targets).map_err(err)?;
    Ok(PyMetricTriple { rmse: m.rmse, r2: m.r2, corr: m.corr, n: m.n })
}

/// The default run configuration as pretty-printed JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default()).map_err(json_err)
}

/// Generate a synthetic dataset; `config_json` is a full run config
/// (missing fields take defaults). Returns the number of samples.
#[pyfunction]
fn generate_dataset(config_json: &str, seed: u64, out_dir: &str) -> PyResult<usize> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    cfg.validate().map_err(err)?;
    let ds = datagen::generate_dataset(&cfg.gen, seed, Path::new(out_dir)).map_err(err)?;
    Ok(ds.samples.len())
}

/// Finite-difference sweep over every differentiable op. Returns
/// `(op, max_rel_err, pass)` tuples.
#[pyfunction]
#[pyo3(signature = (seed, trials=20, tolerance=1e-3))]
fn check_all_ops(seed: u64, trials: usize, tolerance: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = numerics::check_all_ops(seed, trials, tolerance).map_err(err)?;
    Ok(reports.into_iter().map(|r| (r.op, r.max_rel_err, r.pass)).collect())
}

/// A generated dataset loaded from disk: manifest plus all tensors.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
    dir: PathBuf,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn read(dir: &str) -> PyResult<Self> {
        let inner = datagen::read_dataset(Path::new(dir)).map_err(err)?;
        Ok(PyDataset { inner, dir: PathBuf::from(dir) })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} samples, {} crops, at {})",
            self.inner.samples.len(),
            self.inner.manifest.crops.len(),
            self.dir.display()
        )
    }

    fn crops(&self) -> Vec<String> {
        self.inner.manifest.crops.iter().map(|c| c.name.clone()).collect()
    }

    fn train_indices(&self) -> Vec<usize> {
        self.inner.train_indices()
    }

    fn test_indices(&self) -> Vec<usize> {
        self.inner.test_indices()
    }

    fn sample_id(&self, i: usize) -> PyResult<String> {
        self.sample(i).map(|s| s.rec.id.clone())
    }

    fn crop_of(&self, i: usize) -> PyResult<String> {
        let s = self.sample(i)?;
        let crop = self.inner.crop(s.rec.crop_id).map_err(err)?;
        Ok(crop.name.clone())
    }

    fn yield_of(&self, i: usize) -> PyResult<f64> {
        self.sample(i).map(|s| s.rec.yield_true)
    }

    /// Flat T x (days * variables) weather tensor for one sample.
    fn weather_of(&self, i: usize) -> PyResult<Vec<f64>> {
        self.sample(i).map(|s| s.mts.to_f64())
    }
}

impl PyDataset {
    fn sample(&self, i: usize) -> PyResult<&datagen::LoadedSample> {
        self.inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {i} out of range")))
    }
}

#[pymodule]
fn pheno_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(moving_average, m)?)?;
    m.add_function(wrap_pyfunction!(mse_log_loss, m)?)?;
    m.add_function(wrap_pyfunction!(growing_season_mask, m)?)?;
    m.add_function(wrap_pyfunction!(phenology_curve, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(check_all_ops, m)?)?;
    m.add_class::<PyMetricTriple>()?;
    m.add_class::<PyDataset>()?;
    Ok(())
}
