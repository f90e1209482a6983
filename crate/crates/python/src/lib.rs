//! Python bindings: metrics, losses, synthetic data, experiment runs and
//! checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lwf3d::autodiff::Tensor;
use lwf3d::eval::Metrics;
use lwf3d::harness::{parse_modes, Experiment, ExperimentConfig, SplitName};
use lwf3d::pointcloud::{self, PointCloud};
use lwf3d::training::{self, Task};
use lwf3d::Error;

create_exception!(lwf3d_py, ConfigError, PyValueError, "Invalid configuration.");
create_exception!(lwf3d_py, ProtocolError, PyRuntimeError, "Protocol or contract violation.");

fn to_py(e: Error) -> PyErr {
    let message = e.to_string();
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Parse { .. } | Error::Roster(_) => ConfigError::new_err(message),
        Error::Io { .. } => PyOSError::new_err(message),
        e if e.exit_code() == 2 => ProtocolError::new_err(message),
        _ => PyRuntimeError::new_err(message),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("acc_old_star", m.acc_old_star)?;
    d.set_item("acc_old", m.acc_old)?;
    d.set_item("acc_new", m.acc_new)?;
    d.set_item("delta", m.delta)?;
    Ok(d)
}

fn parse_task(task: &str) -> PyResult<Task> {
    match task {
        "old" => Ok(Task::Old),
        "new" => Ok(Task::New),
        other => Err(ConfigError::new_err(format!("task must be \"old\" or \"new\", got {other:?}"))),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Relative drop of old-task accuracy, in percent.
#[pyfunction]
fn delta_forgetting(acc_old_star: f64, acc_old: f64) -> PyResult<f64> {
    lwf3d::eval::delta_forgetting(acc_old_star, acc_old).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (logits, tau = 1.0))]
fn softmax_tau(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    Ok(lwf3d::autodiff::softmax_tau(&Tensor::vector(logits), tau).map_err(to_py)?.into_data())
}

#[pyfunction]
fn cross_entropy(scores: Vec<f64>, label: usize) -> PyResult<f64> {
    training::cross_entropy_value(&scores, label).map_err(to_py)
}

/// Distillation loss between one student and one teacher score vector.
#[pyfunction]
fn kd_loss(student: Vec<f64>, teacher: Vec<f64>, tau: f64) -> PyResult<f64> {
    training::kd_value(&student, &teacher, tau).map_err(to_py)
}

/// One synthetic instance of `class` as a list of (x, y, z).
#[pyfunction]
#[pyo3(signature = (class_name, seed, points = 256))]
fn synthetic_cloud(class_name: &str, seed: u64, points: usize) -> PyResult<Vec<[f64; 3]>> {
    Ok(pointcloud::generate_synthetic(class_name, seed, points).map_err(to_py)?.points)
}

#[pyfunction]
fn normalize_unit_sphere(points: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
    Ok(pointcloud::normalize_unit_sphere(&PointCloud::new(points)).map_err(to_py)?.points)
}

/// Attribute-derived class vectors, keyed by class name.
#[pyfunction]
#[pyo3(signature = (classes, dim = 300, seed = 0))]
fn synthetic_embeddings(classes: Vec<String>, dim: usize, seed: u64) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let table = lwf3d::semantics::synthetic_embeddings(&classes, dim, seed).map_err(to_py)?;
    Ok(classes
        .iter()
        .filter_map(|c| table.get(c).map(|v| (c.clone(), v.to_vec())))
        .collect())
}

/// Runs the experiment described by a config file and returns one dict per
/// (mode, seed). `modes` overrides the config's mode list.
#[pyfunction]
#[pyo3(signature = (config, modes = None, out = None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    modes: Option<String>,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut c = ExperimentConfig::load(&config).map_err(to_py)?;
    if let Some(out) = out {
        c.output_dir = out;
    }
    let modes = match modes {
        Some(text) => parse_modes(&text).map_err(ConfigError::new_err)?,
        None => c.modes.clone(),
    };
    let report = py
        .detach(|| Experiment::prepare(c).and_then(|exp| exp.run(&modes)))
        .map_err(to_py)?;
    report
        .rows()
        .iter()
        .map(|r| {
            let d = metrics_dict(py, &r.metrics)?;
            d.set_item("mode", r.mode.to_string())?;
            d.set_item("seed", r.seed)?;
            Ok(d)
        })
        .collect()
}

/// A saved model with its header metadata.
#[pyclass(frozen)]
struct Checkpoint {
    inner: lwf3d::harness::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: lwf3d::harness::Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn header(&self) -> BTreeMap<String, String> {
        self.inner.header.clone()
    }

    fn meta(&self, key: &str) -> Option<String> {
        self.inner.meta(key).map(str::to_string)
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Task scores for each cloud, one row per cloud.
    #[pyo3(signature = (clouds, task = "old"))]
    fn predict(&self, py: Python<'_>, clouds: Vec<Vec<[f64; 3]>>, task: &str) -> PyResult<Vec<Vec<f64>>> {
        let task = parse_task(task)?;
        let model = self.inner.to_model().map_err(to_py)?;
        let clouds: Vec<PointCloud> = clouds.into_iter().map(PointCloud::new).collect();
        let scores = py
            .detach(|| model.predict(task, &clouds.iter().collect::<Vec<_>>()))
            .map_err(to_py)?;
        Ok(rows(&scores))
    }

    /// Task-aware metrics on the test data of `config`.
    #[pyo3(signature = (config, acc_old_star = None))]
    fn evaluate<'py>(&self, py: Python<'py>, config: PathBuf, acc_old_star: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
        let m = py
            .detach(|| {
                let exp = Experiment::prepare(ExperimentConfig::load(&config)?)?;
                exp.evaluate_checkpoint(&self.inner, acc_old_star)
            })
            .map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// Writes projected features and class semantics as CSV; returns the row count.
    #[pyo3(signature = (config, out, split = "new-test"))]
    fn dump_features(&self, py: Python<'_>, config: PathBuf, out: PathBuf, split: &str) -> PyResult<usize> {
        let which: SplitName = split.parse().map_err(to_py)?;
        py.detach(|| {
            let exp = Experiment::prepare(ExperimentConfig::load(&config)?)?;
            exp.dump_features(&self.inner, which, &out)
        })
        .map_err(to_py)
    }
}

#[pymodule]
fn lwf3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("ProtocolError", m.py().get_type::<ProtocolError>())?;
    m.add_function(wrap_pyfunction!(delta_forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_tau, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_unit_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
