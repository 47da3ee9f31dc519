//! Python bindings: dataset access, training, evaluation, inference, and the
//! attention cost model.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::path::Path;

use setpose::bench::{count_costs, AttnVariant, BenchCase};
use setpose::error::Error;
use setpose::harness::{
    evaluate_checkpoint, gen_data, load_checkpoint, train as train_run, EpochLog, GenDataConfig,
    RunConfig,
};
use setpose::matching::hungarian as hungarian_impl;
use setpose::model::{to_predictions, Model as CoreModel};
use setpose::numgrad::{ParamStore, Tape, Tensor};
use setpose::synthpose::{load_dataset, Dataset as CoreDataset};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract { .. } => PyValueError::new_err(e.to_string()),
        Error::Data(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("bad {what} config: {e}")))
}

fn log_to_dict<'py>(py: Python<'py>, log: &EpochLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", log.epoch)?;
    d.set_item("train_loss", log.train_loss)?;
    d.set_item("AP", log.ap)?;
    d.set_item("AP50", log.ap50)?;
    d.set_item("AP75", log.ap75)?;
    d.set_item("duplicate_rate", log.duplicate_rate)?;
    d.set_item("wall_seconds", log.wall_seconds)?;
    Ok(d)
}

/// Read-only handle on a rendered dataset file.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: load_dataset(Path::new(path)).map_err(to_py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_keypoints(&self) -> usize {
        self.inner.manifest().config.n_keypoints
    }

    /// One sample as a dict: grayscale image (row-major floats), its shape,
    /// and the ground-truth poses.
    fn sample<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.get(index).map_err(to_py_err)?;
        let d = PyDict::new(py);
        d.set_item("height", s.height)?;
        d.set_item("width", s.width)?;
        d.set_item("image", s.image)?;
        let gts = PyList::empty(py);
        for gt in &s.gts {
            let g = PyDict::new(py);
            g.set_item("keypoints", gt.keypoints.clone())?;
            g.set_item("visibility", gt.visibility.clone())?;
            g.set_item("area", gt.area)?;
            gts.append(g)?;
        }
        d.set_item("gts", gts)?;
        Ok(d)
    }
}

/// A pose model plus its weights; build fresh from a config or load a
/// training checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    model: CoreModel,
    store: ParamStore<f64>,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let config: RunConfig = parse_json("run", config_json)?;
        let mut store = ParamStore::new();
        let model = CoreModel::new(&config.model_config(), &mut store).map_err(to_py_err)?;
        Ok(PyModel { model, store })
    }

    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let ckpt = load_checkpoint(Path::new(path)).map_err(to_py_err)?;
        let (model, store, _opt) = ckpt.restore().map_err(to_py_err)?;
        Ok(PyModel { model, store })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.model.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Run the detector on one grayscale image (row-major floats in [0, 1]).
    /// Returns a list of {score, keypoints} dicts, one per query slot.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<Bound<'py, PyList>> {
        let tensor = Tensor::new(vec![height, width, 1], image).map_err(to_py_err)?;
        let mut tape = Tape::inference();
        let img = tape.constant(tensor);
        let out = self.model.forward(&mut tape, &self.store, img).map_err(to_py_err)?;
        let preds = to_predictions(&tape, out.final_set());
        let list = PyList::empty(py);
        for p in preds {
            let d = PyDict::new(py);
            d.set_item("score", p.score)?;
            d.set_item("keypoints", p.keypoints)?;
            list.append(d)?;
        }
        Ok(list)
    }
}

/// Render a synthetic dataset to `out_path`. The config is the same JSON the
/// CLI's `gen-data` takes.
#[pyfunction]
fn generate_data(config_json: &str, out_path: &str) -> PyResult<()> {
    let config: GenDataConfig = parse_json("generator", config_json)?;
    gen_data(&config, Path::new(out_path)).map_err(to_py_err)
}

/// Train from a run-config JSON string; returns the per-epoch logs as dicts.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyList>> {
    let config: RunConfig = parse_json("run", config_json)?;
    let out = train_run(&config).map_err(to_py_err)?;
    let list = PyList::empty(py);
    for log in &out.logs {
        list.append(log_to_dict(py, log)?)?;
    }
    Ok(list)
}

/// Score a checkpoint on a dataset. Returns {AP, AP50, AP75, duplicate_rate}.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, ckpt_path: &str, data_path: &str) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = load_checkpoint(Path::new(ckpt_path)).map_err(to_py_err)?;
    let metrics = evaluate_checkpoint(&ckpt, Path::new(data_path)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("AP", metrics.ap)?;
    d.set_item("AP50", metrics.ap50)?;
    d.set_item("AP75", metrics.ap75)?;
    d.set_item("duplicate_rate", metrics.duplicate_rate)?;
    Ok(d)
}

/// Minimum-cost assignment on a dense cost matrix (rows of equal length).
/// Returns (pairs, total_cost).
#[pyfunction]
fn hungarian(costs: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let n = costs.len();
    let m = costs.first().map(|r| r.len()).unwrap_or(0);
    if costs.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("cost rows must all have the same length"));
    }
    let flat: Vec<f64> = costs.into_iter().flatten().collect();
    let result = hungarian_impl(&flat, n, m).map_err(to_py_err)?;
    Ok((result.pairs, result.total_cost))
}

/// Analytic per-forward cost of one decoder self-attention sublayer.
#[pyfunction]
#[pyo3(signature = (variant, n, k, d, heads = 8))]
fn attention_costs<'py>(
    py: Python<'py>,
    variant: &str,
    n: usize,
    k: usize,
    d: usize,
    heads: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let variant: AttnVariant = variant.parse().map_err(to_py_err)?;
    let case = BenchCase { variant, n, k, d, heads, repeats: 3, warmup: 1 };
    let costs = count_costs(&case).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("map_entries", costs.map_entries)?;
    dict.set_item("map_flops", costs.map_flops)?;
    dict.set_item("projection_flops", costs.projection_flops)?;
    Ok(dict)
}

#[pymodule]
fn setpose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(attention_costs, m)?)?;
    Ok(())
}
