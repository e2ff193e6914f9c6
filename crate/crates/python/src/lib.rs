//! Python bindings for the `freehand` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use freehand::evaluation::{self, EvalConfig};
use freehand::geometry::{self, FrameGeometry};
use freehand::harness::{self, Dataset};
use freehand::model::{Model, ModelConfig};
use freehand::phantom::PhantomConfig;
use freehand::training::{self, RunConfig};
use freehand::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::OutputExists(_) => PyOSError::new_err(e.to_string()),
        Error::Aborted { .. } | Error::ContractViolation(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "RigidTransform", from_py_object)]
#[derive(Clone, Copy)]
struct PyRigidTransform {
    inner: geometry::RigidTransform,
}

#[pymethods]
impl PyRigidTransform {
    /// Rotation `[rz, ry, rx]` in radians (intrinsic Z-Y-X) and translation in mm.
    #[new]
    #[pyo3(signature = (rot=[0.0; 3], trans=[0.0; 3]))]
    fn new(rot: [f64; 3], trans: [f64; 3]) -> PyResult<Self> {
        geometry::RigidTransform::new(rot, trans).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_params(params: Vec<f64>) -> PyResult<Self> {
        geometry::RigidTransform::from_params(&params).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn rot(&self) -> [f64; 3] {
        self.inner.rot
    }

    #[getter]
    fn trans(&self) -> [f64; 3] {
        self.inner.trans
    }

    fn params(&self) -> [f64; 6] {
        self.inner.params()
    }

    /// Row-major 4x4 homogeneous matrix.
    fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.inner.matrix();
        (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()
    }

    fn compose(&self, other: &PyRigidTransform) -> Self {
        Self { inner: geometry::compose(&self.inner, &other.inner) }
    }

    fn inverse(&self) -> Self {
        Self { inner: geometry::invert(&self.inner) }
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        let p = self.inner.apply(&nalgebra_point(point));
        [p.x, p.y, p.z]
    }

    fn __repr__(&self) -> String {
        format!("RigidTransform(rot={:?}, trans={:?})", self.inner.rot, self.inner.trans)
    }
}

fn nalgebra_point(p: [f64; 3]) -> nalgebra::Point3<f64> {
    nalgebra::Point3::new(p[0], p[1], p[2])
}

fn unwrap_all(ts: &[PyRigidTransform]) -> Vec<geometry::RigidTransform> {
    ts.iter().map(|t| t.inner).collect()
}

fn frame_geometry(height: usize, width: usize, spacing: f64) -> PyResult<FrameGeometry> {
    FrameGeometry::new(height, width, spacing).map_err(to_py)
}

/// Transform taking frame `j` coordinates into frame `i`.
#[pyfunction]
fn relative_pose(world_i: &PyRigidTransform, world_j: &PyRigidTransform) -> PyRigidTransform {
    PyRigidTransform { inner: geometry::relative_pose(&world_i.inner, &world_j.inner) }
}

/// World poses of a chain of relative transforms, starting at identity.
#[pyfunction]
fn accumulate(rels: Vec<PyRigidTransform>) -> Vec<PyRigidTransform> {
    geometry::accumulate(&unwrap_all(&rels)).world.into_iter().map(|inner| PyRigidTransform { inner }).collect()
}

#[pyfunction]
fn frame_corners(height: usize, width: usize, spacing: f64) -> PyResult<Vec<[f64; 3]>> {
    let g = frame_geometry(height, width, spacing)?;
    Ok(geometry::frame_corners(&g).iter().map(|p| [p.x, p.y, p.z]).collect())
}

/// All four scan metrics for predicted relative transforms against
/// ground-truth world poses.
#[pyfunction]
#[pyo3(signature = (pred_rels, gt_world, height, width, spacing, stride=4, voxel_size=1.0))]
fn scan_metrics(
    pred_rels: Vec<PyRigidTransform>,
    gt_world: Vec<PyRigidTransform>,
    height: usize,
    width: usize,
    spacing: f64,
    stride: usize,
    voxel_size: f64,
) -> PyResult<(f64, f64, f64, f64)> {
    let g = frame_geometry(height, width, spacing)?;
    let cfg = EvalConfig { stride, voxel_size_mm: voxel_size };
    let m = evaluation::scan_metrics(&unwrap_all(&pred_rels), &unwrap_all(&gt_world), &g, &cfg).map_err(to_py)?;
    Ok((m.eps_frame, m.eps_acc, m.eps_dice, m.eps_drift))
}

#[pyfunction]
fn loss_ce(ys: Vec<Vec<f64>>, ts: Vec<Vec<f64>>) -> PyResult<f64> {
    training::loss_ce(&ys, &ts).map_err(to_py)
}

#[pyfunction]
fn loss_rec(pred: Vec<PyRigidTransform>, gt: Vec<PyRigidTransform>, height: usize, width: usize, spacing: f64) -> PyResult<f64> {
    let g = frame_geometry(height, width, spacing)?;
    training::loss_rec(&unwrap_all(&pred), &unwrap_all(&gt), &g).map_err(to_py)
}

/// Descriptor weights after each outer step of the two-branch toy problem,
/// and the branch finally selected (1 is the correct one).
#[pyfunction]
#[pyo3(signature = (seed, n_classes=6, steps=200, outer_lr=0.05, batch=8))]
fn toy_descriptor_search(seed: u64, n_classes: usize, steps: usize, outer_lr: f64, batch: usize) -> (Vec<Vec<f64>>, usize) {
    let t = training::toy_descriptor_search(seed, n_classes, steps, outer_lr, batch);
    (t.z, t.final_argmax)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// `config_json` follows the model configuration schema; missing
    /// fields take their defaults.
    #[new]
    #[pyo3(signature = (config_json="{}", seed=0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let mut value: serde_json::Value = serde_json::from_str(config_json).map_err(json_err)?;
        let mut base = serde_json::to_value(ModelConfig::default()).map_err(json_err)?;
        if let (Some(b), Some(v)) = (base.as_object_mut(), value.as_object_mut()) {
            b.extend(std::mem::take(v));
        }
        let config: ModelConfig = serde_json::from_value(base).map_err(json_err)?;
        Model::new(config, seed).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        training::Checkpoint::load(&checkpoint).map(|c| Self { inner: c.model }).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.len()
    }

    /// Descriptor weights `z`, one list per auxiliary task.
    fn z(&self) -> Vec<Vec<f64>> {
        self.inner.z()
    }

    fn finalize_branches(&mut self) -> Vec<usize> {
        self.inner.finalize_branches()
    }

    /// `seq_len` row-major frames in, `seq_len - 1` relative transforms out.
    fn predict(&self, frames: Vec<Vec<f32>>) -> PyResult<Vec<PyRigidTransform>> {
        let rels = self.inner.predict_relative_poses(&frames).map_err(to_py)?;
        Ok(rels.into_iter().map(|inner| PyRigidTransform { inner }).collect())
    }

    /// Main output plus mixed auxiliary class probabilities.
    fn forward(&self, frames: Vec<Vec<f32>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let out = self.inner.forward(&frames).map_err(to_py)?;
        Ok((out.main, out.mixed))
    }
}

/// Renders a phantom dataset; returns the manifest as JSON text.
#[pyfunction]
#[pyo3(signature = (out, seed=0, config_json=None, force=false))]
fn gen_data(out: PathBuf, seed: u64, config_json: Option<&str>, force: bool) -> PyResult<String> {
    let cfg = match config_json {
        Some(s) => serde_json::from_str::<PhantomConfig>(s).map_err(json_err)?,
        None => PhantomConfig::default(),
    };
    let m = harness::gen_data(&cfg, seed, &out, force).map_err(to_py)?;
    serde_json::to_string(&m).map_err(json_err)
}

/// Trains and evaluates one run; returns the run summary as JSON text.
#[pyfunction]
#[pyo3(signature = (config_json, data_dir, out, force=false))]
fn train(py: Python<'_>, config_json: &str, data_dir: PathBuf, out: PathBuf, force: bool) -> PyResult<String> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let summary = py
        .detach(|| {
            let data = Dataset::open(&data_dir)?;
            harness::run_train(&cfg, &data, &out, force)
        })
        .map_err(to_py)?;
    serde_json::to_string(&summary).map_err(json_err)
}

/// Evaluates a checkpoint on one split; returns the metrics report as JSON text.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, out, split="test", force=false))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data_dir: PathBuf, out: PathBuf, split: &str, force: bool) -> PyResult<String> {
    let report = py
        .detach(|| {
            let data = Dataset::open(&data_dir)?;
            harness::run_eval(&checkpoint, &data, split, &EvalConfig::default(), &out, force)
        })
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn freehand_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(relative_pose, m)?)?;
    m.add_function(wrap_pyfunction!(accumulate, m)?)?;
    m.add_function(wrap_pyfunction!(frame_corners, m)?)?;
    m.add_function(wrap_pyfunction!(scan_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(loss_ce, m)?)?;
    m.add_function(wrap_pyfunction!(loss_rec, m)?)?;
    m.add_function(wrap_pyfunction!(toy_descriptor_search, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
