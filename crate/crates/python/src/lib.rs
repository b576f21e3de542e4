//! Python bindings: datasets, models, pretraining and diagnostics.

use std::path::PathBuf;

use dcglr_core::backbone::{forward, BackboneConfig, ModelParams};
use dcglr_core::data::{synth_dataset, Dataset as CoreDataset, Shape, Split, SynthConfig};
use dcglr_core::distill::{load_teacher, pretrain as core_pretrain, PretrainOptions, TrainConfig};
use dcglr_core::eval::{
    class_attention, export_attention, extract_features, linear_probe, spectrum, ProbeConfig,
};
use dcglr_core::geometry::{fps as core_fps, knn as core_knn, CropConfig, Point, PointCloud};
use dcglr_core::{rng, Error, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => {
            let items = a
                .iter()
                .map(|x| json_to_py(py, x))
                .collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn cloud(points: Vec<Point>) -> PyResult<PointCloud> {
    PointCloud::new(points, None).map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

/// Labelled point clouds with class names and a train/test split.
#[pyclass(module = "dcglr")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic primitives. `classes` is a count or comma-separated names.
    #[staticmethod]
    #[pyo3(signature = (classes=None, per_class=50, n_points=1024, noise=0.01, test_fraction=0.2, seed=0))]
    fn synthetic(
        classes: Option<&str>,
        per_class: usize,
        n_points: usize,
        noise: f64,
        test_fraction: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let classes = match classes {
            Some(c) => Shape::parse_list(c).map_err(py_err)?,
            None => Shape::ALL.to_vec(),
        };
        let inner = synth_dataset(&SynthConfig {
            classes,
            per_class,
            n_points,
            noise_sigma: noise,
            test_fraction,
            seed,
        })
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reads a `.pcb` container or a dataset manifest `.json`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDataset::load(&path).map_err(py_err)?,
        })
    }

    /// Writes `<dir>/<stem>.pcb` and its manifest; returns the manifest path.
    #[pyo3(signature = (dir, stem="dataset"))]
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<String> {
        let p = self
            .inner
            .save(&dir, stem, serde_json::Value::Null)
            .map_err(py_err)?;
        Ok(p.display().to_string())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn labels(&self) -> PyResult<Vec<usize>> {
        self.inner.labels().map_err(py_err)
    }

    /// `"train"` or `"test"` per cloud.
    fn splits(&self) -> Vec<&'static str> {
        self.inner
            .split
            .iter()
            .map(|s| match s {
                Split::Train => "train",
                Split::Test => "test",
            })
            .collect()
    }

    fn points(&self, index: usize) -> PyResult<Vec<Point>> {
        self.inner
            .clouds
            .get(index)
            .map(|c| c.points.clone())
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }
}

/// Backbone and projector parameters.
#[pyclass(module = "dcglr")]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        k_patch=32, dim=128, depth=4, heads=8, mlp_hidden=256, patch_hidden=128,
        projector_hidden=512, out_dim=128, centroid_channels=true, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        k_patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        patch_hidden: usize,
        projector_hidden: usize,
        out_dim: usize,
        centroid_channels: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = BackboneConfig {
            k_patch,
            dim,
            depth,
            heads,
            mlp_hidden,
            patch_hidden,
            projector_hidden,
            out_dim,
            centroid_channels,
        };
        Ok(Self {
            inner: ModelParams::init(&config, seed).map_err(py_err)?,
        })
    }

    /// Loads a parameter file or the teacher of a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_teacher(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn parameter_count(&self) -> usize {
        self.inner.scalar_count()
    }

    /// Backbone feature and projector logits of one cloud.
    #[pyo3(signature = (points, seed=0))]
    fn forward(&self, points: Vec<Point>, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = forward(&cloud(points)?, &self.inner, &mut rng::stream(seed)).map_err(py_err)?;
        Ok((f.feature.into_data(), f.logits.into_data()))
    }

    /// One feature row per cloud of `dataset`.
    #[pyo3(signature = (dataset, seed=0))]
    fn features(&self, dataset: &Dataset, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let f = extract_features(&dataset.inner.clouds, &self.inner, seed).map_err(py_err)?;
        Ok(rows(&f.rows))
    }

    /// Per-head class-token attention painted onto points.
    #[pyo3(signature = (points, layer=None, seed=0))]
    fn attention(
        &self,
        points: Vec<Point>,
        layer: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let maps = class_attention(&cloud(points)?, &self.inner, layer, seed).map_err(py_err)?;
        Ok(maps.heads.into_iter().map(|h| h.point_weights).collect())
    }

    /// Writes one PLY per head; returns the file paths.
    #[pyo3(signature = (points, out_dir, stem="cloud", layer=None, seed=0))]
    fn export_attention(
        &self,
        points: Vec<Point>,
        out_dir: PathBuf,
        stem: &str,
        layer: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<String>> {
        let (_, paths) = export_attention(
            &cloud(points)?,
            &self.inner,
            layer,
            seed,
            &out_dir,
            stem,
            &[],
        )
        .map_err(py_err)?;
        Ok(paths.iter().map(|p| p.display().to_string()).collect())
    }
}

/// Pretrains on the train split of `dataset`; returns the teacher and the
/// per-step metrics.
#[pyfunction]
#[pyo3(signature = (
    dataset, model, epochs=100, batch_size=16, base_lr=5e-4, warmup_epochs=10, weight_decay=0.04,
    teacher_temp=0.04, student_temp=0.1, momentum_start=0.996, centering=true, locals=8, resolutions=2,
    global_size=Some(1024), local_size=Some(256), seed=0, out_dir=None
))]
#[allow(clippy::too_many_arguments)]
fn pretrain<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    model: &Model,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    warmup_epochs: usize,
    weight_decay: f64,
    teacher_temp: f64,
    student_temp: f64,
    momentum_start: f64,
    centering: bool,
    locals: usize,
    resolutions: usize,
    global_size: Option<usize>,
    local_size: Option<usize>,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let config = TrainConfig {
        crops: CropConfig {
            locals,
            resolutions,
            global_size,
            local_size,
            ..CropConfig::default()
        },
        teacher_temp,
        student_temp,
        momentum_start,
        centering,
        epochs,
        batch_size,
        base_lr,
        warmup_epochs,
        weight_decay,
        seed,
        ..TrainConfig::default()
    };
    let out = core_pretrain(
        &dataset.inner.subset(Split::Train),
        &config,
        model.inner.config(),
        &PretrainOptions {
            out_dir,
            ..PretrainOptions::default()
        },
    )
    .map_err(py_err)?;
    Ok((
        Model {
            inner: out.state.teacher,
        },
        to_py(py, &out.metrics)?,
    ))
}

/// Linear classifier on standardized features; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (features, labels, splits, reg=1e-4, epochs=500, lr=0.05, seed=0))]
#[allow(clippy::too_many_arguments)]
fn probe<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    splits: Vec<String>,
    reg: f64,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let split = splits
        .iter()
        .map(|s| match s.as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = ProbeConfig {
        reg,
        epochs,
        lr,
        seed,
    };
    let report = linear_probe(&matrix(&features)?, &labels, &split, &cfg).map_err(py_err)?;
    to_py(py, &report)
}

/// Covariance eigenvalue spectrum and effective rank of a feature matrix.
#[pyfunction]
#[pyo3(signature = (features, threshold=dcglr_core::eval::RANK_THRESHOLD))]
fn feature_spectrum<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = spectrum(&matrix(&features)?, threshold).map_err(py_err)?;
    to_py(py, &report)
}

/// Farthest-point sampling from a seeded random start.
#[pyfunction]
#[pyo3(signature = (points, m, seed=0))]
fn fps(points: Vec<Point>, m: usize, seed: u64) -> PyResult<Vec<usize>> {
    core_fps(&cloud(points)?, m, &mut rng::stream(seed)).map_err(py_err)
}

/// Indices of the `k` nearest points to `center`, nearest first.
#[pyfunction]
fn knn(points: Vec<Point>, center: Point, k: usize) -> PyResult<Vec<usize>> {
    core_knn(&cloud(points)?, &center, k).map_err(py_err)
}

#[pymodule]
fn dcglr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(feature_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    Ok(())
}
