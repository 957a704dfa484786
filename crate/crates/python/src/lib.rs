//! Python bindings: tensors cross the boundary as flat float lists plus a
//! shape, configurations as JSON strings.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use geotex_core::checkpoint::Checkpoint;
use geotex_core::cli::{cmd_eval, cmd_finetune, cmd_synth, cmd_train, cmd_transfer, StageArg};
use geotex_core::config::RunConfig;
use geotex_core::metrics;
use geotex_core::model::Model;
use geotex_core::synthworld::{FrameSource, Split, World};
use geotex_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_config(json: &str) -> PyResult<RunConfig> {
    let cfg = RunConfig::from_json(json).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("split must be `train` or `test`, got `{other}`"))),
    }
}

/// Dense float tensor, row-major.
#[pyclass(name = "Tensor", module = "geotex", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: Tensor::new(&shape, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self { inner: Tensor::zeros(&shape) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<f32> {
        self.inner.data().get(i).copied().ok_or_else(|| PyIndexError::new_err(i))
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.reshaped(&shape).map_err(py_err)? })
    }

    /// Item `i` of the leading axis (batch dim kept).
    fn batch_item(&self, i: usize) -> PyResult<Self> {
        if i >= self.inner.shape().first().copied().unwrap_or(0) {
            return Err(PyIndexError::new_err(i));
        }
        Ok(Self { inner: self.inner.batch_item(i) })
    }

    fn mean(&self) -> f32 {
        self.inner.mean()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: Tensor) -> PyTensor {
    PyTensor { inner: t }
}

fn batched(t: &Tensor) -> PyResult<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshaped(&s).map_err(py_err)
}

/// The procedural synthetic world.
#[pyclass(name = "World", module = "geotex")]
pub struct PyWorld {
    inner: World,
}

#[pymethods]
impl PyWorld {
    /// Build from a run-config JSON document (its `world` section is used).
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self { inner: World::new(cfg.world).map_err(py_err)? })
    }

    fn person_ids(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.persons(parse_split(split)?).iter().map(|p| p.person_id.clone()).collect())
    }

    /// Ground truth of one frame as a dict of batched tensors.
    fn frame<'py>(&self, py: Python<'py>, split: &str, person: usize, frame: usize) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let f = self.inner.frame(parse_split(split)?, person, frame).map_err(py_err)?;
        let d = pyo3::types::PyDict::new(py);
        for (k, t) in [("image", &f.image), ("mask", &f.mask), ("scores", &f.scores), ("uv", &f.uv), ("stickman", &f.stickman)] {
            d.set_item(k, wrap(batched(t)?))?;
        }
        d.set_item("keypoints", f.keypoints.iter().map(|k| (k[0], k[1])).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Ground-truth atlas `[n, 3, A, A]` of a person.
    fn atlas(&self, split: &str, person: usize) -> PyResult<PyTensor> {
        let p = self.inner.persons(parse_split(split)?).get(person).ok_or_else(|| PyIndexError::new_err(person))?;
        Ok(wrap(p.gt_atlas(self.inner.config.atlas_size)))
    }
}

/// Geometry and texture generators.
#[pyclass(name = "Model", module = "geotex")]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters for the config's model section.
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn init(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self { inner: Model::init(cfg.model.geometry, cfg.model.texture, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(py_err)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(serde_json::Value::Null, self.inner.clone()).save(&path).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.inner.geometry.param_count() + self.inner.texture.param_count()
    }

    /// `(uv, scores)` for each target pose given a source set.
    fn predict_geometry(&self, images: &PyTensor, poses: &PyTensor, target_poses: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let p = self.inner.predict_geometry(None, &images.inner, &poses.inner, &target_poses.inner).map_err(py_err)?;
        Ok((wrap(p.uv), wrap(p.scores)))
    }

    /// Fused atlas from partial source atlases, each `[n, 4, A, A]`.
    fn generate_texture(&self, atlases: Vec<PyTensor>) -> PyResult<PyTensor> {
        let refs: Vec<&Tensor> = atlases.iter().map(|a| &a.inner).collect();
        let (_, atlas) = geotex_core::texture::generate(&self.inner.texture, &self.inner.texture_config, &refs).map_err(py_err)?;
        Ok(wrap(atlas))
    }
}

#[pyfunction]
#[pyo3(signature = (atlas, uv, scores, background=None))]
fn render(atlas: &PyTensor, uv: &PyTensor, scores: &PyTensor, background: Option<&PyTensor>) -> PyResult<PyTensor> {
    let out = geotex_core::renderer::render(&atlas.inner, &uv.inner, &scores.inner, background.map(|b| &b.inner)).map_err(py_err)?;
    Ok(wrap(out))
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> f64 {
    metrics::ssim(&a.inner, &b.inner)
}

#[pyfunction]
fn masked_l1(a: &PyTensor, b: &PyTensor, mask: &PyTensor) -> Option<f64> {
    metrics::masked_l1(&a.inner, &b.inner, &mask.inner)
}

/// Preset configuration as JSON.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    Ok(RunConfig::preset(name).map_err(py_err)?.to_value().to_string())
}

/// Load, override and validate a configuration; returns JSON.
#[pyfunction]
#[pyo3(signature = (path=None, overrides=Vec::new()))]
fn load_config(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    Ok(RunConfig::load(path.as_deref(), &overrides).map_err(py_err)?.to_value().to_string())
}

#[pyfunction]
#[pyo3(signature = (config, out, force=false))]
fn synthesize(py: Python<'_>, config: &str, out: PathBuf, force: bool) -> PyResult<()> {
    let cfg = parse_config(config)?;
    py.detach(|| cmd_synth(&cfg, &out, force)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (config, data, out, stage="all", resume=None, force=false))]
fn train(py: Python<'_>, config: &str, data: PathBuf, out: PathBuf, stage: &str, resume: Option<PathBuf>, force: bool) -> PyResult<()> {
    let cfg = parse_config(config)?;
    let stage = match stage {
        "init" => StageArg::Init,
        "all" => StageArg::All,
        other => return Err(PyValueError::new_err(format!("stage must be `init` or `all`, got `{other}`"))),
    };
    py.detach(|| cmd_train(&cfg, &data, &out, stage, resume.as_deref(), force)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, data, person, out, force=false))]
fn finetune(py: Python<'_>, config: &str, checkpoint: PathBuf, data: PathBuf, person: &str, out: PathBuf, force: bool) -> PyResult<()> {
    let cfg = parse_config(config)?;
    py.detach(|| cmd_finetune(&cfg, &checkpoint, &data, person, &out, force)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (personal, data, driving, out, start=0, count=16, force=false))]
#[allow(clippy::too_many_arguments)]
fn transfer(
    py: Python<'_>,
    personal: PathBuf,
    data: PathBuf,
    driving: &str,
    out: PathBuf,
    start: usize,
    count: usize,
    force: bool,
) -> PyResult<()> {
    py.detach(|| cmd_transfer(&personal, &data, driving, start, count, &out, force)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, data, out, force=false))]
fn evaluate(py: Python<'_>, config: &str, checkpoint: PathBuf, data: PathBuf, out: PathBuf, force: bool) -> PyResult<()> {
    let cfg = parse_config(config)?;
    py.detach(|| cmd_eval(&cfg, &checkpoint, &data, &out, force)).map_err(py_err)
}

/// Finite-difference suite: `(group, name, max_rel_error, tolerance, passed)`.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<Vec<(String, String, f64, f64, bool)>> {
    let entries = py.detach(geotex_core::gradcheck::run_suite).map_err(py_err)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.group, e.report.name, e.report.max_rel_error, e.tolerance, e.passed))
        .collect())
}

#[pyfunction]
fn checkpoint_digest(path: PathBuf) -> PyResult<String> {
    let ck = Checkpoint::load(Path::new(&path)).map_err(py_err)?;
    Ok(format!("{}:{}", ck.model.geometry.digest(), ck.model.texture.digest()))
}

#[pymodule]
fn geotex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(masked_l1, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_digest, m)?)?;
    Ok(())
}
