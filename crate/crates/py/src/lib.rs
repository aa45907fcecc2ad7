//! Python bindings for `bgad-core`.
//!
//! Validation failures raise `ValueError`; everything else raises
//! `RuntimeError`. Vectors cross the boundary as lists of floats and maps as
//! row-major nested lists.

use std::path::PathBuf;

use bgad_core::data::{load_manifest, synth_dataset, synth_map_dataset, BinaryMask, Split, SynthKind};
use bgad_core::flow::{position_embedding as core_position_embedding, FlowConfig};
use bgad_core::metrics::{self, AnomalyMap};
use bgad_core::objective::{self, BoundaryState};
use bgad_core::scoring::score_dataset;
use bgad_core::trainer;
use bgad_core::Label;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: bgad_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for bgad_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Row-major copy of a rectangular nested list.
fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok((h, w, rows.concat()))
}

fn boundary_dict<'py>(py: Python<'py>, b: &BoundaryState) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("raw_b_n", b.raw_b_n)?;
    d.set_item("b_n", b.b_n)?;
    d.set_item("b_a", b.b_a)?;
    d.set_item("alpha_n", b.alpha_n)?;
    d.set_item("alpha", b.alpha)?;
    d.set_item("beta", b.beta)?;
    d.set_item("tau", b.tau)?;
    Ok(d)
}

/// Conditional affine-coupling flow over `dim`-dimensional feature vectors.
#[pyclass(name = "FlowModel", module = "bgad", skip_from_py_object)]
#[derive(Clone)]
struct PyFlowModel {
    inner: bgad_core::FlowModel,
}

#[pymethods]
impl PyFlowModel {
    #[new]
    #[pyo3(signature = (dim, blocks = 8, cond_dim = 64, seed = 0, level = "l0"))]
    fn new(dim: usize, blocks: usize, cond_dim: usize, seed: u64, level: &str) -> PyResult<Self> {
        let cfg = FlowConfig {
            blocks,
            cond_dim,
            ..FlowConfig::new(dim)
        };
        Ok(Self {
            inner: bgad_core::FlowModel::new(&cfg, level, seed).py()?,
        })
    }

    /// A model whose transform is the identity, so densities are standard normal.
    #[staticmethod]
    #[pyo3(signature = (dim, blocks = 8, cond_dim = 64))]
    fn identity(dim: usize, blocks: usize, cond_dim: usize) -> PyResult<Self> {
        let cfg = FlowConfig {
            blocks,
            cond_dim,
            ..FlowConfig::new(dim)
        };
        Ok(Self {
            inner: bgad_core::FlowModel::identity(&cfg, "l0").py()?,
        })
    }

    /// Draws every weight from `N(0, std²)` and every fixed scale from
    /// `exp(N(0, scale_std²))`.
    fn randomize(&mut self, std: f64, scale_std: f64, seed: u64) {
        self.inner.randomize(std, scale_std, seed);
    }

    /// `(z, logdet)` for input `x` under condition `c`.
    fn forward(&self, x: Vec<f64>, c: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let l = self.inner.forward(&x, &c).py()?;
        Ok((l.z, l.logdet))
    }

    fn inverse(&self, z: Vec<f64>, c: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.inverse(&z, &c).py()
    }

    fn log_likelihood(&self, x: Vec<f64>, c: Vec<f64>) -> PyResult<f64> {
        self.inner.log_likelihood(&x, &c).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.blocks().len()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "FlowModel(dim={}, blocks={}, cond_dim={})",
            self.inner.dim(),
            self.inner.blocks().len(),
            self.inner.cond_dim()
        )
    }
}

/// Training settings; keys and values use the same spelling as config files.
#[pyclass(name = "TrainConfig", module = "bgad", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: bgad_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults overridden by keyword arguments, e.g. `TrainConfig(epochs=10)`.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: bgad_core::TrainConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_string())?;
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        if self.inner.set(key, value).py()? {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("unknown setting '{key}'")))
        }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    /// Every setting as a `{key: value}` dict of strings.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.to_pairs() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let pairs: Vec<String> = self
            .inner
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!("TrainConfig({})", pairs.join(", "))
    }
}

/// Labelled feature maps, loaded from a manifest or synthesized.
#[pyclass(name = "Dataset", module = "bgad", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: bgad_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic set of `kind` (`gaussian-cluster`, `ring` or `two-moons`).
    /// With `grid`, every sample is an `(H, W)` map with a planted anomalous
    /// patch; otherwise a single position.
    #[staticmethod]
    #[pyo3(signature = (kind, n_normal, n_abnormal, dim, seed = 0, grid = None))]
    fn synth(
        kind: &str,
        n_normal: usize,
        n_abnormal: usize,
        dim: usize,
        seed: u64,
        grid: Option<(usize, usize)>,
    ) -> PyResult<Self> {
        let kind: SynthKind = kind.parse().py()?;
        let inner = match grid {
            Some(g) => synth_map_dataset(kind, n_normal, n_abnormal, dim, g, seed),
            None => synth_dataset(kind, n_normal, n_abnormal, dim, seed),
        }
        .py()?;
        Ok(Self { inner })
    }

    /// Loads every record of a manifest CSV. `split` is `train` or `test`.
    #[staticmethod]
    #[pyo3(signature = (path, split = "train", localization = false))]
    fn load(path: PathBuf, split: &str, localization: bool) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        let manifest = load_manifest(path, split).py()?;
        Ok(Self {
            inner: bgad_core::data::Dataset::load(&manifest, localization).py()?,
        })
    }

    /// Writes feature files and `manifest.csv` under `dir`.
    #[pyo3(signature = (dir, split = "train"))]
    fn write(&self, dir: PathBuf, split: &str) -> PyResult<PathBuf> {
        let split = if split == "test" { Split::Test } else { Split::Train };
        let manifest = self.inner.write(&dir, "manifest.csv", split).py()?;
        Ok(manifest.base_dir.join("manifest.csv"))
    }

    #[getter]
    fn levels(&self) -> Vec<String> {
        self.inner.levels.clone()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// `True` for abnormal samples.
    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.inner.samples.iter().map(|s| s.label == Label::Abnormal).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

/// Trained flows and boundaries, one per level.
#[pyclass(name = "Checkpoint", module = "bgad", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: bgad_core::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: bgad_core::Checkpoint::load(dir).py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(dir).py()
    }

    #[getter]
    fn levels(&self) -> Vec<String> {
        self.inner.levels()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn model(&self, index: usize) -> PyResult<PyFlowModel> {
        self.inner
            .models
            .get(index)
            .map(|m| PyFlowModel { inner: m.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("no level at index {index}")))
    }

    /// One dict per level, `None` where training ended before any boundary.
    fn boundaries<'py>(&self, py: Python<'py>) -> PyResult<Vec<Option<Bound<'py, PyDict>>>> {
        self.inner
            .boundaries
            .iter()
            .map(|b| b.as_ref().map(|b| boundary_dict(py, b)).transpose())
            .collect()
    }

    /// Scores every sample: a dict with `ids`, `labels`, `scores` (image
    /// level), `maps` (nested lists) and `logp_max` (per level).
    #[pyo3(signature = (dataset, smoothing_sigma = 4.0))]
    fn score<'py>(&self, py: Python<'py>, dataset: &PyDataset, smoothing_sigma: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = py
            .detach(|| score_dataset(&self.inner.models, &dataset.inner, smoothing_sigma, None))
            .py()?;
        let maps: Vec<Vec<Vec<f64>>> = r
            .maps
            .iter()
            .map(|m| m.scores.chunks(m.width).map(<[f64]>::to_vec).collect())
            .collect();
        let d = PyDict::new(py);
        d.set_item("ids", r.ids)?;
        d.set_item(
            "labels",
            r.labels.iter().map(|l| *l == Label::Abnormal).collect::<Vec<_>>(),
        )?;
        d.set_item("scores", r.image_scores)?;
        d.set_item("maps", maps)?;
        d.set_item("logp_max", r.logp_max)?;
        Ok(d)
    }
}

/// Trains one flow per level. Returns `(checkpoint, history)` where history
/// holds one dict per epoch.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config: &PyTrainConfig,
) -> PyResult<(PyCheckpoint, Vec<Bound<'py, PyDict>>)> {
    let outcome = py.detach(|| trainer::train(&dataset.inner, &config.inner)).py()?;
    let history = outcome
        .history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item(
                "phase",
                match r.phase {
                    bgad_core::Phase::Likelihood => "likelihood",
                    bgad_core::Phase::BoundaryGuided => "boundary",
                },
            )?;
            d.set_item("ml_loss", r.ml_loss)?;
            d.set_item("bgspp_loss", r.bgspp_loss)?;
            d.set_item("lr", r.lr)?;
            d.set_item("raw_b_n", r.raw_b_n.clone())?;
            d.set_item("violators", r.violators)?;
            d.set_item("abnormal_positions", r.abnormal_positions)?;
            d.set_item("boundary_refreshed", r.boundary_refreshed)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((
        PyCheckpoint {
            inner: outcome.checkpoint,
        },
        history,
    ))
}

/// Sinusoidal embedding of grid position `(row, col)` in a `(H, W)` grid.
#[pyfunction]
fn position_embedding(pos: (usize, usize), grid: (usize, usize), cond_dim: usize) -> PyResult<Vec<f64>> {
    Ok(core_position_embedding(pos, grid, cond_dim).py()?.into_inner())
}

/// Nearest-rank `beta`-th percentile of the normal log-likelihoods.
#[pyfunction]
fn find_normal_boundary(normal_logps: Vec<f64>, beta: f64) -> PyResult<f64> {
    objective::find_normal_boundary(&normal_logps, beta).py()
}

/// Normalized boundaries for a raw normal boundary.
#[pyfunction]
#[pyo3(signature = (raw_b_n, alpha = 10.0, tau = 0.1, beta = 5.0))]
fn build_boundary<'py>(py: Python<'py>, raw_b_n: f64, alpha: f64, tau: f64, beta: f64) -> PyResult<Bound<'py, PyDict>> {
    boundary_dict(py, &objective::build_boundary(raw_b_n, alpha, tau, beta).py()?)
}

#[pyfunction]
fn ml_loss(logps: Vec<f64>) -> PyResult<f64> {
    objective::ml_loss(&logps).py()
}

#[pyfunction]
fn anomaly_score(logp: f64, logp_max: f64) -> PyResult<f64> {
    objective::anomaly_score(logp, logp_max).py()
}

/// Area under the ROC curve; `labels` are `True` for abnormal.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).py()
}

fn maps_and_masks(
    maps: Vec<Vec<Vec<f64>>>,
    masks: Vec<Vec<Vec<bool>>>,
) -> PyResult<(Vec<AnomalyMap>, Vec<BinaryMask>)> {
    if maps.len() != masks.len() {
        return Err(PyValueError::new_err("maps and masks differ in length"));
    }
    let mut out = (Vec::new(), Vec::new());
    for (i, (m, g)) in maps.iter().zip(&masks).enumerate() {
        let (h, w, scores) = flatten(m)?;
        let (gh, gw, bits) = flatten(g)?;
        out.0.push(AnomalyMap::new(format!("m{i}"), h, w, scores).py()?);
        out.1.push(BinaryMask::new(gh, gw, bits).py()?);
    }
    Ok(out)
}

/// Pixel-level AUROC over maps and ground-truth masks.
#[pyfunction]
fn pixel_auroc(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<bool>>>) -> PyResult<f64> {
    let (maps, masks) = maps_and_masks(maps, masks)?;
    metrics::pixel_auroc(&maps, &masks).py()
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
#[pyfunction]
#[pyo3(signature = (maps, masks, fpr_limit = 0.3))]
fn pro(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<bool>>>, fpr_limit: f64) -> PyResult<f64> {
    let (maps, masks) = maps_and_masks(maps, masks)?;
    metrics::pro(&maps, &masks, fpr_limit).py()
}

#[pymodule]
fn bgad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlowModel>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(position_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(find_normal_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(build_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(ml_loss, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(pro, m)?)?;
    Ok(())
}
