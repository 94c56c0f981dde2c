//! Python module `bsmamba`. Images are nested lists `[3][H][W]` with values in `[0,1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bsmamba_core::error::Error;
use bsmamba_core::hierarchy::{self, HierarchyMap, MapKind, HISTOGRAM_BINS};
use bsmamba_core::model::{Model, ModelConfig};
use bsmamba_core::nn::ParamStore;
use bsmamba_core::pipeline::checkpoint;
use bsmamba_core::pipeline::dataset::Sample;
use bsmamba_core::pipeline::enhance::enhance_sample;
use bsmamba_core::tensor::Tensor;
use bsmamba_core::{metrics, selftest};

type Image = Vec<Vec<Vec<f64>>>;
type Plane = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_tensor(img: &Image) -> PyResult<Tensor<f64>> {
    let h = img.first().map_or(0, Vec::len);
    let w = img.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if img.len() != 3 || h == 0 || w == 0 || img.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("image must be a non-empty [3][H][W] nested list"));
    }
    let data = img.iter().flatten().flatten().copied().collect();
    Tensor::new(&[3, h, w], data).map_err(py_err)
}

fn from_tensor(t: &Tensor<f64>) -> Image {
    let s = t.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let d = t.data();
    (0..c)
        .map(|k| {
            (0..h)
                .map(|y| d[(k * h + y) * w..(k * h + y + 1) * w].to_vec())
                .collect()
        })
        .collect()
}

fn to_plane(m: &HierarchyMap) -> Plane {
    m.values().chunks(m.width()).map(<[f64]>::to_vec).collect()
}

fn from_plane(p: &Plane) -> PyResult<HierarchyMap> {
    let (h, w) = (p.len(), p.first().map_or(0, Vec::len));
    if h == 0 || w == 0 || p.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("map must be a non-empty rectangular [H][W] list"));
    }
    HierarchyMap::new(h, w, p.concat(), MapKind::Brightness, "python").map_err(py_err)
}

/// A model with its parameters, held in 64-bit precision.
#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    params: ParamStore<f64>,
}

#[pymethods]
impl PyModel {
    /// Fresh model from `key = value` config text (defaults when omitted).
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => ModelConfig::from_text(text).map_err(py_err)?,
            None => ModelConfig::default(),
        };
        let model = Model::new(cfg).map_err(py_err)?;
        let params = model.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(PyModel { model, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = checkpoint::load::<f64>(&path).map_err(py_err)?;
        let model = Model::new(cfg).map_err(py_err)?;
        model.check_params(&params).map_err(py_err)?;
        Ok(PyModel { model, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.model.cfg, &self.params).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn config(&self) -> String {
        self.model.cfg.to_text()
    }

    /// Returns `(enhanced_image, scans_per_forward)`.
    fn enhance(&self, image: Image) -> PyResult<(Image, usize)> {
        let low = to_tensor(&image)?;
        let s = Sample {
            name: "python".into(),
            high: low.clone(),
            low,
            masks: None,
            score: None,
        };
        let e = enhance_sample(&self.model, &self.params, &s).map_err(py_err)?;
        Ok((from_tensor(&e.image), e.scans))
    }
}

#[pyfunction]
fn luma_score(image: Image) -> PyResult<Plane> {
    Ok(to_plane(&hierarchy::luma_score(&to_tensor(&image)?).map_err(py_err)?))
}

#[pyfunction]
fn histogram_score(image: Image) -> PyResult<Plane> {
    Ok(to_plane(
        &hierarchy::histogram_score(&to_tensor(&image)?, HISTOGRAM_BINS).map_err(py_err)?,
    ))
}

/// `(forward, inverse)` index lists of the stable ascending sort of a map.
#[pyfunction]
fn sort_plan(map: Plane) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let plan = hierarchy::build_sort_plan(&from_plane(&map)?).map_err(py_err)?;
    Ok((plan.forward_index().to_vec(), plan.inverse_index().to_vec()))
}

#[pyfunction]
fn semantic_ranges(n: usize) -> Vec<(f64, f64)> {
    hierarchy::semantic_ranges(n)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, peak = 1.0))]
fn psnr(pred: Image, gt: Image, peak: f64) -> PyResult<f64> {
    metrics::psnr(&to_tensor(&pred)?, &to_tensor(&gt)?, peak).map_err(py_err)
}

#[pyfunction]
fn ssim(pred: Image, gt: Image) -> PyResult<f64> {
    metrics::ssim(&to_tensor(&pred)?, &to_tensor(&gt)?).map_err(py_err)
}

/// Runs the fast property checks; returns `(name, passed, detail, seconds)` rows.
#[pyfunction]
fn run_selftest(py: Python<'_>) -> Vec<(String, bool, String, f64)> {
    py.detach(selftest::quick)
        .into_iter()
        .map(|c| (c.name.clone(), c.ok(), c.detail, c.seconds))
        .collect()
}

#[pymodule]
fn bsmamba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(luma_score, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_score, m)?)?;
    m.add_function(wrap_pyfunction!(sort_plan, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_ranges, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
