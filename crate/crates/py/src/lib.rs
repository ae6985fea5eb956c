//! Python bindings.
//!
//! Images cross the boundary as flat channel-major `float` sequences of
//! length `3·height·width` with values in `[0, 1]`.

use std::path::PathBuf;

use cgd_core::checkpoint::Checkpoint;
use cgd_core::config::TrainConfig;
use cgd_core::dataset::{Dataset, DatasetSpec};
use cgd_core::imaging;
use cgd_core::model::Denoiser;
use cgd_core::nn::InitMode;
use cgd_core::noise::{self, EnhanceParams, NoiseParams};
use cgd_core::{Error, ImagePatch};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Dimension(_) | Error::Parameter(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn patch(data: Vec<f32>, height: usize, width: usize) -> PyResult<ImagePatch> {
    ImagePatch::from_vec(height, width, data).map_err(py_err)
}

/// A denoiser loaded from a checkpoint or freshly initialized.
#[pyclass(frozen)]
struct Model {
    inner: Denoiser<f32>,
    config_text: String,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint written by `cgd train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let cfg = TrainConfig::from_text(&ck.config_text).map_err(py_err)?;
        let mut inner = Denoiser::new(cfg.model, InitMode::IdentityAnchored, cfg.seed).map_err(py_err)?;
        ck.apply(&mut inner).map_err(py_err)?;
        Ok(Self {
            inner,
            config_text: ck.config_text,
        })
    }

    /// An untrained model with default hyperparameters. With `identity=True`
    /// the output equals the input exactly.
    #[staticmethod]
    #[pyo3(signature = (seed=0, identity=false))]
    fn untrained(seed: u64, identity: bool) -> PyResult<Self> {
        let cfg = TrainConfig::default();
        let mode = if identity { InitMode::IdentityAnchored } else { InitMode::Random };
        Ok(Self {
            inner: Denoiser::new(cfg.model.clone(), mode, seed).map_err(py_err)?,
            config_text: cfg.to_text(),
        })
    }

    #[getter]
    fn config_text(&self) -> &str {
        &self.config_text
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Denoises one image using the prior mean.
    fn denoise(&self, py: Python<'_>, data: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        let input = patch(data, height, width)?;
        let out = py.detach(|| self.inner.denoise(&input)).map_err(py_err)?;
        Ok(out.data().to_vec())
    }
}

/// Darkens, noises and re-enhances a clean image; returns `(dark_noisy, enhanced)`.
#[pyfunction]
#[pyo3(signature = (data, height, width, a=0.02, b=5e-4, gain=0.3, gamma=2.2, seed=0))]
#[allow(clippy::too_many_arguments)]
fn degrade(
    data: Vec<f32>,
    height: usize,
    width: usize,
    a: f64,
    b: f64,
    gain: f64,
    gamma: f64,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let clean = patch(data, height, width)?;
    let np = NoiseParams::new(a, b, seed).map_err(py_err)?;
    let ep = EnhanceParams::new(gain, gamma).map_err(py_err)?;
    let (dark, enhanced) = noise::darken_enhance(&clean, &np, &ep).map_err(py_err)?;
    Ok((dark.data().to_vec(), enhanced.data().to_vec()))
}

/// PSNR in dB between two images of equal shape.
#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak=1.0))]
fn psnr(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    imaging::psnr(&patch(a, height, width)?, &patch(b, height, width)?, peak).map_err(py_err)
}

/// Writes a paired dataset to `out` and returns the number of pairs.
#[pyfunction]
#[pyo3(signature = (out, pairs=256, size=48, seed=1))]
fn generate_dataset(py: Python<'_>, out: PathBuf, pairs: usize, size: usize, seed: u64) -> PyResult<usize> {
    py.detach(|| {
        let d = Dataset::generate(DatasetSpec::standard(pairs, size, seed))?;
        d.write(&out)?;
        Ok(d.len())
    })
    .map_err(py_err)
}

#[pymodule]
fn cgdenoise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
