//! Python module `texforce`: configs, the toy world, models, sampling,
//! rewards, adapters and the CLI commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use texforce_core::checkpoint::load_models;
use texforce_core::cli::{self, Cli};
use texforce_core::config::RunConfig;
use texforce_core::diffusion::gaussian_log_prob;
use texforce_core::image::Image;
use texforce_core::lora::{self, AdapterSet};
use texforce_core::model::Models;
use texforce_core::pipeline::{paired_seed, sample_images};
use texforce_core::rewards::by_name;
use texforce_core::toy_world::{self, Difficulty};
use texforce_core::trainer;

fn err(e: texforce_core::Error) -> PyErr {
    match e {
        texforce_core::Error::InvalidArgument(_) | texforce_core::Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// RGB image with values in [0, 1], stored row-major HWC.
#[pyclass(name = "Image", module = "texforce", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, rgb8: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: Image::from_rgb8(width, height, rgb8).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Image::load_png(&path).map_err(err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// 8-bit RGB bytes, `width * height * 3` long.
    fn rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_rgb8())
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f32; 3]> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.inner.pixel(x, y))
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width, self.inner.height)
    }
}

/// Run configuration; keys and defaults match the `key = value` config files.
#[pyclass(name = "Config", module = "texforce", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(err)?,
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        texforce_core::config::KEYS.iter().map(|(k, _)| *k).collect()
    }
}

/// Text encoder plus denoiser, optionally with adapters attached.
#[pyclass(name = "Model", module = "texforce", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Models<f32>,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised models for `config`, or weights from `checkpoint`.
    #[new]
    #[pyo3(signature = (config, checkpoint = None))]
    fn new(config: &PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let cfg = config.inner.clone();
        cfg.validate().map_err(err)?;
        let vocab = cfg.vocabulary().map_err(err)?;
        let mut inner = Models::new(cfg.model_config(&vocab), vocab, cfg.seed).map_err(err)?;
        if let Some(path) = checkpoint.or_else(|| cfg.base_checkpoint.clone()) {
            load_models(&mut inner, &path).map_err(err)?;
        }
        Ok(Self { inner, config: cfg })
    }

    fn attach(&mut self, adapters: &PyAdapters) -> PyResult<()> {
        self.inner.attach(&adapters.inner).map_err(err)
    }

    fn merge(&mut self, adapters: &PyAdapters) -> PyResult<()> {
        self.inner.merge(&adapters.inner).map_err(err)
    }

    /// Pooled prompt embedding.
    fn encode(&self, prompt: &str) -> PyResult<Vec<f32>> {
        Ok(self.inner.encode(prompt).map_err(err)?.pooled())
    }

    fn tokens(&self, prompt: &str) -> Vec<u32> {
        self.inner.tokens(prompt)
    }

    /// One image per prompt. Seeds default to the paired evaluation seeds.
    #[pyo3(signature = (prompts, seeds = None, guidance = None))]
    fn sample(&self, py: Python<'_>, prompts: Vec<String>, seeds: Option<Vec<u64>>, guidance: Option<f64>) -> PyResult<Vec<PyImage>> {
        let seeds = seeds.unwrap_or_else(|| prompts.iter().map(|p| paired_seed(self.config.seed, p, 0)).collect());
        let guidance = guidance.unwrap_or(self.config.guidance);
        let sched = self.config.schedule().map_err(err)?;
        let workers = cli::workers_from_env().map_err(err)?;
        let images = py
            .detach(|| sample_images(&self.inner, &sched, &prompts, &seeds, guidance, workers))
            .map_err(err)?;
        Ok(images.into_iter().map(|inner| PyImage { inner }).collect())
    }
}

/// LoRA adapters keyed by layer name.
#[pyclass(name = "Adapters", module = "texforce", from_py_object)]
#[derive(Clone)]
struct PyAdapters {
    inner: AdapterSet,
}

#[pymethods]
impl PyAdapters {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: lora::load_adapters(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: lora::from_bytes(data, std::path::Path::new("<bytes>")).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lora::save_adapters(&self.inner, &path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &lora::to_bytes(&self.inner).map_err(err)?))
    }

    fn layers(&self) -> Vec<String> {
        self.inner.adapters.keys().cloned().collect()
    }

    #[getter]
    fn metadata(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.metadata.clone()
    }

    /// Dense `B·A·alpha/rank` update of one layer, row-major `out × in`.
    fn delta(&self, layer: &str) -> PyResult<Vec<f64>> {
        self.inner
            .adapters
            .get(layer)
            .map(|a| a.delta())
            .ok_or_else(|| PyValueError::new_err(format!("no adapter for `{layer}`")))
    }

    fn __len__(&self) -> usize {
        self.inner.adapters.len()
    }

    fn __eq__(&self, other: &PyAdapters) -> bool {
        self.inner == other.inner
    }
}

/// Weighted sum of the low-rank updates of several adapter sets.
#[pyfunction]
fn fuse(sets: Vec<PyAdapters>, weights: Vec<f64>) -> PyResult<PyAdapters> {
    let sets: Vec<AdapterSet> = sets.into_iter().map(|s| s.inner).collect();
    Ok(PyAdapters {
        inner: lora::fuse(&sets, &weights).map_err(err)?,
    })
}

/// Score an image with a named reward (`incompressibility`, `color`, ...,
/// or `external:<command>`).
#[pyfunction]
#[pyo3(signature = (reward, image, prompt, config = None))]
fn score(reward: &str, image: &PyImage, prompt: &str, config: Option<&PyConfig>) -> PyResult<f64> {
    let cfg = config.map(|c| c.inner.rewards()).unwrap_or_default();
    by_name(reward, &cfg).map_err(err)?.evaluate(&image.inner, prompt).map_err(err)
}

/// A toy-world scene: `(caption, image)`.
#[pyfunction]
#[pyo3(signature = (seed, difficulty = "single"))]
fn generate_scene(seed: u64, difficulty: &str) -> PyResult<(String, PyImage)> {
    let d: Difficulty = difficulty.parse().map_err(err)?;
    let item = toy_world::generate_scene(seed, d).map_err(err)?;
    Ok((item.caption, PyImage { inner: item.image }))
}

/// Seen and held-out prompts of a task.
#[pyfunction]
fn prompt_splits(task: &str) -> PyResult<(Vec<String>, Vec<String>)> {
    Ok(toy_world::prompt_splits(task.parse().map_err(err)?))
}

#[pyfunction]
fn log_prob(x: Vec<f64>, mean: Vec<f64>, std: f64) -> PyResult<f64> {
    gaussian_log_prob(&x, &mean, std).map_err(err)
}

#[pyfunction]
fn normalize_advantages(rewards: Vec<f64>) -> Vec<f64> {
    trainer::normalize_advantages(&rewards)
}

#[pyfunction]
fn ppo_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    trainer::ppo_objective(ratio, advantage, clip)
}

/// Run a CLI command, e.g. `run(["pretrain", "--config", "c.conf"])`.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> PyResult<()> {
    use clap::Parser;
    let cli = Cli::try_parse_from(std::iter::once("texforce".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.detach(|| cli::run(&cli)).map_err(err)
}

#[pymodule(name = "texforce")]
fn texforce_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAdapters>()?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_splits, m)?)?;
    m.add_function(wrap_pyfunction!(log_prob, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(ppo_objective, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
