//! Python bindings: configuration, datasets, classical estimators, training,
//! NMSE sweeps and critic activation maps.

use chanest_core::airsim::{self, ComplexGrid};
use chanest_core::baselines::{self, Baseline, LmmseModel};
use chanest_core::config::RunConfig;
use chanest_core::evaluation::{self, Estimator, SweepConfig};
use chanest_core::models::{load_model, save_model, Critic, Generator, ModelManifest};
use chanest_core::training::{self, TrainConfig};
use chanest_core::{xai, Error};
use num_complex::Complex32;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Shape { .. } => PyValueError::new_err(msg),
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(msg),
        _ => PyArithmeticError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for chanest_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Flat run configuration (`key = value` text).
#[pyclass(name = "RunConfig", module = "chanest", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse(t).py()?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).py()?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).py()?;
        next.validate().py()?;
        self.inner = next;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, epochs={})", self.inner.seed, self.inner.train.epochs)
    }
}

/// Simulated channels `H`, observations `R` and their SNRs.
#[pyclass(name = "Dataset", module = "chanest", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: airsim::Dataset,
}

impl PyDataset {
    fn sample(&self, i: usize) -> PyResult<&airsim::ChannelSample> {
        self.inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))
    }
}

#[pymethods]
impl PyDataset {
    /// Simulates `count` samples (default: the config's `dataset_count`).
    #[staticmethod]
    #[pyo3(signature = (config, count = None))]
    fn generate(config: &PyRunConfig, count: Option<usize>) -> PyResult<Self> {
        let c = &config.inner;
        let inner = airsim::generate_dataset(
            &c.topology_config(),
            &c.pilot_pattern().py()?,
            count.unwrap_or(c.dataset_count),
            c.snr_spec(),
            c.seed,
        )
        .py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: airsim::load_dataset(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        airsim::save_dataset(path, &self.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(antennas, symbols, subcarriers)`.
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.antennas, d.symbols, d.subcarriers)
    }

    /// Channel of sample `i`, flattened antenna-major.
    fn channel(&self, i: usize) -> PyResult<Vec<Complex32>> {
        Ok(self.sample(i)?.h.data().to_vec())
    }

    fn observation(&self, i: usize) -> PyResult<Vec<Complex32>> {
        Ok(self.sample(i)?.r.data().to_vec())
    }

    fn snr_db(&self, i: usize) -> PyResult<f64> {
        Ok(self.sample(i)?.snr_db)
    }

    /// Pilot REs as `(symbol, subcarrier)` pairs.
    fn pilot_positions(&self) -> Vec<(usize, usize)> {
        self.inner.pilot.positions()
    }

    /// First `train` samples and the rest; the second part inherits the
    /// statistics fitted on the first.
    fn split(&self, train: usize) -> PyResult<(PyDataset, PyDataset)> {
        let (mut a, mut b) = self.inner.clone().split(train).py()?;
        b.norm = Some(a.fit_norm().py()?);
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    /// Fits min-max statistics; returns `(min, max, mu_h, sigma_h)`.
    fn fit_norm(&mut self) -> PyResult<(f64, f64, f64, f64)> {
        let n = self.inner.fit_norm().py()?;
        Ok((n.scale_min, n.scale_max, n.mu_h, n.sigma_h))
    }
}

fn grid(dims: airsim::GridDims, data: Vec<Complex32>) -> PyResult<ComplexGrid> {
    ComplexGrid::from_vec(dims, data).py()
}

/// `Σ|H - Ĥ|² / Σ|H|²` over flat complex sequences.
#[pyfunction]
fn nmse(truth: Vec<Complex32>, estimate: Vec<Complex32>) -> PyResult<f64> {
    let d = airsim::GridDims::new(1, 1, truth.len());
    if estimate.len() != truth.len() {
        return Err(PyValueError::new_err("truth and estimate lengths differ"));
    }
    evaluation::nmse(&[grid(d, truth)?], &[grid(d, estimate)?]).py()
}

/// LS at pilots followed by `"ls_nearest"` or `"ls_linear"` interpolation.
#[pyfunction]
fn ls_estimate(dataset: &PyDataset, index: usize, method: &str) -> PyResult<Vec<Complex32>> {
    let r = &dataset.sample(index)?.r;
    let ls = baselines::ls_at_pilots(r, &dataset.inner.pilot).py()?;
    let est = match Baseline::parse(method).py()? {
        Baseline::LsNearest => baselines::interpolate_nearest(&ls),
        Baseline::LsLinear => baselines::interpolate_linear(&ls),
        Baseline::Lmmse => return Err(PyValueError::new_err("use Lmmse.fit(...).estimate(...) for LMMSE")),
    };
    Ok(est.data().to_vec())
}

#[pyclass(name = "Lmmse", module = "chanest", skip_from_py_object)]
#[derive(Clone)]
struct PyLmmse {
    inner: LmmseModel,
}

#[pymethods]
impl PyLmmse {
    #[staticmethod]
    fn fit(train: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: baselines::fit_lmmse(&train.inner, &train.inner.pilot).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: baselines::load_lmmse(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        baselines::save_lmmse(path, &self.inner).py()
    }

    fn estimate(&self, dataset: &PyDataset, index: usize, snr_db: f64) -> PyResult<Vec<Complex32>> {
        let r = &dataset.sample(index)?.r;
        Ok(self.inner.estimate(r, &dataset.inner.pilot, snr_db).py()?.data().to_vec())
    }
}

/// Trained generator/critic pair with the statistics it was trained on.
#[pyclass(name = "Model", module = "chanest", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    generator: Generator,
    critic: Critic,
    manifest: ModelManifest,
}

#[pymethods]
impl PyModel {
    /// Trains on `train` (normalization fitted if missing) with `config`.
    /// Returns the model and per-epoch mean losses as dicts.
    #[staticmethod]
    fn train(py: Python<'_>, train: &PyDataset, config: &PyRunConfig) -> PyResult<(PyModel, Vec<Vec<(String, f64)>>)> {
        let mut ds = train.inner.clone();
        if ds.norm.is_none() {
            ds.fit_norm().py()?;
        }
        let cfg = &config.inner;
        let arch = chanest_core::models::ArchConfig {
            antennas: ds.dims().antennas,
            symbols: ds.dims().symbols,
            subcarriers: ds.dims().subcarriers,
            ..cfg.arch_config()
        };
        let tc: TrainConfig = cfg.train_config();
        let outcome = py
            .detach(|| training::train(&ds, &arch, &tc, None, None, |_| {}))
            .py()?;
        let history = outcome
            .epochs
            .iter()
            .map(|e| {
                let m = e.mean();
                vec![
                    ("epoch".to_string(), e.epoch as f64),
                    ("L_D".into(), m.l_d),
                    ("L_G".into(), m.l_g),
                    ("L_rec".into(), m.l_rec),
                    ("L_KL".into(), m.l_kl),
                    ("L_gamma".into(), m.l_skew),
                    ("L_gp".into(), m.l_gp),
                ]
            })
            .collect();
        let t = outcome.trainer;
        let manifest = t.manifest();
        Ok((
            PyModel {
                generator: t.generator,
                critic: t.critic,
                manifest,
            },
            history,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let m = load_model(path).py()?;
        Ok(Self {
            generator: m.generator,
            critic: m.critic,
            manifest: m.manifest,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.generator, &self.critic, &self.manifest, &[]).py()
    }

    /// Trainable parameter counts `(generator, critic)`.
    fn parameter_counts(&self) -> (usize, usize) {
        (self.generator.params().trainable_count(), self.critic.params().trainable_count())
    }

    /// Channel estimate for sample `index` of `dataset` (physical units).
    fn estimate(&self, dataset: &PyDataset, index: usize) -> PyResult<Vec<Complex32>> {
        let est = Estimator::Generator {
            name: "generator".into(),
            generator: Box::new(self.generator.clone()),
            norm: self.manifest.norm,
            anchor: self.manifest.anchor().py()?,
        };
        let s = dataset.sample(index)?;
        let out = est.estimate_all(std::slice::from_ref(&s.r), &dataset.inner.pilot, s.snr_db).py()?;
        Ok(out[0].data().to_vec())
    }

    /// Activation map of critic layer `layer` (1-based) for the true channel
    /// of sample `index`: `(map, (h, w), overlay, (H, W), alignment)`.
    #[allow(clippy::type_complexity)]
    fn am4c(
        &self,
        dataset: &PyDataset,
        index: usize,
        layer: usize,
    ) -> PyResult<(Vec<f32>, (usize, usize), Vec<f32>, (usize, usize), f64)> {
        let h = &dataset.sample(index)?.h;
        let x = self.manifest.norm.to_features(h);
        let m = xai::am4c(&self.critic, &x, layer).py()?;
        let score = xai::alignment_score(&m, h).py()?;
        Ok((m.map, m.map_hw, m.upsampled, m.input_hw, score))
    }
}

/// NMSE sweep CSV of the named baselines (and optionally a model) on `test`.
/// LMMSE statistics come from `train`.
#[pyfunction]
#[pyo3(signature = (train, test, estimators, snr_grid, seed = 0, model = None))]
fn sweep_csv(
    py: Python<'_>,
    train: &PyDataset,
    test: &PyDataset,
    estimators: Vec<String>,
    snr_grid: Vec<f64>,
    seed: u64,
    model: Option<&PyModel>,
) -> PyResult<String> {
    let mut tr = train.inner.clone();
    let norm = match model {
        Some(m) => m.manifest.norm,
        None => tr.fit_norm().py()?,
    };
    let mut list = Vec::new();
    for name in &estimators {
        list.push(match name.as_str() {
            "generator" => {
                let m = model.ok_or_else(|| PyValueError::new_err("`generator` requires a model"))?;
                Estimator::Generator {
                    name: "generator".into(),
                    generator: Box::new(m.generator.clone()),
                    norm,
                    anchor: m.manifest.anchor().py()?,
                }
            }
            other => match Baseline::parse(other).py()? {
                Baseline::LsNearest => Estimator::LsNearest,
                Baseline::LsLinear => Estimator::LsLinear,
                Baseline::Lmmse => Estimator::Lmmse(baselines::fit_lmmse(&tr, &tr.pilot).py()?),
            },
        });
    }
    let cfg = SweepConfig {
        snr_grid,
        seed,
        threads: 1,
    };
    let test = &test.inner;
    let rows = py.detach(|| evaluation::sweep(test, &list, &cfg, &norm)).py()?;
    Ok(evaluation::sweep_csv(&rows))
}

#[pymodule]
fn chanest(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLmmse>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(ls_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_csv, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
