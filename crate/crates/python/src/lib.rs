//! Python bindings for the `normadapt` core crate.
//!
//! Structured results cross the boundary as plain dicts and lists built from
//! their JSON form.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use normadapt::analysis::{layer_similarity, Pooling, ProbeInfo};
use normadapt::budget::{count, table2_reproduction, ArchPreset};
use normadapt::harness::{self, TaskKind, TaskSpec};
use normadapt::model::{checkpoint, Inputs, Model, ModelConfig};
use normadapt::normmath::{self, SamplerSpec};
use normadapt::peft::{apply_strategy, merge_lora, TuningStrategy};
use normadapt::tensor::Tensor;

fn py_err(e: normadapt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn strategy(name: &str) -> PyResult<TuningStrategy> {
    name.parse().map_err(py_err)
}

/// A float32 transformer with visual-prefix support.
#[pyclass(name = "Model", module = "normadapt_py")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset = "mini", seed = 0, norm_kind = None))]
    fn new(preset: &str, seed: u64, norm_kind: Option<&str>) -> PyResult<Self> {
        let mut config = ModelConfig::by_name(preset).map_err(py_err)?;
        if let Some(kind) = norm_kind {
            config.norm_kind = kind.parse().map_err(py_err)?;
        }
        Ok(PyModel {
            inner: Model::build(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn paths(&self) -> Vec<String> {
        self.inner.params.paths().map(str::to_string).collect()
    }

    fn param_count(&self) -> usize {
        self.inner.params.total_count()
    }

    fn trainable_count(&self) -> usize {
        self.inner.params.trainable_count()
    }

    fn parameter(&self, path: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.params.get(path).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Selects trainable parameters, injecting LoRA adapters if needed.
    #[pyo3(signature = (name, seed = 0))]
    fn apply_strategy<'py>(
        &mut self,
        py: Python<'py>,
        name: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (report, _) =
            apply_strategy(&strategy(name)?, &mut self.inner.params, &mut rng).map_err(py_err)?;
        to_py(py, &report)
    }

    fn merge_lora(&mut self) -> PyResult<usize> {
        merge_lora(&mut self.inner.params).map_err(py_err)
    }

    /// Flat `[batch, seq, vocab]` logits and their shape.
    #[pyo3(signature = (tokens, batch, visual = None))]
    fn logits(
        &self,
        tokens: Vec<usize>,
        batch: usize,
        visual: Option<Vec<f32>>,
    ) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let cfg = &self.inner.config;
        let visual = visual
            .map(|v| Tensor::new(vec![batch, cfg.n_visual_tokens, cfg.d_visual], v))
            .transpose()
            .map_err(py_err)?;
        let inputs = match &visual {
            Some(v) => Inputs::with_visual(&tokens, batch, v),
            None => Inputs::text(&tokens, batch),
        };
        let out = self.inner.logits(inputs).map_err(py_err)?;
        Ok((out.shape().to_vec(), out.into_data()))
    }

    /// Layer-similarity report of the block outputs on a token batch.
    #[pyo3(signature = (tokens, batch, pooling = "mean"))]
    fn layer_similarity<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<usize>,
        batch: usize,
        pooling: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pooling = match pooling {
            "mean" => Pooling::Mean,
            "last-token" => Pooling::LastToken,
            other => return Err(PyValueError::new_err(format!("unknown pooling `{other}`"))),
        };
        let probe = ProbeInfo {
            dataset: "python".into(),
            batch,
            seed: 0,
        };
        let report = layer_similarity(&self.inner, Inputs::text(&tokens, batch), pooling, probe)
            .map_err(py_err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, d_model={}, params={})",
            c.n_layers,
            c.d_model,
            self.inner.params.total_count()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (preset, strategy_name, bytes_per_param = 2))]
fn budget<'py>(
    py: Python<'py>,
    preset: &str,
    strategy_name: &str,
    bytes_per_param: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let preset = ArchPreset::by_name(preset).map_err(py_err)?;
    to_py(
        py,
        &count(&preset, &strategy(strategy_name)?, bytes_per_param).map_err(py_err)?,
    )
}

#[pyfunction]
fn table2(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(
        py,
        &table2_reproduction(&[ArchPreset::llama7b(), ArchPreset::llama13b()]).map_err(py_err)?,
    )
}

#[pyfunction]
#[pyo3(signature = (step, total, warmup_ratio = 0.03, base_lr = 2e-3))]
fn lr_schedule(step: usize, total: usize, warmup_ratio: f64, base_lr: f64) -> PyResult<f64> {
    harness::lr_schedule(step, total, warmup_ratio, base_lr).map_err(py_err)
}

/// Closed-form input gradient of a gain-free LayerNorm.
#[pyfunction]
fn ln_backward(x: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    let inst = normmath::ln_stats(&x).map_err(py_err)?;
    normmath::ln_backward_closed_form(&inst, &b).map_err(py_err)
}

#[pyfunction]
fn check_projection(py: Python<'_>, x: Vec<f64>) -> PyResult<Bound<'_, PyAny>> {
    let inst = normmath::ln_stats(&x).map_err(py_err)?;
    to_py(py, &normmath::check_projection(&inst).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (n_grid, upstream = "iid", trials = 200, seed = 42))]
fn variance_scaling<'py>(
    py: Python<'py>,
    n_grid: Vec<usize>,
    upstream: &str,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let sampler = SamplerSpec::new(upstream.parse().map_err(py_err)?, seed);
    to_py(
        py,
        &normmath::variance_scaling_study(&n_grid, sampler, trials).map_err(py_err)?,
    )
}

/// Synthetic samples as dicts with `tokens`, `answer_mask`, `latent`, `category`.
#[pyfunction]
#[pyo3(signature = (kind, n_samples, seq_len, seed = 0, mixture = (0.4, 0.3, 0.3)))]
fn generate<'py>(
    py: Python<'py>,
    kind: &str,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
    mixture: (f64, f64, f64),
) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "text-pretrain" => TaskKind::TextPretrain,
        "mm-adapt" => TaskKind::MmAdapt,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown task kind `{other}`"
            )))
        }
    };
    let spec = TaskSpec::new(
        kind,
        [mixture.0, mixture.1, mixture.2],
        n_samples,
        seq_len,
        seed,
    );
    to_py(py, &harness::generate(&spec).map_err(py_err)?.samples)
}

#[pyfunction]
fn parse_config<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &harness::parse_config(text).map_err(py_err)?)
}

#[pymodule]
fn normadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(table2, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(ln_backward, m)?)?;
    m.add_function(wrap_pyfunction!(check_projection, m)?)?;
    m.add_function(wrap_pyfunction!(variance_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    let strategies = PyDict::new(m.py());
    for kind in normadapt::peft::StrategyKind::PAPER {
        strategies.set_item(kind.name(), kind.patterns().to_vec())?;
    }
    m.add("STRATEGY_PATTERNS", strategies)?;
    Ok(())
}
