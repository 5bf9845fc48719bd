//! Python bindings: model construction, flexification, sampling, compute accounting and training.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use flexidit::backbone::{Cond, Conditioning, FlexMode, InitStyle, ModelConfig, ModelParams};
use flexidit::cli_io::{self, Checkpoint};
use flexidit::compute_model::plan_flops;
use flexidit::data::{generate, Example, SyntheticSpec};
use flexidit::diffusion::{sample_loop, NoiseSchedule, SampleOptions, Sampler};
use flexidit::flexify_training::{mmd2 as mmd2_core, RbfMixture, TrainConfig, Trainer as CoreTrainer};
use flexidit::numerics::Tensor;
use flexidit::scheduler_guidance::InferencePlan;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn class_cond(cfg: &ModelConfig, class: Option<usize>) -> Cond {
    match (class, cfg.conditioning) {
        (None, _) => Cond::Null,
        (Some(c), Conditioning::Class) => Cond::Class(c),
        (Some(c), Conditioning::Cross) => Cond::Tokens(vec![c % cfg.vocab]),
    }
}

fn rows(v: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = v.len();
    let dim = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != dim) {
        return Err(err("ragged rows"));
    }
    Tensor::new(&[n, dim], v.concat()).map_err(err)
}

#[pyclass(name = "ModelConfig", module = "flexidit", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(ModelConfig);

#[pymethods]
impl PyConfig {
    /// Defaults overlaid by an optional TOML table.
    #[new]
    #[pyo3(signature = (toml_text = None))]
    fn new(toml_text: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = toml::from_str(toml_text.unwrap_or("")).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[staticmethod]
    fn tiny() -> Self {
        Self(ModelConfig::tiny())
    }

    fn to_toml(&self) -> String {
        toml::to_string(&self.0).expect("config serializes")
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        (self.0.c_in, self.0.height, self.0.width)
    }

    #[getter]
    fn p_weak(&self) -> usize {
        self.0.p_weak
    }

    #[getter]
    fn p_powerful(&self) -> usize {
        self.0.p_powerful
    }

    fn tokens(&self, p: usize) -> usize {
        self.0.tokens(p)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(depth={}, d={}, {}x{}, steps={})", self.0.depth, self.0.d, self.0.height, self.0.width, self.0.steps)
    }
}

#[pyclass(name = "Plan", module = "flexidit", skip_from_py_object)]
#[derive(Clone)]
struct PyPlan(InferencePlan);

#[pymethods]
impl PyPlan {
    /// `weak:A,powerful:B[;style=..][;cfg=s;ratio=r]`
    #[new]
    #[pyo3(signature = (text, p_weak = 4, p_powerful = 2))]
    fn new(text: &str, p_weak: usize, p_powerful: usize) -> PyResult<Self> {
        InferencePlan::parse(text, p_weak, p_powerful).map(Self).map_err(err)
    }

    fn cond_sizes(&self) -> Vec<usize> {
        self.0.cond_sizes()
    }

    fn __len__(&self) -> usize {
        self.0.cond_sizes().len()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Plan({:?})", self.0.to_string())
    }
}

#[pyclass(name = "Model", module = "flexidit", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(ModelParams);

#[pymethods]
impl PyModel {
    /// Fresh weights; `random` fills every tensor instead of the zero-output training init.
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0, random = false))]
    fn init(config: &PyConfig, seed: u64, random: bool) -> PyResult<Self> {
        let style = if random { InitStyle::Random } else { InitStyle::Training };
        ModelParams::init(&config.0, seed, style).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, ema = true))]
    fn load(path: PathBuf, ema: bool) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self(if ema { ck.ema_params() } else { ck.params }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::weights(self.0.clone()).save(&path).map_err(err)
    }

    /// `"shared"` or `"lora"`.
    #[pyo3(signature = (mode, seed = 0))]
    fn flexify(&self, mode: &str, seed: u64) -> PyResult<Self> {
        let mode = match mode {
            "shared" => FlexMode::Shared,
            "lora" => FlexMode::Lora,
            other => return Err(err(format!("unknown mode {other:?}"))),
        };
        self.0.flexify(mode, seed).map(Self).map_err(err)
    }

    fn merge_loras(&self, p: usize) -> PyResult<Self> {
        self.0.merge_loras(p).map(Self).map_err(err)
    }

    fn randomize_adapters(&mut self, seed: u64, std: f64) {
        self.0.randomize_adapters(seed, std);
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.0.mode.name()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig(self.0.config.clone())
    }

    fn supported(&self) -> Vec<usize> {
        self.0.supported()
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn num_trainable(&self) -> usize {
        self.0.num_trainable()
    }

    /// Noise prediction for a flat `c*h*w` image.
    #[pyo3(signature = (x, t, p, class_label = None))]
    fn predict(&self, x: Vec<f64>, t: usize, p: usize, class_label: Option<usize>) -> PyResult<Vec<f64>> {
        let cfg = &self.0.config;
        let x = Tensor::new(&[cfg.c_in, cfg.height, cfg.width], x).map_err(err)?;
        let out = self.0.predict(&x, t, &class_cond(cfg, class_label), p).map_err(err)?;
        Ok(out.eps.data().to_vec())
    }

    /// Final flat images, one per seed.
    #[pyo3(signature = (plan, classes, seeds, sampler = "ddpm"))]
    fn sample(&self, py: Python<'_>, plan: &PyPlan, classes: Vec<usize>, seeds: Vec<u64>, sampler: &str) -> PyResult<Vec<Vec<f64>>> {
        let sampler = match sampler {
            "ddpm" => Sampler::Ddpm,
            "ddim" => Sampler::Ddim,
            other => return Err(err(format!("unknown sampler {other:?}"))),
        };
        if classes.len() != seeds.len() {
            return Err(err(format!("{} classes for {} seeds", classes.len(), seeds.len())));
        }
        let cfg = &self.0.config;
        let conds: Vec<Cond> = classes.iter().map(|&c| class_cond(cfg, Some(c))).collect();
        let schedule = NoiseSchedule::linear(cfg.steps).map_err(err)?;
        let opts = SampleOptions { sampler, ..SampleOptions::default() };
        let xs = py
            .detach(|| sample_loop(&self.0, &schedule, &plan.0, &conds, &seeds, &opts, None))
            .map_err(err)?
            .0;
        Ok(xs.iter().map(|x| x.data().to_vec()).collect())
    }

    /// `total`, `baseline` and `compute_fraction` of a plan.
    fn flops<'py>(&self, py: Python<'py>, plan: &PyPlan) -> PyResult<Bound<'py, PyDict>> {
        let r = plan_flops(&plan.0, &self.0, 0);
        let d = PyDict::new(py);
        d.set_item("total", r.total)?;
        d.set_item("baseline", r.baseline)?;
        d.set_item("compute_fraction", r.compute_fraction)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={}, params={}, sizes={:?})", self.0.mode.name(), self.0.num_params(), self.0.supported())
    }
}

#[pyclass(name = "Dataset", module = "flexidit")]
struct PyDataset(Vec<Example>);

#[pymethods]
impl PyDataset {
    /// Synthetic class-conditional images; the TOML overrides the default spec.
    #[staticmethod]
    #[pyo3(signature = (toml_text = None))]
    fn synthetic(toml_text: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticSpec = toml::from_str(toml_text.unwrap_or("")).map_err(err)?;
        Ok(Self(generate(&spec).map_err(err)?.examples()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<(Vec<f64>, usize)> {
        let e = self.0.get(i).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        Ok((e.x.data().to_vec(), e.label))
    }
}

#[pyclass(name = "Trainer", module = "flexidit")]
struct PyTrainer {
    inner: CoreTrainer,
    config: TrainConfig,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model, toml_text = None))]
    fn new(model: &PyModel, toml_text: Option<&str>) -> PyResult<Self> {
        let config: TrainConfig = toml::from_str(toml_text.unwrap_or("")).map_err(err)?;
        let inner = CoreTrainer::new(model.0.clone(), &config).map_err(err)?;
        Ok(Self { inner, config })
    }

    /// Train to the configured step count; returns the loss per step.
    fn run(&mut self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<f64>> {
        let Self { inner, config } = self;
        let log = py.detach(|| inner.run(&data.0, config, |_| {})).map_err(err)?;
        Ok(log.iter().map(|m| m.loss).collect())
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn flops(&self) -> u64 {
        self.inner.flops
    }

    #[pyo3(signature = (ema = true))]
    fn model(&self, ema: bool) -> PyModel {
        PyModel(if ema { self.inner.ema_params() } else { self.inner.params.clone() })
    }

    /// Full training state, resumable from the CLI.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_trainer(&self.inner, Some(&self.config)).save(&path).map_err(err)
    }
}

/// Unbiased squared MMD between two row sets under an RBF mixture.
#[pyfunction]
fn mmd2(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> PyResult<f64> {
    mmd2_core(&rows(xs)?, &rows(ys)?, &RbfMixture { bandwidths }, false).map_err(err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() {
        return Err(err("length mismatch"));
    }
    Ok(flexidit::analysis::spearman(&x, &y))
}

/// Run the command-line tool in-process; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("flexidit".to_string()).chain(args);
    cli_io::run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[pymodule]
#[pyo3(name = "flexidit")]
fn flexidit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
