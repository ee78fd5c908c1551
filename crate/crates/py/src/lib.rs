//! Python bindings. Matrices cross the boundary as lists of rows.

// Keyword arguments on the Python side become plain parameters here.
#![allow(clippy::too_many_arguments)]

use bayesprompt::embedding_store::{self, SynthConfig};
use bayesprompt::gmm::{self, EmConfig, GmmInit};
use bayesprompt::pipeline::{self, PipelineConfig};
use bayesprompt::prompt_synthesis::{self, TypePromptInit, WordEmbeddingTable};
use bayesprompt::svgd::{self, Bandwidth, StepMode, SvgdConfig};
use bayesprompt::trainer_eval::{self, TrainConfig};
use bayesprompt::Error;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidConfig(_)
        | Error::DimensionMismatch { .. }
        | Error::LabelOutOfRange { .. }
        | Error::NonFiniteValue { .. }
        | Error::NonPositiveBandwidth(_)
        | Error::EmptyAfterSplit(_)
        | Error::LabelSpaceMismatch(_)
        | Error::TooFewSamples { .. }
        | Error::EmptyBatch
        | Error::EmptyParticleSet => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

type SvgdOutput<'py> = (Vec<Vec<f64>>, Vec<Bound<'py, PyDict>>);

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(
    name = "EmbeddingSet",
    module = "bayesprompt_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyEmbeddingSet {
    inner: embedding_store::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    fn new(
        vectors: Vec<Vec<f64>>,
        labels: Vec<usize>,
        relation_names: Vec<String>,
    ) -> PyResult<Self> {
        let inner =
            embedding_store::EmbeddingSet::new(matrix(vectors)?, labels, relation_names, None)
                .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = embedding_store::load_embedding_set(path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        embedding_store::save_embedding_set(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn vectors(&self) -> Vec<Vec<f64>> {
        rows(self.inner.vectors())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn relation_names(&self) -> Vec<String> {
        self.inner.relation_names().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingSet(rows={}, dim={}, relations={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.n_relations()
        )
    }
}

#[pyclass(
    name = "GmmParams",
    module = "bayesprompt_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyGmmParams {
    inner: gmm::GmmParams,
}

#[pymethods]
impl PyGmmParams {
    #[new]
    fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        let inner = gmm::GmmParams::new(matrix(means)?, matrix(variances)?, Array1::from(weights))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        rows(self.inner.means())
    }

    #[getter]
    fn variances(&self) -> Vec<Vec<f64>> {
        rows(self.inner.variances())
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn log_density(&self, z: Vec<f64>) -> PyResult<f64> {
        self.inner
            .log_density(Array1::from(z).view())
            .map_err(to_py)
    }

    fn score(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .score(Array1::from(z).view())
            .map_err(to_py)?
            .to_vec())
    }

    fn responsibilities(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .responsibilities(Array1::from(z).view())
            .map_err(to_py)?
            .to_vec())
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        rows(&svgd::sample_gmm(&self.inner, n, seed))
    }
}

#[pyclass(
    name = "GmmFit",
    module = "bayesprompt_py",
    frozen,
    skip_from_py_object
)]
struct PyGmmFit {
    inner: gmm::GmmFit,
}

#[pymethods]
impl PyGmmFit {
    #[getter]
    fn params(&self) -> PyGmmParams {
        PyGmmParams {
            inner: self.inner.params.clone(),
        }
    }

    #[getter]
    fn log_likelihood(&self) -> Vec<f64> {
        self.inner.log_likelihood.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(json_err)?,
        })
    }
}

#[pyclass(
    name = "PromptPack",
    module = "bayesprompt_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyPromptPack {
    inner: prompt_synthesis::PromptPack,
}

#[pymethods]
impl PyPromptPack {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: prompt_synthesis::load_prompt_pack(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        prompt_synthesis::save_prompt_pack(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn relation_names(&self) -> Vec<String> {
        self.inner.relation_names.clone()
    }

    #[getter]
    fn label_prompts(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.label_prompts)
    }

    /// `(subject, object)`, or `None` when type prompts are absent.
    #[getter]
    fn type_prompts(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner
            .type_prompts
            .as_ref()
            .map(|t| (t.subject.to_vec(), t.object.to_vec()))
    }

    #[getter]
    fn type_init(&self) -> String {
        self.inner.type_init.to_string()
    }
}

#[pyclass(
    name = "TrainedModel",
    module = "bayesprompt_py",
    frozen,
    skip_from_py_object
)]
struct PyTrainedModel {
    inner: trainer_eval::TrainedPromptModel,
}

#[pymethods]
impl PyTrainedModel {
    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.loss_trace.clone()
    }

    #[getter]
    fn val_f1_trace(&self) -> Vec<f64> {
        self.inner.val_f1_trace.clone()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    /// Class probabilities for one example embedding.
    fn predict(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = trainer_eval::predict_distribution(&self.inner.scorer, Array1::from(h).view())
            .map_err(to_py)?;
        Ok(p.to_vec())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(json_err)?,
        })
    }
}

#[pyfunction]
#[pyo3(signature = (n_classes=19, per_class=100, dim=16, class_separation=3.0, within_class_stddev=1.0, seed=0))]
fn generate_synthetic_set(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    class_separation: f64,
    within_class_stddev: f64,
    seed: u64,
) -> PyResult<PyEmbeddingSet> {
    let config = SynthConfig {
        n_classes,
        per_class,
        dim,
        class_separation,
        within_class_stddev,
        seed,
    };
    Ok(PyEmbeddingSet {
        inner: embedding_store::generate_synthetic_set(&config).map_err(to_py)?,
    })
}

#[pyfunction]
fn kshot_sample(set: &PyEmbeddingSet, k: usize, seed: u64) -> PyEmbeddingSet {
    PyEmbeddingSet {
        inner: embedding_store::kshot_sample(&set.inner, k, seed),
    }
}

#[pyfunction]
#[pyo3(signature = (data, n_components, max_iters=200, tol=1e-8, variance_floor=1e-6, init="class-means", seed=0))]
fn fit_gmm(
    py: Python<'_>,
    data: &PyEmbeddingSet,
    n_components: usize,
    max_iters: usize,
    tol: f64,
    variance_floor: f64,
    init: &str,
    seed: u64,
) -> PyResult<PyGmmFit> {
    let init = match init {
        "class-means" => GmmInit::ClassMeans,
        "kmeans++" => GmmInit::KMeansPlusPlus,
        other => return Err(PyValueError::new_err(format!("unknown init {other:?}"))),
    };
    let config = EmConfig {
        max_iters,
        tol,
        variance_floor,
        init,
        seed,
    };
    let fit = py
        .detach(|| gmm::fit_gmm(&data.inner, n_components, &config))
        .map_err(to_py)?;
    Ok(PyGmmFit { inner: fit })
}

/// Returns `(particles, trace)`; each trace row is a dict with keys
/// `iter`, `mean_phi_norm`, `bandwidth` and `mmd`.
#[pyfunction]
#[pyo3(signature = (particles, target, n_iters=500, base_step=0.1, step_mode="adagrad", bandwidth=None, seed=0))]
fn svgd_run<'py>(
    py: Python<'py>,
    particles: Vec<Vec<f64>>,
    target: &PyGmmParams,
    n_iters: usize,
    base_step: f64,
    step_mode: &str,
    bandwidth: Option<f64>,
    seed: u64,
) -> PyResult<SvgdOutput<'py>> {
    let config = SvgdConfig {
        n_iters,
        base_step,
        step_mode: step_mode.parse::<StepMode>().map_err(to_py)?,
        bandwidth: bandwidth.map_or(Bandwidth::AutoMedian, Bandwidth::Fixed),
        seed,
        ..SvgdConfig::default()
    };
    let init = svgd::ParticleSet::new(matrix(particles)?).map_err(to_py)?;
    let run = py
        .detach(|| svgd::svgd_run(&init, &target.inner, &config, None))
        .map_err(to_py)?;
    let trace = run
        .trace
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iter", r.iter)?;
            d.set_item("mean_phi_norm", r.mean_phi_norm)?;
            d.set_item("bandwidth", r.bandwidth)?;
            d.set_item("mmd", r.mmd)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((rows(run.particles.particles()), trace))
}

#[pyfunction]
fn rbf_kernel(a: Vec<f64>, b: Vec<f64>, h: f64) -> PyResult<f64> {
    svgd::rbf_kernel(Array1::from(a).view(), Array1::from(b).view(), h).map_err(to_py)
}

#[pyfunction]
fn median_bandwidth(particles: Vec<Vec<f64>>) -> PyResult<f64> {
    let set = svgd::ParticleSet::new(matrix(particles)?).map_err(to_py)?;
    Ok(svgd::median_bandwidth(&set))
}

/// Unbiased squared MMD with an RBF kernel of bandwidth `h`.
#[pyfunction]
fn mmd(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, h: f64) -> PyResult<f64> {
    svgd::mmd_rows(matrix(a)?.view(), matrix(b)?.view(), h).map_err(to_py)
}

#[pyfunction]
fn disassemble_label(label: &str) -> PyResult<Vec<String>> {
    prompt_synthesis::disassemble_label(label).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (train_set, particles, type_init="latent", seed=0))]
fn synthesize_prompts(
    train_set: &PyEmbeddingSet,
    particles: Vec<Vec<f64>>,
    type_init: &str,
    seed: u64,
) -> PyResult<PyPromptPack> {
    let set = &train_set.inner;
    let table = WordEmbeddingTable::hashed(set.dim());
    let particles = matrix(particles)?;
    let pack = prompt_synthesis::synthesize_prompts(
        set.relation_names(),
        set.token_stream(),
        &table,
        particles.view(),
        type_init.parse::<TypePromptInit>().map_err(to_py)?,
        seed,
    )
    .map_err(to_py)?;
    Ok(PyPromptPack { inner: pack })
}

#[pyfunction]
#[pyo3(signature = (train_set, val_set, pack, epochs=50, batch_size=4, learning_rate=0.01, temperature=1.0, seed=0))]
fn train(
    py: Python<'_>,
    train_set: &PyEmbeddingSet,
    val_set: &PyEmbeddingSet,
    pack: &PyPromptPack,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    temperature: f64,
    seed: u64,
) -> PyResult<PyTrainedModel> {
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        temperature,
        seed,
        ..TrainConfig::default()
    };
    let model = py
        .detach(|| {
            trainer_eval::train(&train_set.inner, &val_set.inner, &pack.inner, &config, None)
        })
        .map_err(to_py)?;
    Ok(PyTrainedModel { inner: model })
}

/// Returns a dict with `micro_f1`, `macro_f1` and `per_class`.
#[pyfunction]
#[pyo3(signature = (model, test_set, null_label=None))]
fn evaluate_f1<'py>(
    py: Python<'py>,
    model: &PyTrainedModel,
    test_set: &PyEmbeddingSet,
    null_label: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = trainer_eval::evaluate_f1(&model.inner, &test_set.inner, null_label).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("micro_f1", m.micro_f1)?;
    out.set_item("macro_f1", m.macro_f1)?;
    let per_class = m
        .per_class
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("relation", &c.relation)?;
            d.set_item("precision", c.precision)?;
            d.set_item("recall", c.recall)?;
            d.set_item("f1", c.f1)?;
            d.set_item("support", c.support)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("per_class", per_class)?;
    Ok(out)
}

/// Runs the seeded protocol. `config_json` uses the same schema as the CLI's
/// `--config` file; the result is returned as a JSON string.
#[pyfunction]
#[pyo3(signature = (data=None, config_json=None))]
fn run_pipeline(
    py: Python<'_>,
    data: Option<&PyEmbeddingSet>,
    config_json: Option<&str>,
) -> PyResult<String> {
    let config: PipelineConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => PipelineConfig::default(),
    };
    let result = py.detach(|| -> bayesprompt::Result<_> {
        let generated;
        let full = match data {
            Some(d) => &d.inner,
            None => {
                generated = embedding_store::generate_synthetic_set(&config.synth)?;
                &generated
            }
        };
        let table = WordEmbeddingTable::hashed(full.dim());
        pipeline::run_seeded_protocol(full, &config, &table, false)
    });
    serde_json::to_string(&result.map_err(to_py)?).map_err(json_err)
}

#[pymodule]
pub fn bayesprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyGmmParams>()?;
    m.add_class::<PyGmmFit>()?;
    m.add_class::<PyPromptPack>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic_set, m)?)?;
    m.add_function(wrap_pyfunction!(kshot_sample, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gmm, m)?)?;
    m.add_function(wrap_pyfunction!(svgd_run, m)?)?;
    m.add_function(wrap_pyfunction!(rbf_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(median_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(disassemble_label, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_f1, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
