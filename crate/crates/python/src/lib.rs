//! Python bindings: `import modelslice`.
//!
//! Structured results (cost reports, metrics, simulations) are returned as
//! plain dicts and lists built from the library's JSON form.

use std::path::PathBuf;

use modelslice::applications::{self, LatencyPolicy, QueryStream, RateChoice};
use modelslice::config::ExperimentConfig;
use modelslice::data::{self, Task};
use modelslice::incremental::{widen_model, ActivationCache, BatchToken, WidenMode};
use modelslice::model::InputSpec;
use modelslice::scheduler::{SchedulingScheme, SchemeKind, SliceRateList};
use modelslice::{checkpoint, cost, slicing, trainer, Error, GroupSpec, Inputs, SliceRate, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

create_exception!(modelslice, ModelSliceError, PyException);
create_exception!(modelslice, ConfigError, ModelSliceError);
create_exception!(modelslice, DataError, ModelSliceError);
create_exception!(modelslice, UsageError, ModelSliceError);
create_exception!(modelslice, TrainingError, ModelSliceError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::BudgetInfeasible { .. } => {
            ConfigError::new_err(msg)
        }
        Error::Data(_) | Error::Io { .. } => DataError::new_err(msg),
        Error::Usage(_) => UsageError::new_err(msg),
        Error::Training { .. } => TrainingError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for modelslice::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Converts any serializable value to native Python objects.
fn to_python<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).expect("value serializes");
    Ok(py
        .import("json")?
        .call_method1("loads", (text,))?
        .unbind())
}

fn rate(r: f64) -> PyResult<SliceRate> {
    SliceRate::new(r).py_err()
}

fn task(name: &str) -> PyResult<Task> {
    name.parse().py_err()
}

/// Active width of a `total`-wide axis split into `groups` at rate `r`.
#[pyfunction]
fn slice_boundary(total: usize, groups: usize, r: f64) -> PyResult<usize> {
    slicing::slice_boundary(&GroupSpec::new(total, groups).py_err()?, r).py_err()
}

/// Largest listed rate whose cost fits `budget`, given the full cost.
#[pyfunction]
fn max_rate_for_budget(budget: f64, full_cost: f64, rates: Vec<f64>) -> PyResult<f64> {
    cost::max_rate_for_budget(budget, full_cost, &SliceRateList::new(rates).py_err()?).py_err()
}

fn policy(latency: f64, unit_time: f64, rates: Vec<f64>) -> PyResult<LatencyPolicy> {
    LatencyPolicy::new(latency, unit_time, SliceRateList::new(rates).py_err()?).py_err()
}

/// Rate for a batch of `n` queries under the latency policy; `None` when
/// there is nothing to serve. Overloaded batches report the base rate.
#[pyfunction]
#[pyo3(signature = (n, latency=2.0, unit_time=0.01, rates=vec![0.25, 0.5, 0.75, 1.0]))]
fn choose_rate(n: usize, latency: f64, unit_time: f64, rates: Vec<f64>) -> PyResult<Option<f64>> {
    Ok(
        match applications::choose_rate_for_batch(&policy(latency, unit_time, rates)?, n) {
            RateChoice::Idle => None,
            RateChoice::Single { rate } | RateChoice::Split { rate, .. } => Some(rate),
        },
    )
}

/// Serving simulation; `arrivals=None` uses the bundled 16x-burst trace.
#[pyfunction]
#[pyo3(signature = (arrivals=None, latency=2.0, unit_time=0.01, rates=vec![0.25, 0.5, 0.75, 1.0]))]
fn simulate(
    py: Python<'_>,
    arrivals: Option<Vec<f64>>,
    latency: f64,
    unit_time: f64,
    rates: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let stream = match arrivals {
        Some(a) => QueryStream::new(a).py_err()?,
        None => QueryStream::bundled_burst(),
    };
    let sim = applications::simulate_workload(&stream, &policy(latency, unit_time, rates)?);
    to_python(py, &sim)
}

fn scheme(name: &str, rates: Vec<f64>) -> PyResult<SchedulingScheme> {
    SchedulingScheme::preset(name, &SliceRateList::new(rates).py_err()?).py_err()
}

/// Per-draw categorical probabilities of a named scheduling preset (empty
/// for the static preset; over the non-fixed rates for random-static).
#[pyfunction]
fn scheme_probabilities(name: &str, rates: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(match scheme(name, rates)?.kind() {
        SchemeKind::Static => Vec::new(),
        SchemeKind::Random { probabilities, .. }
        | SchemeKind::RandomStatic { probabilities, .. } => probabilities.clone(),
    })
}

/// `count` seeded per-iteration rate lists from a named preset.
#[pyfunction]
fn draw_rates(name: &str, rates: Vec<f64>, seed: u64, count: usize) -> PyResult<Vec<Vec<f64>>> {
    let s = scheme(name, rates)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            s.next_slice_rate_batch(&mut rng)
                .into_iter()
                .map(SliceRate::get)
                .collect()
        })
        .collect())
}

/// Per-stage cascade metrics from each stage's class predictions.
#[pyfunction]
fn cascade(
    py: Python<'_>,
    rates: Vec<f64>,
    predictions: Vec<Vec<usize>>,
    labels: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let m = applications::cascade_evaluate(&rates, &predictions, &labels).py_err()?;
    to_python(py, &m)
}

/// Fraction of the smaller model's errors the larger model also makes.
#[pyfunction]
fn inclusion_coefficient(errors_small: Vec<usize>, errors_large: Vec<usize>) -> f64 {
    applications::inclusion_coefficient(
        &errors_small.into_iter().collect(),
        &errors_large.into_iter().collect(),
    )
}

/// Writes a synthetic dataset and returns its path.
#[pyfunction]
fn gen_data(task_name: &str, seed: u64, size: usize, directory: PathBuf) -> PyResult<String> {
    let path = data::gen_data(task(task_name)?, seed, size, &directory).py_err()?;
    Ok(path.display().to_string())
}

/// Default experiment config for a task, as TOML text.
#[pyfunction]
fn preset_config(task_name: &str) -> PyResult<String> {
    ExperimentConfig::preset(task(task_name)?).to_toml().py_err()
}

/// Trains from TOML config text; returns the model and per-epoch metrics.
#[pyfunction]
#[pyo3(signature = (config, epochs=None))]
fn train(py: Python<'_>, config: &str, epochs: Option<usize>) -> PyResult<(Model, Py<PyAny>)> {
    let mut cfg = ExperimentConfig::from_toml(config).py_err()?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.validate().py_err()?;
    }
    let (model, rows) = py
        .detach(|| -> modelslice::Result<_> {
            let data = data::generate(cfg.task, cfg.seed, cfg.data.size, cfg.data.steps)?;
            let mut model = modelslice::Model::new(cfg.model.build(cfg.task)?, cfg.seed)?;
            let mut t = trainer::Trainer::new(&model, cfg.train_config())?;
            let rows = t.fit(&mut model, &data, &data, |_, _, _| Ok(()))?;
            Ok((model, rows))
        })
        .py_err()?;
    Ok((Model { inner: model }, to_python(py, &rows)?))
}

/// A width-sliceable model.
#[pyclass(module = "modelslice")]
struct Model {
    inner: modelslice::Model,
}

impl Model {
    /// Packs rows into the model's input layout.
    fn features(&self, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
        let n = rows.len();
        let mut shape = vec![n];
        match self.inner.spec().input {
            InputSpec::Features { dim } => shape.push(dim),
            InputSpec::Image {
                channels,
                height,
                width,
            } => shape.extend([channels, height, width]),
            InputSpec::Tokens { .. } => {
                return Err(UsageError::new_err(
                    "token models take predict_tokens, not feature rows",
                ))
            }
        }
        Tensor::new(shape, rows.into_iter().flatten().collect()).py_err()
    }
}

#[pymethods]
impl Model {
    /// Named architecture (vgg13, spirals, tinyimages, charlm), freshly
    /// initialized from `seed`.
    #[staticmethod]
    #[pyo3(signature = (name, seed=0))]
    fn preset(name: &str, seed: u64) -> PyResult<Self> {
        let spec = if name.eq_ignore_ascii_case("vgg13") {
            modelslice::ModelSpec::vgg13(8, 10)
        } else {
            let t = task(name)?;
            ExperimentConfig::preset(t).model.build(t).py_err()?
        };
        Ok(Self {
            inner: modelslice::Model::new(spec, seed).py_err()?,
        })
    }

    /// Builds from a JSON layer specification.
    #[staticmethod]
    #[pyo3(signature = (spec_json, seed=0))]
    fn from_spec(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec = serde_json::from_str(spec_json)
            .map_err(|e| ConfigError::new_err(format!("model spec: {e}")))?;
        Ok(Self {
            inner: modelslice::Model::new(spec, seed).py_err()?,
        })
    }

    /// Loads a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).py_err()?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, None).py_err()
    }

    /// Layer specification as JSON.
    #[getter]
    fn spec_json(&self) -> String {
        serde_json::to_string(self.inner.spec()).expect("spec serializes")
    }

    fn params(&self, r: f64) -> PyResult<u64> {
        cost::count_params(self.inner.spec(), rate(r)?).py_err()
    }

    fn flops(&self, r: f64) -> PyResult<u64> {
        cost::count_flops(self.inner.spec(), rate(r)?).py_err()
    }

    /// Per-layer parameter and FLOP report at rate `r`.
    fn cost_report(&self, py: Python<'_>, r: f64) -> PyResult<Py<PyAny>> {
        to_python(py, &cost::cost_report(self.inner.spec(), rate(r)?).py_err()?)
    }

    /// Logits of Subnet-`r` for feature rows (images flattened per row).
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<f64>>, r: f64) -> PyResult<Vec<Vec<f64>>> {
        let x = self.features(rows)?;
        let r = rate(r)?;
        let y = py
            .detach(|| self.inner.predict(&Inputs::Features(x), r))
            .py_err()?;
        let width = y.shape()[1];
        Ok(y.data().chunks(width).map(<[f64]>::to_vec).collect())
    }

    /// Predicted classes of Subnet-`r`.
    fn classify(&self, py: Python<'_>, rows: Vec<Vec<f64>>, r: f64) -> PyResult<Vec<usize>> {
        let x = self.features(rows)?;
        let r = rate(r)?;
        py.detach(|| self.inner.predict(&Inputs::Features(x), r)?.argmax_rows())
            .py_err()
    }

    /// Next-token logits for equal-length token sequences, time-major rows.
    fn predict_tokens(&self, sequences: Vec<Vec<usize>>, r: f64) -> PyResult<Vec<Vec<f64>>> {
        let batch = sequences.len();
        let steps = sequences.first().map_or(0, Vec::len);
        if sequences.iter().any(|s| s.len() != steps) {
            return Err(UsageError::new_err("sequences must share one length"));
        }
        let inputs = Inputs::Tokens {
            ids: sequences.into_iter().flatten().collect(),
            batch,
            steps,
        };
        let y = self.inner.predict(&inputs, rate(r)?).py_err()?;
        let width = y.shape()[1];
        Ok(y.data().chunks(width).map(<[f64]>::to_vec).collect())
    }

    /// Metrics of Subnet-`r` on a generated dataset.
    #[pyo3(signature = (task_name, seed, size, r, steps=16))]
    fn evaluate(
        &self,
        py: Python<'_>,
        task_name: &str,
        seed: u64,
        size: usize,
        r: f64,
        steps: usize,
    ) -> PyResult<Py<PyAny>> {
        let data = data::generate(task(task_name)?, seed, size, steps).py_err()?;
        let m = trainer::evaluate(&self.inner, rate(r)?, &data).py_err()?;
        to_python(py, &m)
    }

    /// Computes Subnet-`r_b` from cached Subnet-`r_a` activations. Returns
    /// logits, FLOPs spent, FLOPs of a direct pass and the largest omitted
    /// correction.
    #[pyo3(signature = (rows, r_a, r_b, mode="exact"))]
    fn widen(
        &self,
        py: Python<'_>,
        rows: Vec<Vec<f64>>,
        r_a: f64,
        r_b: f64,
        mode: &str,
    ) -> PyResult<Py<PyAny>> {
        let mode = match mode {
            "exact" => WidenMode::Exact,
            "approx" => WidenMode::Approx,
            other => {
                return Err(ConfigError::new_err(format!(
                    "mode must be 'exact' or 'approx', not '{other}'"
                )))
            }
        };
        let x = self.features(rows)?;
        let token = BatchToken(0);
        let cache = ActivationCache::build(&self.inner, &x, rate(r_a)?, token).py_err()?;
        let w = widen_model(&self.inner, &cache, token, &x, rate(r_b)?, mode).py_err()?;
        #[derive(Serialize)]
        struct Out {
            logits: Vec<Vec<f64>>,
            flops: u64,
            full_flops: u64,
            max_error_bound: f64,
        }
        let width = w.logits.shape()[1];
        to_python(
            py,
            &Out {
                logits: w.logits.data().chunks(width).map(<[f64]>::to_vec).collect(),
                flops: w.flops(),
                full_flops: w.full_flops(),
                max_error_bound: w.max_error_bound(),
            },
        )
    }

    fn __repr__(&self) -> String {
        let spec = self.inner.spec();
        format!(
            "Model(layers={}, params={})",
            spec.layers.len(),
            cost::count_params(spec, SliceRate::new(1.0).expect("valid rate")).unwrap_or(0)
        )
    }
}

/// Width-sliceable neural networks: nested-subnet training, cost model,
/// incremental inference and serving harnesses.
#[pymodule]
#[pyo3(name = "modelslice")]
fn modelslice_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ModelSliceError", py.get_type::<ModelSliceError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("UsageError", py.get_type::<UsageError>())?;
    m.add("TrainingError", py.get_type::<TrainingError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(slice_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(max_rate_for_budget, m)?)?;
    m.add_function(wrap_pyfunction!(choose_rate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(draw_rates, m)?)?;
    m.add_function(wrap_pyfunction!(cascade, m)?)?;
    m.add_function(wrap_pyfunction!(inclusion_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
