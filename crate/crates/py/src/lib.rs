//! Python bindings.
//!
//! Models, channels and policies are Python classes; reports come back as
//! plain dicts built from their JSON form.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use streamqoe::dp::{self, SolveOptions};
use streamqoe::dual::{self, AscentOptions, SystemConfig};
use streamqoe::fading;
use streamqoe::model::Action;
use streamqoe::sim::{self, SimConfig};
use streamqoe::threshold::{self, PolicyOrigin};
use streamqoe::verify::{self, VerifyOptions};

fn err(e: streamqoe::Error) -> PyErr {
    if e.is_not_converged() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "ClientModel", module = "streamqoe", from_py_object)]
#[derive(Clone)]
struct PyClientModel {
    inner: streamqoe::ClientModel,
}

#[pymethods]
impl PyClientModel {
    #[new]
    fn new(
        buffer_playtime: usize,
        play_duration: usize,
        quality_penalties: Vec<f64>,
        power_levels: Vec<f64>,
        success_prob: Vec<Vec<f64>>,
        outage_period_penalty: f64,
    ) -> PyResult<Self> {
        let inner = streamqoe::ClientModel {
            buffer_playtime,
            play_duration,
            quality_penalties,
            power_levels,
            success_prob,
            outage_period_penalty,
        };
        inner.check().map_err(err)?;
        Ok(Self { inner })
    }

    /// The reference model with `B = 4`, `T = 2`.
    #[staticmethod]
    fn canonical() -> Self {
        Self {
            inner: streamqoe::instances::canonical_model(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: streamqoe::ClientModel =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.check().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("model serializes")
    }

    #[getter]
    fn buffer_playtime(&self) -> usize {
        self.inner.buffer_playtime
    }

    #[getter]
    fn play_duration(&self) -> usize {
        self.inner.play_duration
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn transmit_limit(&self) -> usize {
        self.inner.transmit_limit()
    }

    fn success_transition(&self, x: usize) -> usize {
        self.inner.success_transition(x)
    }

    fn failure_transition(&self, x: usize) -> usize {
        self.inner.failure_transition(x)
    }

    /// `(quality, power_index)` pairs in tie-break order, idle first.
    fn actions(&self) -> Vec<(usize, usize)> {
        self.inner.actions().into_iter().map(|u| (u.quality, u.power)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "ClientModel(B={}, T={}, Q={}, K={})",
            self.inner.buffer_playtime,
            self.inner.play_duration,
            self.inner.num_qualities(),
            self.inner.num_powers()
        )
    }
}

#[pyclass(name = "ChannelModel", module = "streamqoe", from_py_object)]
#[derive(Clone)]
struct PyChannelModel {
    inner: fading::ChannelModel,
}

#[pymethods]
impl PyChannelModel {
    #[new]
    fn new(transition: Vec<Vec<f64>>, success_prob_per_channel: Vec<Vec<Vec<f64>>>) -> Self {
        Self {
            inner: fading::ChannelModel {
                num_states: transition.len(),
                transition,
                success_prob_per_channel,
            },
        }
    }

    fn stationary(&self) -> PyResult<Vec<f64>> {
        self.inner.stationary().map_err(err)
    }
}

#[pyclass(name = "Policy", module = "streamqoe", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: threshold::Policy,
}

#[pymethods]
impl PyPolicy {
    /// `actions[x] = (quality, power_index)` for every state `x`.
    #[new]
    fn new(model: &PyClientModel, actions: Vec<(usize, usize)>) -> PyResult<Self> {
        let actions = actions.into_iter().map(|(q, e)| Action::new(q, e)).collect();
        let inner = threshold::Policy::new(&model.inner, actions, PolicyOrigin::Explicit).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn idle(model: &PyClientModel) -> Self {
        Self {
            inner: threshold::Policy::idle(&model.inner),
        }
    }

    fn actions(&self) -> Vec<(usize, usize)> {
        self.inner.actions().iter().map(|u| (u.quality, u.power)).collect()
    }

    fn is_threshold(&self, model: &PyClientModel) -> bool {
        threshold::is_threshold(&self.inner, &model.inner).holds()
    }

    fn evaluate(&self, py: Python<'_>, model: &PyClientModel, price: f64) -> PyResult<Py<PyAny>> {
        let e = threshold::evaluate_exact(&self.inner, &model.inner, price).map_err(err)?;
        to_py(py, &e)
    }

    fn __len__(&self) -> usize {
        self.inner.num_states()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner.actions() == other.inner.actions()
    }

    fn __repr__(&self) -> String {
        format!("Policy({:?})", self.actions())
    }
}

fn solve_options(tol: f64, max_iter: usize) -> SolveOptions {
    SolveOptions { tol, max_iter }
}

/// Average-cost optimum; returns `(policy, report)`.
#[pyfunction]
#[pyo3(signature = (model, price, tol = 1e-10, max_iter = 1_000_000))]
fn solve_average(
    py: Python<'_>,
    model: &PyClientModel,
    price: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<(PyPolicy, Py<PyAny>)> {
    let r = dp::solve_average(&model.inner, price, &solve_options(tol, max_iter)).map_err(err)?;
    Ok((PyPolicy { inner: r.policy.clone() }, to_py(py, &r)?))
}

/// Discounted optimum; returns `(policy, report)`.
#[pyfunction]
#[pyo3(signature = (model, price, beta, tol = 1e-10, max_iter = 1_000_000))]
fn solve_discounted(
    py: Python<'_>,
    model: &PyClientModel,
    price: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<(PyPolicy, Py<PyAny>)> {
    let r = dp::solve_discounted(&model.inner, price, beta, &solve_options(tol, max_iter)).map_err(err)?;
    Ok((PyPolicy { inner: r.policy.clone() }, to_py(py, &r)?))
}

#[pyfunction]
fn bellman_backup(values: Vec<f64>, model: &PyClientModel, price: f64, beta: f64) -> PyResult<(Vec<f64>, PyPolicy)> {
    let (v, p) = dp::bellman_backup(&values, &model.inner, price, beta).map_err(err)?;
    Ok((v, PyPolicy { inner: p }))
}

/// `D_s(x)` for `s = 1..=horizon`; row `s − 1` holds `x = 1..=B`.
#[pyfunction]
fn d_function(model: &PyClientModel, price: f64, beta: f64, horizon: usize) -> PyResult<Vec<Vec<f64>>> {
    let ds = dp::d_function(&model.inner, price, beta, horizon).map_err(err)?;
    Ok(ds.into_iter().map(|d| d.values).collect())
}

#[pyfunction]
fn count_thresholds(model: &PyClientModel) -> f64 {
    threshold::count_thresholds(&model.inner)
}

/// Cheapest threshold policy by exact evaluation; `(policy, evaluation)`.
#[pyfunction]
fn best_threshold(py: Python<'_>, model: &PyClientModel, price: f64) -> PyResult<(PyPolicy, Py<PyAny>)> {
    let (p, e) = threshold::best_threshold(&model.inner, price).map_err(err)?;
    Ok((PyPolicy { inner: p }, to_py(py, &e)?))
}

fn system(models: Vec<PyClientModel>, power_budget: f64) -> SystemConfig {
    SystemConfig {
        clients: models.into_iter().map(|m| m.inner).collect(),
        power_budget,
    }
}

#[pyfunction]
fn dual_value(py: Python<'_>, models: Vec<PyClientModel>, power_budget: f64, price: f64) -> PyResult<Py<PyAny>> {
    let s = dual::dual_value(&system(models, power_budget), price, &SolveOptions::default()).map_err(err)?;
    to_py(py, &s)
}

/// Runs the price iteration and returns its certificate with the run summary.
#[pyfunction]
#[pyo3(signature = (models, power_budget, max_iter = 500, tol = 1e-9))]
fn subgradient_ascent(
    py: Python<'_>,
    models: Vec<PyClientModel>,
    power_budget: f64,
    max_iter: usize,
    tol: f64,
) -> PyResult<Py<PyAny>> {
    let cfg = system(models, power_budget);
    let opts = AscentOptions {
        max_iter,
        tol,
        ..Default::default()
    };
    let r = dual::subgradient_ascent(&cfg, &opts).map_err(err)?;
    let cert = dual::verify_primal_dual(&cfg, r.solution());
    to_py(
        py,
        &serde_json::json!({
            "converged": r.converged,
            "stop": r.stop,
            "iterations": r.history.len(),
            "band": [r.band.0, r.band.1],
            "certificate": cert,
        }),
    )
}

/// Simulates clients on fixed channels, or on `channels` when given.
#[pyfunction]
#[pyo3(signature = (models, policies, horizon = 1_000_000, warmup = 1_000, seed = 0, price = 0.0, channels = None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    models: Vec<PyClientModel>,
    policies: Vec<PyPolicy>,
    horizon: u64,
    warmup: u64,
    seed: u64,
    price: f64,
    channels: Option<Vec<PyChannelModel>>,
) -> PyResult<Py<PyAny>> {
    let cfg = system(models, f64::INFINITY);
    let chs: Vec<fading::ChannelModel> = match channels {
        Some(c) => c.into_iter().map(|c| c.inner).collect(),
        None => cfg.clients.iter().map(fading::ChannelModel::fixed).collect(),
    };
    let pols: Vec<fading::FadingPolicy> = policies.into_iter().map(|p| p.inner.into()).collect();
    let sim = SimConfig {
        horizon,
        warmup,
        seed,
        price,
        ..Default::default()
    };
    let m = py.detach(|| sim::run(&cfg, &pols, &chs, &sim)).map_err(err)?;
    to_py(py, &m)
}

/// Runs a named property suite and returns its report.
#[pyfunction]
#[pyo3(signature = (suite, models, power_budget = 1.0, seed = 0, random_configs = 0))]
fn run_suite(
    py: Python<'_>,
    suite: &str,
    models: Vec<PyClientModel>,
    power_budget: f64,
    seed: u64,
    random_configs: usize,
) -> PyResult<Py<PyAny>> {
    let suite: verify::Suite = suite.parse().map_err(err)?;
    let opts = VerifyOptions {
        seed,
        random_configs,
        ..Default::default()
    };
    let cfg = system(models, power_budget);
    let r = py.detach(|| verify::run_suite(suite, &cfg, &opts)).map_err(err)?;
    to_py(py, &r)
}

#[pymodule]
#[pyo3(name = "streamqoe")]
fn streamqoe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyClientModel>()?;
    m.add_class::<PyChannelModel>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(solve_average, m)?)?;
    m.add_function(wrap_pyfunction!(solve_discounted, m)?)?;
    m.add_function(wrap_pyfunction!(bellman_backup, m)?)?;
    m.add_function(wrap_pyfunction!(d_function, m)?)?;
    m.add_function(wrap_pyfunction!(count_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(best_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(dual_value, m)?)?;
    m.add_function(wrap_pyfunction!(subgradient_ascent, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
