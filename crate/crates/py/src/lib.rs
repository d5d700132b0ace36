//! Python bindings: instances, the LP oracle, the transport layer, the index
//! network, training and evaluation. Matrices cross the boundary as nested
//! lists of floats.

use ndarray::Array2;
use nip_core::eval::{evaluate as core_evaluate, EvalConfig};
use nip_core::model::{generate_instance, validate_instance, RmabInstance, StateVector};
use nip_core::net::{encode, IndexNetwork, NetConfig};
use nip_core::oracle::{extract_policy, solve_occupancy, OccupancyMeasure};
use nip_core::train::{train as core_train, LossKind, TrainConfig};
use nip_core::transport::{sinkhorn_forward, solve_knapsack_exact, SampleMode, SinkhornOptions};
use nip_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_)
        | Error::DegenerateChain(_)
        | Error::Solver(_)
        | Error::Diverged { .. }
        | Error::UndefinedGap => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let a = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != a) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, a), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Instance", module = "nip", skip_from_py_object)]
struct PyInstance {
    inner: RmabInstance,
}

#[pymethods]
impl PyInstance {
    #[staticmethod]
    #[pyo3(signature = (n_arms, n_states, n_actions, budget_fractions, seed=0))]
    fn generate(n_arms: usize, n_states: usize, n_actions: usize, budget_fractions: Vec<f64>, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: generate_instance(n_arms, n_states, n_actions, &budget_fractions, seed).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: RmabInstance::read(path).map_err(err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).map_err(err)
    }

    #[getter]
    fn n_arms(&self) -> usize {
        self.inner.n_arms()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn budgets(&self) -> Vec<usize> {
        self.inner.budgets.clone()
    }

    /// `rewards[n][s][a]`.
    fn rewards(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.rewards.outer_iter().map(|m| to_rows(&m.to_owned())).collect()
    }

    /// `P[n][s][a][s']`.
    fn transitions(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        self.inner
            .transitions
            .outer_iter()
            .map(|arm| arm.outer_iter().map(|m| to_rows(&m.to_owned())).collect())
            .collect()
    }

    /// Invariant violations, empty when the instance is valid.
    fn validate(&self) -> Vec<String> {
        validate_instance(&self.inner).iter().map(ToString::to_string).collect()
    }

    fn __repr__(&self) -> String {
        format!("Instance(n_arms={}, n_states={}, n_actions={}, budgets={:?})", self.n_arms(), self.n_states(), self.n_actions(), self.inner.budgets)
    }
}

#[pyclass(name = "Oracle", module = "nip", skip_from_py_object)]
struct PyOracle {
    inner: OccupancyMeasure,
}

#[pymethods]
impl PyOracle {
    #[staticmethod]
    fn solve(instance: &PyInstance) -> PyResult<Self> {
        Ok(Self { inner: solve_occupancy(&instance.inner).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: OccupancyMeasure::read(path).map_err(err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).map_err(err)
    }

    /// LP optimum, an upper bound on the long-run average reward per step.
    #[getter]
    fn objective_value(&self) -> f64 {
        self.inner.objective_value
    }

    /// `pi[n][s][a]`.
    fn policy(&self) -> Vec<Vec<Vec<f64>>> {
        extract_policy(&self.inner).pi.outer_iter().map(|m| to_rows(&m.to_owned())).collect()
    }
}

#[pyclass(name = "IndexNetwork", module = "nip", skip_from_py_object)]
struct PyIndexNetwork {
    inner: IndexNetwork,
}

#[pymethods]
impl PyIndexNetwork {
    #[new]
    #[pyo3(signature = (instance, seed=0, hidden=64, momentum=0.0))]
    fn new(instance: &PyInstance, seed: u64, hidden: usize, momentum: f64) -> Self {
        let cfg = NetConfig { hidden, momentum, ..NetConfig::for_instance(&instance.inner, seed) };
        Self { inner: IndexNetwork::new(cfg) }
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: IndexNetwork::read(path).map_err(err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn set_parameters(&mut self, theta: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&theta).map_err(err)
    }

    /// Index matrix `[n][a]` for the joint state `states`.
    fn forward(&self, instance: &PyInstance, states: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let feats = encode(&instance.inner, &StateVector(states)).map_err(err)?;
        let (index, _) = self.inner.forward(&feats).map_err(err)?;
        Ok(to_rows(&index))
    }
}

/// Entropic transport plan for an index matrix; returns a dict with `gamma`,
/// `converged`, `iterations` and `max_marginal_error`.
#[pyfunction]
#[pyo3(signature = (index, budgets, epsilon=0.1, max_iter=500, tol=1e-6))]
fn sinkhorn<'py>(
    py: Python<'py>,
    index: Vec<Vec<f64>>,
    budgets: Vec<usize>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let index = from_rows(index)?;
    let opts = SinkhornOptions { epsilon, max_iter, tol, record_tape: false };
    let plan = sinkhorn_forward(index.view(), &budgets, &opts).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("gamma", to_rows(&plan.gamma))?;
    out.set_item("converged", plan.converged)?;
    out.set_item("iterations", plan.iterations)?;
    out.set_item("max_marginal_error", plan.max_marginal_error())?;
    Ok(out)
}

/// Exact budgeted assignment maximizing the summed index; returns
/// `(actions, objective)`.
#[pyfunction]
fn knapsack(index: Vec<Vec<f64>>, budgets: Vec<usize>) -> PyResult<(Vec<usize>, f64)> {
    let index = from_rows(index)?;
    let hard = solve_knapsack_exact(index.view(), &budgets).map_err(err)?;
    Ok((hard.assignment.0, hard.objective))
}

/// Trains `network` in place and returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (instance, network, oracle=None, epochs=200, batch_size=16, learning_rate=0.001, epsilon=0.1, loss="kl", seed=0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    instance: &PyInstance,
    network: &mut PyIndexNetwork,
    oracle: Option<&PyOracle>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    epsilon: f64,
    loss: &str,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let loss: LossKind = loss.parse().map_err(err)?;
    let mut cfg = TrainConfig { epochs, batch_size, learning_rate, loss, seed, timing: false, ..Default::default() };
    cfg.sinkhorn.epsilon = epsilon;
    let log = core_train(&instance.inner, oracle.map(|o| &o.inner), &mut network.inner, &cfg).map_err(err)?;
    log.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("reward_gap_pct", r.reward_gap_pct)?;
            Ok(d)
        })
        .collect()
}

/// Simulates oracle, trained and random policies; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (instance, oracle, network, horizon=50, batches=50, seed=0, mode="round", epsilon=0.1))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    instance: &PyInstance,
    oracle: &PyOracle,
    network: &PyIndexNetwork,
    horizon: usize,
    batches: usize,
    seed: u64,
    mode: &str,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "round" => SampleMode::Round,
        "sample" => SampleMode::Sample,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let cfg = EvalConfig { horizon, batches, seed, mode, epsilon, timing: false, ..Default::default() };
    let report = core_evaluate(&instance.inner, &oracle.inner, &network.inner, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("gap_pct", report.gap_pct)?;
    d.set_item("random_gap_pct", report.random_gap_pct)?;
    d.set_item("unconstrained_gap_pct", report.unconstrained_gap_pct)?;
    d.set_item("oracle_bound", report.oracle_bound)?;
    d.set_item("oracle", report.oracle.clone())?;
    d.set_item("predicted", report.predicted.clone())?;
    d.set_item("random", report.random.clone())?;
    d.set_item("series_csv", report.series_csv())?;
    Ok(d)
}

#[pymodule]
fn nip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyIndexNetwork>()?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(knapsack, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
