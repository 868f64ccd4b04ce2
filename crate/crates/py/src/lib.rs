//! Python bindings. Configuration goes through the same flat key/value
//! table as the CLI; metrics records come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use uoep_core::cli::ExperimentConfig;
use uoep_core::critic::QuantileFunction;
use uoep_core::env::Environment as CoreEnvironment;
use uoep_core::nn::Matrix;
use uoep_core::trainer::{evaluate, EnvConfig, MetricsRecord, Trainer as CoreTrainer};
use uoep_core::{bandit, critic, metrics, population, rng, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::Empty(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = match v.cast::<PyList>() {
                Ok(list) => list
                    .iter()
                    .map(|x| x.str().map(|s| s.to_string()))
                    .collect::<PyResult<Vec<_>>>()?
                    .join(","),
                Err(_) => v.str()?.to_string(),
            };
            cfg.set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(cfg)
}

/// Simulated recommendation environment.
#[pyclass(module = "uoep", skip_from_py_object)]
#[derive(Clone)]
struct Environment {
    inner: CoreEnvironment,
}

#[pymethods]
impl Environment {
    #[staticmethod]
    #[pyo3(signature = (users=200, items=100, dim=8, heterogeneity=1.0, seed=0))]
    fn synthetic(users: usize, items: usize, dim: usize, heterogeneity: f64, seed: u64) -> PyResult<Self> {
        let inner = EnvConfig {
            users,
            items,
            dim,
            heterogeneity,
            seed,
            ..EnvConfig::default()
        }
        .build()
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users().len()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.catalog().len()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.catalog().dim()
    }

    /// User ids from least to most active.
    fn users_by_activity(&self) -> Vec<usize> {
        self.inner.users_by_activity()
    }

    fn restricted_to(&self, users: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.restricted_to(&users).map_err(py_err)?,
        })
    }

    /// Encoded start-of-session state of a user.
    fn start_state(&self, user: usize) -> PyResult<Vec<f64>> {
        if user >= self.inner.users().len() {
            return Err(PyValueError::new_err(format!("no user {user}")));
        }
        Ok(self.inner.encode_state(&self.inner.start_session(user)))
    }
}

/// Training loop over a population of actors and a shared critic.
#[pyclass(module = "uoep", unsendable)]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    /// `config` holds any key of the flat experiment configuration, e.g.
    /// `{"steps": 2000, "alphas": [0.5, 1.0], "variant": "baseline"}`.
    /// Without `env` the environment named by the configuration is built.
    #[new]
    #[pyo3(signature = (config=None, env=None))]
    fn new(config: Option<&Bound<'_, PyDict>>, env: Option<&Environment>) -> PyResult<Self> {
        let cfg = config_from(config)?;
        let train = cfg.train_config().map_err(py_err)?;
        let env = match env {
            Some(e) => e.inner.clone(),
            None => cfg.environment().map_err(py_err)?,
        };
        Ok(Self {
            inner: CoreTrainer::new(train, env).map_err(py_err)?,
        })
    }

    #[getter]
    fn steps_done(&self) -> u64 {
        self.inner.steps_done()
    }

    #[getter]
    fn population_size(&self) -> usize {
        self.inner.population().len()
    }

    /// Advances one step; returns the metrics record at evaluation boundaries.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        match self.inner.step().map_err(py_err)? {
            Some(rec) => Ok(Some(to_py_json(py, &rec)?)),
            None => Ok(None),
        }
    }

    /// Runs the remaining steps and returns every record produced so far.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        self.inner.run(|_, _| Ok(())).map_err(py_err)?;
        self.records(py)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.inner.records().to_vec())
    }

    /// Greedy evaluation; returns the metrics record plus the raw per-session
    /// returns and depths.
    #[pyo3(signature = (episodes=50, seed=None))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.config();
        let env = self.inner.env();
        let report = evaluate(
            self.inner.population(),
            self.inner.critic(),
            env,
            episodes,
            cfg.k_infer,
            seed.unwrap_or(cfg.seed),
        )
        .map_err(py_err)?;
        let rec = MetricsRecord::from_report(&report, env.catalog().len(), env.catalog().categories());
        let out = to_py_json(py, &rec)?;
        out.set_item("total_rewards", report.total_rewards)?;
        out.set_item("depths", report.depths)?;
        Ok(out)
    }

    /// Actions of one actor at a batch of states.
    fn actions(&self, actor: usize, states: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let a = self
            .inner
            .population()
            .actors()
            .get(actor)
            .ok_or_else(|| PyValueError::new_err(format!("no actor {actor}")))?;
        let m = Matrix::from_rows(&states).map_err(py_err)?;
        let out = a.actions(&m).map_err(py_err)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }

    /// Critic quantiles `Z(s, a; τ)`.
    fn quantiles(&self, state: Vec<f64>, action: Vec<f64>, taus: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.critic().quantiles(&state, &action, &taus).map_err(py_err)
    }

    fn save_checkpoint(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&dir).map_err(py_err)
    }
}

#[pyfunction]
fn gini(values: Vec<f64>) -> PyResult<f64> {
    metrics::gini(&values).map_err(py_err)
}

#[pyfunction]
fn empirical_cvar(values: Vec<f64>, alpha: f64) -> PyResult<f64> {
    metrics::empirical_cvar(&values, alpha).map_err(py_err)
}

#[pyfunction]
fn atr_top(values: Vec<f64>, alpha: f64) -> PyResult<f64> {
    metrics::atr_top(&values, alpha).map_err(py_err)
}

#[pyfunction]
fn ils(items: Vec<usize>, categories: Vec<usize>) -> PyResult<f64> {
    metrics::ils(&items, &categories).map_err(py_err)
}

#[pyfunction]
fn coverage(lists: Vec<Vec<usize>>, catalog_size: usize) -> PyResult<f64> {
    metrics::coverage(&lists, catalog_size).map_err(py_err)
}

/// Indices of the `n` largest scores, ties broken by ascending index.
#[pyfunction]
fn top_n(scores: Vec<f64>, n: usize) -> Vec<usize> {
    population::top_n(&scores, n)
}

#[pyfunction]
fn quantile_huber(delta: f64, tau: f64, kappa: f64) -> f64 {
    critic::quantile_huber(delta, tau, kappa)
}

#[pyfunction]
fn decayed_alpha(alpha: f64, beta: f64, step: u64, horizon: u64) -> PyResult<f64> {
    population::decayed_alpha(alpha, beta, step, horizon).map_err(py_err)
}

/// Selection counts `(stability, diversity)` of the regularizer bandit when
/// each arm improves the return with a fixed probability.
#[pyfunction]
#[pyo3(signature = (p_stability, p_diversity, rounds, seed=0))]
fn simulate_bandit(p_stability: f64, p_diversity: f64, rounds: usize, seed: u64) -> PyResult<(usize, usize)> {
    let mut state = bandit::BanditState::new(bandit::DEFAULT_LAMBDA, bandit::DEFAULT_WINDOW).map_err(py_err)?;
    let [s, d] = bandit::simulate_stationary(&mut state, [p_stability, p_diversity], rounds, &mut rng::seeded(seed))
        .map_err(py_err)?;
    Ok((s, d))
}

#[pymodule]
fn uoep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Environment>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_cvar, m)?)?;
    m.add_function(wrap_pyfunction!(atr_top, m)?)?;
    m.add_function(wrap_pyfunction!(ils, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(top_n, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_huber, m)?)?;
    m.add_function(wrap_pyfunction!(decayed_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_bandit, m)?)?;
    Ok(())
}
