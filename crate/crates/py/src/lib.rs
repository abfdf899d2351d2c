//! Python bindings for `bbdm`: schedule math, the forward/posterior process,
//! toy data, in-memory training, sampling and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use bbdm::checkpoint::Checkpoint;
use bbdm::config::Config;
use bbdm::data::{gen_joint_gaussian, gen_two_moons_paired, PairedDataset};
use bbdm::metrics::{self, SdKind};
use bbdm::nn::{Matrix, NoisePredictor};
use bbdm::oracle::{self, JointGaussianSpec};
use bbdm::process::{self, StateVector};
use bbdm::sampler::{sample_batch, SamplerPlan};
use bbdm::schedule::BridgeSchedule;
use bbdm::trainer::Trainer;
use bbdm::verify::{run_verify, VerifyOptions};

type Rows = Vec<Vec<f64>>;

fn err(e: bbdm::Error) -> PyErr {
    match e {
        bbdm::Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn state(v: Vec<f64>) -> PyResult<StateVector> {
    StateVector::new(v).map_err(err)
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Variance-scaled bridge schedule over `steps` steps.
#[pyclass(name = "Schedule", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchedule(BridgeSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, scale = 1.0))]
    fn new(steps: usize, scale: f64) -> PyResult<Self> {
        BridgeSchedule::new(steps, scale).map(Self).map_err(err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale()
    }

    fn m(&self, t: usize) -> PyResult<f64> {
        self.0.query(t).map(|e| e.m).map_err(err)
    }

    fn delta(&self, t: usize) -> PyResult<f64> {
        self.0.query(t).map(|e| e.delta).map_err(err)
    }

    fn delta_cond(&self, t: usize) -> PyResult<f64> {
        self.0.delta_cond(t).map_err(err)
    }

    /// `(c_x, c_y, c_eps, posterior_var)` of the reverse step at `t`.
    fn reverse(&self, t: usize) -> PyResult<(f64, f64, f64, f64)> {
        let r = self.0.reverse(t).map_err(err)?;
        Ok((r.c_x, r.c_y, r.c_eps, r.posterior_var))
    }

    fn __repr__(&self) -> String {
        format!("Schedule(steps={}, scale={})", self.0.steps(), self.0.scale())
    }
}

#[pyfunction]
fn forward_sample(s: &PySchedule, x0: Vec<f64>, y: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
    process::forward_sample(&s.0, &state(x0)?, &state(y)?, t, &state(eps)?)
        .map(StateVector::into_inner)
        .map_err(err)
}

#[pyfunction]
fn loss_target(s: &PySchedule, x0: Vec<f64>, y: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
    process::loss_target(&s.0, &state(x0)?, &state(y)?, t, &state(eps)?)
        .map(StateVector::into_inner)
        .map_err(err)
}

/// Exact posterior of `x_{t-1}` as `(mean, var)`.
#[pyfunction]
fn posterior(s: &PySchedule, x_t: Vec<f64>, x0: Vec<f64>, y: Vec<f64>, t: usize) -> PyResult<(Vec<f64>, f64)> {
    let p = process::posterior(&s.0, &state(x_t)?, &state(x0)?, &state(y)?, t).map_err(err)?;
    Ok((p.mean.into_inner(), p.var))
}

/// Model reverse step as `(mean, var)`.
#[pyfunction]
fn reverse_mean(s: &PySchedule, x_t: Vec<f64>, y: Vec<f64>, eps_pred: Vec<f64>, t: usize) -> PyResult<(Vec<f64>, f64)> {
    let p = process::reverse_mean(&s.0, &state(x_t)?, &state(y)?, &state(eps_pred)?, t).map_err(err)?;
    Ok((p.mean.into_inner(), p.var))
}

/// Minimum-MSE predictor for scalar jointly Gaussian data.
#[pyfunction]
#[pyo3(signature = (s, t, x_t, mean0 = 1.0, meany = -1.0, var0 = 1.0, vary = 1.0, corr = 0.8))]
#[allow(clippy::too_many_arguments)]
fn optimal_eps(
    s: &PySchedule,
    t: usize,
    x_t: f64,
    mean0: f64,
    meany: f64,
    var0: f64,
    vary: f64,
    corr: f64,
) -> PyResult<f64> {
    let spec = JointGaussianSpec {
        mean0,
        meany,
        var0,
        vary,
        corr,
    };
    spec.validate().map_err(err)?;
    oracle::optimal_eps(&spec, &s.0, t, x_t).map_err(err)
}

/// Paired toy data as `(x0_rows, y_rows)`.
#[pyfunction]
#[pyo3(signature = (n, seed, noise_sd = 0.1))]
fn two_moons(n: usize, seed: u64, noise_sd: f64) -> PyResult<(Rows, Rows)> {
    let d = gen_two_moons_paired(n, noise_sd, seed).map_err(err)?;
    Ok((to_rows(&d.x0), to_rows(&d.y)))
}

#[pyfunction]
#[pyo3(signature = (n, seed, dim = 1, mean0 = 1.0, meany = -1.0, var0 = 1.0, vary = 1.0, corr = 0.8))]
#[allow(clippy::too_many_arguments)]
fn joint_gaussian(
    n: usize,
    seed: u64,
    dim: usize,
    mean0: f64,
    meany: f64,
    var0: f64,
    vary: f64,
    corr: f64,
) -> PyResult<(Rows, Rows)> {
    let spec = JointGaussianSpec {
        mean0,
        meany,
        var0,
        vary,
        corr,
    };
    let d = gen_joint_gaussian(&spec, dim, n, seed).map_err(err)?;
    Ok((to_rows(&d.x0), to_rows(&d.y)))
}

/// A trained noise predictor together with its schedule.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: NoisePredictor,
    schedule: BridgeSchedule,
}

#[pymethods]
impl PyModel {
    /// Trains in memory. `config` uses the CLI's `key = value` format and
    /// must set `seed`; data keys are ignored in favour of `x0` and `y`.
    #[staticmethod]
    fn train(config: &str, x0: Rows, y: Rows) -> PyResult<Self> {
        let cfg = Config::parse(config).map_err(err)?;
        cfg.validate_train().map_err(err)?;
        let data = PairedDataset::new(matrix(&x0)?, matrix(&y)?, "python", Default::default(), cfg.train.seed)
            .map_err(err)?;
        let mut tr = Trainer::new(&cfg.train, &data).map_err(err)?;
        while tr.step() < cfg.train.max_steps {
            tr.train_one().map_err(err)?;
        }
        Ok(Self {
            model: tr.sampling_model(),
            schedule: tr.schedule().clone(),
        })
    }

    /// Loads a checkpoint written by `bbdm train`.
    #[staticmethod]
    #[pyo3(signature = (path, use_ema = true))]
    fn load(path: PathBuf, use_ema: bool) -> PyResult<Self> {
        let c = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            schedule: BridgeSchedule::new(c.steps, c.scale).map_err(err)?,
            model: c.sampling_model(use_ema),
        })
    }

    #[getter]
    fn schedule(&self) -> PySchedule {
        PySchedule(self.schedule.clone())
    }

    /// Predicted `x_t - x_0` for each row at step `t`.
    fn predict(&self, x_t: Rows, t: usize) -> PyResult<Rows> {
        let x = matrix(&x_t)?;
        let out = self
            .model
            .forward_batch(&x, &vec![t; x.rows()], self.schedule.steps())
            .map_err(err)?;
        Ok(to_rows(&out))
    }

    /// One `x_0` sample per row of `y`. `steps = None` runs the ancestral sampler.
    #[pyo3(signature = (y, seed, steps = None, eta = 1.0))]
    fn sample(&self, y: Rows, seed: u64, steps: Option<usize>, eta: f64) -> PyResult<Rows> {
        let total = self.schedule.steps();
        let plan = match steps {
            None => SamplerPlan::ancestral(total, seed),
            Some(s) => SamplerPlan::accelerated(total, s, eta, seed).map_err(err)?,
        };
        let out = sample_batch(&self.schedule, &self.model, &matrix(&y)?, &plan, 0).map_err(err)?;
        Ok(to_rows(&out.x0))
    }
}

/// Mean per-dimension standard deviation within groups of `k` samples.
#[pyfunction]
#[pyo3(signature = (sets, k = 5, sample_sd = false))]
fn diversity(sets: Vec<Rows>, k: usize, sample_sd: bool) -> PyResult<f64> {
    let kind = if sample_sd { SdKind::Sample } else { SdKind::Population };
    metrics::diversity(&sets, k, kind).map_err(err)
}

#[pyfunction]
fn energy_distance(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::energy_distance(&a, &b).map_err(err)
}

/// Runs the built-in invariant suites; returns `(all_passed, table)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify(seed: u64) -> (bool, String) {
    let report = run_verify(&VerifyOptions {
        seed,
        ..VerifyOptions::default()
    });
    (report.all_passed(), report.table())
}

#[pymodule]
fn bbdm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(forward_sample, m)?)?;
    m.add_function(wrap_pyfunction!(loss_target, m)?)?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_mean, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_eps, m)?)?;
    m.add_function(wrap_pyfunction!(two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(joint_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(energy_distance, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
