//! Python bindings: priors, the denoiser and state evolution, the quantizer
//! and entropy coder, rate allocation, and whole experiments from JSON.

use mpamp_core::allocation::{self, AllocationContext, BTPolicy, RdChoice};
use mpamp_core::cli::{self, ExperimentConfig};
use mpamp_core::denoiser::{self, EffectiveChannel};
use mpamp_core::model;
use mpamp_core::quantizer::{self as q, ScalarSourceModel};
use mpamp_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Parameter(_)
        | Error::Partition(_)
        | Error::Input(_)
        | Error::Range { .. }
        | Error::Config { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Spike-and-slab prior: zero w.p. 1 - epsilon, else N(mu_s, sigma_s^2).
#[pyclass(name = "SignalPrior", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySignalPrior {
    inner: model::SignalPrior,
}

#[pymethods]
impl PySignalPrior {
    #[new]
    #[pyo3(signature = (epsilon, mu_s = 0.0, sigma_s = 1.0))]
    fn new(epsilon: f64, mu_s: f64, sigma_s: f64) -> PyResult<Self> {
        let inner = model::SignalPrior::new(epsilon, mu_s, sigma_s).map_err(py_err)?;
        Ok(PySignalPrior { inner })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn mu_s(&self) -> f64 {
        self.inner.mu_s
    }

    #[getter]
    fn sigma_s(&self) -> f64 {
        self.inner.sigma_s
    }

    fn second_moment(&self) -> f64 {
        self.inner.second_moment()
    }

    /// `n` i.i.d. draws from the prior.
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        model::sample_signal(&self.inner, n, seed).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SignalPrior(epsilon={}, mu_s={}, sigma_s={})",
            self.inner.epsilon, self.inner.mu_s, self.inner.sigma_s
        )
    }
}

fn channel(sigma2: f64) -> PyResult<EffectiveChannel> {
    EffectiveChannel::new(sigma2).map_err(py_err)
}

/// Conditional-mean denoiser at channel variance `sigma2`.
#[pyfunction]
fn eta(f: Vec<f64>, sigma2: f64, prior: &PySignalPrior) -> PyResult<Vec<f64>> {
    let den = denoiser::BgDenoiser::new(&prior.inner, channel(sigma2)?);
    Ok(f.iter().map(|&v| den.eta(v)).collect())
}

#[pyfunction]
fn eta_prime(f: Vec<f64>, sigma2: f64, prior: &PySignalPrior) -> PyResult<Vec<f64>> {
    let den = denoiser::BgDenoiser::new(&prior.inner, channel(sigma2)?);
    Ok(f.iter().map(|&v| den.eta_and_derivative(v).1).collect())
}

#[pyfunction]
fn sigma2_e_for(epsilon: f64, kappa: f64, snr_db: f64) -> f64 {
    model::sigma2_e_for(epsilon, kappa, snr_db)
}

/// One state-evolution step; `added_var` is `P * sigma2_Q`.
#[pyfunction]
#[pyo3(signature = (sigma2, prior, kappa, sigma2_e, added_var = 0.0))]
fn se_step(
    sigma2: f64,
    prior: &PySignalPrior,
    kappa: f64,
    sigma2_e: f64,
    added_var: f64,
) -> PyResult<f64> {
    denoiser::se_step(sigma2, added_var, &prior.inner, kappa, sigma2_e).map_err(py_err)
}

/// `(sigma2_seq, sdr_db_seq, steady_state_t)` from the initial variance.
#[pyfunction]
#[pyo3(signature = (prior, kappa, sigma2_e, t_max, steady_tol_db = 0.1))]
fn se_trajectory(
    prior: &PySignalPrior,
    kappa: f64,
    sigma2_e: f64,
    t_max: usize,
    steady_tol_db: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Option<usize>)> {
    let tr = denoiser::se_trajectory(&prior.inner, kappa, sigma2_e, &[], t_max, steady_tol_db)
        .map_err(py_err)?;
    Ok((tr.sigma2_seq, tr.sdr_seq, tr.steady_state_t))
}

/// Uniform quantizer designed for the per-processor source at `sigma2_t`.
#[pyclass(name = "QuantizerSpec", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyQuantizerSpec {
    inner: q::QuantizerSpec,
}

#[pymethods]
impl PyQuantizerSpec {
    /// Design from a bin width, or from a target entropy when `rate_bits` is given.
    #[new]
    #[pyo3(signature = (prior, sigma2_t, p, delta = None, rate_bits = None))]
    fn new(
        prior: &PySignalPrior,
        sigma2_t: f64,
        p: usize,
        delta: Option<f64>,
        rate_bits: Option<f64>,
    ) -> PyResult<Self> {
        let src = ScalarSourceModel::new(prior.inner, sigma2_t, p).map_err(py_err)?;
        let delta = match (delta, rate_bits) {
            (Some(d), None) => d,
            (None, Some(r)) => q::delta_for_rate(&src, r).map_err(py_err)?,
            _ => {
                return Err(PyValueError::new_err(
                    "give exactly one of delta or rate_bits",
                ))
            }
        };
        let inner = q::design(&src, delta).map_err(py_err)?;
        Ok(PyQuantizerSpec { inner })
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn entropy_bits(&self) -> f64 {
        self.inner.entropy_bits
    }

    #[getter]
    fn num_bins(&self) -> usize {
        self.inner.num_bins
    }

    #[getter]
    fn model_mse(&self) -> f64 {
        self.inner.model_mse
    }

    /// Bin indices and reconstructions.
    fn quantize(&self, values: Vec<f64>) -> PyResult<(Vec<i64>, Vec<f64>)> {
        q::quantize(&values, &self.inner).map_err(py_err)
    }

    /// Serialized coded block: 8-byte header, then the range-coder payload.
    fn encode<'py>(&self, py: Python<'py>, indices: Vec<i64>) -> PyResult<Bound<'py, PyBytes>> {
        let block = q::encode(&indices, &self.inner).map_err(py_err)?;
        Ok(PyBytes::new(py, &block.to_bytes()))
    }

    fn decode(&self, data: &[u8]) -> PyResult<Vec<i64>> {
        let block = q::CodedBlock::from_bytes(data).map_err(py_err)?;
        q::decode(&block, &self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizerSpec(delta={:.6e}, num_bins={}, entropy_bits={:.4})",
            self.inner.delta, self.inner.num_bins, self.inner.entropy_bits
        )
    }
}

/// Per-iteration rates with the state-evolution variances they predict.
#[pyclass(name = "AllocationPlan", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyAllocationPlan {
    inner: allocation::AllocationPlan,
}

#[pymethods]
impl PyAllocationPlan {
    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.rates.clone()
    }

    #[getter]
    fn predicted_sigma2(&self) -> Vec<f64> {
        self.inner.predicted_sigma2.clone()
    }

    #[getter]
    fn total_bits(&self) -> f64 {
        self.inner.total_bits
    }

    /// The plan with the ECSQ gap added to every iteration.
    fn to_ecsq(&self) -> Self {
        PyAllocationPlan {
            inner: allocation::plan_to_ecsq(&self.inner),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "AllocationPlan(T={}, total_bits={:.4})",
            self.inner.len(),
            self.inner.total_bits
        )
    }
}

/// Rate-allocation model for one problem setting.
#[pyclass(name = "AllocationContext", frozen)]
pub struct PyAllocationContext {
    inner: AllocationContext,
}

#[pymethods]
impl PyAllocationContext {
    /// `rd` is `"gaussian"` (fast surrogate) or `"ba"` (Blahut-Arimoto bank).
    #[new]
    #[pyo3(signature = (prior, kappa, sigma2_e, p, rd = "gaussian"))]
    fn new(prior: &PySignalPrior, kappa: f64, sigma2_e: f64, p: usize, rd: &str) -> PyResult<Self> {
        let choice = match rd {
            "gaussian" => RdChoice::Gaussian,
            "ba" => RdChoice::default(),
            other => return Err(PyValueError::new_err(format!("unknown rd model {other:?}"))),
        };
        let inner = AllocationContext::build(prior.inner, kappa, sigma2_e, p, choice, None)
            .map_err(py_err)?;
        Ok(PyAllocationContext { inner })
    }

    #[getter]
    fn sigma2_0(&self) -> f64 {
        self.inner.sigma2_0()
    }

    /// Next SE variance after spending `rate` bits per element.
    fn f1(&self, sigma2: f64, rate: f64) -> PyResult<f64> {
        self.inner.f1(sigma2, rate).map_err(py_err)
    }

    #[pyo3(signature = (r_total, iterations, delta_r = 0.1))]
    fn dp_allocate(
        &self,
        r_total: f64,
        iterations: usize,
        delta_r: f64,
    ) -> PyResult<PyAllocationPlan> {
        let (plan, _) = allocation::dp_allocate(
            self.inner.sigma2_0(),
            r_total,
            iterations,
            delta_r,
            &self.inner,
        )
        .map_err(py_err)?;
        Ok(PyAllocationPlan { inner: plan })
    }

    /// Back-tracking rates along the state-evolution path.
    #[pyo3(signature = (iterations, gamma = 1.1, rate_cap_bits = 6.0))]
    fn bt_plan(
        &self,
        iterations: usize,
        gamma: f64,
        rate_cap_bits: f64,
    ) -> PyResult<PyAllocationPlan> {
        let policy = BTPolicy {
            gamma,
            rate_cap_bits,
            ..Default::default()
        };
        let bt = allocation::bt_plan(&self.inner, &policy, iterations).map_err(py_err)?;
        Ok(PyAllocationPlan { inner: bt.plan })
    }
}

/// Run an experiment described by a JSON config; returns `{"trace", "summary"}`.
/// Files are written to the config's `output_dir` only when `write` is true.
#[pyfunction]
#[pyo3(signature = (config_json, write = false))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_json: &str,
    write: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let report = py.detach(|| cli::run_experiment(&cfg)).map_err(py_err)?;
    if write {
        cli::write_report(&report, &cfg.output_dir).map_err(py_err)?;
    }
    let value = serde_json::json!({ "trace": report.trace, "summary": report.summary });
    let text = serde_json::to_string(&value).map_err(|e| py_err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
pub fn mpamp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySignalPrior>()?;
    m.add_class::<PyQuantizerSpec>()?;
    m.add_class::<PyAllocationPlan>()?;
    m.add_class::<PyAllocationContext>()?;
    m.add_function(wrap_pyfunction!(eta, m)?)?;
    m.add_function(wrap_pyfunction!(eta_prime, m)?)?;
    m.add_function(wrap_pyfunction!(sigma2_e_for, m)?)?;
    m.add_function(wrap_pyfunction!(se_step, m)?)?;
    m.add_function(wrap_pyfunction!(se_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("ECSQ_GAP_BITS", allocation::ECSQ_GAP_BITS)?;
    m.add("TRACE_HEADER", cli::TRACE_HEADER)?;
    Ok(())
}
