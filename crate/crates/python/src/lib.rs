//! Python module `eafe`: ensembles, exact solves and config-driven runs.
//! Reports come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use eafe::disorder::{sample_couplings, CouplingDistribution, Purpose, SeedSpec};
use eafe::exactsolve::{GibbsSpec, Method, Solver, SolverCaps};
use eafe::fluctuation::{self as fl, BcRule, EnsembleSpec, Geometry};
use eafe::harness::{self, ExperimentConfig};
use eafe::interface::domain_wall_free_energy;
use eafe::lattice::{incident_edges, Region};

fn err(e: eafe::Error) -> PyErr {
    match e {
        eafe::Error::InvalidParameter(_) | eafe::Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any().unbind()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any().unbind()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind()
            }
        }
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(to_py(py, x)?)?;
            }
            l.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn report<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let j = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &j)
}

fn rule(s: &str) -> PyResult<BcRule> {
    let v = Value::String(s.to_string());
    if let Some((head, axis)) = s.split_once(':') {
        if head == "antiperiodic" {
            let axis = axis.parse().map_err(|_| PyValueError::new_err(format!("bad axis in {s:?}")))?;
            return Ok(BcRule::Antiperiodic { axis });
        }
    }
    if s == "antiperiodic" {
        return Ok(BcRule::Antiperiodic { axis: 0 });
    }
    serde_json::from_value(v).map_err(|_| PyValueError::new_err(format!("unknown boundary rule {s:?}")))
}

fn method(s: &str) -> PyResult<Method> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown method {s:?}")))
}

/// Disorder ensemble for a window-in-box state pair.
#[pyclass(name = "Ensemble", module = "eafe", frozen)]
struct PyEnsemble {
    inner: fl::Ensemble,
}

#[pymethods]
impl PyEnsemble {
    #[new]
    #[pyo3(signature = (window, seed, margin = 1, beta = 1.0, n = 100, gamma = "free", gamma_prime = "periodic", resamples = 1000))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        window: Vec<usize>,
        seed: u64,
        margin: usize,
        beta: f64,
        n: usize,
        gamma: &str,
        gamma_prime: &str,
        resamples: usize,
    ) -> PyResult<Self> {
        let mut spec = EnsembleSpec::free_vs_periodic(&window, beta, n, seed);
        spec.geometry = Geometry::centered(&window, margin);
        spec.gamma = rule(gamma)?;
        spec.gamma_prime = rule(gamma_prime)?;
        spec.bootstrap.resamples = resamples;
        Ok(PyEnsemble {
            inner: fl::Ensemble::new(spec).map_err(err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.spec.n
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    /// Box extents.
    #[getter]
    fn box_extents(&self) -> Vec<usize> {
        self.inner.box_region().extents().to_vec()
    }

    /// Couplings of realization `r` as (edge label, value) pairs.
    fn couplings(&self, r: u64) -> Vec<(String, f64)> {
        self.inner.couplings(r).iter().map(|(e, v)| (e.to_string(), v)).collect()
    }

    fn free_energy(&self, py: Python<'_>, r: u64) -> PyResult<Py<PyAny>> {
        report(py, &fl::realization_free_energy(&self.inner, r).map_err(err)?)
    }

    fn variance(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        report(py, &fl::ensemble_variance(&self.inner).map_err(err)?.1)
    }

    #[pyo3(signature = (epsilons = vec![0.01]))]
    fn probe(&self, py: Python<'_>, epsilons: Vec<f64>) -> PyResult<Py<PyAny>> {
        report(py, &fl::incongruence_probe(&self.inner, &epsilons).map_err(err)?.1)
    }

    #[pyo3(signature = (betas, lemma = true))]
    fn bounds(&self, py: Python<'_>, betas: Vec<f64>, lemma: bool) -> PyResult<Py<PyAny>> {
        report(py, &fl::bounds_run(&self.inner, &betas, lemma).map_err(err)?.1)
    }

    fn block_martingale(&self, py: Python<'_>, block_side: usize, n_outer: usize) -> PyResult<Py<PyAny>> {
        report(py, &fl::martingale_block_decomposition(&self.inner, block_side, n_outer).map_err(err)?.1)
    }

    fn edge_trace(&self, py: Python<'_>, r: u64, n_outer: usize) -> PyResult<Py<PyAny>> {
        report(py, &fl::edge_martingale_trace(&self.inner, r, n_outer).map_err(err)?)
    }

    fn mgf(&self, py: Python<'_>, ts: Vec<f64>, n_outer: usize) -> PyResult<Py<PyAny>> {
        report(py, &fl::mgf_check(&self.inner, &ts, n_outer).map_err(err)?.1)
    }
}

/// log Z of an open box with gaussian(0,1) couplings drawn from `seed`.
#[pyfunction]
#[pyo3(signature = (extents, beta, seed, bc = "free", method = "auto", realization = 0))]
fn log_z(extents: Vec<usize>, beta: f64, seed: u64, bc: &str, method: &str, realization: u64) -> PyResult<f64> {
    let region = Region::open(&extents).map_err(err)?;
    let bc = rule(bc)?.resolve(&region).map_err(err)?;
    let edges = Arc::new(incident_edges(&region));
    let j = sample_couplings(
        &CouplingDistribution::default(),
        &edges,
        SeedSpec::new(seed, realization, Purpose::Couplings),
    );
    let spec = GibbsSpec::new(&region, j, beta, bc).map_err(err)?;
    Solver::new(SolverCaps::default(), self::method(method)?)
        .log_z(&spec)
        .map_err(err)
}

/// log Z_periodic − log Z_antiperiodic on a box with seeded gaussian couplings.
#[pyfunction]
#[pyo3(signature = (extents, beta, seed, seam_axis = 0, realization = 0))]
fn domain_wall(extents: Vec<usize>, beta: f64, seed: u64, seam_axis: usize, realization: u64) -> PyResult<f64> {
    let region = Region::open(&extents).map_err(err)?;
    let edges = Arc::new(incident_edges(&region));
    let j = sample_couplings(
        &CouplingDistribution::default(),
        &edges,
        SeedSpec::new(seed, realization, Purpose::Couplings),
    );
    domain_wall_free_energy(&j, &region, beta, seam_axis, &Solver::default()).map_err(err)
}

/// Run a TOML experiment config. With `out` the run is written to disk
/// (resuming if records exist); otherwise it runs in memory.
#[pyfunction]
#[pyo3(signature = (config, out = None, workers = None))]
fn run_config(py: Python<'_>, config: &str, out: Option<PathBuf>, workers: Option<usize>) -> PyResult<Py<PyAny>> {
    let c = ExperimentConfig::from_toml(config).map_err(err)?;
    let rep = match out {
        Some(dir) => harness::run(&c, &dir, workers).map_err(err)?,
        None => harness::run_in_memory(&c, workers).map_err(err)?.1,
    };
    report(py, &rep)
}

#[pymodule(name = "eafe")]
fn eafe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(log_z, m)?)?;
    m.add_function(wrap_pyfunction!(domain_wall, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add("__version__", harness::VERSION)?;
    Ok(())
}
