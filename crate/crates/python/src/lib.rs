//! Python bindings. Matrices cross the boundary as lists of rows so the
//! module has no numpy dependency; `numpy.asarray` works on every output.

use benel::data::{self, DesignKind, ErrorKind, RawData, SimDesign};
use benel::dists::{self, GigParams, RngStream};
use benel::el::{self, ElConfig};
use benel::hmc;
use benel::model::{self, EmConfig, FitMode, FitReport, Hyperparams, SamplerConfig};
use benel::selection::{SelectionConfig, SelectionCriterion};
use benel::BenelError;
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

create_exception!(benel_py, SamplerError, PyException, "A numerical failure inside the sampler.");

fn to_py(e: BenelError) -> PyErr {
    match e {
        BenelError::InvalidInput(_)
        | BenelError::Parse { .. }
        | BenelError::Csv(_)
        | BenelError::MissingValues { .. }
        | BenelError::EmptyData(_) => PyValueError::new_err(e.to_string()),
        BenelError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => SamplerError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("rows of x must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_design(s: &str) -> PyResult<DesignKind> {
    match s {
        "sim1" => Ok(DesignKind::Sim1),
        "sim2" => Ok(DesignKind::Sim2),
        _ => Err(PyValueError::new_err(format!("design must be 'sim1' or 'sim2', got {s:?}"))),
    }
}

fn parse_error(s: &str) -> PyResult<ErrorKind> {
    match s {
        "normal" => Ok(ErrorKind::Normal),
        "mixture" => Ok(ErrorKind::Mixture),
        "skewt" => Ok(ErrorKind::SkewT),
        "student" => Ok(ErrorKind::StudentT),
        _ => Err(PyValueError::new_err(format!(
            "error must be one of normal, mixture, skewt, student; got {s:?}"
        ))),
    }
}

/// A response vector with named covariates, on the original scale.
#[pyclass(module = "benel_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Data {
    inner: RawData,
}

#[pymethods]
impl Data {
    #[new]
    #[pyo3(signature = (x, y, names=None))]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, names: Option<Vec<String>>) -> PyResult<Self> {
        let x = matrix(&x)?;
        let names = names.unwrap_or_else(|| (1..=x.ncols()).map(|j| format!("x{j}")).collect());
        let inner = RawData::new(x, DVector::from_vec(y), names).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a delimited file with a header row; `response` names the y column.
    #[staticmethod]
    fn from_csv(path: &str, response: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(path, response).map_err(to_py)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Data(n={}, p={})", self.inner.n(), self.inner.p())
    }
}

/// Posterior summaries and draws of one fit, coefficients on the
/// standardized scale.
#[pyclass(module = "benel_py", frozen)]
pub struct Fit {
    report: FitReport,
    raw_medians: Vec<f64>,
}

#[pymethods]
impl Fit {
    #[getter]
    fn names(&self) -> Vec<String> {
        self.report.names.clone()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.report.mode {
            FitMode::Eb => "eb",
            FitMode::Fb => "fb",
        }
    }

    #[getter]
    fn median(&self) -> Vec<f64> {
        self.report.medians()
    }

    /// Medians mapped back to the original covariate scale.
    #[getter]
    fn raw_median(&self) -> Vec<f64> {
        self.raw_medians.clone()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.report.summary.coefficients.iter().map(|c| c.mean).collect()
    }

    #[getter]
    fn sd(&self) -> Vec<f64> {
        self.report.summary.coefficients.iter().map(|c| c.sd).collect()
    }

    #[getter]
    fn lower(&self) -> Vec<f64> {
        self.report.summary.coefficients.iter().map(|c| c.lower).collect()
    }

    #[getter]
    fn upper(&self) -> Vec<f64> {
        self.report.summary.coefficients.iter().map(|c| c.upper).collect()
    }

    #[getter]
    fn included(&self) -> Vec<bool> {
        self.report.selection.included.clone()
    }

    #[getter]
    fn rhat(&self) -> Vec<f64> {
        self.report.summary.rhat.clone()
    }

    #[getter]
    fn max_rhat(&self) -> f64 {
        self.report.max_rhat
    }

    #[getter]
    fn converged(&self) -> bool {
        self.report.converged
    }

    #[getter]
    fn acceptance_rates(&self) -> Vec<f64> {
        self.report.summary.acceptance_rates.clone()
    }

    #[getter]
    fn step_size(&self) -> f64 {
        self.report.step_size
    }

    /// Point values of the penalties: EM estimates, or posterior medians in FB.
    #[getter]
    fn lambda1(&self) -> f64 {
        self.report.lambda1
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.report.lambda2
    }

    /// `draws[chain][draw][j]`, post burn-in.
    #[getter]
    fn draws(&self) -> Vec<Vec<Vec<f64>>> {
        self.report.theta_draws.draws.clone()
    }

    #[getter]
    fn sigma2_draws(&self) -> Vec<Vec<f64>> {
        self.report.sigma2_draws.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(mode={}, p={}, max_rhat={:.4}, step_size={:.4})",
            self.mode(),
            self.report.names.len(),
            self.report.max_rhat,
            self.report.step_size
        )
    }
}

/// Standardizes `data` and samples the posterior. `mode` is "eb" (penalties
/// by Monte Carlo EM) or "fb" (penalties sampled); `criterion` is "sn" or
/// "ci". `step_size=None` runs the bisection tuner. Releases the GIL.
#[pyfunction]
#[pyo3(signature = (
    data, mode="eb", chains=4, iters=2000, burnin=1000, leapfrog=10,
    step_size=None, criterion="sn", level=None, em_iters=20, seed=1
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &Data,
    mode: &str,
    chains: usize,
    iters: usize,
    burnin: usize,
    leapfrog: usize,
    step_size: Option<f64>,
    criterion: &str,
    level: Option<f64>,
    em_iters: usize,
    seed: u64,
) -> PyResult<Fit> {
    let mode = match mode {
        "eb" => FitMode::Eb,
        "fb" => FitMode::Fb,
        _ => return Err(PyValueError::new_err(format!("mode must be 'eb' or 'fb', got {mode:?}"))),
    };
    let selection = match criterion {
        "sn" => SelectionConfig {
            criterion: SelectionCriterion::ScaledNeighborhood,
            level: level.unwrap_or(0.5),
        },
        "ci" => SelectionConfig {
            criterion: SelectionCriterion::CredibleInterval,
            level: level.unwrap_or(0.05),
        },
        _ => return Err(PyValueError::new_err(format!("criterion must be 'sn' or 'ci', got {criterion:?}"))),
    };
    let cfg = SamplerConfig {
        chains,
        chain_length: iters,
        burnin,
        leapfrog_steps: leapfrog,
        step_size,
        selection,
        ..SamplerConfig::default()
    };
    let em = EmConfig {
        max_iters: em_iters,
        ..EmConfig::default()
    };
    let raw = data.inner.clone();
    let (report, raw_medians) = py
        .detach(move || -> benel::Result<_> {
            let d = data::standardize(&raw)?;
            let hyper = Hyperparams::default();
            let report = match mode {
                FitMode::Eb => model::fit_eb(&d, &hyper, &cfg, &em, seed)?.0,
                FitMode::Fb => model::fit_fb(&d, &hyper, &cfg, seed)?,
            };
            let raw_medians = d.transform.raw_coefficients(&DVector::from_vec(report.medians()));
            Ok((report, raw_medians))
        })
        .map_err(to_py)?;
    Ok(Fit { report, raw_medians })
}

/// Training and test sets of replication `rep` of a simulation design.
#[pyfunction]
#[pyo3(signature = (design="sim1", n=50, error="normal", seed=1, rep=0))]
fn simulate(design: &str, n: usize, error: &str, seed: u64, rep: u64) -> PyResult<(Data, Data)> {
    let d = SimDesign::new(parse_design(design)?, n, parse_error(error)?, seed);
    let (train, test) = d.generate(rep).map_err(to_py)?;
    Ok((Data { inner: train }, Data { inner: test }))
}

/// The true coefficient vector of a simulation design.
#[pyfunction]
fn true_coefficients(design: &str) -> PyResult<Vec<f64>> {
    Ok(data::true_coefficients(parse_design(design)?))
}

/// Profile empirical log-likelihood at `theta` with its Lagrange multiplier
/// and implied weights. An infeasible `theta` gives `log_el = -inf`.
#[pyfunction]
fn log_el(py: Python<'_>, x: Vec<Vec<f64>>, y: Vec<f64>, theta: Vec<f64>) -> PyResult<Py<PyAny>> {
    let x = matrix(&x)?;
    if x.nrows() != y.len() || x.ncols() != theta.len() {
        return Err(PyValueError::new_err("x must be n by p with len(y) = n and len(theta) = p"));
    }
    let r = el::solve_lagrange(&x, &DVector::from_vec(y), &DVector::from_vec(theta), &ElConfig::default())
        .map_err(to_py)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("log_el", r.log_el)?;
    out.set_item("feasible", r.feasible)?;
    out.set_item("gamma", r.gamma.iter().copied().collect::<Vec<f64>>())?;
    out.set_item("weights", r.weights().iter().copied().collect::<Vec<f64>>())?;
    out.set_item("newton_iters", r.newton_iters)?;
    Ok(out.into_any().unbind())
}

/// Split-R-hat per parameter from `draws[chain][draw][param]`.
#[pyfunction]
fn split_rhat(draws: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    hmc::split_rhat(&draws).map_err(to_py)
}

/// `size` generalized inverse Gaussian draws with density proportional to
/// `x^(nu-1) exp(-(psi x + chi / x) / 2)`.
#[pyfunction]
#[pyo3(signature = (nu, psi, chi, size=1, seed=1))]
fn sample_gig(nu: f64, psi: f64, chi: f64, size: usize, seed: u64) -> PyResult<Vec<f64>> {
    let params = GigParams::new(nu, psi, chi).map_err(to_py)?;
    let mut rng = RngStream::new(seed, 0);
    (0..size).map(|_| dists::sample_gig(params, &mut rng).map_err(to_py)).collect()
}

#[pymodule]
fn benel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Data>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(true_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(log_el, m)?)?;
    m.add_function(wrap_pyfunction!(split_rhat, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gig, m)?)?;
    m.add("SamplerError", m.py().get_type::<SamplerError>())?;
    Ok(())
}
