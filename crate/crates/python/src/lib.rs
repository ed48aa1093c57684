//! Python bindings for `typtab`.
//!
//! Errors from bad input (unknown family, malformed margin, wrong shape)
//! raise `ValueError`; numerical failures (non-convergence, boundary
//! escape, starvation) raise `RuntimeError`. Heavy calls release the GIL.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use typtab::sampler::{self, Block, MixtureConfig};
use typtab::spectral::{self, DysonConfig, Normalization};
use typtab::{tameness, Alpha0, BaseMeasure, Error, ExponentialFamily, SolverConfig};

/// Whether an error is the caller's fault rather than a numerical failure.
pub fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Parse(_)
            | Error::UnknownFamily(_)
            | Error::InvalidParameters { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::DimensionMismatch(_)
            | Error::AsymmetricMargin
            | Error::NonSquare(..)
            | Error::Infeasible(_)
            | Error::TiltOutOfDomain { .. }
    )
}

fn py_err(e: Error) -> PyErr {
    if is_input_error(&e) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Row-major `m × n` data from a list of equal-length rows.
pub fn flatten(rows: &[Vec<f64>]) -> Result<(Vec<f64>, usize, usize), Error> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::DimensionMismatch("matrix must be non-empty".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("row {i} has {} entries, expected {n}", r.len())));
    }
    Ok((rows.concat(), m, n))
}

fn unflatten(v: &[f64], n: usize) -> Vec<Vec<f64>> {
    v.chunks(n).map(<[f64]>::to_vec).collect()
}

pub fn parse_normalization(s: &str) -> Result<Normalization, Error> {
    match s {
        "square" => Ok(Normalization::Square),
        "half-sum" | "half_sum" => Ok(Normalization::HalfSum),
        v => v
            .parse::<f64>()
            .ok()
            .filter(|x| *x > 0.0 && x.is_finite())
            .map(Normalization::Fixed)
            .ok_or_else(|| Error::Parse(format!("normalization `{v}`: expected square, half-sum or a positive number"))),
    }
}

/// Base measure, built from `family[:p1,p2]` (e.g. `"poisson"`, `"gamma:1,2"`).
#[pyclass(frozen, name = "Measure", module = "typtab_py")]
struct PyMeasure(BaseMeasure);

#[pymethods]
impl PyMeasure {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        text.parse().map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn catalog() -> Vec<Self> {
        BaseMeasure::catalog().into_iter().map(Self).collect()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name()
    }

    /// Open natural-parameter domain `(lo, hi)`.
    #[getter]
    fn theta_domain(&self) -> (f64, f64) {
        self.0.theta_domain()
    }

    #[getter]
    fn support_bounds(&self) -> (f64, f64) {
        self.0.support_bounds()
    }

    fn psi(&self, theta: f64) -> f64 {
        self.0.psi(theta)
    }

    fn psi_prime(&self, theta: f64) -> f64 {
        self.0.psi_prime(theta)
    }

    fn psi_double_prime(&self, theta: f64) -> f64 {
        self.0.psi_double_prime(theta)
    }

    /// Inverse of `psi_prime`.
    fn phi(&self, x: f64) -> PyResult<f64> {
        self.0.phi(x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Measure('{}')", self.0.name())
    }
}

/// Row and column sums.
#[pyclass(frozen, name = "Margin", module = "typtab_py")]
struct PyMargin(typtab::Margin);

#[pymethods]
impl PyMargin {
    #[new]
    fn new(r: Vec<f64>, c: Vec<f64>) -> PyResult<Self> {
        typtab::Margin::new(r, c).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        typtab::Margin::load(path).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        typtab::Margin::from_json(text).map(Self).map_err(py_err)
    }

    /// `⌊n^ρ⌋` lines at `t·n`, the rest at `s·n`; symmetric.
    #[staticmethod]
    fn barvinok(n: usize, s: f64, t: f64, rho: f64) -> PyResult<Self> {
        typtab::Margin::barvinok(n, s, t, rho).map(Self).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    /// `k`-fold clone: each entry scaled by `k` and repeated `k` times.
    fn clone_k(&self, k: usize) -> PyResult<Self> {
        self.0.clone_k(k).map(Self).map_err(py_err)
    }

    #[getter]
    fn r(&self) -> Vec<f64> {
        self.0.r().to_vec()
    }

    #[getter]
    fn c(&self) -> Vec<f64> {
        self.0.c().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.m(), self.0.n())
    }

    #[getter]
    fn total(&self) -> f64 {
        self.0.total()
    }

    fn is_symmetric(&self) -> bool {
        self.0.is_symmetric()
    }

    fn __repr__(&self) -> String {
        format!("Margin(r={:?}, c={:?})", self.0.r(), self.0.c())
    }
}

#[pyclass(frozen, name = "Solution", module = "typtab_py")]
struct PySolution(typtab::Solution);

#[pymethods]
impl PySolution {
    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.0.potentials.alpha.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.potentials.beta.clone()
    }

    /// Typical table as a list of rows.
    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        unflatten(&self.0.table.z, self.0.table.n)
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.report.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.report.converged
    }

    /// Final L¹ margin residual.
    #[getter]
    fn residual(&self) -> f64 {
        self.0.table.row_residual + self.0.table.col_residual
    }

    #[getter]
    fn realized_delta(&self) -> f64 {
        self.0.report.realized_delta
    }

    /// Fitted geometric decay ratio of the dual gaps, when available.
    #[getter]
    fn rate(&self) -> Option<f64> {
        self.0.report.rate_estimate.as_ref().map(|r| r.ratio)
    }

    /// Full solver report as a JSON string.
    fn report_json(&self) -> String {
        serde_json::to_string(&self.0.report).expect("report serializes")
    }
}

/// Maximum-likelihood tilts and typical table for `margin` under `measure`.
#[pyfunction]
#[pyo3(signature = (measure, margin, tol=None, max_iters=10_000, seed=None))]
fn solve(
    py: Python<'_>,
    measure: &PyMeasure,
    margin: &PyMargin,
    tol: Option<f64>,
    max_iters: usize,
    seed: Option<u64>,
) -> PyResult<PySolution> {
    let mut cfg = SolverConfig::default()
        .with_max_iters(max_iters)
        .with_alpha0(seed.map_or(Alpha0::Zero, Alpha0::Random));
    if let Some(t) = tol {
        cfg = cfg.with_tol(t);
    }
    let (m, mg) = (&measure.0, &margin.0);
    py.detach(|| typtab::solve(m, mg, &cfg)).map(PySolution).map_err(py_err)
}

/// Phase verdict for the pair `(s, t)`: `(region, criterion, witness, slack)`.
#[pyfunction]
fn classify(measure: &PyMeasure, s: f64, t: f64) -> PyResult<(String, String, Option<f64>, f64)> {
    let v = tameness::classify(&measure.0, s, t).map_err(py_err)?;
    Ok((v.region.to_string(), v.criterion_used, v.witness, v.slack))
}

/// Cut norm `max |xᵀAy|/(mn)` of a matrix: `(value, exact)`.
#[pyfunction]
fn cut_norm(py: Python<'_>, matrix: Vec<Vec<f64>>) -> PyResult<(f64, bool)> {
    let (a, m, n) = flatten(&matrix).map_err(py_err)?;
    let c = py.detach(|| sampler::cut_norm_exact(&a, m, n)).map_err(py_err)?;
    Ok((c.value, c.exact))
}

/// Independent draws from the tilted model, each a list of rows.
#[pyfunction]
#[pyo3(signature = (measure, margin, count=1, seed=0))]
fn sample(py: Python<'_>, measure: &PyMeasure, margin: &PyMargin, count: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let (m, mg) = (&measure.0, &margin.0);
    let ens = py
        .detach(|| {
            let sol = typtab::solve(m, mg, &SolverConfig::default().without_diagnostics())?;
            sampler::sample_model(m, &sol.potentials, count, seed)
        })
        .map_err(py_err)?;
    Ok(ens.samples.iter().map(|t| unflatten(t, ens.n)).collect())
}

/// Total variation between the conditional and tilted block mixtures.
#[pyfunction]
#[pyo3(signature = (measure, margin, block=None, samples=20_000, seed=0))]
fn mixture_tv(
    py: Python<'_>,
    measure: &PyMeasure,
    margin: &PyMargin,
    block: Option<&str>,
    samples: usize,
    seed: u64,
) -> PyResult<f64> {
    let block: Block = match block {
        Some(b) => b.parse().map_err(py_err)?,
        None => Block::full(margin.0.m(), margin.0.n()),
    };
    let cfg = MixtureConfig {
        samples,
        seed,
        ..MixtureConfig::default()
    };
    let (m, mg) = (&measure.0, &margin.0);
    py.detach(|| {
        sampler::mixture_tv_experiment(m, mg, &block, &cfg, &SolverConfig::default().without_diagnostics())
    })
    .map(|r| r.tv)
    .map_err(py_err)
}

/// Ascending singular values of `(Y − Z)/√v` for one tilted draw `Y`.
#[pyfunction]
#[pyo3(signature = (measure, margin, seed=0, normalization="square"))]
fn singular_values(
    py: Python<'_>,
    measure: &PyMeasure,
    margin: &PyMargin,
    seed: u64,
    normalization: &str,
) -> PyResult<Vec<f64>> {
    let norm = parse_normalization(normalization).map_err(py_err)?;
    let (m, mg) = (&measure.0, &margin.0);
    py.detach(|| {
        let sol = typtab::solve(m, mg, &SolverConfig::default().without_diagnostics())?;
        let star = spectral::s_star(m, &sol.potentials);
        let ens = sampler::sample_model(m, &sol.potentials, 1, seed)?;
        spectral::esd(&ens.samples[0], &sol.table.z, mg.m(), mg.n(), star, norm)
    })
    .map(|e| e.singular_values)
    .map_err(py_err)
}

/// Limiting singular value density of the typical variance profile on `grid`.
#[pyfunction]
#[pyo3(signature = (measure, margin, grid, eta=0.02, normalization="square"))]
fn dyson_density(
    py: Python<'_>,
    measure: &PyMeasure,
    margin: &PyMargin,
    grid: Vec<f64>,
    eta: f64,
    normalization: &str,
) -> PyResult<Vec<f64>> {
    let norm = parse_normalization(normalization).map_err(py_err)?;
    let (m, mg) = (&measure.0, &margin.0);
    py.detach(|| {
        let sol = typtab::solve(m, mg, &SolverConfig::default().without_diagnostics())?;
        let profile = spectral::variance_profile(m, &sol.potentials);
        let factor = norm.factor(mg.m(), mg.n(), spectral::s_star(m, &sol.potentials));
        spectral::dyson_density(&profile, mg.m(), mg.n(), factor, &grid, eta, &DysonConfig::default())
    })
    .map(|c| c.density)
    .map_err(py_err)
}

/// Lipschitz stability check between two margins: `(lhs, rhs, ratio)`.
#[pyfunction]
fn stability(py: Python<'_>, measure: &PyMeasure, a: &PyMargin, b: &PyMargin) -> PyResult<(f64, f64, f64)> {
    let (m, ma, mb) = (&measure.0, &a.0, &b.0);
    py.detach(|| typtab::stability::stability(m, ma, mb, &SolverConfig::default().without_diagnostics()))
        .map(|r| (r.lhs, r.rhs, r.ratio))
        .map_err(py_err)
}

#[pymodule]
fn typtab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyMargin>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_tv, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(dyson_density, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_checks_shape() {
        let (v, m, n) = flatten(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!((m, n), (3, 2));
        assert_eq!(v, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unflatten(&v, n), [vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert!(flatten(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(flatten(&[]).is_err());
    }

    #[test]
    fn normalization_names() {
        assert_eq!(parse_normalization("square").unwrap(), Normalization::Square);
        assert_eq!(parse_normalization("half-sum").unwrap(), Normalization::HalfSum);
        assert_eq!(parse_normalization("4").unwrap(), Normalization::Fixed(4.0));
        assert!(parse_normalization("0").is_err());
        assert!(parse_normalization("wide").is_err());
    }

    #[test]
    fn error_classes() {
        assert!(is_input_error(&Error::UnknownFamily("x".into())));
        assert!(is_input_error(&Error::AsymmetricMargin));
        assert!(!is_input_error(&Error::DysonNonConvergence {
            iterations: 1,
            residual: 1.0
        }));
        assert!(!is_input_error(&Error::RejectionStarvation { rate: 0.0, attempts: 1 }));
    }
}
