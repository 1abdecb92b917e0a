//! Python bindings for `mfbsdej`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mfbsdej::cli::config::RunConfig;
use mfbsdej::lq_benchmark::{riccati_rk4, AffinePath, ClosedFormSolution, LqParams};
use mfbsdej::measure::{w2_coupled_bound, w2_exact_1d, w2_exact_small, EmpiricalLaw};
use mfbsdej::mf_solver::{empirical_contraction_ratio, MfSolution};
use mfbsdej::random_measure;
use mfbsdej::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence(_) | Error::Singular(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration, built from TOML text.
#[pyclass(name = "Config", module = "mfbsdej")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        RunConfig::from_toml(toml).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: std::path::PathBuf) -> PyResult<Self> {
        RunConfig::read(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

/// Result of a Picard solve.
#[pyclass(name = "Solution", module = "mfbsdej")]
struct PySolution {
    inner: MfSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.report.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.report.iterations
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.report.delta
    }

    #[getter]
    fn y0(&self) -> Vec<f64> {
        self.inner.report.y0.clone()
    }

    #[getter]
    fn distances(&self) -> Vec<f64> {
        self.inner.report.distances()
    }

    /// Median ratio of successive distances, `None` with fewer than three iterations.
    fn contraction_ratio(&self) -> Option<f64> {
        empirical_contraction_ratio(&self.inner.report).ok()
    }

    fn times(&self) -> Vec<f64> {
        let g = self.inner.ensemble.grid;
        (0..=g.steps).map(|i| g.time(i)).collect()
    }

    /// Cross-particle mean of `X` component `c` on the grid.
    #[pyo3(signature = (c = 0))]
    fn x_mean(&self, c: usize) -> PyResult<Vec<f64>> {
        let e = &self.inner.ensemble;
        if c >= e.dx {
            return Err(PyValueError::new_err(format!("component {c} out of range for d_x = {}", e.dx)));
        }
        Ok((0..=e.grid.steps).map(|i| (0..e.particles).map(|p| e.x_at(p, i)[c]).sum::<f64>() / e.particles as f64).collect())
    }

    /// Cross-particle mean of `Y` component `c` on the grid.
    #[pyo3(signature = (c = 0))]
    fn y_mean(&self, c: usize) -> PyResult<Vec<f64>> {
        if c >= self.inner.iterate.dims.y {
            return Err(PyValueError::new_err(format!("component {c} out of range for d_y = {}", self.inner.iterate.dims.y)));
        }
        Ok(self.inner.iterate.y_mean_path(c))
    }

    /// One dict per outer iteration.
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .report
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("iteration", r.iteration)?;
                d.set_item("distance", r.distance)?;
                d.set_item("ratio", r.ratio)?;
                d.set_item("x_terminal", r.x_terminal)?;
                d.set_item("y", r.y)?;
                d.set_item("z", r.z)?;
                d.set_item("k", r.k)?;
                d.set_item("inner_iterations", r.inner_iterations)?;
                d.set_item("relaxation", r.relaxation)?;
                Ok(d)
            })
            .collect()
    }
}

/// Solve the instance described by `config`.
#[pyfunction]
fn solve(py: Python<'_>, config: &PyConfig) -> PyResult<PySolution> {
    let cfg = config.inner.clone();
    py.detach(move || mfbsdej::cli::solve_config(&cfg)).map(|inner| PySolution { inner }).map_err(py_err)
}

/// Run the command line front end with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut full = vec!["mfbsdej".to_string()];
    full.extend(args);
    py.detach(move || mfbsdej::cli::main_with_args(full))
}

/// Closed-form one-region LQ benchmark.
#[pyclass(name = "LqBenchmark", module = "mfbsdej")]
struct PyLqBenchmark {
    inner: ClosedFormSolution,
}

fn lq_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<LqParams> {
    let mut p = LqParams::default();
    let Some(kw) = kwargs else { return Ok(p) };
    for (key, value) in kw.iter() {
        let key: String = key.extract()?;
        match key.as_str() {
            "rest" => p.rest = AffinePath::constant(value.extract()?),
            "region_mean" => {
                let (initial, slope): (f64, f64) = value.extract()?;
                p.region_mean = AffinePath::linear(initial, slope);
            }
            _ => {
                let v: f64 = value.extract()?;
                let slot = match key.as_str() {
                    "p0" => &mut p.p0,
                    "p1" => &mut p.p1,
                    "a1" => &mut p.a1,
                    "a2" => &mut p.a2,
                    "c" => &mut p.c,
                    "k" => &mut p.k,
                    "b1" => &mut p.b1,
                    "b2" => &mut p.b2,
                    "horizon" => &mut p.horizon,
                    "s0" => &mut p.s0,
                    other => return Err(PyValueError::new_err(format!("unknown LQ parameter {other:?}"))),
                };
                *slot = v;
            }
        }
    }
    Ok(p)
}

#[pymethods]
impl PyLqBenchmark {
    #[new]
    #[pyo3(signature = (intervals = 2000, **kwargs))]
    fn new(intervals: usize, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let p = lq_from_kwargs(kwargs)?;
        ClosedFormSolution::new(&p, intervals).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    fn phi_bar(&self, t: f64) -> PyResult<f64> {
        self.inner.phi_bar(t).map_err(py_err)
    }

    fn psi_bar(&self, t: f64) -> f64 {
        self.inner.psi_bar(t)
    }

    fn s_bar(&self, t: f64) -> f64 {
        self.inner.s_bar(t)
    }

    fn y_bar(&self, t: f64) -> PyResult<f64> {
        self.inner.y_bar(t).map_err(py_err)
    }

    fn alpha_bar(&self, t: f64) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(py_err)
    }

    fn price_bar(&self, t: f64) -> PyResult<f64> {
        self.inner.price_bar(t).map_err(py_err)
    }

    #[pyo3(signature = (points = 1000, h = 1e-4))]
    fn alpha_consistency_gap(&self, points: usize, h: f64) -> PyResult<f64> {
        self.inner.alpha_consistency_gap(points, h).map_err(py_err)
    }

    /// RK4 table of `φ̄` on `steps + 1` uniform nodes.
    #[pyo3(signature = (steps = 1000))]
    fn riccati_rk4(&self, steps: usize) -> PyResult<Vec<f64>> {
        riccati_rk4(&self.inner.params, steps).map_err(py_err)
    }
}

/// Finite Lévy measure on a list of marks.
#[pyclass(name = "JumpIntensity", module = "mfbsdej")]
struct PyJumpIntensity {
    inner: random_measure::JumpIntensity,
}

#[pymethods]
impl PyJumpIntensity {
    #[new]
    fn new(marks: Vec<f64>, rates: Vec<f64>) -> PyResult<Self> {
        random_measure::JumpIntensity::new(marks, rates).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn marks(&self) -> Vec<f64> {
        self.inner.marks().to_vec()
    }

    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.rates().to_vec()
    }

    fn total_rate(&self) -> f64 {
        self.inner.total_rate()
    }
}

fn law(points: Vec<Vec<f64>>) -> PyResult<EmpiricalLaw> {
    EmpiricalLaw::from_points(&points).map_err(py_err)
}

/// Exact W₂ between two equal-size one-dimensional clouds.
#[pyfunction(name = "w2_exact_1d")]
fn py_w2_exact_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let (a, b) = (EmpiricalLaw::from_scalars(&a).map_err(py_err)?, EmpiricalLaw::from_scalars(&b).map_err(py_err)?);
    w2_exact_1d(&a, &b).map_err(py_err)
}

/// Exact W₂ between two small clouds of points, by optimal matching.
#[pyfunction(name = "w2_exact_small")]
fn py_w2_exact_small(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    w2_exact_small(&law(a)?, &law(b)?).map_err(py_err)
}

/// Root-mean-square distance of the index-wise coupling.
#[pyfunction(name = "w2_coupled_bound")]
fn py_w2_coupled_bound(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    w2_coupled_bound(&law(a)?, &law(b)?, true).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "mfbsdej")]
fn mfbsdej_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyLqBenchmark>()?;
    m.add_class::<PyJumpIntensity>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(py_w2_exact_1d, m)?)?;
    m.add_function(wrap_pyfunction!(py_w2_exact_small, m)?)?;
    m.add_function(wrap_pyfunction!(py_w2_coupled_bound, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
