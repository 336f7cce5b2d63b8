//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use nystra::analysis::{self, ApproxReport, SpectrumReport};
use nystra::io::{self, Tensor, TensorData};
use nystra::nystrom::resolve_landmarks;
use nystra::validate::{run_suite, ValidateConfig};
use nystra::{AttentionInputs, Error, ExplicitLandmarks, LandmarkStrategy, Matrix, NystraConfig, PinvConfig};
use pyo3::exceptions::{PyArithmeticError, PyMemoryError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    if e.is_io() {
        PyOSError::new_err(msg)
    } else if e.is_numerical() {
        PyArithmeticError::new_err(msg)
    } else if matches!(e, Error::Allocation { .. }) {
        PyMemoryError::new_err(msg)
    } else {
        PyValueError::new_err(msg)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    Matrix::from_rows(&rows).map_err(py_err)
}

fn inputs(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<AttentionInputs> {
    AttentionInputs::new(matrix(q)?, matrix(k)?, matrix(v)?).map_err(py_err)
}

fn parse_strategy(
    name: Option<&str>,
    grid: Option<(usize, usize)>,
    indices: Option<Vec<usize>>,
) -> Result<LandmarkStrategy, String> {
    match (name, indices) {
        (None | Some("explicit"), Some(ix)) => Ok(LandmarkStrategy::Explicit(ExplicitLandmarks::Indices(ix))),
        (Some("explicit"), None) => Err("explicit strategy needs landmark_indices".into()),
        (Some(other), Some(_)) => Err(format!("landmark_indices need strategy 'explicit', not {other:?}")),
        (None | Some("pool-1d"), None) => Ok(LandmarkStrategy::Pool1d),
        (Some("pool-2d"), None) => {
            let (grid_h, grid_w) = grid.ok_or("pool-2d needs grid=(h, w)")?;
            Ok(LandmarkStrategy::Pool2d { grid_h, grid_w })
        }
        (Some(other), None) => Err(format!("unknown strategy {other:?}; use pool-1d, pool-2d or explicit")),
    }
}

fn strategy_name(s: &LandmarkStrategy) -> &'static str {
    match s {
        LandmarkStrategy::Pool1d => "pool-1d",
        LandmarkStrategy::Pool2d { .. } => "pool-2d",
        LandmarkStrategy::Explicit(_) => "explicit",
    }
}

/// Landmark count, pseudoinverse iterations, stabilization and landmark strategy.
#[pyclass(name = "NystraConfig", module = "nystra", frozen)]
struct PyNystraConfig {
    inner: NystraConfig,
}

#[pymethods]
impl PyNystraConfig {
    #[new]
    #[pyo3(signature = (m=16, iterations=6, stabilize=true, strategy=None, grid=None, landmark_indices=None))]
    fn new(
        m: usize,
        iterations: usize,
        stabilize: bool,
        strategy: Option<&str>,
        grid: Option<(usize, usize)>,
        landmark_indices: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let strategy = parse_strategy(strategy, grid, landmark_indices).map_err(PyValueError::new_err)?;
        let pinv = PinvConfig::new(iterations).map_err(py_err)?;
        let inner = NystraConfig::default()
            .with_m(m)
            .with_pinv(pinv)
            .with_strategy(strategy)
            .with_stabilize(stabilize);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.pinv.iterations
    }

    #[getter]
    fn stabilize(&self) -> bool {
        self.inner.stabilize
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        strategy_name(&self.inner.strategy)
    }

    fn __repr__(&self) -> String {
        format!(
            "NystraConfig(m={}, iterations={}, stabilize={}, strategy='{}')",
            self.inner.m,
            self.inner.pinv.iterations,
            if self.inner.stabilize { "True" } else { "False" },
            self.strategy()
        )
    }
}

fn config(cfg: Option<PyRef<'_, PyNystraConfig>>) -> NystraConfig {
    cfg.map(|c| c.inner.clone()).unwrap_or_default()
}

#[pyclass(name = "ApproxReport", module = "nystra", frozen, get_all)]
struct PyApproxReport {
    n: usize,
    m: usize,
    sigma1_gtilde: f64,
    sigma_m_ga: f64,
    sigma_m_plus_1_gtilde: f64,
    rank_gtilde: usize,
    spectral_error: f64,
    kernel_norm: f64,
    bound_ratio: Option<f64>,
    empirical_c: Option<f64>,
    output_rel_error: f64,
    induced_map_error: f64,
}

impl From<ApproxReport> for PyApproxReport {
    fn from(r: ApproxReport) -> Self {
        Self {
            n: r.n,
            m: r.m,
            sigma1_gtilde: r.sigma1_gtilde,
            sigma_m_ga: r.sigma_m_ga,
            sigma_m_plus_1_gtilde: r.sigma_m_plus_1_gtilde,
            rank_gtilde: r.rank_gtilde,
            spectral_error: r.spectral_error,
            kernel_norm: r.kernel_norm,
            bound_ratio: r.bound_ratio,
            empirical_c: r.empirical_c,
            output_rel_error: r.output_rel_error,
            induced_map_error: r.induced_map_error,
        }
    }
}

#[pymethods]
impl PyApproxReport {
    fn __repr__(&self) -> String {
        format!(
            "ApproxReport(n={}, m={}, output_rel_error={:.3e}, spectral_error={:.3e})",
            self.n, self.m, self.output_rel_error, self.spectral_error
        )
    }
}

#[pyclass(name = "SpectrumReport", module = "nystra", frozen, get_all)]
struct PySpectrumReport {
    n: usize,
    m: usize,
    sigma_gtilde: Vec<f64>,
    sigma_ga: Vec<f64>,
    effective_rank: usize,
    decay_ratio: Option<f64>,
}

impl From<SpectrumReport> for PySpectrumReport {
    fn from(r: SpectrumReport) -> Self {
        Self {
            n: r.n,
            m: r.m,
            sigma_gtilde: r.sigma_gtilde,
            sigma_ga: r.sigma_ga,
            effective_rank: r.effective_rank,
            decay_ratio: r.decay_ratio,
        }
    }
}

/// A 2-D or 3-D array in the binary tensor file format.
#[pyclass(name = "Tensor", module = "nystra", frozen)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    /// `data` is a list of rows or a list of such matrices; `dtype` is "f32" or "f64".
    #[new]
    #[pyo3(signature = (data, dtype="f64"))]
    fn new(data: &Bound<'_, PyAny>, dtype: &str) -> PyResult<Self> {
        let items: Vec<Matrix> = if let Ok(rows) = data.extract::<Vec<Vec<f64>>>() {
            vec![matrix(rows)?]
        } else {
            let batch: Vec<Vec<Vec<f64>>> = data.extract()?;
            batch.into_iter().map(matrix).collect::<PyResult<_>>()?
        };
        let batch = data.extract::<Vec<Vec<f64>>>().is_err();
        let inner = match (dtype, batch) {
            ("f64", false) => Tensor::from_matrix(&items[0]),
            ("f32", false) => Tensor::from_matrix(&items[0].cast::<f32>()),
            ("f64", true) => Tensor::from_batch(&items).map_err(py_err)?,
            ("f32", true) => {
                let lo: Vec<Matrix<f32>> = items.iter().map(Matrix::cast).collect();
                Tensor::from_batch(&lo).map_err(py_err)?
            }
            (other, _) => return Err(PyValueError::new_err(format!("unknown dtype {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_tensor(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_tensor(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner.data() {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    /// Nested lists with the tensor's shape, values widened to float.
    fn tolist(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let mats: Vec<Vec<Vec<f64>>> = self.inner.matrices::<f64>().iter().map(Matrix::to_rows).collect();
        if self.inner.is_batch() {
            Ok(mats.into_pyobject(py)?.unbind())
        } else {
            let first = mats.into_iter().next().unwrap_or_default();
            Ok(first.into_pyobject(py)?.unbind())
        }
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, dtype='{}')", self.inner.shape(), self.dtype())
    }
}

/// Exact attention `softmax(QKᵀ/√d)V`.
#[pyfunction]
fn attention_softmax(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let inp = inputs(q, k, v)?;
    Ok(nystra::attention_softmax(&inp).map_err(py_err)?.to_rows())
}

/// Approximate attention with landmarks; never forms the N×N kernel.
#[pyfunction]
#[pyo3(signature = (q, k, v, config=None))]
fn pnp_nystra(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    config: Option<PyRef<'_, PyNystraConfig>>,
) -> PyResult<Vec<Vec<f64>>> {
    let inp = inputs(q, k, v)?;
    Ok(nystra::pnp_nystra(&inp, &self::config(config)).map_err(py_err)?.to_rows())
}

/// Hyper-power approximation of the Moore-Penrose pseudoinverse.
#[pyfunction]
#[pyo3(signature = (a, iterations=6))]
fn iterative_pinv(a: Vec<Vec<f64>>, iterations: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = PinvConfig::new(iterations).map_err(py_err)?;
    Ok(nystra::iterative_pinv(&matrix(a)?, &cfg).map_err(py_err)?.to_rows())
}

/// Pseudoinverse through the SVD, for reference.
#[pyfunction]
fn pinv_svd(a: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let z = nystra::linalg::pinv_svd(&matrix(a)?, nystra::linalg::DEFAULT_PINV_CUTOFF).map_err(py_err)?;
    Ok(z.to_rows())
}

/// Spectral and output error of the approximation against exact attention.
#[pyfunction]
#[pyo3(signature = (q, k, v, config=None))]
fn approx_report(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    config: Option<PyRef<'_, PyNystraConfig>>,
) -> PyResult<PyApproxReport> {
    let inp = inputs(q, k, v)?;
    analysis::approx_report(&inp, &self::config(config))
        .map(Into::into)
        .map_err(py_err)
}

/// Leading singular values of the extended kernel matrix and its core block.
#[pyfunction]
#[pyo3(signature = (q, k, config=None, top=50))]
fn spectrum(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    config: Option<PyRef<'_, PyNystraConfig>>,
    top: usize,
) -> PyResult<PySpectrumReport> {
    let q = matrix(q)?;
    let v = Matrix::zeros(q.rows(), 1);
    let inp = AttentionInputs::new(q, matrix(k)?, v).map_err(py_err)?;
    let cfg = self::config(config);
    let lm = resolve_landmarks(&inp, &cfg).map_err(py_err)?;
    analysis::spectrum(&inp, &lm, top).map(Into::into).map_err(py_err)
}

/// Runs the invariant suite; returns `(module, name, passed, worst, tolerance)` rows.
#[pyfunction]
#[pyo3(signature = (seed=0, trials=3))]
fn validate(seed: u64, trials: usize) -> Vec<(String, String, bool, f64, f64)> {
    run_suite(&ValidateConfig { seed, trials, fault: None })
        .into_iter()
        .map(|r| (r.module.to_owned(), r.name.to_owned(), r.passed, r.worst, r.tolerance))
        .collect()
}

#[pymodule]
#[pyo3(name = "nystra")]
fn nystra_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNystraConfig>()?;
    m.add_class::<PyApproxReport>()?;
    m.add_class::<PySpectrumReport>()?;
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(attention_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(pnp_nystra, m)?)?;
    m.add_function(wrap_pyfunction!(iterative_pinv, m)?)?;
    m.add_function(wrap_pyfunction!(pinv_svd, m)?)?;
    m.add_function(wrap_pyfunction!(approx_report, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names() {
        assert_eq!(parse_strategy(None, None, None), Ok(LandmarkStrategy::Pool1d));
        assert_eq!(
            parse_strategy(Some("pool-2d"), Some((4, 8)), None),
            Ok(LandmarkStrategy::Pool2d { grid_h: 4, grid_w: 8 })
        );
        assert!(parse_strategy(Some("pool-2d"), None, None).is_err());
        assert!(parse_strategy(Some("explicit"), None, None).is_err());
        assert!(parse_strategy(Some("pool-1d"), None, Some(vec![1])).is_err());
        assert!(parse_strategy(Some("hilbert"), None, None).is_err());
        let s = parse_strategy(None, None, Some(vec![0, 3])).unwrap();
        assert_eq!(strategy_name(&s), "explicit");
    }
}
