//! Inverse-free Moore–Penrose pseudoinverse by an order-3 hyper-power
//! iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinvConfig {
    pub iterations: usize,
    /// Stop early once `‖AZA − A‖_F / ‖A‖_F` falls to this value.
    pub convergence_check: Option<f64>,
}

impl Default for PinvConfig {
    fn default() -> Self {
        Self {
            iterations: 6,
            convergence_check: None,
        }
    }
}

impl PinvConfig {
    pub fn new(iterations: usize) -> Result<Self> {
        let cfg = Self {
            iterations,
            convergence_check: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_convergence_check(mut self, tol: f64) -> Self {
        self.convergence_check = Some(tol);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("pinv iterations must be at least 1".into()));
        }
        if let Some(t) = self.convergence_check {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidConfig(format!("bad convergence threshold {t}")));
            }
        }
        Ok(())
    }
}

/// Result of a traced run: the final iterate plus `‖AZ_tA − A‖_F` for
/// `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct PinvTrace<T = f64> {
    pub z: Matrix<T>,
    pub residuals: Vec<f64>,
}

pub fn iterative_pinv<T: Real>(a: &Matrix<T>, cfg: &PinvConfig) -> Result<Matrix<T>> {
    run(a, cfg, false).map(|t| t.z)
}

pub fn iterative_pinv_traced<T: Real>(a: &Matrix<T>, cfg: &PinvConfig) -> Result<PinvTrace<T>> {
    run(a, cfg, true)
}

/// Initial iterate `Aᵀ/(‖A‖₁‖A‖_∞)`.
pub fn initial_iterate<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let (n1, ninf) = (a.norm_one(), a.norm_inf());
    if n1 == T::zero() || ninf == T::zero() {
        return Matrix::zeros(a.cols(), a.rows());
    }
    let mut z = a.transpose();
    z.map_inplace(|x| x / n1 / ninf);
    z
}

/// `‖AZA − A‖_F`
pub fn penrose_residual<T: Real>(a: &Matrix<T>, z: &Matrix<T>) -> Result<f64> {
    let aza = matmul(&matmul(a, z)?, a)?;
    Ok(aza.sub(a)?.frobenius_norm().to_f64_lossless())
}

fn run<T: Real>(a: &Matrix<T>, cfg: &PinvConfig, trace: bool) -> Result<PinvTrace<T>> {
    cfg.validate()?;
    if !a.is_square() {
        return Err(Error::shape(format!(
            "iterative pinv needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("pinv input contains non-finite values".into()));
    }
    let n = a.rows();
    let mut z = initial_iterate(a);
    let a_norm = a.frobenius_norm().to_f64_lossless();
    let mut residuals = Vec::new();
    if a_norm == 0.0 {
        if trace {
            residuals.resize(cfg.iterations + 1, 0.0);
        }
        return Ok(PinvTrace { z, residuals });
    }
    if trace {
        residuals.push(penrose_residual(a, &z)?);
    }
    let c7 = T::lit(7.0);
    let c15 = T::lit(15.0);
    let c13 = T::lit(13.0);
    let quarter = T::lit(0.25);
    for it in 1..=cfg.iterations {
        let az = matmul(a, &z)?;
        let t1 = shifted_negation(&az, c7);
        let t2 = shifted_negation(&matmul(&az, &t1)?, c15);
        let t3 = shifted_negation(&matmul(&az, &t2)?, c13);
        z = matmul(&z, &t3)?.scale(quarter);
        if !z.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value in pinv iterate at iteration {it} of {}",
                cfg.iterations
            )));
        }
        let need_residual = trace || cfg.convergence_check.is_some();
        if need_residual {
            let r = penrose_residual(a, &z)?;
            if trace {
                residuals.push(r);
            }
            if cfg.convergence_check.is_some_and(|tol| r <= tol * a_norm) {
                log::debug!("pinv converged after {it} iterations (n = {n})");
                break;
            }
        }
    }
    Ok(PinvTrace { z, residuals })
}

/// `cI − X`
fn shifted_negation<T: Real>(x: &Matrix<T>, c: T) -> Matrix<T> {
    let mut out = x.map(|v| -v);
    for i in 0..x.rows() {
        out[(i, i)] = out[(i, i)] + c;
    }
    out
}
