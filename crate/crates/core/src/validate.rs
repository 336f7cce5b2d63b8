//! Randomized invariant suite run by `nystra validate`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::induced_attention_map;
use crate::attention::{attention_from_kernel, attention_kernel, attention_softmax, AttentionInputs};
use crate::error::{Error, Result};
use crate::fixtures::{gaussian, gaussian_inputs, prototype_inputs, rng, separated_prototype_inputs};
use crate::io::Tensor;
use crate::landmarks::{pool1d_segments, select_landmarks, ExplicitLandmarks, LandmarkStrategy};
use crate::linalg::{matmul, pinv_svd, row_softmax, singular_values, spectral_norm, Matrix, DEFAULT_PINV_CUTOFF};
use crate::nystrom::{approx_kernel, build_kernel_blocks, pnp_nystra_with_landmarks, resolve_landmarks, stabilization_witness, NystraConfig};
use crate::pinv::{iterative_pinv, iterative_pinv_traced, PinvConfig};

/// Deliberate corruption used to check that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scale every pseudoinverse by 1.1.
    Pinv,
    /// Skip the max subtraction and renormalize rows to 0.9.
    Softmax,
    /// Flip one payload bit after encoding.
    Io,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pinv" => Ok(Fault::Pinv),
            "softmax" => Ok(Fault::Softmax),
            "io" => Ok(Fault::Io),
            other => Err(Error::InvalidInput(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidateConfig {
    pub seed: u64,
    pub trials: usize,
    pub fault: Option<Fault>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 10,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantResult {
    pub module: &'static str,
    pub name: &'static str,
    pub trials: usize,
    /// Largest observed violation measure; compare with `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: Option<String>,
}

impl fmt::Display for InvariantResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<12} {:<40} trials={:<3} worst={:<10.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.trials,
            self.worst,
            self.tolerance
        )?;
        if let Some(d) = &self.detail {
            write!(f, "  ({d})")?;
        }
        Ok(())
    }
}

struct Ctx {
    seed: u64,
    fault: Option<Fault>,
}

impl Ctx {
    fn seed(&self, salt: u64, trial: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(salt * 10_007 + trial as u64)
    }

    fn pinv(&self, a: &Matrix, cfg: &PinvConfig) -> Result<Matrix> {
        let z = iterative_pinv(a, cfg)?;
        Ok(if self.fault == Some(Fault::Pinv) { z.scale(1.1) } else { z })
    }

    fn softmax(&self, a: &Matrix) -> Result<Matrix> {
        if self.fault == Some(Fault::Softmax) {
            let mut e = a.map(f64::exp);
            for i in 0..e.rows() {
                let s: f64 = e.row(i).iter().sum();
                e.row_mut(i).iter_mut().for_each(|x| *x *= 0.9 / s);
            }
            return Ok(e);
        }
        row_softmax(a)
    }
}

type Check = fn(&Ctx, usize) -> Result<f64>;

struct Invariant {
    module: &'static str,
    name: &'static str,
    tolerance: f64,
    check: Check,
}

const fn inv(module: &'static str, name: &'static str, tolerance: f64, check: Check) -> Invariant {
    Invariant { module, name, tolerance, check }
}

const SUITE: &[Invariant] = &[
    inv("linalg", "matmul associativity", 1e-10, matmul_assoc),
    inv("linalg", "softmax rows sum to one", 1e-12, softmax_sums),
    inv("linalg", "softmax shift invariance", 1e-12, softmax_shift),
    inv("linalg", "singular values orthogonally invariant", 1e-10, svd_invariance),
    inv("linalg", "svd pinv penrose condition", 1e-10, penrose),
    inv("attention", "kernel form equals softmax form", 1e-12, kernel_identity),
    inv("landmarks", "weighted landmark mean equals token mean", 1e-12, landmark_mean),
    inv("pinv", "iterative pinv matches svd pinv", 1e-6, pinv_oracle),
    inv("pinv", "penrose residual non-increasing", 1e-12, pinv_monotone),
    inv("pinv", "spd iterates stay symmetric", 1e-10, pinv_symmetric),
    inv("nystrom", "row scaling cancels", 1e-10, row_scaling),
    inv("nystrom", "fast path matches explicit kernel", 1e-10, oracle_consistency),
    inv("nystrom", "prototype inputs recovered exactly", 1e-6, exact_recovery),
    inv("nystrom", "stabilized equals unstabilized", 1e-10, stabilization),
    inv("analysis", "induced map rows sum to one", 1e-10, induced_rows),
    inv("io", "tensor round trip bit exact", 0.0, io_round_trip),
];

pub fn invariant_names() -> Vec<&'static str> {
    SUITE.iter().map(|i| i.name).collect()
}

pub fn run_suite(cfg: &ValidateConfig) -> Vec<InvariantResult> {
    let ctx = Ctx {
        seed: cfg.seed,
        fault: cfg.fault,
    };
    let trials = cfg.trials.max(1);
    SUITE
        .iter()
        .map(|inv| {
            let mut worst = 0.0f64;
            let mut detail = None;
            for t in 0..trials {
                match (inv.check)(&ctx, t) {
                    Ok(v) if v.is_nan() => {
                        worst = f64::INFINITY;
                        detail = Some(format!("trial {t}: NaN measure"));
                    }
                    Ok(v) => worst = worst.max(v),
                    Err(e) => {
                        worst = f64::INFINITY;
                        detail = Some(format!("trial {t}: {e}"));
                        break;
                    }
                }
            }
            InvariantResult {
                module: inv.module,
                name: inv.name,
                trials,
                worst,
                tolerance: inv.tolerance,
                passed: worst <= inv.tolerance,
                detail,
            }
        })
        .collect()
}

fn rel(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE))
}

fn matmul_assoc(c: &Ctx, t: usize) -> Result<f64> {
    let s = c.seed(1, t);
    let (a, b, d) = (gaussian(6, 5, 1.0, s), gaussian(5, 7, 1.0, s + 1), gaussian(7, 4, 1.0, s + 2));
    rel(&matmul(&matmul(&a, &b)?, &d)?, &matmul(&a, &matmul(&b, &d)?)?)
}

fn softmax_sums(c: &Ctx, t: usize) -> Result<f64> {
    let s = c.softmax(&gaussian(8, 12, 5.0, c.seed(2, t)))?;
    Ok(s.row_sums().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max))
}

fn softmax_shift(c: &Ctx, t: usize) -> Result<f64> {
    let a = gaussian(6, 9, 3.0, c.seed(3, t));
    let shifts = gaussian(6, 1, 50.0, c.seed(3, t) + 1);
    let shifted = Matrix::from_fn(6, 9, |i, j| a[(i, j)] + shifts[(i, 0)]);
    c.softmax(&a)?.max_abs_diff(&c.softmax(&shifted)?)
}

fn householder(n: usize, seed: u64) -> Matrix {
    let v = gaussian(n, 1, 1.0, seed).into_vec();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    Matrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / vv)
}

fn svd_invariance(c: &Ctx, t: usize) -> Result<f64> {
    let s = c.seed(4, t);
    let a = gaussian(9, 6, 1.0, s);
    let b = matmul(&matmul(&householder(9, s + 1), &a)?, &householder(6, s + 2))?;
    let (x, y) = (singular_values(&a)?, singular_values(&b)?);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs() / x[0]).fold(0.0, f64::max))
}

fn penrose(c: &Ctx, t: usize) -> Result<f64> {
    let a = gaussian(10, 10, 1.0, c.seed(5, t));
    let p = pinv_svd(&a, DEFAULT_PINV_CUTOFF)?;
    Ok(spectral_norm(&matmul(&matmul(&a, &p)?, &a)?.sub(&a)?)? / spectral_norm(&a)?)
}

fn kernel_identity(c: &Ctx, t: usize) -> Result<f64> {
    let inp = gaussian_inputs(24 + t % 40, 8, 4, 4.0, c.seed(6, t));
    let mut s = crate::attention::attention_logits(&inp)?;
    s = c.softmax(&s)?;
    matmul(&s, &inp.v)?.max_abs_diff(&attention_kernel(&inp)?)
}

fn landmark_mean(c: &Ctx, t: usize) -> Result<f64> {
    let n = 10 + t * 7 % 50;
    let m = 1 + t % 9;
    let q = gaussian(n, 3, 1.0, c.seed(7, t));
    let lm = select_landmarks(&q, &q, m, &LandmarkStrategy::Pool1d)?;
    let segs = pool1d_segments(n, m);
    let means = q.column_means();
    Ok((0..3)
        .map(|col| {
            let w: f64 = segs.iter().enumerate().map(|(s, r)| lm.q_bar[(s, col)] * r.len() as f64).sum();
            (w / n as f64 - means[col]).abs()
        })
        .fold(0.0, f64::max))
}

fn conditioned(n: usize, cond: f64, seed: u64) -> Result<Matrix> {
    let mut u = Matrix::identity(n);
    let mut w = Matrix::identity(n);
    for r in 0..3 {
        u = matmul(&u, &householder(n, seed * 31 + r))?;
        w = matmul(&w, &householder(n, seed * 37 + 100 + r))?;
    }
    let s: Vec<f64> = (0..n).map(|i| cond.powf(1.0 - i as f64 / (n - 1) as f64)).collect();
    matmul(&matmul(&u, &Matrix::diag(&s))?, &w.transpose())
}

fn pinv_oracle(c: &Ctx, t: usize) -> Result<f64> {
    let a = conditioned(16, 1e3, c.seed(8, t))?;
    let z = c.pinv(&a, &PinvConfig::new(20)?)?;
    let o = pinv_svd(&a, DEFAULT_PINV_CUTOFF)?;
    Ok(spectral_norm(&z.sub(&o)?)? / spectral_norm(&o)?)
}

fn pinv_monotone(c: &Ctx, t: usize) -> Result<f64> {
    let a = conditioned(12, 50.0, c.seed(9, t))?;
    let tr = iterative_pinv_traced(&a, &PinvConfig::new(12)?)?;
    Ok(tr.residuals.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max))
}

fn pinv_symmetric(c: &Ctx, t: usize) -> Result<f64> {
    let b = gaussian(10, 10, 1.0, c.seed(10, t));
    let mut a = matmul(&b, &b.transpose())?;
    for i in 0..10 {
        a[(i, i)] += 0.5;
    }
    let z = c.pinv(&a, &PinvConfig::new(1 + t % 10)?)?;
    Ok(z.max_abs_diff(&z.transpose())? / z.max_abs())
}

fn row_scaling(c: &Ctx, t: usize) -> Result<f64> {
    let s = c.seed(11, t);
    let inp = gaussian_inputs(20, 4, 3, 1.0, s);
    let lm = resolve_landmarks(&inp, &NystraConfig::default().with_m(3))?;
    let (b, _) = build_kernel_blocks(&inp, &lm, false)?;
    let z = c.pinv(&b.g_a, &PinvConfig::default())?;
    let g_hat = matmul(&matmul(&b.g_l, &z)?, &b.g_u)?;
    let d = gaussian(20, 1, 1.0, s + 1).into_vec();
    let mut dg = g_hat.clone();
    for (i, x) in d.iter().enumerate() {
        dg.row_mut(i).iter_mut().for_each(|v| *v *= x.exp());
    }
    let plain = attention_from_kernel(&g_hat, &inp.v)?;
    Ok(plain.max_abs_diff(&attention_from_kernel(&dg, &inp.v)?)? / plain.max_abs().max(1.0))
}

/// Fast path output with the suite's (possibly faulty) pseudoinverse.
fn fast_path(c: &Ctx, inp: &AttentionInputs, cfg: &NystraConfig) -> Result<Matrix> {
    let lm = resolve_landmarks(inp, cfg)?;
    if c.fault != Some(Fault::Pinv) {
        return pnp_nystra_with_landmarks(inp, &lm, &cfg.pinv, cfg.stabilize);
    }
    let (b, _) = build_kernel_blocks(inp, &lm, cfg.stabilize)?;
    let p = matmul(&b.g_l, &c.pinv(&b.g_a, &cfg.pinv)?)?;
    let g_hat = matmul(&p, &b.g_u)?;
    attention_from_kernel(&g_hat, &inp.v)
}

fn oracle_consistency(c: &Ctx, t: usize) -> Result<f64> {
    let inp = gaussian_inputs(8 + t * 5 % 56, 4, 3, 1.0, c.seed(12, t));
    let cfg = NystraConfig::default().with_m(1 + t % 12).with_stabilize(t.is_multiple_of(2));
    let lm = resolve_landmarks(&inp, &cfg)?;
    let (b, _) = build_kernel_blocks(&inp, &lm, cfg.stabilize)?;
    let slow = attention_from_kernel(&approx_kernel(&b, &cfg.pinv)?, &inp.v)?;
    Ok(fast_path(c, &inp, &cfg)?.max_abs_diff(&slow)? / slow.max_abs().max(1.0))
}

fn exact_recovery(c: &Ctx, t: usize) -> Result<f64> {
    let m = [2, 4, 8][t % 3];
    let (inp, lm) = prototype_inputs(m, 16 * m, 8, 4, 1.0, c.seed(13, t));
    let cfg = NystraConfig::default()
        .with_strategy(LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(lm)))
        .with_pinv(PinvConfig::new(60)?);
    let exact = attention_softmax(&inp)?;
    rel(&fast_path(c, &inp, &cfg)?, &exact)
}

fn stabilization(c: &Ctx, t: usize) -> Result<f64> {
    let (inp, lm) = separated_prototype_inputs(4, 32 + 4 * t, 4, 3, 4.0, 0.1, c.seed(14, t));
    let cfg = NystraConfig::default().with_strategy(LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(lm)));
    let w = stabilization_witness(&inp, &cfg, 1.0);
    w.max_abs_diff
        .ok_or_else(|| Error::Numerical(format!("witness produced no comparison: {w:?}")))
}

fn induced_rows(c: &Ctx, t: usize) -> Result<f64> {
    let inp = gaussian_inputs(64, 8, 2, 1.0, c.seed(15, t));
    let (_, s_hat) = induced_attention_map(&inp, &NystraConfig::default())?;
    Ok(s_hat.row_sums().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max))
}

fn io_round_trip(c: &Ctx, t: usize) -> Result<f64> {
    use rand::Rng;
    let mut r = rng(c.seed(16, t));
    let bits: Vec<u64> = (0..40).map(|_| r.random()).collect();
    let mut vals: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).filter(|x| !x.is_nan()).collect();
    vals.extend([0.0, -0.0, f64::MIN_POSITIVE / 8.0, -5e-324]);
    let m = Matrix::column(vals);
    let mut bytes = Tensor::from_matrix(&m).to_bytes();
    if c.fault == Some(Fault::Io) {
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
    }
    let back: Matrix = Tensor::from_bytes(&bytes, Path::new("<memory>"))?.matrix()?;
    let bad = m
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok(bad as f64)
}
