//! Nyström-approximated softmax attention: kernel blocks, the explicit
//! reconstruction used for diagnostics, and the linear-cost fast path.

use serde::{Deserialize, Serialize};

use crate::attention::{exp_kernel, AttentionInputs, MhsaConfig};
use crate::error::{Error, Result};
use crate::landmarks::{select_landmarks, ExplicitLandmarks, LandmarkSet, LandmarkStrategy};
use crate::linalg::{matmul, matmul_transb, matvec, Matrix, Real};
use crate::pinv::{iterative_pinv, PinvConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct NystraConfig {
    /// Landmark count. Ignored for explicit landmarks, whose count is fixed.
    pub m: usize,
    pub pinv: PinvConfig,
    pub strategy: LandmarkStrategy,
    pub stabilize: bool,
}

impl Default for NystraConfig {
    fn default() -> Self {
        Self {
            m: 16,
            pinv: PinvConfig::default(),
            strategy: LandmarkStrategy::Pool1d,
            stabilize: true,
        }
    }
}

impl NystraConfig {
    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.pinv.iterations = iterations;
        self
    }

    pub fn with_pinv(mut self, pinv: PinvConfig) -> Self {
        self.pinv = pinv;
        self
    }

    pub fn with_strategy(mut self, strategy: LandmarkStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_stabilize(mut self, stabilize: bool) -> Self {
        self.stabilize = stabilize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 && self.strategy.explicit_count().is_none() {
            return Err(Error::InvalidConfig("landmark count must be at least 1".into()));
        }
        self.pinv.validate()
    }

    /// Landmark count for `n` tokens; requests above `n` are clamped.
    pub fn effective_m(&self, n: usize) -> usize {
        if let Some(c) = self.strategy.explicit_count() {
            return c;
        }
        if self.m > n {
            log::warn!("m = {} exceeds N = {n}; clamping to {n}", self.m);
            n
        } else {
            self.m
        }
    }
}

/// Exponential kernel blocks around the landmarks: `g_a` is `m×m`
/// (landmark queries vs landmark keys), `g_l` is `N×m`, `g_u` is `m×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBlocks<T = f64> {
    pub g_a: Matrix<T>,
    pub g_l: Matrix<T>,
    pub g_u: Matrix<T>,
}

impl<T: Real> KernelBlocks<T> {
    pub fn landmarks(&self) -> usize {
        self.g_a.rows()
    }

    pub fn tokens(&self) -> usize {
        self.g_l.rows()
    }
}

/// Row-max log-scores removed from the blocks on the stabilized path.
/// `m_l[i]` belongs to query `i`; `m_u[r]` to landmark query `r` and is
/// taken over both the token keys and the landmark keys.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilizerScales<T = f64> {
    pub m_l: Vec<T>,
    pub m_u: Vec<T>,
}

pub fn resolve_landmarks<T: Real>(inp: &AttentionInputs<T>, cfg: &NystraConfig) -> Result<LandmarkSet<T>> {
    cfg.validate()?;
    let m = cfg.effective_m(inp.tokens());
    select_landmarks(&inp.q, &inp.k, m, &cfg.strategy)
}

fn scaled_logits<T: Real>(a: &Matrix<T>, b: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    let mut l = matmul_transb(a, b)?;
    l.map_inplace(|x| x * scale);
    Ok(l)
}

fn row_max<T: Real>(m: &Matrix<T>) -> Vec<T> {
    m.row_iter()
        .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}

fn exp_shifted<T: Real>(mut l: Matrix<T>, shift: &[T]) -> Matrix<T> {
    for (i, &s) in shift.iter().enumerate() {
        l.row_mut(i).iter_mut().for_each(|x| *x = (*x - s).exp());
    }
    l
}

pub fn build_kernel_blocks<T: Real>(
    inp: &AttentionInputs<T>,
    lm: &LandmarkSet<T>,
    stabilize: bool,
) -> Result<(KernelBlocks<T>, Option<StabilizerScales<T>>)> {
    if lm.dim() != inp.dim() {
        return Err(Error::shape(format!(
            "landmark dim {} does not match token dim {}",
            lm.dim(),
            inp.dim()
        )));
    }
    let s = inp.logit_scale();
    if !stabilize {
        let blocks = KernelBlocks {
            g_a: exp_kernel(&lm.q_bar, &lm.k_bar, s)?,
            g_l: exp_kernel(&inp.q, &lm.k_bar, s)?,
            g_u: exp_kernel(&lm.q_bar, &inp.k, s)?,
        };
        return Ok((blocks, None));
    }
    let l_l = scaled_logits(&inp.q, &lm.k_bar, s)?;
    let l_u = scaled_logits(&lm.q_bar, &inp.k, s)?;
    let l_a = scaled_logits(&lm.q_bar, &lm.k_bar, s)?;
    let m_l = row_max(&l_l);
    let m_u: Vec<T> = row_max(&l_u)
        .into_iter()
        .zip(row_max(&l_a))
        .map(|(a, b)| a.max(b))
        .collect();
    if m_l.iter().chain(&m_u).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits on the stabilized path".into()));
    }
    let blocks = KernelBlocks {
        g_a: exp_shifted(l_a, &m_u),
        g_l: exp_shifted(l_l, &m_l),
        g_u: exp_shifted(l_u, &m_u),
    };
    Ok((blocks, Some(StabilizerScales { m_l, m_u })))
}

/// Explicit `N×N` reconstruction `G_L · G_A† · G_U`. Diagnostic only.
pub fn approx_kernel<T: Real>(blocks: &KernelBlocks<T>, pinv: &PinvConfig) -> Result<Matrix<T>> {
    let z = iterative_pinv(&blocks.g_a, pinv)?;
    let p = matmul(&blocks.g_l, &z)?;
    matmul(&p, &blocks.g_u)
}

/// `num ⊘ den` row by row, rejecting denominators below the dtype floor.
pub(crate) fn normalize_rows<T: Real>(mut num: Matrix<T>, den: &[T]) -> Result<Matrix<T>> {
    let floor = T::degenerate_floor();
    for (i, &d) in den.iter().enumerate() {
        if d.is_nan() || d.abs() < floor {
            return Err(Error::DegenerateNormalization {
                row: i,
                value: d.to_f64_lossless(),
            });
        }
        let inv = T::one() / d;
        num.row_mut(i).iter_mut().for_each(|x| *x = *x * inv);
    }
    if !num.is_finite() {
        return Err(Error::Numerical("non-finite approximate attention output".into()));
    }
    Ok(num)
}

/// Approximate attention output without forming any `N×N` matrix.
pub fn pnp_nystra<T: Real>(inp: &AttentionInputs<T>, cfg: &NystraConfig) -> Result<Matrix<T>> {
    if !inp.is_finite() {
        return Err(Error::InvalidInput("attention inputs contain non-finite values".into()));
    }
    let lm = resolve_landmarks(inp, cfg)?;
    pnp_nystra_with_landmarks(inp, &lm, &cfg.pinv, cfg.stabilize)
}

pub fn pnp_nystra_with_landmarks<T: Real>(
    inp: &AttentionInputs<T>,
    lm: &LandmarkSet<T>,
    pinv: &PinvConfig,
    stabilize: bool,
) -> Result<Matrix<T>> {
    let (blocks, _) = build_kernel_blocks(inp, lm, stabilize)?;
    let z = iterative_pinv(&blocks.g_a, pinv)?;
    let p = matmul(&blocks.g_l, &z)?;
    drop(blocks.g_l);
    let guv = matmul(&blocks.g_u, &inp.v)?;
    let gu1 = blocks.g_u.row_sums();
    drop(blocks.g_u);
    let o_n = matmul(&p, &guv)?;
    let o_d = matvec(&p, &gu1)?;
    normalize_rows(o_n, &o_d)
}

/// Independent windows or heads, spread over scoped threads.
pub fn pnp_nystra_batch<T: Real>(items: &[AttentionInputs<T>], cfg: &NystraConfig) -> Result<Vec<Matrix<T>>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(|inp| pnp_nystra(inp, cfg)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|inp| pnp_nystra(inp, cfg)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("batch worker panicked"))
            .collect()
    })
}

/// Per-head approximate attention concatenated along the feature axis.
pub fn mhsa_nystra<T: Real>(
    heads: &[AttentionInputs<T>],
    mhsa: &MhsaConfig,
    cfg: &NystraConfig,
) -> Result<Matrix<T>> {
    if heads.len() != mhsa.heads {
        return Err(Error::shape(format!(
            "expected {} heads, got {}",
            mhsa.heads,
            heads.len()
        )));
    }
    if let Some(h) = heads.iter().position(|h| h.dim() != mhsa.head_dim) {
        return Err(Error::shape(format!(
            "head {h} has query dim {}, expected {}",
            heads[h].dim(),
            mhsa.head_dim
        )));
    }
    let outs = pnp_nystra_batch(heads, cfg)?;
    let refs: Vec<&Matrix<T>> = outs.iter().collect();
    Matrix::hstack(&refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub logit_scale: f64,
    pub stabilized_finite: bool,
    pub unstabilized_finite: bool,
    /// Present only when both paths produced finite output.
    pub max_abs_diff: Option<f64>,
    pub stabilized_error: Option<String>,
    pub unstabilized_error: Option<String>,
}

/// Runs both paths on inputs whose queries are multiplied by `logit_scale`.
pub fn stabilization_witness<T: Real>(
    inp: &AttentionInputs<T>,
    cfg: &NystraConfig,
    logit_scale: f64,
) -> WitnessReport {
    let factor = T::lit(logit_scale);
    let scaled = inp.with_query_scale(factor);
    let mut cfg = cfg.clone();
    if let LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(set)) = &mut cfg.strategy {
        set.q_bar = set.q_bar.scale(logit_scale);
    }
    let run = |stabilize: bool| -> (Option<Matrix<T>>, Option<String>) {
        match pnp_nystra(&scaled, &cfg.clone().with_stabilize(stabilize)) {
            Ok(o) if o.is_finite() => (Some(o), None),
            Ok(_) => (None, Some("non-finite output".into())),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let (stab, stab_err) = run(true);
    let (unstab, unstab_err) = run(false);
    let max_abs_diff = match (&stab, &unstab) {
        (Some(a), Some(b)) => a.max_abs_diff(b).ok().map(|d| d.to_f64_lossless()),
        _ => None,
    };
    WitnessReport {
        logit_scale,
        stabilized_finite: stab.is_some(),
        unstabilized_finite: unstab.is_some(),
        max_abs_diff,
        stabilized_error: stab_err,
        unstabilized_error: unstab_err,
    }
}
