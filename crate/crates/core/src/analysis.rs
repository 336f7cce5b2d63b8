//! Spectral diagnostics for the Nyström kernel approximation.
//!
//! Kernel quantities are reported for `exp(A − log_shift)`, where
//! `log_shift` is zero unless the largest logit would overflow `exp`.
//! Ratios are unaffected by the shift.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, attention_softmax, AttentionInputs};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::linalg::{effective_rank, matmul_transb, singular_values, spectral_norm, Matrix};
use crate::nystrom::{approx_kernel, build_kernel_blocks, normalize_rows, pnp_nystra, resolve_landmarks, NystraConfig};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;
pub const SPECTRUM_MAX_TOKENS: usize = 8192;
pub const REPORT_MAX_TOKENS: usize = 4096;
const SHIFT_THRESHOLD: f64 = 700.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub n: usize,
    pub m: usize,
    pub sigma_gtilde: Vec<f64>,
    pub sigma_ga: Vec<f64>,
    pub effective_rank: usize,
    pub tau: f64,
    /// `σ₂₁/σ₁` of the extended kernel; absent with fewer than 21 values.
    pub decay_ratio: Option<f64>,
    pub log_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub n: usize,
    pub m: usize,
    pub sigma1_gtilde: f64,
    pub sigma_m_ga: f64,
    pub sigma_m_plus_1_gtilde: f64,
    pub rank_gtilde: usize,
    /// `‖G − Ĝ‖₂`
    pub spectral_error: f64,
    /// `‖G‖₂`
    pub kernel_norm: f64,
    /// `σ_{m+1}(G̃)/σ_m(G_A)`; absent when `σ_m(G_A)` counts as zero.
    pub bound_ratio: Option<f64>,
    /// `spectral_error / bound_ratio`; absent when the ratio is zero or absent.
    pub empirical_c: Option<f64>,
    pub output_rel_error: f64,
    pub induced_map_error: f64,
    pub log_shift: f64,
}

impl ApproxReport {
    pub fn relative_spectral_error(&self) -> f64 {
        self.spectral_error / self.kernel_norm
    }
}

/// Extended kernel `[[G_A, G_U], [G_L, G]]` over `[Q̄; Q] × [K̄; K]`,
/// divided by `exp(shift)`.
pub fn extended_kernel(inp: &AttentionInputs, lm: &LandmarkSet) -> Result<(Matrix, f64)> {
    if lm.dim() != inp.dim() {
        return Err(Error::Shape(format!(
            "landmark dim {} does not match token dim {}",
            lm.dim(),
            inp.dim()
        )));
    }
    let rows = Matrix::vstack(&[&lm.q_bar, &inp.q])?;
    let cols = Matrix::vstack(&[&lm.k_bar, &inp.k])?;
    let mut l = matmul_transb(&rows, &cols)?;
    l.map_inplace(|x| x * inp.logit_scale());
    if !l.is_finite() {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let top = l.max();
    let shift = if top > SHIFT_THRESHOLD { top } else { 0.0 };
    l.map_inplace(|x| (x - shift).exp());
    Ok((l, shift))
}

fn zero_below(sigmas: &[f64], k: usize) -> f64 {
    match sigmas.get(k) {
        Some(&s) if s >= RANK_TOLERANCE * sigmas[0] => s,
        _ => 0.0,
    }
}

pub fn spectrum(inp: &AttentionInputs, lm: &LandmarkSet, top_k: usize) -> Result<SpectrumReport> {
    let n = inp.tokens();
    if n > SPECTRUM_MAX_TOKENS {
        return Err(Error::TooLarge(format!(
            "spectrum of {n} tokens exceeds the dense limit of {SPECTRUM_MAX_TOKENS}; subsample the tokens"
        )));
    }
    let m = lm.count();
    let (gt, log_shift) = extended_kernel(inp, lm)?;
    let sg = singular_values(&gt)?;
    let sa = singular_values(&gt.slice_rows(0, m).slice_cols(0, m))?;
    Ok(SpectrumReport {
        n,
        m,
        effective_rank: effective_rank(&sg, RANK_TOLERANCE),
        tau: RANK_TOLERANCE,
        decay_ratio: sg.get(20).filter(|_| sg[0] > 0.0).map(|s| s / sg[0]),
        sigma_gtilde: sg.into_iter().take(top_k).collect(),
        sigma_ga: sa.into_iter().take(top_k).collect(),
        log_shift,
    })
}

/// Spectra averaged element-wise over several inputs, e.g. all windows or
/// heads of one layer.
pub fn mean_spectrum(reports: &[SpectrumReport]) -> Result<SpectrumReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("no spectra to average".into()))?;
    let avg = |pick: fn(&SpectrumReport) -> &Vec<f64>| -> Vec<f64> {
        let len = reports.iter().map(|r| pick(r).len()).min().unwrap_or(0);
        (0..len)
            .map(|i| reports.iter().map(|r| pick(r)[i]).sum::<f64>() / reports.len() as f64)
            .collect()
    };
    let sg = avg(|r| &r.sigma_gtilde);
    Ok(SpectrumReport {
        n: first.n,
        m: first.m,
        effective_rank: effective_rank(&sg, RANK_TOLERANCE),
        tau: RANK_TOLERANCE,
        decay_ratio: sg.get(20).filter(|_| sg[0] > 0.0).map(|s| s / sg[0]),
        sigma_ga: avg(|r| &r.sigma_ga),
        sigma_gtilde: sg,
        log_shift: reports.iter().map(|r| r.log_shift).fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Shifted explicit reconstruction `Ĝ·exp(−shift)` under `cfg`.
fn reconstruct(inp: &AttentionInputs, lm: &LandmarkSet, cfg: &NystraConfig, shift: f64) -> Result<Matrix> {
    let (blocks, scales) = build_kernel_blocks(inp, lm, cfg.stabilize)?;
    let mut g_hat = approx_kernel(&blocks, &cfg.pinv)?;
    match scales {
        Some(sc) => {
            for (i, ml) in sc.m_l.iter().enumerate() {
                let f = (ml - shift).exp();
                g_hat.row_mut(i).iter_mut().for_each(|x| *x *= f);
            }
        }
        None if shift != 0.0 => {
            let f = (-shift).exp();
            g_hat.map_inplace(|x| x * f);
        }
        None => {}
    }
    Ok(g_hat)
}

pub fn approx_report(inp: &AttentionInputs, cfg: &NystraConfig) -> Result<ApproxReport> {
    let n = inp.tokens();
    if n > REPORT_MAX_TOKENS {
        return Err(Error::TooLarge(format!(
            "approximation report materializes {n}x{n} kernels; limit is {REPORT_MAX_TOKENS} tokens"
        )));
    }
    let lm = resolve_landmarks(inp, cfg)?;
    let m = lm.count();
    let (gt, log_shift) = extended_kernel(inp, &lm)?;
    let sg = singular_values(&gt)?;
    let sa = singular_values(&gt.slice_rows(0, m).slice_cols(0, m))?;
    let g = gt.slice_rows(m, m + n).slice_cols(m, m + n);
    drop(gt);
    let g_hat = reconstruct(inp, &lm, cfg, log_shift)?;
    let spectral_error = spectral_norm(&g.sub(&g_hat)?)?;
    let kernel_norm = spectral_norm(&g)?;

    let sigma_m_ga = zero_below(&sa, m - 1);
    let sigma_m_plus_1_gtilde = zero_below(&sg, m);
    let bound_ratio = (sigma_m_ga > 0.0).then(|| sigma_m_plus_1_gtilde / sigma_m_ga);
    let empirical_c = bound_ratio.filter(|&b| b > 0.0).map(|b| spectral_error / b);

    let s_hat = normalize_rows(g_hat.clone(), &g_hat.row_sums())?;
    let s = attention_map(inp)?;
    let induced_map_error = s_hat.rel_frobenius_error(&s)?;

    Ok(ApproxReport {
        n,
        m,
        sigma1_gtilde: sg[0],
        sigma_m_ga,
        sigma_m_plus_1_gtilde,
        rank_gtilde: effective_rank(&sg, RANK_TOLERANCE),
        spectral_error,
        kernel_norm,
        bound_ratio,
        empirical_c,
        output_rel_error: output_rel_error(inp, cfg)?,
        induced_map_error,
        log_shift,
    })
}

/// `‖O − Ô‖_F / ‖O‖_F` against exact softmax attention.
pub fn output_rel_error(inp: &AttentionInputs, cfg: &NystraConfig) -> Result<f64> {
    let exact = attention_softmax(inp)?;
    let approx = pnp_nystra(inp, cfg)?;
    approx.rel_frobenius_error(&exact)
}

/// Exact map `S` and the induced map `Ŝ = Ĝ ⊘ (Ĝ·1)`.
pub fn induced_attention_map(inp: &AttentionInputs, cfg: &NystraConfig) -> Result<(Matrix, Matrix)> {
    let n = inp.tokens();
    if n > REPORT_MAX_TOKENS {
        return Err(Error::TooLarge(format!(
            "attention maps of {n} tokens exceed the limit of {REPORT_MAX_TOKENS}"
        )));
    }
    let lm = resolve_landmarks(inp, cfg)?;
    let (blocks, _) = build_kernel_blocks(inp, &lm, cfg.stabilize)?;
    let g_hat = approx_kernel(&blocks, &cfg.pinv)?;
    let sums = g_hat.row_sums();
    Ok((attention_map(inp)?, normalize_rows(g_hat, &sums)?))
}
