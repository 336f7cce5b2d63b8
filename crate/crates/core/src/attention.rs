//! Exact softmax self-attention, used as the reference for every
//! approximation in the crate.

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_transb, row_softmax_inplace, Matrix, Real};

/// Post-projection queries, keys and values for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs<T = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> AttentionInputs<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let n = q.rows();
        if n == 0 {
            return Err(Error::Shape("attention needs at least one token".into()));
        }
        if k.rows() != n || v.rows() != n {
            return Err(Error::Shape(format!(
                "token counts differ: q has {n}, k has {}, v has {}",
                k.rows(),
                v.rows()
            )));
        }
        if q.cols() == 0 || q.cols() != k.cols() {
            return Err(Error::Shape(format!(
                "query/key dims differ or are empty: {} vs {}",
                q.cols(),
                k.cols()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    /// `1/√d`
    pub fn logit_scale(&self) -> T {
        T::one() / T::from_usize(self.dim()).unwrap().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.k.is_finite() && self.v.is_finite()
    }

    pub fn cast<U: Real>(&self) -> AttentionInputs<U> {
        AttentionInputs {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
        }
    }

    /// Copy with the queries multiplied by `factor`.
    pub fn with_query_scale(&self, factor: T) -> Self {
        Self {
            q: self.q.scale(factor),
            k: self.k.clone(),
            v: self.v.clone(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput("attention inputs contain non-finite values".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl MhsaConfig {
    pub fn new(heads: usize, head_dim: usize) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::InvalidConfig(
                "heads and head_dim must be at least 1".into(),
            ));
        }
        Ok(Self { heads, head_dim })
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Scaled logits `QKᵀ/√d`, materialized.
pub fn attention_logits<T: Real>(inp: &AttentionInputs<T>) -> Result<Matrix<T>> {
    let mut a = matmul_transb(&inp.q, &inp.k)?;
    let s = inp.logit_scale();
    a.map_inplace(|x| x * s);
    Ok(a)
}

/// `O = softmax(QKᵀ/√d) · V`, row-max stabilized.
pub fn attention_softmax<T: Real>(inp: &AttentionInputs<T>) -> Result<Matrix<T>> {
    inp.check_finite()?;
    let mut s = attention_logits(inp)?;
    row_softmax_inplace(&mut s)?;
    matmul(&s, &inp.v)
}

/// Row-normalized attention map `S = softmax(QKᵀ/√d)`.
pub fn attention_map<T: Real>(inp: &AttentionInputs<T>) -> Result<Matrix<T>> {
    inp.check_finite()?;
    let mut s = attention_logits(inp)?;
    row_softmax_inplace(&mut s)?;
    Ok(s)
}

/// Kernel form `O = (GV) ⊘ (G·1)` with `G = exp(QKᵀ/√d)` and no
/// stabilization; overflowing logits are reported rather than masked.
pub fn attention_kernel<T: Real>(inp: &AttentionInputs<T>) -> Result<Matrix<T>> {
    inp.check_finite()?;
    let g = exp_kernel(&inp.q, &inp.k, inp.logit_scale())?;
    attention_from_kernel(&g, &inp.v)
}

/// `exp(a·bᵀ·scale)` entry by entry; errors if any entry overflows.
pub fn exp_kernel<T: Real>(a: &Matrix<T>, b: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "kernel operands have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut g = Matrix::try_zeros(a.rows(), b.rows())?;
    let mut max_logit = f64::NEG_INFINITY;
    let mut overflow = false;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for (gij, bj) in g.row_mut(i).iter_mut().zip(b.row_iter()) {
            let logit = dot(ai, bj) * scale;
            *gij = logit.exp();
            if !gij.is_finite() {
                overflow = true;
            }
            max_logit = max_logit.max(logit.to_f64_lossless());
        }
    }
    if overflow {
        return Err(Error::NonFinite { max_logit });
    }
    Ok(g)
}

/// `(GV) ⊘ (G·1)` for an arbitrary (possibly approximate) kernel `G`.
pub fn attention_from_kernel<T: Real>(g: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = matmul(g, v)?;
    let denom = g.row_sums();
    for (i, &d) in denom.iter().enumerate() {
        if !d.is_finite() {
            return Err(Error::NonFinite {
                max_logit: f64::INFINITY,
            });
        }
        let inv = T::one() / d;
        out.row_mut(i).iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok(out)
}

/// Per-head exact attention concatenated along the feature axis. The output
/// projection is not applied.
pub fn mhsa_exact<T: Real>(heads: &[AttentionInputs<T>], cfg: &MhsaConfig) -> Result<Matrix<T>> {
    if heads.len() != cfg.heads {
        return Err(Error::Shape(format!(
            "expected {} heads, got {}",
            cfg.heads,
            heads.len()
        )));
    }
    let n = heads[0].tokens();
    for (h, inp) in heads.iter().enumerate() {
        if inp.tokens() != n {
            return Err(Error::Shape(format!(
                "head {h} has {} tokens, head 0 has {n}",
                inp.tokens()
            )));
        }
        if inp.dim() != cfg.head_dim {
            return Err(Error::Shape(format!(
                "head {h} has query dim {}, expected {}",
                inp.dim(),
                cfg.head_dim
            )));
        }
    }
    let outs = heads
        .iter()
        .map(attention_softmax)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix<T>> = outs.iter().collect();
    Matrix::hstack(&refs)
}

fn check_window_dims(height: usize, width: usize, window: usize) -> Result<()> {
    if window == 0 || height == 0 || width == 0 {
        return Err(Error::Shape("window and grid sizes must be positive".into()));
    }
    if !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(Error::Shape(format!(
            "{height}x{width} grid is not divisible into {window}x{window} windows"
        )));
    }
    Ok(())
}

/// Split a `height·width × c` token grid (row-major) into non-overlapping
/// `window × window` blocks. Windows are ordered row-major over the window
/// grid and tokens row-major inside each window.
pub fn window_partition<T: Real>(
    tokens: &Matrix<T>,
    height: usize,
    width: usize,
    window: usize,
) -> Result<Vec<Matrix<T>>> {
    check_window_dims(height, width, window)?;
    if tokens.rows() != height * width {
        return Err(Error::Shape(format!(
            "{} tokens do not form a {height}x{width} grid",
            tokens.rows()
        )));
    }
    let c = tokens.cols();
    let mut out = Vec::with_capacity((height / window) * (width / window));
    for wr in 0..height / window {
        for wc in 0..width / window {
            let mut data = Vec::with_capacity(window * window * c);
            for r in 0..window {
                for col in 0..window {
                    let t = (wr * window + r) * width + wc * window + col;
                    data.extend_from_slice(tokens.row(t));
                }
            }
            out.push(Matrix::from_vec(window * window, c, data)?);
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Real>(
    windows: &[Matrix<T>],
    height: usize,
    width: usize,
    window: usize,
) -> Result<Matrix<T>> {
    check_window_dims(height, width, window)?;
    let per_row = width / window;
    if windows.len() != (height / window) * per_row {
        return Err(Error::Shape(format!(
            "{} windows cannot tile a {height}x{width} grid",
            windows.len()
        )));
    }
    let c = windows.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(height * width, c);
    for (w, m) in windows.iter().enumerate() {
        if m.shape() != (window * window, c) {
            return Err(Error::Shape(format!("window {w} has shape {:?}", m.shape())));
        }
        let (wr, wc) = (w / per_row, w % per_row);
        for r in 0..window {
            for col in 0..window {
                let t = (wr * window + r) * width + wc * window + col;
                out.row_mut(t).copy_from_slice(m.row(r * window + col));
            }
        }
    }
    Ok(out)
}
