//! Landmark selection: the `m` representative queries and keys that define
//! the Nyström core block.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T = f64> {
    pub q_bar: Matrix<T>,
    pub k_bar: Matrix<T>,
}

impl<T: Real> LandmarkSet<T> {
    pub fn new(q_bar: Matrix<T>, k_bar: Matrix<T>) -> Result<Self> {
        if q_bar.rows() == 0 || q_bar.shape() != k_bar.shape() {
            return Err(Error::Shape(format!(
                "landmark matrices must share a non-empty shape: {:?} vs {:?}",
                q_bar.shape(),
                k_bar.shape()
            )));
        }
        Ok(Self { q_bar, k_bar })
    }

    pub fn count(&self) -> usize {
        self.q_bar.rows()
    }

    pub fn dim(&self) -> usize {
        self.q_bar.cols()
    }

    pub fn cast<U: Real>(&self) -> LandmarkSet<U> {
        LandmarkSet {
            q_bar: self.q_bar.cast(),
            k_bar: self.k_bar.cast(),
        }
    }
}

/// Landmarks supplied by the caller instead of pooled from the tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum ExplicitLandmarks {
    /// Copy these token rows from Q and K.
    Indices(Vec<usize>),
    /// Use these landmark matrices as-is.
    Matrices(LandmarkSet),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum LandmarkStrategy {
    /// Means over `m` contiguous token segments.
    #[default]
    Pool1d,
    /// Means over rectangular blocks of a `grid_h × grid_w` token layout.
    Pool2d { grid_h: usize, grid_w: usize },
    Explicit(ExplicitLandmarks),
}

/// Strategy name as used on the command line and in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[serde(rename = "pool-1d")]
    Pool1d,
    #[serde(rename = "pool-2d")]
    Pool2d,
    Explicit,
}

impl LandmarkStrategy {
    /// Spatial pooling when a square token grid is known, otherwise 1-D.
    pub fn default_for(n: usize, grid: Option<(usize, usize)>) -> Self {
        match grid {
            Some((h, w)) if h == w && h * w == n => LandmarkStrategy::Pool2d { grid_h: h, grid_w: w },
            _ => LandmarkStrategy::Pool1d,
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            LandmarkStrategy::Pool1d => StrategyKind::Pool1d,
            LandmarkStrategy::Pool2d { .. } => StrategyKind::Pool2d,
            LandmarkStrategy::Explicit(_) => StrategyKind::Explicit,
        }
    }

    /// Landmark count fixed by an explicit strategy, if any.
    pub fn explicit_count(&self) -> Option<usize> {
        match self {
            LandmarkStrategy::Explicit(ExplicitLandmarks::Indices(ix)) => Some(ix.len()),
            LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(s)) => Some(s.count()),
            _ => None,
        }
    }
}

/// `m` contiguous segments covering `0..n`, sizes differing by at most one,
/// larger segments first.
pub fn pool1d_segments(n: usize, m: usize) -> Vec<Range<usize>> {
    let base = n / m;
    let extra = n % m;
    let mut start = 0;
    (0..m)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Block factorization `(mh, mw)` of `m` for a `grid_h × grid_w` layout:
/// both sides must divide evenly; the most square blocks win.
pub fn pool2d_factorization(grid_h: usize, grid_w: usize, m: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for mh in 1..=m {
        if !m.is_multiple_of(mh) {
            continue;
        }
        let mw = m / mh;
        if mh > grid_h || mw > grid_w || !grid_h.is_multiple_of(mh) || !grid_w.is_multiple_of(mw) {
            continue;
        }
        let bh = (grid_h / mh) as f64;
        let bw = (grid_w / mw) as f64;
        let skew = (bh / bw).ln().abs();
        if best.is_none_or(|(_, s)| skew < s - 1e-12) {
            best = Some(((mh, mw), skew));
        }
    }
    best.map(|(f, _)| f)
}

pub fn select_landmarks<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    m: usize,
    strategy: &LandmarkStrategy,
) -> Result<LandmarkSet<T>> {
    let n = q.rows();
    if k.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "q is {:?} but k is {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("landmark count must be at least 1".into()));
    }
    if m > n {
        return Err(Error::InvalidConfig(format!(
            "{m} landmarks requested from {n} tokens"
        )));
    }
    match strategy {
        LandmarkStrategy::Pool1d => {
            let segs = pool1d_segments(n, m);
            LandmarkSet::new(segment_means(q, &segs), segment_means(k, &segs))
        }
        LandmarkStrategy::Pool2d { grid_h, grid_w } => {
            let (gh, gw) = (*grid_h, *grid_w);
            if gh * gw != n {
                return Err(Error::InvalidConfig(format!(
                    "{gh}x{gw} grid does not hold {n} tokens"
                )));
            }
            let (mh, mw) = pool2d_factorization(gh, gw, m).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{m} landmarks do not tile a {gh}x{gw} grid into equal blocks; use pool-1d instead"
                ))
            })?;
            LandmarkSet::new(block_means(q, gh, gw, mh, mw), block_means(k, gh, gw, mh, mw))
        }
        LandmarkStrategy::Explicit(ExplicitLandmarks::Indices(ix)) => {
            if ix.len() != m {
                return Err(Error::InvalidConfig(format!(
                    "{} explicit indices for {m} landmarks",
                    ix.len()
                )));
            }
            LandmarkSet::new(q.select_rows(ix)?, k.select_rows(ix)?)
        }
        LandmarkStrategy::Explicit(ExplicitLandmarks::Matrices(set)) => {
            if set.count() != m {
                return Err(Error::InvalidConfig(format!(
                    "{} explicit landmarks for m = {m}",
                    set.count()
                )));
            }
            if set.dim() != q.cols() {
                return Err(Error::Shape(format!(
                    "landmark dim {} vs token dim {}",
                    set.dim(),
                    q.cols()
                )));
            }
            Ok(set.cast())
        }
    }
}

fn segment_means<T: Real>(x: &Matrix<T>, segs: &[Range<usize>]) -> Matrix<T> {
    let d = x.cols();
    let mut out = Matrix::zeros(segs.len(), d);
    for (s, seg) in segs.iter().enumerate() {
        let row = out.row_mut(s);
        for t in seg.clone() {
            for (a, b) in row.iter_mut().zip(x.row(t)) {
                *a = *a + *b;
            }
        }
        let inv = T::one() / T::from_usize(seg.len()).unwrap();
        row.iter_mut().for_each(|a| *a = *a * inv);
    }
    out
}

fn block_means<T: Real>(x: &Matrix<T>, gh: usize, gw: usize, mh: usize, mw: usize) -> Matrix<T> {
    let (bh, bw) = (gh / mh, gw / mw);
    let d = x.cols();
    let mut out = Matrix::zeros(mh * mw, d);
    let inv = T::one() / T::from_usize(bh * bw).unwrap();
    for br in 0..mh {
        for bc in 0..mw {
            let row = out.row_mut(br * mw + bc);
            for r in br * bh..(br + 1) * bh {
                for c in bc * bw..(bc + 1) * bw {
                    for (a, b) in row.iter_mut().zip(x.row(r * gw + c)) {
                        *a = *a + *b;
                    }
                }
            }
            row.iter_mut().for_each(|a| *a = *a * inv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::gaussian;
    use proptest::prelude::*;

    #[test]
    fn m_equals_n_returns_rows() {
        let q = gaussian(7, 3, 1.0, 1);
        let k = gaussian(7, 3, 1.0, 2);
        let lm = select_landmarks(&q, &k, 7, &LandmarkStrategy::Pool1d).unwrap();
        assert_eq!(lm.q_bar, q);
        assert_eq!(lm.k_bar, k);
    }

    #[test]
    fn uneven_segments_put_larger_first() {
        let segs = pool1d_segments(10, 3);
        assert_eq!(segs, vec![0..4, 4..7, 7..10]);
        let q = gaussian(10, 2, 1.0, 3);
        let lm = select_landmarks(&q, &q, 3, &LandmarkStrategy::Pool1d).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|i| q[(i, c)]).sum::<f64>() / 4.0;
            assert!((lm.q_bar[(0, c)] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn pool2d_uses_8x8_blocks_on_32x32_grid() {
        assert_eq!(pool2d_factorization(32, 32, 16), Some((4, 4)));
        let q = gaussian(1024, 2, 1.0, 4);
        let strat = LandmarkStrategy::Pool2d { grid_h: 32, grid_w: 32 };
        let lm = select_landmarks(&q, &q, 16, &strat).unwrap();
        // landmark 5 = block row 1, block col 1
        for c in 0..2 {
            let mut s = 0.0;
            for r in 8..16 {
                for col in 8..16 {
                    s += q[(r * 32 + col, c)];
                }
            }
            assert!((lm.q_bar[(5, c)] - s / 64.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pool2d_impossible_factorization_suggests_pool1d() {
        let q = gaussian(36, 2, 1.0, 5);
        let strat = LandmarkStrategy::Pool2d { grid_h: 6, grid_w: 6 };
        let err = select_landmarks(&q, &q, 5, &strat).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(ref s) if s.contains("pool-1d")));
        let bad_grid = LandmarkStrategy::Pool2d { grid_h: 5, grid_w: 6 };
        assert!(select_landmarks(&q, &q, 4, &bad_grid).is_err());
    }

    #[test]
    fn too_many_landmarks() {
        let q = gaussian(4, 2, 1.0, 6);
        assert!(matches!(
            select_landmarks(&q, &q, 5, &LandmarkStrategy::Pool1d),
            Err(Error::InvalidConfig(_))
        ));
        assert!(select_landmarks(&q, &q, 0, &LandmarkStrategy::Pool1d).is_err());
    }

    #[test]
    fn explicit_identity_indices_are_bit_exact() {
        let q = gaussian(9, 3, 1.0, 7);
        let k = gaussian(9, 3, 1.0, 8);
        let ix = ExplicitLandmarks::Indices((0..9).collect());
        let lm = select_landmarks(&q, &k, 9, &LandmarkStrategy::Explicit(ix)).unwrap();
        assert_eq!(lm.q_bar.as_slice(), q.as_slice());
        assert_eq!(lm.k_bar.as_slice(), k.as_slice());
    }

    #[test]
    fn explicit_count_must_match() {
        let q = gaussian(9, 3, 1.0, 7);
        let ix = ExplicitLandmarks::Indices(vec![0, 1]);
        assert!(select_landmarks(&q, &q, 3, &LandmarkStrategy::Explicit(ix)).is_err());
    }

    #[test]
    fn default_strategy() {
        assert_eq!(
            LandmarkStrategy::default_for(1024, Some((32, 32))),
            LandmarkStrategy::Pool2d { grid_h: 32, grid_w: 32 }
        );
        assert_eq!(LandmarkStrategy::default_for(1024, None), LandmarkStrategy::Pool1d);
        assert_eq!(LandmarkStrategy::default_for(8, Some((2, 4))), LandmarkStrategy::Pool1d);
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let row = [0.1, -2.5, 3.75];
        let q = Matrix::from_rows(&vec![row; 11]).unwrap();
        let lm = select_landmarks(&q, &q, 4, &LandmarkStrategy::Pool1d).unwrap();
        for r in lm.q_bar.row_iter() {
            assert_eq!(r, &row);
        }
    }

    proptest! {
        #[test]
        fn weighted_landmark_mean_is_token_mean(seed in 0u64..5_000, n in 1usize..60, m_frac in 0.0f64..1.0) {
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let q = gaussian(n, 3, 1.0, seed);
            let lm = select_landmarks(&q, &q, m, &LandmarkStrategy::Pool1d).unwrap();
            let segs = pool1d_segments(n, m);
            prop_assert!(segs.iter().all(|s| s.len() == n / m || s.len() == n.div_ceil(m)));
            let col_mean = q.column_means();
            for c in 0..3 {
                let weighted: f64 = segs.iter().enumerate().map(|(s, r)| lm.q_bar[(s, c)] * r.len() as f64).sum::<f64>() / n as f64;
                prop_assert!((weighted - col_mean[c]).abs() <= 1e-12);
            }
        }
    }
}
