use crate::error::{Error, Result};

use super::{Matrix, Real};

const LANES: usize = 8;

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `a · b`
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::try_zeros(a.rows(), b.cols())?;
    for i in 0..a.rows() {
        let out_row = out.row_mut(i);
        for (k, &aik) in a.row(i).iter().enumerate() {
            axpy(out_row, aik, b.row(k));
        }
    }
    Ok(out)
}

/// `a · bᵀ`, reading both operands row-wise.
pub fn matmul_transb<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul_transb {}x{} by ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::try_zeros(a.rows(), b.rows())?;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for (o, bj) in out.row_mut(i).iter_mut().zip(b.row_iter()) {
            *o = dot(ai, bj);
        }
    }
    Ok(out)
}

/// `a · x` for a plain vector `x`.
pub fn matvec<T: Real>(a: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    if a.cols() != x.len() {
        return Err(Error::Shape(format!(
            "matvec {}x{} by vector of length {}",
            a.rows(),
            a.cols(),
            x.len()
        )));
    }
    Ok(a.row_iter().map(|r| dot(r, x)).collect())
}

/// Numerically stable softmax of every row (max subtracted before `exp`).
pub fn row_softmax<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = a.clone();
    row_softmax_inplace(&mut out)?;
    Ok(out)
}

pub fn row_softmax_inplace<T: Real>(a: &mut Matrix<T>) -> Result<()> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(
            "row_softmax requires finite input".into(),
        ));
    }
    let cols = a.cols();
    if cols == 0 {
        return Ok(());
    }
    for row in a.as_mut_slice().chunks_exact_mut(cols) {
        softmax_slice(row);
    }
    Ok(())
}

#[inline]
pub(crate) fn softmax_slice<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dd_exp_sum_softmax, random_matrix};
    use proptest::prelude::*;

    #[test]
    fn identity_times_m_is_m() {
        let m = random_matrix(2, 3, 1);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().to_rows(), vec![vec![3.0], vec![7.0]]);
    }

    #[test]
    fn matches_triple_loop() {
        let a = random_matrix(7, 5, 2);
        let b = random_matrix(5, 3, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a[(i, k)] * b[(k, j)];
                }
                assert!((c[(i, j)] - s).abs() <= 1e-12);
            }
        }
        let ct = matmul_transb(&a, &b.transpose()).unwrap();
        assert!(c.max_abs_diff(&ct).unwrap() <= 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = random_matrix(2, 3, 1);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        assert!(matches!(matvec(&a, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn dot_handles_remainders() {
        for n in [0usize, 1, 7, 8, 9, 17] {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let expect: f64 = a.iter().map(|x| x * x).sum();
            assert_eq!(dot(&a, &a), expect);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0f64, 0.0, 0.0]]).unwrap()).unwrap();
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = row_softmax(&Matrix::from_rows(&[[1000.0f64, 1000.0]]).unwrap()).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_extended_precision_loop() {
        let a = random_matrix(4, 4, 9).scale(3.0);
        let s = row_softmax(&a).unwrap();
        for i in 0..4 {
            let oracle = dd_exp_sum_softmax(a.row(i));
            for j in 0..4 {
                assert!((s[(i, j)] - oracle[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let a = Matrix::from_rows(&[[0.0f64, f64::NAN]]).unwrap();
        assert!(matches!(row_softmax(&a), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            seed in 0u64..10_000,
            shift in -50.0f64..50.0,
            row in 0usize..5,
        ) {
            let a = random_matrix(5, 6, seed).scale(4.0);
            let s = row_softmax(&a).unwrap();
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
            let mut shifted = a.clone();
            for v in shifted.row_mut(row) {
                *v += shift;
            }
            let s2 = row_softmax(&shifted).unwrap();
            prop_assert!(s.max_abs_diff(&s2).unwrap() <= 1e-12);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..10_000) {
            let a = random_matrix(4, 5, seed);
            let b = random_matrix(5, 3, seed + 1);
            let c = random_matrix(3, 6, seed + 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.rel_frobenius_error(&right).unwrap() <= 1e-10);
        }
    }
}
