//! Golub–Kahan–Reinsch singular value decomposition for dense `f64`
//! matrices: Householder bidiagonalization followed by implicitly shifted QR
//! sweeps on the bidiagonal. Deterministic for identical input bits.

use crate::error::{Error, Result};

use super::ops::matvec;
use super::Matrix;

const MAX_SWEEPS: usize = 75;

/// Thin SVD `a = u · diag(singular_values) · vᵀ`, values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in us.row_mut(i).iter_mut().zip(&self.singular_values).take(k) {
                *j *= *s;
            }
        }
        super::ops::matmul_transb(&us, &self.v).expect("consistent factors")
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    check_finite(a)?;
    if a.rows() >= a.cols() {
        let (w, u, v) = decompose(a, true)?;
        Ok(Svd {
            u: u.expect("vectors requested"),
            singular_values: w,
            v: v.expect("vectors requested"),
        })
    } else {
        let (w, u, v) = decompose(&a.transpose(), true)?;
        Ok(Svd {
            u: v.expect("vectors requested"),
            singular_values: w,
            v: u.expect("vectors requested"),
        })
    }
}

/// Singular values only, descending; length `min(rows, cols)`.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    check_finite(a)?;
    let (w, _, _) = if a.rows() >= a.cols() {
        decompose(a, false)?
    } else {
        decompose(&a.transpose(), false)?
    };
    Ok(w)
}

/// Moore–Penrose pseudoinverse via SVD. Singular values below
/// `rel_cutoff · σ₁` are treated as zero.
pub fn pinv_svd(a: &Matrix, rel_cutoff: f64) -> Result<Matrix> {
    if !(rel_cutoff > 0.0 && rel_cutoff < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "rel_cutoff must lie in (0, 1), got {rel_cutoff}"
        )));
    }
    let f = svd(a)?;
    let sigma1 = f.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rel_cutoff * sigma1;
    // A⁺ = V · diag(1/σ) · Uᵀ over the retained part
    let mut vs = f.v.clone();
    for i in 0..vs.rows() {
        for (x, &s) in vs.row_mut(i).iter_mut().zip(&f.singular_values) {
            *x = if s > cutoff && s > 0.0 { *x / s } else { 0.0 };
        }
    }
    super::ops::matmul_transb(&vs, &f.u)
}

pub const DEFAULT_PINV_CUTOFF: f64 = 1e-12;

/// Number of singular values at or above `rel · σ₁`.
pub fn effective_rank(sigmas: &[f64], rel: f64) -> usize {
    let Some(&s1) = sigmas.first() else {
        return 0;
    };
    if s1 == 0.0 {
        return 0;
    }
    sigmas.iter().filter(|&&s| s >= rel * s1).count()
}

/// Largest singular value. Exact SVD for small matrices, power iteration on
/// `aᵀa` otherwise.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    check_finite(a)?;
    if a.rows().min(a.cols()) <= 160 {
        return Ok(singular_values(a)?.first().copied().unwrap_or(0.0));
    }
    let at = a.transpose();
    let n = a.cols();
    let mut x: Vec<f64> = (0..n).map(|j| 1.0 + 0.5 * ((j as f64) * 0.7).sin()).collect();
    normalize(&mut x);
    let mut sigma = 0.0f64;
    let mut stable = 0;
    for _ in 0..5000 {
        let y = matvec(a, &x)?;
        let next_sigma = norm2(&y);
        if next_sigma == 0.0 {
            return Ok(0.0);
        }
        let mut z = matvec(&at, &y)?;
        normalize(&mut z);
        x = z;
        if (next_sigma - sigma).abs() <= 1e-14 * next_sigma {
            stable += 1;
            if stable >= 3 {
                return Ok(next_sigma);
            }
        } else {
            stable = 0;
        }
        sigma = next_sigma;
    }
    Ok(sigma)
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) {
    let n = norm2(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

fn check_finite(a: &Matrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("SVD input contains non-finite entries".into()))
    }
}

type Decomposition = (Vec<f64>, Option<Matrix>, Option<Matrix>);

/// `a` is m×n with m ≥ n.
fn decompose(a: &Matrix, want_vectors: bool) -> Result<Decomposition> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    if n == 0 {
        return Ok((
            Vec::new(),
            want_vectors.then(|| Matrix::zeros(m, 0)),
            want_vectors.then(|| Matrix::zeros(0, 0)),
        ));
    }
    let mut u = a.as_slice().to_vec();
    let mut w = vec![0.0; n];
    let mut rv1 = vec![0.0; n];
    let mut v = if want_vectors { vec![0.0; n * n] } else { Vec::new() };
    let mut acc = vec![0.0; n];

    // Householder reduction to upper bidiagonal form.
    let mut g = 0.0f64;
    let mut scale = 0.0f64;
    let mut anorm = 0.0f64;
    for i in 0..n {
        let l = i + 1;
        rv1[i] = scale * g;
        g = 0.0;
        scale = 0.0;
        let mut s = 0.0;
        for k in i..m {
            scale += u[k * n + i].abs();
        }
        if scale != 0.0 {
            for k in i..m {
                u[k * n + i] /= scale;
                s += u[k * n + i] * u[k * n + i];
            }
            let f = u[i * n + i];
            g = -sign(s.sqrt(), f);
            let h = f * g - s;
            u[i * n + i] = f - g;
            if l < n {
                let proj = &mut acc[..n - l];
                proj.iter_mut().for_each(|p| *p = 0.0);
                for k in i..m {
                    let hk = u[k * n + i];
                    for (p, x) in proj.iter_mut().zip(&u[k * n + l..k * n + n]) {
                        *p += hk * x;
                    }
                }
                proj.iter_mut().for_each(|p| *p /= h);
                for k in i..m {
                    let hk = u[k * n + i];
                    for (x, p) in u[k * n + l..k * n + n].iter_mut().zip(proj.iter()) {
                        *x += p * hk;
                    }
                }
            }
            for k in i..m {
                u[k * n + i] *= scale;
            }
        }
        w[i] = scale * g;

        g = 0.0;
        scale = 0.0;
        s = 0.0;
        if i + 1 != n {
            for k in l..n {
                scale += u[i * n + k].abs();
            }
            if scale != 0.0 {
                for k in l..n {
                    u[i * n + k] /= scale;
                    s += u[i * n + k] * u[i * n + k];
                }
                let f = u[i * n + l];
                g = -sign(s.sqrt(), f);
                let h = f * g - s;
                u[i * n + l] = f - g;
                for k in l..n {
                    rv1[k] = u[i * n + k] / h;
                }
                let hrow = u[i * n + l..i * n + n].to_vec();
                for j in l..m {
                    let row = &mut u[j * n + l..j * n + n];
                    let d: f64 = row.iter().zip(&hrow).map(|(a, b)| a * b).sum();
                    for (x, r) in row.iter_mut().zip(&rv1[l..n]) {
                        *x += d * r;
                    }
                }
                for k in l..n {
                    u[i * n + k] *= scale;
                }
            }
        }
        anorm = anorm.max(w[i].abs() + rv1[i].abs());
    }

    if want_vectors {
        // Right-hand transformations.
        let mut l = n;
        for i in (0..n).rev() {
            if i + 1 < n {
                if g != 0.0 {
                    for j in l..n {
                        // double division avoids possible underflow
                        v[j * n + i] = (u[i * n + j] / u[i * n + l]) / g;
                    }
                    let proj = &mut acc[..n - l];
                    proj.iter_mut().for_each(|p| *p = 0.0);
                    for k in l..n {
                        let uik = u[i * n + k];
                        for (p, x) in proj.iter_mut().zip(&v[k * n + l..k * n + n]) {
                            *p += uik * x;
                        }
                    }
                    for k in l..n {
                        let vki = v[k * n + i];
                        for (x, p) in v[k * n + l..k * n + n].iter_mut().zip(proj.iter()) {
                            *x += p * vki;
                        }
                    }
                }
                for j in l..n {
                    v[i * n + j] = 0.0;
                    v[j * n + i] = 0.0;
                }
            }
            v[i * n + i] = 1.0;
            g = rv1[i];
            l = i;
        }

        // Left-hand transformations.
        for i in (0..n).rev() {
            let l = i + 1;
            let gi = w[i];
            for j in l..n {
                u[i * n + j] = 0.0;
            }
            if gi != 0.0 {
                let ginv = 1.0 / gi;
                if l < n {
                    let proj = &mut acc[..n - l];
                    proj.iter_mut().for_each(|p| *p = 0.0);
                    for k in l..m {
                        let uki = u[k * n + i];
                        for (p, x) in proj.iter_mut().zip(&u[k * n + l..k * n + n]) {
                            *p += uki * x;
                        }
                    }
                    let uii = u[i * n + i];
                    proj.iter_mut().for_each(|p| *p = (*p / uii) * ginv);
                    for k in i..m {
                        let uki = u[k * n + i];
                        for (x, p) in u[k * n + l..k * n + n].iter_mut().zip(proj.iter()) {
                            *x += p * uki;
                        }
                    }
                }
                for j in i..m {
                    u[j * n + i] *= ginv;
                }
            } else {
                for j in i..m {
                    u[j * n + i] = 0.0;
                }
            }
            u[i * n + i] += 1.0;
        }
    }

    // Diagonalization of the bidiagonal form.
    let tol = f64::EPSILON * anorm;
    for k in (0..n).rev() {
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let mut l = k;
            let mut cancel = true;
            loop {
                if rv1[l].abs() <= tol {
                    cancel = false;
                    break;
                }
                // rv1[0] is always zero, so l > 0 here
                if w[l - 1].abs() <= tol {
                    break;
                }
                l -= 1;
            }
            if cancel {
                let nm = l - 1;
                let mut c = 0.0;
                let mut s = 1.0;
                for i in l..=k {
                    let f = s * rv1[i];
                    rv1[i] *= c;
                    if f.abs() <= tol {
                        break;
                    }
                    let g = w[i];
                    let h = f.hypot(g);
                    w[i] = h;
                    c = g / h;
                    s = -f / h;
                    if want_vectors {
                        for j in 0..m {
                            let y = u[j * n + nm];
                            let z = u[j * n + i];
                            u[j * n + nm] = y * c + z * s;
                            u[j * n + i] = z * c - y * s;
                        }
                    }
                }
            }
            let z = w[k];
            if l == k {
                if z < 0.0 {
                    w[k] = -z;
                    if want_vectors {
                        for j in 0..n {
                            v[j * n + k] = -v[j * n + k];
                        }
                    }
                }
                break;
            }
            if sweeps >= MAX_SWEEPS {
                return Err(Error::Numerical(format!(
                    "SVD did not converge: singular value {k} of {n} still coupled after {sweeps} QR sweeps (residual superdiagonal {:e})",
                    rv1[k]
                )));
            }
            // Wilkinson-style shift from the trailing 2×2 block.
            let mut x = w[l];
            let nm = k - 1;
            let mut y = w[nm];
            let mut g = rv1[nm];
            let mut h = rv1[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            g = f.hypot(1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + sign(g, f))) - h)) / x;
            let mut c = 1.0;
            let mut s = 1.0;
            for j in l..=nm {
                let i = j + 1;
                g = rv1[i];
                y = w[i];
                h = s * g;
                g *= c;
                let mut zz = f.hypot(h);
                rv1[j] = zz;
                c = f / zz;
                s = h / zz;
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                if want_vectors {
                    for jj in 0..n {
                        let xv = v[jj * n + j];
                        let zv = v[jj * n + i];
                        v[jj * n + j] = xv * c + zv * s;
                        v[jj * n + i] = zv * c - xv * s;
                    }
                }
                zz = f.hypot(h);
                w[j] = zz;
                if zz != 0.0 {
                    c = f / zz;
                    s = h / zz;
                }
                f = c * g + s * y;
                x = c * y - s * g;
                if want_vectors {
                    for jj in 0..m {
                        let yu = u[jj * n + j];
                        let zu = u[jj * n + i];
                        u[jj * n + j] = yu * c + zu * s;
                        u[jj * n + i] = zu * c - yu * s;
                    }
                }
            }
            rv1[l] = 0.0;
            rv1[k] = f;
            w[k] = x;
        }
    }

    // Sort descending; ties keep their original order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| w[i]).collect();
    if !want_vectors {
        return Ok((sorted, None, None));
    }
    let um = Matrix::from_fn(m, n, |i, j| u[i * n + order[j]]);
    let vm = Matrix::from_fn(n, n, |i, j| v[i * n + order[j]]);
    Ok((sorted, Some(um), Some(vm)))
}

#[inline]
fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ops::matmul;
    use crate::testutil::{householder, random_matrix, random_with_condition};

    #[test]
    fn identity_spectrum() {
        assert_eq!(singular_values(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn constant_matrix_is_rank_one() {
        let s = singular_values(&Matrix::filled(8, 8, 2.0)).unwrap();
        assert!((s[0] - 16.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn frobenius_identity() {
        for (r, c) in [(6, 4), (4, 6), (9, 9)] {
            let a = random_matrix(r, c, 11);
            let s = singular_values(&a).unwrap();
            assert_eq!(s.len(), r.min(c));
            assert!(s.windows(2).all(|p| p[0] >= p[1]));
            assert!(s.iter().all(|&v| v >= 0.0));
            let sum: f64 = s.iter().map(|v| v * v).sum();
            let fro = a.frobenius_norm();
            assert!((sum - fro * fro).abs() <= 1e-10 * fro * fro);
        }
    }

    #[test]
    fn factors_reconstruct_and_are_orthonormal() {
        for (r, c) in [(7, 5), (5, 7), (12, 12)] {
            let a = random_matrix(r, c, 4);
            let f = svd(&a).unwrap();
            assert!(f.reconstruct().max_abs_diff(&a).unwrap() < 1e-12);
            let k = r.min(c);
            let utu = matmul(&f.u.transpose(), &f.u).unwrap();
            let vtv = matmul(&f.v.transpose(), &f.v).unwrap();
            assert!(utu.max_abs_diff(&Matrix::identity(k)).unwrap() < 1e-12);
            assert!(vtv.max_abs_diff(&Matrix::identity(k)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn values_only_path_agrees_with_full_path() {
        let a = random_matrix(20, 13, 8);
        let s1 = singular_values(&a).unwrap();
        let s2 = svd(&a).unwrap().singular_values;
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() <= 1e-13 * s1[0]);
        }
    }

    #[test]
    fn invariant_under_householder_reflections() {
        let a = random_matrix(10, 7, 21);
        let h_left = householder(10, 5);
        let h_right = householder(7, 6);
        let b = matmul(&matmul(&h_left, &a).unwrap(), &h_right).unwrap();
        let sa = singular_values(&a).unwrap();
        let sb = singular_values(&b).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() <= 1e-10 * x.max(1e-300));
        }
    }

    #[test]
    fn deterministic_bits() {
        let a = random_matrix(15, 15, 3);
        assert_eq!(singular_values(&a).unwrap(), singular_values(&a).unwrap());
    }

    #[test]
    fn zero_and_degenerate_shapes() {
        assert_eq!(singular_values(&Matrix::zeros(3, 2)).unwrap(), vec![0.0, 0.0]);
        assert!(singular_values(&Matrix::zeros(3, 0)).unwrap().is_empty());
        let col = Matrix::column(vec![3.0, 4.0]);
        assert!((singular_values(&col).unwrap()[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn pinv_of_diagonal() {
        let p = pinv_svd(&Matrix::diag(&[2.0, 4.0]), DEFAULT_PINV_CUTOFF).unwrap();
        assert!(p.max_abs_diff(&Matrix::diag(&[0.5, 0.25])).unwrap() < 1e-15);
    }

    #[test]
    fn pinv_of_rank_one() {
        let p = pinv_svd(&Matrix::filled(2, 2, 1.0), DEFAULT_PINV_CUTOFF).unwrap();
        assert!(p.max_abs_diff(&Matrix::filled(2, 2, 0.25)).unwrap() < 1e-15);
    }

    #[test]
    fn pinv_satisfies_penrose_conditions() {
        let a = random_with_condition(16, 1e3, 5);
        let p = pinv_svd(&a, DEFAULT_PINV_CUTOFF).unwrap();
        let apa = matmul(&matmul(&a, &p).unwrap(), &a).unwrap();
        let pap = matmul(&matmul(&p, &a).unwrap(), &p).unwrap();
        let ap = matmul(&a, &p).unwrap();
        let pa = matmul(&p, &a).unwrap();
        let na = spectral_norm(&a).unwrap();
        let np = spectral_norm(&p).unwrap();
        assert!(spectral_norm(&apa.sub(&a).unwrap()).unwrap() / na <= 1e-10);
        assert!(spectral_norm(&pap.sub(&p).unwrap()).unwrap() / np <= 1e-8);
        assert!(ap.max_abs_diff(&ap.transpose()).unwrap() <= 1e-8);
        assert!(pa.max_abs_diff(&pa.transpose()).unwrap() <= 1e-8);
    }

    #[test]
    fn pinv_rejects_bad_cutoff() {
        assert!(pinv_svd(&Matrix::identity(2), 0.0).is_err());
        assert!(pinv_svd(&Matrix::identity(2), 1.0).is_err());
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let a = random_matrix(200, 180, 17);
        let exact = singular_values(&a).unwrap()[0];
        let est = spectral_norm(&a).unwrap();
        assert!((exact - est).abs() <= 1e-9 * exact, "{exact} vs {est}");
    }

    #[test]
    fn rank_counting() {
        assert_eq!(effective_rank(&[1.0, 0.5, 1e-11], 1e-10), 2);
        assert_eq!(effective_rank(&[], 1e-10), 0);
        assert_eq!(effective_rank(&[0.0, 0.0], 1e-10), 0);
    }
}
