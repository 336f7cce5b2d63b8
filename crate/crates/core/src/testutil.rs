//! Test-only helpers: seeded matrices and double-double reference loops.

use crate::fixtures;
use crate::linalg::{matmul, Matrix};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    fixtures::gaussian(rows, cols, 1.0, seed)
}

/// `I − 2vvᵀ/vᵀv` for a seeded random `v`.
pub fn householder(n: usize, seed: u64) -> Matrix {
    let v = random_matrix(n, 1, seed).into_vec();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    Matrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - 2.0 * v[i] * v[j] / vv
    })
}

/// Square matrix with singular values log-spaced over `[1, cond]`.
pub fn random_with_condition(n: usize, cond: f64, seed: u64) -> Matrix {
    let mut u = Matrix::identity(n);
    let mut w = Matrix::identity(n);
    for r in 0..3 {
        u = matmul(&u, &householder(n, seed * 31 + r)).unwrap();
        w = matmul(&w, &householder(n, seed * 37 + 100 + r)).unwrap();
    }
    let s: Vec<f64> = (0..n)
        .map(|i| cond.powf(1.0 - i as f64 / (n.max(2) - 1) as f64))
        .collect();
    matmul(&matmul(&u, &Matrix::diag(&s)).unwrap(), &w.transpose()).unwrap()
}

/// Unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Dd { hi: s, lo: err }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = Self::two_sum(self.hi, o.hi);
        let lo = s.lo + self.lo + o.lo;
        Self::two_sum(s.hi, lo)
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        let lo = err + self.hi * o.lo + self.lo * o.hi;
        Self::two_sum(p, lo)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul(Dd::new(-q1)));
        let q2 = r.hi / o.hi;
        Self::two_sum(q1, q2)
    }

    pub fn exp(self) -> Dd {
        let e = self.hi.exp();
        Dd::new(e).add(Dd::new(e * self.lo))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Softmax of one row with double-double accumulation.
pub fn dd_exp_sum_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Dd> = row
        .iter()
        .map(|&x| Dd::new(x).add(Dd::new(-max)).exp())
        .collect();
    let sum = exps.iter().fold(Dd::default(), |s, &e| s.add(e));
    exps.iter().map(|e| e.div(sum).to_f64()).collect()
}
