//! Seeded synthetic inputs shared by the benchmark harness, the validation
//! suite and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionInputs;
use crate::landmarks::LandmarkSet;
use crate::linalg::{Matrix, Real};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        std * z
    })
}

/// Gaussian Q, K, V. Entries of Q and K have variance `logit_std`, so the
/// scaled logits `q·k/√d` have standard deviation `logit_std`.
pub fn gaussian_inputs(n: usize, d: usize, dv: usize, logit_std: f64, seed: u64) -> AttentionInputs {
    let s = logit_std.sqrt();
    AttentionInputs::new(
        gaussian(n, d, s, seed.wrapping_mul(3) + 1),
        gaussian(n, d, s, seed.wrapping_mul(3) + 2),
        gaussian(n, dv, 1.0, seed.wrapping_mul(3) + 3),
    )
    .expect("consistent shapes")
}

/// Same as [`gaussian_inputs`] in another precision.
pub fn gaussian_inputs_as<T: Real>(
    n: usize,
    d: usize,
    dv: usize,
    logit_std: f64,
    seed: u64,
) -> AttentionInputs<T> {
    gaussian_inputs(n, d, dv, logit_std, seed).cast()
}

/// Queries and keys that repeat `m` distinct prototype vectors, token `i`
/// taking prototype `i mod m`. The returned landmark set is the prototypes
/// themselves, so the extended kernel matrix has rank at most `m`.
pub fn prototype_inputs(
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
    logit_std: f64,
    seed: u64,
) -> (AttentionInputs, LandmarkSet) {
    let s = logit_std.sqrt();
    let qp = gaussian(m, d, s, seed.wrapping_mul(5) + 1);
    let kp = gaussian(m, d, s, seed.wrapping_mul(5) + 2);
    let assign: Vec<usize> = (0..n).map(|i| i % m).collect();
    let q = qp.select_rows(&assign).expect("indices in range");
    let k = kp.select_rows(&assign).expect("indices in range");
    let v = gaussian(n, dv, 1.0, seed.wrapping_mul(5) + 3);
    let inputs = AttentionInputs::new(q, k, v).expect("consistent shapes");
    let landmarks = LandmarkSet::new(qp, kp).expect("consistent shapes");
    (inputs, landmarks)
}

/// Tokens in `m` contiguous clusters: each token is its cluster centre plus
/// Gaussian noise of standard deviation `noise` (relative to the centre
/// scale). Pool-1d landmarks with the same `m` land near the centres.
pub fn clustered_inputs(
    n: usize,
    m: usize,
    d: usize,
    dv: usize,
    logit_std: f64,
    noise: f64,
    seed: u64,
) -> AttentionInputs {
    let s = logit_std.sqrt();
    let qc = gaussian(m, d, s, seed.wrapping_mul(7) + 1);
    let kc = gaussian(m, d, s, seed.wrapping_mul(7) + 2);
    let mut r = rng(seed.wrapping_mul(7) + 3);
    let mut jitter = |c: &Matrix, i: usize| -> Vec<f64> {
        let cluster = i * m / n;
        c.row(cluster)
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut r);
                x + noise * s * z
            })
            .collect()
    };
    let q_rows: Vec<Vec<f64>> = (0..n).map(|i| jitter(&qc, i)).collect();
    let k_rows: Vec<Vec<f64>> = (0..n).map(|i| jitter(&kc, i)).collect();
    AttentionInputs::new(
        Matrix::from_rows(&q_rows).expect("rectangular"),
        Matrix::from_rows(&k_rows).expect("rectangular"),
        gaussian(n, dv, 1.0, seed.wrapping_mul(7) + 4),
    )
    .expect("consistent shapes")
}

/// Matrix entries drawn uniformly from `[lo, hi)`.
pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

/// Prototype construction with near-orthogonal prototypes
/// `strength·e_c + noise·z`, needing `d ≥ m`. The core block is close to a
/// scaled identity, so it stays well conditioned at any logit scale.
pub fn separated_prototype_inputs(
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
    strength: f64,
    noise: f64,
    seed: u64,
) -> (AttentionInputs, LandmarkSet) {
    assert!(d >= m, "separated prototypes need d >= m");
    let proto = |offset: u64| {
        let z = gaussian(m, d, noise, seed.wrapping_mul(11) + offset);
        Matrix::from_fn(m, d, |c, j| z[(c, j)] + if c == j { strength } else { 0.0 })
    };
    let (qp, kp) = (proto(1), proto(2));
    let assign: Vec<usize> = (0..n).map(|i| i % m).collect();
    let inputs = AttentionInputs::new(
        qp.select_rows(&assign).expect("indices in range"),
        kp.select_rows(&assign).expect("indices in range"),
        gaussian(n, dv, 1.0, seed.wrapping_mul(11) + 3),
    )
    .expect("consistent shapes");
    (inputs, LandmarkSet::new(qp, kp).expect("consistent shapes"))
}
