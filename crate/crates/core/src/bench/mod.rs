//! Scaling benchmark: exact vs approximate attention over a token grid,
//! with log-log fits of time and workspace against `N`.

pub mod alloc;

use std::collections::BTreeMap;
use std::fmt;
use std::hint::black_box;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_softmax, AttentionInputs};
use crate::error::{Error, Result};
use crate::fixtures::gaussian_inputs_as;
use crate::nystrom::{pnp_nystra, NystraConfig};
use crate::pinv::PinvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Nystra,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Exact, Method::Nystra];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Nystra => "nystra",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "nystra" => Ok(Method::Nystra),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub dv: usize,
    pub repeat: usize,
    pub wall_time_s: f64,
    pub peak_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub dv: usize,
    pub m: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub pinv_iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![256, 512, 1024, 2048, 4096, 8192, 16384],
            d: 32,
            dv: 32,
            m: 16,
            repeats: 5,
            warmup: 1,
            pinv_iterations: 6,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::InvalidInput("empty N grid".into()));
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) || self.n_grid[0] == 0 {
            return Err(Error::InvalidInput(format!(
                "N grid must be positive and strictly ascending: {:?}",
                self.n_grid
            )));
        }
        if self.repeats < 3 {
            return Err(Error::InvalidConfig(format!("repeats must be at least 3, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::InvalidConfig("warmup must be at least 1".into()));
        }
        if self.d == 0 || self.dv == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("d, dv and m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchRun {
    pub records: Vec<BenchRecord>,
    /// Set when a method stopped early, e.g. on allocation failure.
    pub truncated: Option<String>,
}

/// Input seed for trial `repeat` at size `n`. Warmup trials use
/// `repeat >= repeats`.
pub fn trial_seed(n: usize, repeat: usize) -> u64 {
    let mut x = (n as u64) << 32 ^ repeat as u64 ^ 0x9E37_79B9_7F4A_7C15;
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn bench_inputs(cfg: &BenchConfig, n: usize, repeat: usize) -> AttentionInputs<f32> {
    gaussian_inputs_as::<f32>(n, cfg.d, cfg.dv, 1.0, trial_seed(n, repeat))
}

fn run_once(method: Method, inp: &AttentionInputs<f32>, ncfg: &NystraConfig) -> Result<(f64, u64)> {
    let ((out, secs), peak) = alloc::measure(|| {
        let t = Instant::now();
        let out = match method {
            Method::Exact => attention_softmax(black_box(inp)),
            Method::Nystra => pnp_nystra(black_box(inp), ncfg),
        };
        let secs = t.elapsed().as_secs_f64();
        (black_box(out), secs)
    });
    out?;
    Ok((secs.max(f64::MIN_POSITIVE), peak as u64))
}

/// Times both methods over the grid, one trial at a time.
pub fn run_scaling(cfg: &BenchConfig) -> Result<BenchRun> {
    cfg.validate()?;
    let ncfg = NystraConfig::default()
        .with_m(cfg.m)
        .with_pinv(PinvConfig::new(cfg.pinv_iterations)?);
    let mut run = BenchRun::default();
    let mut stopped = Vec::new();
    for &n in &cfg.n_grid {
        for method in Method::ALL {
            if stopped.contains(&method) {
                continue;
            }
            let trial = |repeat: usize| -> Result<(f64, u64)> {
                let inp = bench_inputs(cfg, n, repeat);
                run_once(method, &inp, &ncfg)
            };
            let outcome = (0..cfg.warmup)
                .try_for_each(|w| trial(cfg.repeats + w).map(drop))
                .and_then(|()| {
                    (0..cfg.repeats)
                        .map(|r| trial(r).map(|t| (r, t)))
                        .collect::<Result<Vec<_>>>()
                });
            match outcome {
                Ok(times) => {
                    for (repeat, (wall_time_s, peak_bytes)) in times {
                        log::debug!("{method} N={n} repeat={repeat}: {wall_time_s:.6}s");
                        run.records.push(BenchRecord {
                            method,
                            n,
                            m: cfg.m.min(n),
                            d: cfg.d,
                            dv: cfg.dv,
                            repeat,
                            wall_time_s,
                            peak_bytes,
                        });
                    }
                }
                Err(e @ (Error::Allocation { .. } | Error::TooLarge(_))) => {
                    let msg = format!("{method} stopped at N={n}: {e}");
                    log::warn!("{msg}");
                    stopped.push(method);
                    run.truncated = Some(match run.truncated.take() {
                        Some(prev) => format!("{prev}; {msg}"),
                        None => msg,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Time,
    Workspace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub method: Method,
    pub quantity: Quantity,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(N, median)` pairs the fit was computed from.
    pub points: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub fits: Vec<ScalingFit>,
    pub truncated: Option<String>,
}

pub const MIN_FIT_POINTS: usize = 5;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Ordinary least squares `y = a + b·x`; returns `(b, a, R²)`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Log-log fit of the per-`N` median of `quantity`, one fit per method.
pub fn fit_scaling(records: &[BenchRecord], quantity: Quantity) -> Result<Vec<ScalingFit>> {
    let mut groups: BTreeMap<Method, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let y = match quantity {
            Quantity::Time => r.wall_time_s,
            Quantity::Workspace => r.peak_bytes as f64,
        };
        groups.entry(r.method).or_default().entry(r.n).or_default().push(y);
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("no benchmark records to fit".into()));
    }
    groups
        .into_iter()
        .map(|(method, by_n)| {
            if by_n.len() < MIN_FIT_POINTS {
                return Err(Error::InvalidInput(format!(
                    "{method}: {} distinct N values, need at least {MIN_FIT_POINTS}",
                    by_n.len()
                )));
            }
            let points: Vec<(usize, f64)> = by_n
                .into_iter()
                .map(|(n, mut ys)| (n, median(&mut ys)))
                .collect();
            if let Some((n, y)) = points.iter().find(|(_, y)| y.is_nan() || *y <= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{method}: non-positive {quantity:?} {y} at N={n}"
                )));
            }
            let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
            let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
            let (slope, intercept, r_squared) = ols(&xs, &ys);
            Ok(ScalingFit {
                method,
                quantity,
                slope,
                intercept,
                r_squared,
                points,
            })
        })
        .collect()
}

/// Records with `time = c·N^exponent` for checking the fitter.
pub fn synthetic_records(method: Method, n_grid: &[usize], exponent: f64, c: f64) -> Vec<BenchRecord> {
    n_grid
        .iter()
        .flat_map(|&n| {
            (0..3).map(move |repeat| BenchRecord {
                method,
                n,
                m: 16,
                d: 32,
                dv: 32,
                repeat,
                wall_time_s: c * (n as f64).powf(exponent),
                peak_bytes: (n as f64).powf(exponent).round() as u64,
            })
        })
        .collect()
}

pub fn write_records_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv flush: {e}")))?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidInput(format!("benchmark csv: {e}"))
}
