use std::path::PathBuf;

use log::info;
use nystra::analysis::{approx_report, ApproxReport, REPORT_MAX_TOKENS};
use nystra::io::{write_json, write_tensor, Tensor};
use nystra::landmarks::StrategyKind;
use nystra::nystrom::pnp_nystra_batch;
use nystra::{Dtype, Matrix, NystraConfig};
use serde::Serialize;

use crate::inputs::{self, LandmarkArgs, Paths};
use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Query TensorFile (N×d or B×N×d).
    #[arg(long, required_unless_present = "manifest")]
    pub q: Option<PathBuf>,
    /// Key TensorFile.
    #[arg(long, required_unless_present = "manifest")]
    pub k: Option<PathBuf>,
    /// Value TensorFile.
    #[arg(long, required_unless_present = "manifest")]
    pub v: Option<PathBuf>,
    /// Tap manifest naming the q, k and v files; also sets the token grid.
    #[arg(long, conflicts_with_all = ["q", "k", "v"])]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub landmarks: LandmarkArgs,
    /// Pseudoinverse iterations.
    #[arg(long, default_value_t = 6)]
    pub iters: usize,
    /// Exponentiate raw logits (overflows on large logits).
    #[arg(long)]
    pub no_stabilize: bool,
    /// Output TensorFile for the approximate attention.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    mean_output_rel_error: f64,
    max_output_rel_error: f64,
    mean_relative_spectral_error: f64,
    max_relative_spectral_error: f64,
}

#[derive(Debug, Serialize)]
struct RunReport {
    n: usize,
    d: usize,
    dv: usize,
    m: usize,
    iterations: usize,
    strategy: StrategyKind,
    stabilize: bool,
    items: usize,
    /// Present when `N` is small enough to materialize the kernels.
    reports: Option<Vec<ApproxReport>>,
    aggregate: Option<Aggregate>,
}

fn aggregate(reports: &[ApproxReport]) -> Aggregate {
    let k = reports.len() as f64;
    let out = reports.iter().map(|r| r.output_rel_error);
    let spectral = reports.iter().map(|r| r.relative_spectral_error());
    Aggregate {
        mean_output_rel_error: out.clone().sum::<f64>() / k,
        max_output_rel_error: out.fold(0.0, f64::max),
        mean_relative_spectral_error: spectral.clone().sum::<f64>() / k,
        max_relative_spectral_error: spectral.fold(0.0, f64::max),
    }
}

fn output_tensor(outs: &[Matrix], dtype: Dtype, batch: bool) -> Result<Tensor, Failure> {
    Ok(match (dtype, batch) {
        (Dtype::F64, false) => Tensor::from_matrix(&outs[0]),
        (Dtype::F32, false) => Tensor::from_matrix(&outs[0].cast::<f32>()),
        (Dtype::F64, true) => Tensor::from_batch(outs)?,
        (Dtype::F32, true) => Tensor::from_batch(&outs.iter().map(|o| o.cast::<f32>()).collect::<Vec<_>>())?,
    })
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let paths = match &args.manifest {
        Some(m) => inputs::from_manifest(m, true)?,
        None => Paths {
            q: args.q.clone().expect("required by clap"),
            k: args.k.clone().expect("required by clap"),
            v: args.v.clone(),
            grid: None,
        },
    };
    let loaded = inputs::load(&paths)?;
    let n = loaded.tokens();
    let strategy = args.landmarks.strategy(n, loaded.grid)?;
    let cfg = NystraConfig::default()
        .with_m(args.landmarks.m)
        .with_iterations(args.iters)
        .with_strategy(strategy)
        .with_stabilize(!args.no_stabilize);
    cfg.validate()?;
    let m = cfg.effective_m(n);
    info!("{} item(s), N = {n}, m = {m}", loaded.items.len());

    let outs = pnp_nystra_batch(&loaded.items, &cfg)?;
    write_tensor(&args.out, &output_tensor(&outs, loaded.dtype, loaded.batch)?)?;

    let reports = if n <= REPORT_MAX_TOKENS {
        let reps = loaded
            .items
            .iter()
            .map(|inp| approx_report(inp, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, r) in reps.iter().enumerate() {
            println!(
                "item {i}: output_rel_error {:.6e} spectral_rel_error {:.6e} rank {}",
                r.output_rel_error,
                r.relative_spectral_error(),
                r.rank_gtilde
            );
        }
        Some(reps)
    } else {
        info!("N = {n} above {REPORT_MAX_TOKENS}; report omits error fields");
        None
    };
    let first = &loaded.items[0];
    let report = RunReport {
        n,
        d: first.dim(),
        dv: first.value_dim(),
        m,
        iterations: args.iters,
        strategy: cfg.strategy.kind(),
        stabilize: cfg.stabilize,
        items: loaded.items.len(),
        aggregate: reports.as_deref().map(aggregate),
        reports,
    };
    if let Some(a) = &report.aggregate {
        println!(
            "aggregate: mean output_rel_error {:.6e} max {:.6e}",
            a.mean_output_rel_error, a.max_output_rel_error
        );
    }
    write_json(&args.report, &report)?;
    Ok(())
}
