use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use nystra::bench::{
    alloc, fit_scaling, run_scaling, synthetic_records, write_records_csv, BenchConfig, BenchRecord, FitSummary, Method,
    Quantity, ScalingFit,
};
use nystra::io::write_json;
use nystra::Error;

use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Token counts, comma separated and ascending.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192,16384")]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub dv: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Pseudoinverse iterations.
    #[arg(long, default_value_t = 6)]
    pub iters: usize,
    /// Record CSV.
    #[arg(long, required_unless_present = "self_test")]
    pub out: Option<PathBuf>,
    /// Fit JSON; defaults to the record path with a .fit.json extension.
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// Fit injected N² and N data instead of timing anything.
    #[arg(long)]
    pub self_test: bool,
}

fn print_fits(fits: &[ScalingFit]) {
    for f in fits {
        println!(
            "{:<7} {:<9} slope {:.4} R² {:.4}",
            f.method,
            format!("{:?}", f.quantity).to_lowercase(),
            f.slope,
            f.r_squared
        );
    }
}

fn write_outputs(args: &Args, records: &[BenchRecord], summary: &FitSummary) -> Result<(), Failure> {
    let Some(out) = &args.out else { return Ok(()) };
    let file = File::create(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_records_csv(BufWriter::new(file), records)?;
    let fits = args.fits.clone().unwrap_or_else(|| out.with_extension("fit.json"));
    write_json(&fits, summary)?;
    Ok(())
}

fn self_test(args: &Args) -> Result<(), Failure> {
    let mut records = synthetic_records(Method::Exact, &args.n_grid, 2.0, 1e-9);
    records.extend(synthetic_records(Method::Nystra, &args.n_grid, 1.0, 1e-6));
    let fits = fit_scaling(&records, Quantity::Time)?;
    print_fits(&fits);
    let summary = FitSummary { fits, truncated: None };
    write_outputs(args, &records, &summary)?;
    let off: Vec<String> = summary
        .fits
        .iter()
        .filter(|f| {
            let want = if f.method == Method::Exact { 2.0 } else { 1.0 };
            (f.slope - want).abs() > 1e-9 || f.r_squared < 1.0 - 1e-12
        })
        .map(|f| format!("{} slope {}", f.method, f.slope))
        .collect();
    if off.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("self-test fit off: {}", off.join(", "))))
    }
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let cfg = BenchConfig {
        n_grid: args.n_grid.clone(),
        d: args.d,
        dv: args.dv,
        m: args.m,
        repeats: args.repeats,
        warmup: args.warmup,
        pinv_iterations: args.iters,
    };
    cfg.validate()?;
    if args.self_test {
        return self_test(args);
    }
    let run = run_scaling(&cfg)?;
    if let Some(t) = &run.truncated {
        log::warn!("benchmark truncated: {t}");
    }
    let mut fits = fit_scaling(&run.records, Quantity::Time)?;
    if alloc::is_active() {
        fits.extend(fit_scaling(&run.records, Quantity::Workspace)?);
    }
    print_fits(&fits);
    write_outputs(args, &run.records, &FitSummary { fits, truncated: run.truncated.clone() })
}
