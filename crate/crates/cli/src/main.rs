//! `nystra`: approximate attention runs, kernel spectra, scaling benchmarks
//! and the invariant suite.

mod approx;
mod bench;
mod inputs;
mod spectrum;
mod validate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nystra::Error;

#[global_allocator]
static ALLOC: nystra::bench::alloc::CountingAlloc = nystra::bench::alloc::CountingAlloc;

#[derive(Parser, Debug)]
#[command(name = "nystra", version, about = "Nyström approximation of softmax attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Approximate attention for Q/K/V tensors and report the error.
    Approx(approx::Args),
    /// Singular values of the extended kernel matrix.
    Spectrum(spectrum::Args),
    /// Time and workspace scaling of exact vs approximate attention.
    Bench(bench::Args),
    /// Run the randomized invariant suite.
    Validate(validate::Args),
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(e) if e.is_io() => 3,
            Failure::Core(Error::Serialization(_)) => 3,
            Failure::Core(e) if e.is_numerical() => 4,
            Failure::Core(Error::Allocation { .. }) => 4,
            Failure::Core(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Approx(a) => approx::run(&a),
        Command::Spectrum(a) => spectrum::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::Validate(a) => validate::run(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
