use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use nystra::analysis::{mean_spectrum, spectrum};
use nystra::io::{write_json, write_spectrum_csv};
use nystra::nystrom::resolve_landmarks;
use nystra::{Error, NystraConfig};

use crate::inputs::{self, LandmarkArgs, Paths};
use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Query TensorFile (N×d or B×N×d; batches are averaged).
    #[arg(long, required_unless_present = "manifest")]
    pub q: Option<PathBuf>,
    /// Key TensorFile.
    #[arg(long, required_unless_present = "manifest")]
    pub k: Option<PathBuf>,
    /// Tap manifest naming the q and k files; also sets the token grid.
    #[arg(long, conflicts_with_all = ["q", "k"])]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub landmarks: LandmarkArgs,
    /// Number of singular values written.
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Output CSV with columns index,sigma_gtilde,sigma_ga.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON with the full spectrum report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let paths = match &args.manifest {
        Some(m) => inputs::from_manifest(m, false)?,
        None => Paths {
            q: args.q.clone().expect("required by clap"),
            k: args.k.clone().expect("required by clap"),
            v: None,
            grid: None,
        },
    };
    let loaded = inputs::load(&paths)?;
    let strategy = args.landmarks.strategy(loaded.tokens(), loaded.grid)?;
    let cfg = NystraConfig::default().with_m(args.landmarks.m).with_strategy(strategy);
    let reports = loaded
        .items
        .iter()
        .map(|inp| spectrum(inp, &resolve_landmarks(inp, &cfg)?, args.top))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = mean_spectrum(&reports)?;

    let file = File::create(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write_spectrum_csv(BufWriter::new(file), &rep).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    if let Some(p) = &args.report {
        write_json(p, &rep)?;
    }
    println!("n {} m {} items {}", rep.n, rep.m, reports.len());
    println!("effective_rank {} (tau {:e})", rep.effective_rank, rep.tau);
    match rep.decay_ratio {
        Some(r) => println!("decay_ratio {r:.6e}"),
        None => println!("decay_ratio n/a"),
    }
    Ok(())
}
