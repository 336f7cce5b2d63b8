use nystra::validate::{run_suite, Fault, ValidateConfig};

use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per invariant.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let fault = match std::env::var("NYSTRA_FAULT") {
        Ok(s) if !s.is_empty() => Some(
            s.parse::<Fault>()
                .map_err(|e| Failure::Usage(format!("NYSTRA_FAULT: {e}")))?,
        ),
        _ => None,
    };
    if let Some(f) = fault {
        log::warn!("fault injection active: {f:?}");
    }
    let results = run_suite(&ValidateConfig {
        seed: args.seed,
        trials: args.trials,
        fault,
    });
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{} of {} invariants passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("failing invariants: {}", failed.join(", "))))
    }
}
