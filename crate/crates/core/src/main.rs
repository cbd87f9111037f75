use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use graphmfg::config::load_config;
use graphmfg::run::{run, Subcommand, STATUS_ERROR};

/// Mean field games on directed graphs.
#[derive(Parser, Debug)]
#[command(name = "graphmfg", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides `verification.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn init_threads() {
    let threads = std::env::var("GRAPHMFG_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let mut config = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(STATUS_ERROR);
        }
    };
    if let Some(seed) = cli.seed {
        config.verification.seed = seed;
    }
    let out = cli.out.unwrap_or_else(|| config.output_dir.clone());
    match run(cli.command, &config, &out) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.converged == Some(false) {
                eprintln!("warning: fixed-point iteration did not converge");
            }
            ExitCode::from(outcome.status)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(STATUS_ERROR)
        }
    }
}
