use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssl_lab::experiments::{run, ExperimentConfig, ExperimentKind};
use ssl_lab::LabError;

#[derive(Parser)]
#[command(name = "ssl-lab", version, about = "Spectral and generation-bound experiments on toy pretraining corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments named in a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config's `seed`)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the available experiment names
    List,
}

fn execute(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::List => {
            for kind in ExperimentKind::ALL {
                println!("{:<10} {}", kind.name(), kind.summary());
            }
            Ok(())
        }
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            for outcome in run(&cfg, &out)? {
                for w in &outcome.warnings {
                    eprintln!("warning [{}]: {w}", outcome.experiment);
                }
                println!("{}: {} ({})", outcome.experiment, outcome.dir.display(), outcome.files.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
