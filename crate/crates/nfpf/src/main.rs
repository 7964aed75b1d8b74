use clap::{Parser, Subcommand};
use nfpf::config::ExperimentConfig;
use nfpf::error::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "nfpf", about = "Normalizing-flow particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectory files plus a manifest
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the flow + dynamics model on generated data
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the bootstrap particle filter over one trajectory
    Filter {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute metrics (RMSE, ESS, resample count) from a trace
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("NFPF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::Config(format!("NFPF_THREADS must be an integer, got '{raw}'")))?;
    if n == 0 {
        return Ok(()); // 0 = auto
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config } => nfpf::cli::cmd_generate(&ExperimentConfig::load(&config)?),
        Command::Train { config } => nfpf::cli::cmd_train(&ExperimentConfig::load(&config)?),
        Command::Filter { config } => nfpf::cli::cmd_filter(&ExperimentConfig::load(&config)?),
        Command::Eval { config } => nfpf::cli::cmd_eval(&ExperimentConfig::load(&config)?),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
