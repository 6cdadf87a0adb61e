use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpeft::cli;

#[derive(Parser)]
#[command(name = "fedpeft", version, about = "Federated adapter fine-tuning simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, aggregator and adapter-identity checks.
    Selfcheck,
    /// Run every aggregator on an update file and verify the outputs.
    Aggcheck {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run a named experiment grid: fig3, fig4, table2 or fig6.
    Recipe {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match Args::parse().command {
        Command::Run { config, seed, out } => cli::cmd_run(&config, seed, out),
        Command::Selfcheck => cli::cmd_selfcheck(None),
        Command::Aggcheck { input } => cli::cmd_aggcheck(&input),
        Command::Recipe { name, out } => cli::cmd_recipe(&name, &out),
    };
    ExitCode::from(code as u8)
}
