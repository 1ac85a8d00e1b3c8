//! `sigprop`: runs forward-only learning experiments and writes metrics.

mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::error::CliError;
use crate::run::Paths;

#[derive(Debug, Parser)]
#[command(name = "sigprop", version, about = "Forward-only learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding mnist/, fashion-mnist/ and cifar-10-batches-bin/.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for metrics, summary and checkpoint.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set arch.hidden=[400,400]`.
    #[arg(long = "set", value_parser = config::parse_override)]
    overrides: Vec<(String, Value)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with signal propagation.
    Train(Common),
    /// Train a backprop, feedback-alignment or shallow baseline.
    Baseline(Common),
    /// Continuous-time network with contrastive Hebbian updates.
    Ep(Common),
    /// Spiking network.
    Snn(Common),
    /// Time and memory of sequential, pipelined and backprop training.
    Bench(Common),
    /// Finite-difference checks of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn paths(c: &Common) -> Paths {
    Paths {
        data: c.data.clone(),
        out: c.out.clone(),
    }
}

fn report(s: &sigprop::trainer::Summary) {
    println!("{}: test error {:.2}%", s.mode, 100.0 * s.test_err);
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(c) => {
            let (cfg, resolved) = config::load(c.config.as_deref(), c.seed, &c.overrides)?;
            report(&run::train(&paths(&c), cfg, resolved, false)?);
        }
        Command::Baseline(c) => {
            let (cfg, resolved) = config::load(c.config.as_deref(), c.seed, &c.overrides)?;
            report(&run::train(&paths(&c), cfg, resolved, true)?);
        }
        Command::Ep(c) => {
            let (cfg, resolved) = config::load(c.config.as_deref(), c.seed, &c.overrides)?;
            report(&run::ep(&paths(&c), cfg, resolved)?);
        }
        Command::Snn(c) => {
            let (cfg, resolved) = config::load(c.config.as_deref(), c.seed, &c.overrides)?;
            report(&run::snn(&paths(&c), cfg, resolved)?);
        }
        Command::Bench(c) => {
            let (cfg, resolved) = config::load(c.config.as_deref(), c.seed, &c.overrides)?;
            run::bench(&paths(&c), cfg, resolved)?;
        }
        Command::Gradcheck { instances, seed } => run::gradcheck(instances, seed)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
