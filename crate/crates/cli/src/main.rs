mod build;
mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliResult;
use crate::manifest::Outputs;
use crate::settings::Settings;

#[derive(Parser)]
#[command(
    name = "flowmap",
    version,
    about = "Flow-map training laboratory on low-dimensional data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Diffusion or flow-matching pre-training.
    Pretrain,
    /// Consistency or mean-flow mid-training on teacher trajectories.
    Midtrain,
    /// CT, CD, gCD or mean-flow post-training.
    Posttrain,
    /// Draw samples from a checkpoint and score them against fresh data.
    Sample,
    /// Gradient bias/variance study across initializations.
    Diagnose,
    /// Write teacher ODE trajectories.
    Trajectories,
    /// Per-pair teacher cost table.
    NfeTable,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Midtrain => "midtrain",
            Command::Posttrain => "posttrain",
            Command::Sample => "sample",
            Command::Diagnose => "diagnose",
            Command::Trajectories => "trajectories",
            Command::NfeTable => "nfe-table",
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let s = Settings::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let mut out = Outputs::new(&cli.out)?;
    let seed = match cli.command {
        c @ (Command::Pretrain | Command::Midtrain | Command::Posttrain) => {
            commands::train_stage(c.name(), &s, &mut out)?
        }
        Command::Sample => commands::sample_cmd(&s, &mut out)?,
        Command::Diagnose => commands::diagnose_cmd(&s, &mut out)?,
        Command::Trajectories => commands::trajectories_cmd(&s, &mut out)?,
        Command::NfeTable => commands::nfe_table_cmd(&s, &mut out)?,
    };
    let config = s.finish()?;
    out.write("config.txt", settings::emit(&config).as_bytes())?;
    out.finish(cli.command.name(), config, seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowmap {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
