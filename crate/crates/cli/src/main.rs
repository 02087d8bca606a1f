mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_overrides, RunConfig};
use exit::CliError;

/// Reproducible zero-shot attribute-editing experiments on a toy world.
#[derive(Parser)]
#[command(name = "zip-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the labelled training and test images.
    GenData(Common),
    /// Train the ε-predicting generator on the training images.
    TrainGen(Common),
    /// Train the attribute encoder against the frozen generator.
    TrainEncoder(Common),
    /// Edit one image (`--input PATH`).
    Edit(Common),
    /// Edit the test set and report IS, FID and CLIP-score analogues.
    Eval(Common),
    /// Check the shift-cancellation identity numerically.
    TheoremCheck(Common),
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--section.key=value` overrides, applied after the file
    /// (short forms: --seed, --out, --attr, --input, --steps, --weight).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

type Stage = fn(&RunConfig, &commands::Layout) -> Result<Vec<PathBuf>, CliError>;

fn dispatch(command: Command) -> Result<(), CliError> {
    let (name, stage, common): (&str, Stage, Common) = match command {
        Command::GenData(c) => ("gen-data", commands::gen_data, c),
        Command::TrainGen(c) => ("train-gen", commands::train_gen, c),
        Command::TrainEncoder(c) => ("train-encoder", commands::train_encoder, c),
        Command::Edit(c) => ("edit", commands::edit, c),
        Command::Eval(c) => ("eval", commands::eval, c),
        Command::TheoremCheck(c) => ("theorem-check", commands::theorem_check, c),
    };
    let mut overrides = parse_overrides(&common.overrides)?;
    // `--config` after the first override lands among the overrides.
    let mut config = common.config;
    if let Some(i) = overrides.iter().rposition(|(k, _)| k == "config") {
        config = Some(PathBuf::from(overrides.remove(i).1));
    }
    let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
    commands::run(name, &cfg, |layout| stage(&cfg, layout))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures; everything else
            // is a bad argument (clap's own code 2 would read as I/O).
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
