use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use oreo_core::RunConfig;

/// Object-aware regularization for behavioral cloning.
///
/// Any config key can be overridden after the command, e.g. `--bc.p 0.25` or
/// `--regularizer oreo`. Set OREO_OUT to redirect every output path.
#[derive(Parser)]
#[command(name = "oreo", version)]
struct Cli {
    /// Config file (plain `key = value` with `[section]` headers).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations.
    Collect(Overrides),
    /// Train the VQ-VAE on the demonstrations.
    TrainVqvae(Overrides),
    /// Train a BC policy with the configured regularizer.
    TrainBc(Overrides),
    /// Deployment scores in every configured mode.
    Eval(Overrides),
    /// Attention overlays and the attention mass on ball and paddle.
    Attention(Overrides),
    /// Causally regularized logistic regression over VQ-VAE codes.
    Crlr(Overrides),
    /// OREO over the drop-probability × codebook-size grid.
    Sweep(Overrides),
    /// Print the effective configuration.
    Config(Overrides),
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (name, o) = match &cli.command {
        Command::Collect(o) => ("collect", o),
        Command::TrainVqvae(o) => ("train-vqvae", o),
        Command::TrainBc(o) => ("train-bc", o),
        Command::Eval(o) => ("eval", o),
        Command::Attention(o) => ("attention", o),
        Command::Crlr(o) => ("crlr", o),
        Command::Sweep(o) => ("sweep", o),
        Command::Config(o) => ("config", o),
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    oreo_cli::apply_overrides(&mut cfg, &o.set)?;
    oreo_cli::run(name, &cfg)
}
