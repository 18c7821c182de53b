//! `vstar` — environment generation, training, ablations, budget scaling,
//! and report aggregation for value-guided semantic-ID decoding experiments.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vstar::commands::{cmd_ablate, cmd_gen_env, cmd_report, cmd_scale, cmd_train, AblationAxis};
use vstar::config::ExperimentConfig;
use vstar::error::VstarError;

#[derive(Parser)]
#[command(name = "vstar", version, about = "Value-guided budgeted decoding experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic environment and base policy bundle.
    GenEnv,
    /// Run the training loop once per seed and write logs + summaries.
    Train,
    /// Run one ablation axis: decoder, expansion-rule, or objective.
    Ablate {
        #[arg(long)]
        axis: String,
    },
    /// Matched-budget VED vs beam comparison at 1x..4x budgets.
    Scale,
    /// Aggregate run CSVs into mean/std tables.
    Report {
        /// Run directories or CSV files to aggregate.
        inputs: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long, default_value = "aggregate.csv")]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, VstarError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), VstarError> {
    match &cli.command {
        Command::GenEnv => {
            cmd_gen_env(&load_config(cli)?)?;
        }
        Command::Train => {
            cmd_train(&load_config(cli)?)?;
        }
        Command::Ablate { axis } => {
            let axis: AblationAxis = axis.parse()?;
            cmd_ablate(&load_config(cli)?, axis)?;
        }
        Command::Scale => {
            cmd_scale(&load_config(cli)?)?;
        }
        Command::Report { inputs, output } => {
            let out = match &cli.out {
                Some(dir) => dir.join(output),
                None => output.clone(),
            };
            cmd_report(inputs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
