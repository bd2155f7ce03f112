use clap::{Args, Parser, Subcommand};
use seqdesign::harness::{run_verb, ExperimentConfig, HarnessError, Verb};
use std::path::PathBuf;
use std::process::ExitCode;

/// Guided diffusion sampling and edit optimization for fixed-length sequences.
#[derive(Parser)]
#[command(name = "seqdesign", version)]
struct Cli {
    #[command(subcommand)]
    verb: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write checkpoint.json, train_log.csv, metrics.csv.
    Train(Common),
    /// Sample the guidance grid; writes samples, traces, tradeoff and front tables.
    Sample(Common),
    /// Infill random regions of held-out sequences.
    Infill(Common),
    /// Optimize seeds with LaMBO-2; writes designs.csv.
    Optimize(Common),
    /// Edit-selection by guidance ablation over the configured budgets.
    Ablate(Common),
    /// Summarize the result tables already in the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Root seed for every random stream.
    #[arg(long)]
    seed: u64,
    /// Experiment config (.toml, or .json).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set sampling.samples=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(verb: Verb, args: &Common) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    for path in run_verb(verb, &cfg, args.seed, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, args) = match &cli.verb {
        Command::Train(a) => (Verb::Train, a),
        Command::Sample(a) => (Verb::Sample, a),
        Command::Infill(a) => (Verb::Infill, a),
        Command::Optimize(a) => (Verb::Optimize, a),
        Command::Ablate(a) => (Verb::Ablate, a),
        Command::Report(a) => (Verb::Report, a),
    };
    match run(verb, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
