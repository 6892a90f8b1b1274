use std::path::PathBuf;
use std::process::ExitCode;

use aqua_cli::commands::{self, TrainOptions};
use aqua_cli::{output_dir, CliError, ExperimentConfig};
use aqua_detector::TrainMode;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aquadet", version, about = "Synthetic underwater detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: $AQUADET_OUT/<command> or runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the command's randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the multi-domain dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector on the source domains.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// deepall, boosting, dmc or dg-adv.
        #[arg(long)]
        mode: TrainMode,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long, default_value_t = 250)]
        checkpoint_every: u64,
    },
    /// Score a checkpoint on dataset splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: val (source domains), test (target domain), train.
        #[arg(long, value_delimiter = ',', default_value = "val,test")]
        splits: Vec<String>,
    },
    /// Sweep image corruptions and report the AP drop.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
}

fn load(common: &Common, seed_key: &str, required: bool) -> Result<ExperimentConfig, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("{seed_key}={seed}"));
    }
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None if required => Err(CliError::Config("--config is required for this command".into())),
        None => ExperimentConfig::from_toml(&ExperimentConfig::default().to_toml(), &overrides),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => {
            let config = load(&common, "dataset.scene.seed", true)?;
            let out = output_dir(common.out, "synth");
            let manifest = commands::synth(&config, &out)?;
            println!("{}", manifest.to_json());
            eprintln!("manifest sha256 {}", manifest.sha256());
        }
        Command::Train {
            common,
            data,
            mode,
            resume,
            until,
            checkpoint_every,
        } => {
            let config = load(&common, "training.seed", true)?;
            let out = output_dir(common.out, "train");
            let options = TrainOptions {
                mode,
                resume,
                until,
                checkpoint_every,
            };
            let summary = commands::train(&config, &data, &out, &options)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serialises"));
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            splits,
        } => {
            let config = load(&common, "training.seed", false)?;
            let out = output_dir(common.out, "eval");
            let rows = commands::eval(&config, &checkpoint, &data, &splits, &out)?;
            print!("{}", commands::metrics_table(&rows));
        }
        Command::Robustness {
            common,
            checkpoint,
            data,
            split,
        } => {
            let config = load(&common, "training.seed", false)?;
            let out = output_dir(common.out, "robustness");
            let table = commands::robustness(&config, &checkpoint, &data, &split, common.seed.unwrap_or(0), &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = anyhow::Error::new(e).context("aquadet failed");
            eprintln!("{report:#}");
            ExitCode::from(code)
        }
    }
}

