use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conceptdistil::training::Variant;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "conceptdistil", version, about = "Concept-based distillation of black-box classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed; falls back to CONCEPTDISTIL_SEED, then to the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with golden splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the number of generated rows.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the feed-forward black-box classifier.
    TrainBlackbox {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one random-forest concept teacher per concept on a golden set.
    Teach {
        #[arg(long)]
        golden_train: PathBuf,
        /// Golden validation set; required with --trials.
        #[arg(long)]
        golden_valid: Option<PathBuf>,
        /// Random-search trials per concept.
        #[arg(long)]
        trials: Option<usize>,
        /// Forest parameters (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attach soft concept labels and/or black-box scores to a dataset.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long, conflicts_with = "scores")]
        blackbox: Option<PathBuf>,
        /// External `id,score` CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write the black-box scores as an `id,score` CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Keep only this fraction of rows, closest to the uncertainty center.
        #[arg(long)]
        uncertainty: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        center: f64,
    },
    /// Train a surrogate.
    Distill {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// Architecture and training settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score surrogates, or report concept prevalences when no model is given.
    Evaluate {
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Evaluation set carrying black-box scores.
        #[arg(long)]
        data: PathBuf,
        /// Golden set for concept AUC.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Score `--data` with this black box if it has no scores.
        #[arg(long)]
        blackbox: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit one explanation per input row as JSON lines.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random search or lambda sweep.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Sweep lambda over this many evenly spaced points instead.
        #[arg(long)]
        lambda_grid: Option<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: conceptdistil::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
