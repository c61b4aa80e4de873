//! `capsrel`: train, evaluate and inspect capsule relation extractors.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 bad configuration or
//! input file, 3 training aborted on a non-finite loss, 4 model/schema
//! mismatch, 5 no routing state (baseline model given to `inspect`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use capsrel::{HeadKind, LossKind, RoutingKind};

#[derive(Parser)]
#[command(name = "capsrel", version, about = "Attentive capsule network relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Capsule,
    Max,
    Avg,
    Att,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Attentive,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Sliding,
    Fixed,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes all artifacts to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        #[arg(long, value_enum)]
        routing: Option<RoutingArg>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Macro P/R/F1 and PR curve of a saved model on a labelled JSONL corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Directory for report.json and pr_curve.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Scores and decoded labels, one JSON line per input sentence.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Routing diagnostics (attention, couplings, capsule lengths) per sentence.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode thresholds 0.1..0.9 and report the best macro F1.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Paired t-test over per-fold scores: a CSV with two score columns.
    Ttest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train {
            config,
            output,
            seed,
            head,
            routing,
            loss,
        } => {
            let overrides = config::Overrides {
                seed,
                head: head.map(|h| match h {
                    HeadArg::Capsule => HeadKind::Capsule,
                    HeadArg::Max => HeadKind::Max,
                    HeadArg::Avg => HeadKind::Avg,
                    HeadArg::Att => HeadKind::Att,
                }),
                routing: routing.map(|r| match r {
                    RoutingArg::Attentive => RoutingKind::Attentive,
                    RoutingArg::Dynamic => RoutingKind::Dynamic,
                }),
                loss: loss.map(|l| match l {
                    LossArg::Sliding => LossKind::Sliding,
                    LossArg::Fixed => LossKind::Fixed,
                }),
                output_dir: output,
            };
            commands::train(&config, &overrides)
        }
        Command::Eval { model, input, output } => commands::eval(&model, &input, output.as_deref()),
        Command::Predict { model, input, output } => commands::predict(&model, &input, output.as_deref()),
        Command::Inspect { model, input, output } => commands::inspect(&model, &input, output.as_deref()),
        Command::Sweep { model, input, output } => commands::sweep(&model, &input, output.as_deref()),
        Command::Ttest { input, output } => commands::ttest(&input, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
