use clap::{Parser, Subcommand};

use skytrack_cli::commands::{run_eval, run_gen, run_infer, run_train};
use skytrack_cli::{EvalArgs, GenArgs, InferArgs, TrainArgs};

/// Below-horizon aircraft detection pipeline: synthetic encounter generation,
/// segmentation-network training, per-frame inference and detection-range /
/// false-alarm evaluation.
#[derive(Parser)]
#[command(name = "skytrack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic encounter suite or training dataset.
    Gen(GenArgs),
    /// Train the pixel-wise segmentation network on a labelled dataset.
    Train(TrainArgs),
    /// Segment every frame of a sequence with a trained checkpoint.
    Infer(InferArgs),
    /// Score masks against ground truth: per-case report, SOC curve or ZFA search.
    Eval(EvalArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
