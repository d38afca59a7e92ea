//! Library behind the `skytrack` binary: encounter presets, the synthetic
//! training set, and the gen / train / infer / eval subcommand
//! implementations.

pub mod commands;
pub mod presets;

pub use commands::{run_eval, run_gen, run_infer, run_train, EvalArgs, GenArgs, InferArgs, TrainArgs};
pub use presets::{case_seed, generate_trainset, preset_cases, Preset};
