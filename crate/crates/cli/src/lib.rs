//! Command-line front end: corpus generation, training, lambda sweeps,
//! scoring, and report rendering, wired for reproducible runs.

pub mod common;
pub mod eval;
pub mod gen;
pub mod report;
pub mod scores;
pub mod sweep;
pub mod train;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "padkit",
    version,
    about = "Presentation-attack detection toolkit for contactless fingerprints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded corpus with manifest, tensors, and splits.
    Gen(gen::GenArgs),
    /// Train the classifier on a manifest's train split.
    Train(train::TrainArgs),
    /// Train one model per lambda and select the best by validation AUC.
    Sweep(sweep::SweepArgs),
    /// Score a split with a checkpoint and report PAD metrics.
    Eval(eval::EvalArgs),
    /// Rebuild a metrics report from a stored score CSV.
    Report(report::ReportArgs),
}

pub fn run(cli: Cli) -> padkit::Result<()> {
    match cli.command {
        Command::Gen(args) => gen::run(args),
        Command::Train(args) => train::run(args),
        Command::Sweep(args) => sweep::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Report(args) => report::run(args),
    }
}
