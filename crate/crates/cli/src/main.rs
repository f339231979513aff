use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svfreg_cli::commands::{
    cmd_exp, cmd_invert, cmd_metrics, cmd_register, cmd_synth, cmd_warp, ExpArgs, InvertArgs,
    MetricsArgs, RegisterArgs, SynthArgs, WarpArgs,
};

/// Probabilistic diffeomorphic registration over stationary velocity fields.
#[derive(Debug, Parser)]
#[command(name = "svfreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a moving image to a fixed image.
    Register(RegisterArgs),
    /// Warp an image or label map by a displacement field.
    Warp(WarpArgs),
    /// Inverse deformation `exp(-v)` of a velocity field.
    Invert(InvertArgs),
    /// Integrate a velocity field into a displacement field.
    Exp(ExpArgs),
    /// Dice, Jacobian and inverse-consistency statistics.
    Metrics(MetricsArgs),
    /// Generate synthetic shapes and test fields.
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Exp(a) => cmd_exp(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
