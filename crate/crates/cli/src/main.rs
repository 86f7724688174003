use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Category-level object pose toolkit.
#[derive(Debug, Parser)]
#[command(name = "posekit", version, about)]
struct Cli {
    /// Seed for every randomized step (point sampling, RANSAC, sensor noise).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Tool configuration: per-category symmetry and loss weights plus [fit], [icp] and [ransac] sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Similarity (or rigid) transform between two corresponding point sets.
    SolveUmeyama(commands::SolveUmeyamaArgs),
    /// Refine a pose (and optionally the shape) against a silhouette mask.
    Fit(commands::FitArgs),
    /// Score predicted annotations against ground truth over a dataset.
    Eval(commands::EvalArgs),
    /// Carry keyframe annotations to every frame of a video.
    Propagate(commands::PropagateArgs),
    /// Write a synthetic RGB-D video with ground-truth poses.
    Synth(commands::SynthArgs),
    /// Check the renderer's analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Serve a dataset to the annotation frontend.
    Serve(commands::ServeArgs),
}

/// Exit status 2: the input was rejected. Exit status 1: the work itself failed.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<posekit::Error> for Failure {
    fn from(e: posekit::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::Context::new(cli.seed, cli.config.as_deref()).and_then(|ctx| match cli.command {
        Command::SolveUmeyama(a) => commands::solve_umeyama(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Propagate(a) => commands::propagate(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
