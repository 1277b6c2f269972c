//! `spinodoid`: sampling, homogenization, training, evaluation and inverse
//! design from the command line.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::*;

/// Spinodoid metamaterial pipeline.
#[derive(Debug, Parser)]
#[command(name = "spinodoid", version, about)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SPINODOID_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw structure parameters with a biased Latin hypercube.
    Sample(SampleArgs),
    /// Generate geometries and compute effective stiffness tensors.
    Homogenize(HomogenizeArgs),
    /// Fit the surrogate with multiple random restarts.
    Train(TrainArgs),
    /// Evaluate a model on a dataset and export correlation pairs.
    Eval(EvalArgs),
    /// Solve an inverse design problem over all seven subdomains.
    Design(DesignArgs),
    /// Directional Young's modulus over a Fibonacci sphere lattice.
    Surface(SurfaceArgs),
    /// Surrogate stiffness along a one-parameter sweep.
    Sweep(SweepArgs),
    /// Write the voxel geometry of one parameter tuple.
    Geometry(GeometryArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let invocation = invocation();
    let outcome = match cli.command {
        Command::Sample(a) => cmd_sample(&a, &invocation),
        Command::Homogenize(a) => cmd_homogenize(&a, &invocation),
        Command::Train(a) => cmd_train(&a, &invocation),
        Command::Eval(a) => cmd_eval(&a, &invocation),
        Command::Design(a) => cmd_design(&a, &invocation),
        Command::Surface(a) => cmd_surface(&a, &invocation),
        Command::Sweep(a) => cmd_sweep(&a, &invocation),
        Command::Geometry(a) => cmd_geometry(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Program name plus arguments, without the binary's path.
fn invocation() -> String {
    std::iter::once("spinodoid".to_string()).chain(std::env::args().skip(1)).collect::<Vec<_>>().join(" ")
}
