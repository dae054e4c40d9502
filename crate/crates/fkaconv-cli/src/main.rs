//! Command-line entry point: sampling benchmarks, voxel-rule validation,
//! training, gradient checks, inference, and filter-response export.
//!
//! Exit codes: 0 success, 1 assertion or check failure, 2 usage/config
//! error.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};

use fkaconv::Error;

#[derive(Parser)]
#[command(name = "fkaconv", version, about = "Point-cloud convolution workflows")]
struct Cli {
    /// Worker threads (overrides the FKAC_THREADS environment variable;
    /// defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the sampling strategies on uniform-cube clouds.
    SampleBench(commands::sample_bench::Args),
    /// Compare the voxel-size rule against the dichotomic optimum.
    VoxelRule(commands::voxel_rule::Args),
    /// Train a network from a JSON config.
    Train(commands::train::Args),
    /// Check analytic gradients against finite differences.
    Gradcheck(commands::gradcheck::Args),
    /// Classify or segment a point-cloud file with a checkpoint.
    Infer(commands::infer::Args),
    /// Export one filter's response at full resolution.
    FilterResponse(commands::filter_response::Args),
}

fn main() {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("FKAC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} threads: {e}");
            std::process::exit(2);
        }
    }

    let outcome = match cli.command {
        Command::SampleBench(args) => commands::sample_bench::run(args),
        Command::VoxelRule(args) => commands::voxel_rule::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::Infer(args) => commands::infer::run(args),
        Command::FilterResponse(args) => commands::filter_response::run(args),
    };

    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parameter(_) | Error::Cardinality { .. } => 2,
        _ => 1,
    }
}
