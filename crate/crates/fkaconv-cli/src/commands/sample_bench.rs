use std::path::PathBuf;

use clap::Parser;

use fkaconv::sampling::{run_sampling_bench, Strategy};
use fkaconv::{Error, Result};

use crate::manifest::{self, RunManifest};

#[derive(Debug, Parser)]
pub struct Args {
    /// Comma-separated input sizes.
    #[arg(long, default_value = "1000,5000,10000")]
    pub sizes: String,

    /// Comma-separated strategies: random, quantized, fps, rejection.
    #[arg(long, default_value = "random,quantized,fps,rejection")]
    pub strategies: String,

    /// Timed repetitions per row (median reported).
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,

    /// Neighborhood size built for the selected supports.
    #[arg(long, default_value_t = 16)]
    pub k: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<i32> {
    let started = manifest::now_rfc3339();
    let sizes: Vec<usize> = super::parse_list(&args.sizes, "sizes")?;
    let strategies: Vec<Strategy> = args
        .strategies
        .split(',')
        .map(|s| {
            Strategy::parse(s.trim()).ok_or_else(|| Error::Config {
                field: "strategies".into(),
                message: format!("unknown strategy `{s}`"),
            })
        })
        .collect::<Result<_>>()?;

    let rows = run_sampling_bench(&sizes, &strategies, args.repeats, args.k, args.seed)?;
    let mut csv = String::from("strategy,n_points,q_count,k,seed,elapsed_ms,iterations\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{}\n",
            row.strategy.name(),
            row.n_points,
            row.q_count,
            row.k,
            row.seed,
            row.elapsed_ms,
            row.iterations
        ));
    }
    manifest::write_atomic(&args.out, csv.as_bytes())?;

    let manifest_file = manifest::manifest_path(&args.out, false);
    manifest::write_manifest(
        &manifest_file,
        &RunManifest {
            command: "sample-bench".into(),
            args: serde_json::json!({
                "sizes": sizes,
                "strategies": strategies.iter().map(|s| s.name()).collect::<Vec<_>>(),
                "repeats": args.repeats,
                "k": args.k,
            }),
            seed: args.seed,
            build: manifest::build_id(),
            started,
            finished: manifest::now_rfc3339(),
            outputs: vec![args.out.display().to_string()],
        },
    )?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(0)
}
