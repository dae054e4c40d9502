use std::path::PathBuf;

use clap::Parser;

use fkaconv::io::{load_cloud, CloudFormat};
use fkaconv::net::{Network, Task};
use fkaconv::{Error, Result};

use crate::manifest::{self, RunManifest};

#[derive(Debug, Parser)]
pub struct Args {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Input cloud (ply or xyz).
    #[arg(long)]
    pub input: PathBuf,

    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,

    /// Stochastic voting passes (classification).
    #[arg(long, default_value_t = 1)]
    pub votes: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output CSV: class scores for classification, per-point labels
    /// for segmentation.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<i32> {
    let started = manifest::now_rfc3339();
    let format = match &args.format {
        Some(f) => CloudFormat::parse(f).ok_or_else(|| Error::Config {
            field: "format".into(),
            message: format!("unknown format `{f}`"),
        })?,
        None => CloudFormat::from_path(&args.input),
    };
    let cloud = load_cloud(&args.input, format)?;
    let (mut net, _) = Network::<f32>::load(&args.checkpoint)?;
    net.freeze();

    let csv = match net.config.task {
        Task::Classification => {
            let (label, scores) = net.classify(&cloud, args.votes, args.seed)?;
            println!("predicted class {label}");
            let mut csv = String::from("class,score\n");
            for (c, s) in scores.iter().enumerate() {
                csv.push_str(&format!("{c},{s}\n"));
            }
            csv
        }
        Task::Segmentation => {
            let labels = net.segment(&cloud, args.seed)?;
            let mut csv = String::from("x,y,z,label\n");
            for (p, l) in cloud.coords().iter().zip(&labels) {
                csv.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], l));
            }
            csv
        }
    };
    manifest::write_atomic(&args.out, csv.as_bytes())?;

    manifest::write_manifest(
        &manifest::manifest_path(&args.out, false),
        &RunManifest {
            command: "infer".into(),
            args: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "input": args.input.display().to_string(),
                "votes": args.votes,
            }),
            seed: args.seed,
            build: manifest::build_id(),
            started,
            finished: manifest::now_rfc3339(),
            outputs: vec![args.out.display().to_string()],
        },
    )?;
    Ok(0)
}
