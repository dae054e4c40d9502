use std::path::PathBuf;

use clap::Parser;

use fkaconv::io::{load_cloud, CloudFormat};
use fkaconv::net::Network;
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

    /// Encoder stage: 0 is the stem output, i is residual block i.
    #[arg(long)]
    pub layer: usize,

    /// Channel within the stage.
    #[arg(long)]
    pub filter: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output CSV: x,y,z,response at full resolution, scaled to [0,1].
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
    let response = net.filter_response(&cloud, args.layer, args.filter, args.seed)?;

    let mut csv = String::from("x,y,z,response\n");
    for (p, r) in cloud.coords().iter().zip(&response) {
        csv.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], r));
    }
    manifest::write_atomic(&args.out, csv.as_bytes())?;

    manifest::write_manifest(
        &manifest::manifest_path(&args.out, false),
        &RunManifest {
            command: "filter-response".into(),
            args: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "input": args.input.display().to_string(),
                "layer": args.layer,
                "filter": args.filter,
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
