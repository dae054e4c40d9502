use std::path::PathBuf;

use clap::Parser;

use fkaconv::sampling::run_voxel_rule;
use fkaconv::synth::SceneKind;
use fkaconv::{Error, Result};

use crate::manifest::{self, RunManifest};

#[derive(Debug, Parser)]
pub struct Args {
    /// Number of seeded scenes.
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,

    /// Comma-separated support counts.
    #[arg(long, default_value = "64,256,1024")]
    pub q_counts: String,

    /// Points per scene.
    #[arg(long, default_value_t = 4096)]
    pub n_points: usize,

    /// Scene kind: planar-room, plane, sphere, cube, uniform-cube.
    #[arg(long, default_value = "planar-room")]
    pub kind: String,

    /// Bisection tolerance, relative to the scene diagonal.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<i32> {
    let started = manifest::now_rfc3339();
    let q_counts: Vec<usize> = super::parse_list(&args.q_counts, "q_counts")?;
    let kind = SceneKind::parse(&args.kind).ok_or_else(|| Error::Config {
        field: "kind".into(),
        message: format!("unknown scene kind `{}`", args.kind),
    })?;
    if let Some(&bad) = q_counts.iter().find(|&&q| q > args.n_points) {
        return Err(Error::Config {
            field: "q_counts".into(),
            message: format!("{bad} exceeds the scene size {}", args.n_points),
        });
    }

    let rows = run_voxel_rule(
        kind,
        args.scenes,
        args.n_points,
        &q_counts,
        args.tolerance,
        args.seed,
    )?;
    let mut csv = String::from("scene_id,diag,q_count,v_rule,v_optimal,iterations\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.scene_id, row.diag, row.q_count, row.v_rule, row.v_optimal, row.iterations
        ));
    }
    manifest::write_atomic(&args.out, csv.as_bytes())?;

    manifest::write_manifest(
        &manifest::manifest_path(&args.out, false),
        &RunManifest {
            command: "voxel-rule".into(),
            args: serde_json::json!({
                "scenes": args.scenes,
                "q_counts": q_counts,
                "n_points": args.n_points,
                "kind": args.kind,
                "tolerance": args.tolerance,
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
