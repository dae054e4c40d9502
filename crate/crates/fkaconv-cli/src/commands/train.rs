use std::path::PathBuf;

use clap::Parser;

use fkaconv::net::{train, Network, TrainConfig};
use fkaconv::{Error, Result};

use crate::manifest::{self, RunManifest};

#[derive(Debug, Parser)]
pub struct Args {
    /// Training config JSON (network, dataset, optimizer).
    #[arg(long)]
    pub config: PathBuf,

    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Resume from a checkpoint; epoch numbering continues.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Override the network seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: Args) -> Result<i32> {
    let started = manifest::now_rfc3339();
    let raw = std::fs::read_to_string(&args.config)?;
    let mut config: TrainConfig = serde_json::from_str(&raw).map_err(|e| Error::Config {
        field: e.to_string(),
        message: "could not parse training config".into(),
    })?;
    if let Some(seed) = args.seed {
        config.network.seed = seed;
    }
    config.validate()?;

    std::fs::create_dir_all(&args.out_dir)?;
    let (mut net, start_epoch) = match &args.resume {
        Some(path) => Network::<f32>::load(path)?,
        None => (Network::<f32>::new(config.network.clone())?, 0),
    };

    let metrics_path = args.out_dir.join("metrics.csv");
    let best_path = args.out_dir.join("best.ckpt");
    let final_path = args.out_dir.join("final.ckpt");
    let mut metrics = String::from("epoch,loss,train_acc,test_acc\n");
    let mut best_acc = f64::NEG_INFINITY;
    let outcome = train(&mut net, &config, start_epoch, |net, record| {
        println!(
            "epoch {:4}  loss {:.4}  train_acc {:.3}  test_acc {:.3}",
            record.epoch, record.loss, record.train_acc, record.test_acc
        );
        metrics.push_str(&format!(
            "{},{},{},{}\n",
            record.epoch, record.loss, record.train_acc, record.test_acc
        ));
        if record.test_acc > best_acc {
            best_acc = record.test_acc;
            net.save(&best_path, record.epoch)?;
        }
        Ok(())
    })?;
    net.save(&final_path, start_epoch + config.epochs as u64)?;
    manifest::write_atomic(&metrics_path, metrics.as_bytes())?;

    manifest::write_manifest(
        &manifest::manifest_path(&args.out_dir, true),
        &RunManifest {
            command: "train".into(),
            args: serde_json::to_value(&config)
                .map_err(|e| Error::Parameter(format!("config echo: {e}")))?,
            seed: config.network.seed,
            build: manifest::build_id(),
            started,
            finished: manifest::now_rfc3339(),
            outputs: vec![
                metrics_path.display().to_string(),
                best_path.display().to_string(),
                final_path.display().to_string(),
            ],
        },
    )?;
    println!(
        "best test accuracy {:.3} at epoch {}; final {:.3}",
        outcome.best_test_acc, outcome.best_epoch, outcome.final_test_acc
    );
    Ok(0)
}
