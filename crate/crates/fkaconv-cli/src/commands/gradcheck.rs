use std::path::PathBuf;

use clap::Parser;

use fkaconv::conv::gradchecks;
use fkaconv::gradcheck::{op_checks, Corruption, GradCheck};
use fkaconv::Result;

use crate::manifest::{self, RunManifest};

#[derive(Debug, Parser)]
pub struct Args {
    /// Comma-separated seeds to check.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,

    /// Optional report file (a manifest is written next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<i32> {
    let started = manifest::now_rfc3339();
    let seeds: Vec<u64> = super::parse_list(&args.seeds, "seeds")?;
    let mut lines = Vec::new();
    let mut all_passed = true;
    for &seed in &seeds {
        let mut checks: Vec<GradCheck> = op_checks(seed, Corruption::None)?;
        checks.extend(gradchecks::layer_checks(seed)?);
        for check in &checks {
            let status = if check.passed() { "pass" } else { "FAIL" };
            all_passed &= check.passed();
            lines.push(format!(
                "{status}  seed {seed}  {:<20}  max rel err {:>12.4e}  (tol {:.0e})",
                check.name, check.max_rel_err, check.tolerance
            ));
        }
    }
    let report = lines.join("\n") + "\n";
    print!("{report}");
    if all_passed {
        println!("all gradient checks passed");
    } else {
        println!("GRADIENT CHECK FAILURES, see above");
    }

    if let Some(out) = &args.out {
        manifest::write_atomic(out, report.as_bytes())?;
        manifest::write_manifest(
            &manifest::manifest_path(out, false),
            &RunManifest {
                command: "gradcheck".into(),
                args: serde_json::json!({ "seeds": seeds }),
                seed: seeds.first().copied().unwrap_or(0),
                build: manifest::build_id(),
                started,
                finished: manifest::now_rfc3339(),
                outputs: vec![out.display().to_string()],
            },
        )?;
    }
    Ok(if all_passed { 0 } else { 1 })
}
