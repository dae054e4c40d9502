//! End-to-end checks of the command-line surface: CSV row contracts,
//! manifests, exit codes, and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fkaconv"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fkaconv-cli-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn fkaconv")
}

fn tiny_train_config(dir: &Path, epochs: usize, lr: f64) -> PathBuf {
    let config = serde_json::json!({
        "network": {
            "task": "classification",
            "num_classes": 3,
            "n_points": 48,
            "stem_channels": 8,
            "blocks": [
                { "channels": 16, "support": 12 },
                { "channels": 16, "support": 6 }
            ],
            "k": 8,
            "k_kernel": 8,
            "seed": 0
        },
        "dataset": {
            "kind": "toy-classification",
            "n_per_class_train": 4,
            "n_per_class_test": 2,
            "n_points": 48,
            "train_seed": 10,
            "test_seed": 20
        },
        "epochs": epochs,
        "batch_size": 6,
        "lr": lr,
        "momentum": 0.9
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn sample_bench_row_contract() {
    let dir = workdir("bench");
    let out = dir.join("bench.csv");
    let output = run(bin()
        .args(["sample-bench", "--sizes", "512", "--repeats", "1", "--seed", "3"])
        .arg("--out")
        .arg(&out));
    assert!(output.status.success(), "{output:?}");
    let csv = read(&out);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,n_points,q_count,k,seed,elapsed_ms,iterations"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "one row per strategy");
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7);
        assert_eq!(fields[1], "512");
        assert_eq!(fields[2], "256");
        assert_eq!(fields[3], "16");
    }
    assert!(dir.join("bench.csv.manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&dir.join("bench.csv.manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "sample-bench");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn sample_bench_unknown_strategy_exits_2() {
    let dir = workdir("badstrat");
    let output = run(bin()
        .args(["sample-bench", "--sizes", "64", "--strategies", "warp"])
        .arg("--out")
        .arg(dir.join("x.csv")));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn voxel_rule_csv_and_empty_qcounts() {
    let dir = workdir("rule");
    let out = dir.join("rule.csv");
    let output = run(bin()
        .args([
            "voxel-rule",
            "--scenes",
            "2",
            "--q-counts",
            "32,64",
            "--n-points",
            "512",
            "--seed",
            "1",
        ])
        .arg("--out")
        .arg(&out));
    assert!(output.status.success(), "{output:?}");
    let csv = read(&out);
    assert_eq!(
        csv.lines().next().unwrap(),
        "scene_id,diag,q_count,v_rule,v_optimal,iterations"
    );
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let output = run(bin()
        .args(["voxel-rule", "--q-counts", "", "--scenes", "1"])
        .arg("--out")
        .arg(dir.join("y.csv")));
    assert_eq!(output.status.code(), Some(2), "empty q-counts is a usage error");
}

#[test]
fn train_writes_metrics_checkpoints_manifest() {
    let dir = workdir("train");
    let config = tiny_train_config(&dir, 2, 1e-3);
    let out_dir = dir.join("run");
    let output = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir));
    assert!(output.status.success(), "{output:?}");
    let metrics = read(&out_dir.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "epoch,loss,train_acc,test_acc");
    assert_eq!(metrics.lines().count(), 3);
    assert!(out_dir.join("final.ckpt").exists());
    assert!(out_dir.join("best.ckpt").exists());
    assert!(out_dir.join("manifest.json").exists());

    // resuming continues epoch numbering
    let resume_dir = dir.join("resumed");
    let output = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&resume_dir)
        .arg("--resume")
        .arg(out_dir.join("final.ckpt")));
    assert!(output.status.success(), "{output:?}");
    let metrics = read(&resume_dir.join("metrics.csv"));
    let first_row = metrics.lines().nth(1).unwrap();
    assert!(first_row.starts_with("3,"), "resumed epochs start at 3: {first_row}");
}

#[test]
fn train_invalid_config_field_exits_2() {
    let dir = workdir("badconfig");
    // a config with a growing support schedule
    let bad = r#"{
        "network": {
            "task": "classification", "num_classes": 3, "n_points": 48,
            "stem_channels": 8,
            "blocks": [ {"channels": 16, "support": 12}, {"channels": 16, "support": 24} ],
            "k": 8, "k_kernel": 8, "seed": 0
        },
        "dataset": { "kind": "toy-classification", "n_per_class_train": 2,
                     "n_per_class_test": 1, "n_points": 48,
                     "train_seed": 1, "test_seed": 2 },
        "epochs": 1, "batch_size": 4, "lr": 0.001, "momentum": 0.9
    }"#;
    let path = dir.join("bad.json");
    std::fs::write(&path, bad).unwrap();
    let output = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.join("run")));
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("blocks"), "error names the field: {stderr}");
}

#[test]
fn gradcheck_single_seed_passes() {
    let output = run(bin().args(["gradcheck", "--seeds", "0"]));
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("gate.alpha_beta"), "alpha/beta entries present");
    assert!(stdout.contains("fkaconv_stack"));
    assert!(stdout.contains("all gradient checks passed"));
}

#[test]
fn infer_and_filter_response_round_trip() {
    let dir = workdir("infer");
    let config = tiny_train_config(&dir, 1, 1e-3);
    let out_dir = dir.join("run");
    assert!(run(bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir))
    .status
    .success());

    // an input cloud as xyz
    let cloud_path = dir.join("probe.xyz");
    let mut body = String::new();
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..48 {
        body.push_str(&format!(
            "{} {} {}\n",
            rng.gen::<f64>(),
            rng.gen::<f64>(),
            rng.gen::<f64>()
        ));
    }
    std::fs::write(&cloud_path, body).unwrap();

    let pred = dir.join("pred.csv");
    let output = run(bin()
        .arg("infer")
        .arg("--checkpoint")
        .arg(out_dir.join("final.ckpt"))
        .arg("--input")
        .arg(&cloud_path)
        .args(["--votes", "3", "--seed", "7"])
        .arg("--out")
        .arg(&pred));
    assert!(output.status.success(), "{output:?}");
    let csv = read(&pred);
    assert_eq!(csv.lines().next().unwrap(), "class,score");
    assert_eq!(csv.lines().count(), 4, "three classes");
    assert!(String::from_utf8_lossy(&output.stdout).contains("predicted class"));

    // filter responses: N rows, [0,1], deterministic
    let resp1 = dir.join("resp1.csv");
    let resp2 = dir.join("resp2.csv");
    for resp in [&resp1, &resp2] {
        let output = run(bin()
            .arg("filter-response")
            .arg("--checkpoint")
            .arg(out_dir.join("final.ckpt"))
            .arg("--input")
            .arg(&cloud_path)
            .args(["--layer", "1", "--filter", "2", "--seed", "9"])
            .arg("--out")
            .arg(resp));
        assert!(output.status.success(), "{output:?}");
    }
    let a = read(&resp1);
    assert_eq!(a, read(&resp2), "same inputs give identical files");
    assert_eq!(a.lines().next().unwrap(), "x,y,z,response");
    assert_eq!(a.lines().count(), 49);
    for line in a.lines().skip(1) {
        let r: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    // out-of-range filter index is a usage error
    let output = run(bin()
        .arg("filter-response")
        .arg("--checkpoint")
        .arg(out_dir.join("final.ckpt"))
        .arg("--input")
        .arg(&cloud_path)
        .args(["--layer", "0", "--filter", "999", "--seed", "0"])
        .arg("--out")
        .arg(dir.join("bad.csv")));
    assert_eq!(output.status.code(), Some(2));
}
