//! Training loop over the toy datasets.
//!
//! Epoch structure is deliberately replayable: the shuffle is drawn once
//! and per-batch sampling seeds do not depend on the epoch, so a zero
//! learning rate reproduces identical losses epoch over epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Network, Task};
use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::synth::{generate, make_toy_classification, mix_seed, SceneKind, SceneSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Balanced spheres/cubes/planes with per-cloud labels.
    ToyClassification {
        n_per_class_train: usize,
        n_per_class_test: usize,
        n_points: usize,
        train_seed: u64,
        test_seed: u64,
    },
    /// Planar rooms with per-point face labels (segmentation).
    PlanarRooms {
        n_train: usize,
        n_test: usize,
        n_points: usize,
        train_seed: u64,
        test_seed: u64,
    },
    /// Planes whose points all carry label 0 (segmentation smoke data).
    SingleClassPlanes {
        n_train: usize,
        n_test: usize,
        n_points: usize,
        train_seed: u64,
        test_seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: super::NetworkConfig,
    pub dataset: DatasetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config {
                field: "epochs".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size".into(),
                message: "must be at least 1".into(),
            });
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config {
                field: "lr".into(),
                message: format!("must be a non-negative number, got {}", self.lr),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: u64,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
}

/// Cloud plus its supervision (one label per cloud for classification,
/// one per point for segmentation).
type Sample = (PointCloud, Vec<u32>);

fn build_dataset(config: &DatasetConfig, train: bool) -> Result<Vec<Sample>> {
    match config {
        DatasetConfig::ToyClassification {
            n_per_class_train,
            n_per_class_test,
            n_points,
            train_seed,
            test_seed,
        } => {
            let (n, seed) = if train {
                (*n_per_class_train, *train_seed)
            } else {
                (*n_per_class_test, *test_seed)
            };
            Ok(make_toy_classification(n, *n_points, seed)?
                .into_iter()
                .map(|(cloud, label)| (cloud, vec![label]))
                .collect())
        }
        DatasetConfig::PlanarRooms {
            n_train,
            n_test,
            n_points,
            train_seed,
            test_seed,
        } => {
            let (n, seed) = if train {
                (*n_train, *train_seed)
            } else {
                (*n_test, *test_seed)
            };
            (0..n)
                .map(|i| {
                    let cloud = generate(&SceneSpec::new(
                        SceneKind::PlanarRoom,
                        *n_points,
                        0.01,
                        mix_seed(seed, i as u64),
                    ))?;
                    let labels: Vec<u32> = cloud
                        .labels()
                        .expect("planar rooms are labeled")
                        .iter()
                        .map(|&l| l as u32)
                        .collect();
                    Ok((cloud, labels))
                })
                .collect()
        }
        DatasetConfig::SingleClassPlanes {
            n_train,
            n_test,
            n_points,
            train_seed,
            test_seed,
        } => {
            let (n, seed) = if train {
                (*n_train, *train_seed)
            } else {
                (*n_test, *test_seed)
            };
            (0..n)
                .map(|i| {
                    let cloud = generate(&SceneSpec::new(
                        SceneKind::Plane,
                        *n_points,
                        0.01,
                        mix_seed(seed, i as u64),
                    ))?;
                    let labels = vec![0u32; cloud.len()];
                    Ok((cloud, labels))
                })
                .collect()
        }
    }
}

fn batch_views(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn batch_inputs(samples: &[Sample], ids: &[usize], per_point: bool) -> (Vec<PointCloud>, Vec<u32>) {
    let clouds: Vec<PointCloud> = ids.iter().map(|&i| samples[i].0.clone()).collect();
    let labels: Vec<u32> = if per_point {
        ids.iter().flat_map(|&i| samples[i].1.clone()).collect()
    } else {
        ids.iter().map(|&i| samples[i].1[0]).collect()
    };
    (clouds, labels)
}

/// Train `net` per `config`, starting epoch numbering at `start_epoch`
/// (for resumed runs). `on_epoch` fires after each epoch with the
/// freshly evaluated record.
pub fn train<F: Real>(
    net: &mut Network<F>,
    config: &TrainConfig,
    start_epoch: u64,
    mut on_epoch: impl FnMut(&Network<F>, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let per_point = net.config.task == Task::Segmentation;
    let train_set = build_dataset(&config.dataset, true)?;
    let test_set = build_dataset(&config.dataset, false)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyInput("empty train or test split".into()));
    }

    // one fixed shuffle: batches repeat across epochs by design
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(net.config.seed, 0xBA7C));
    order.shuffle(&mut rng);
    let batches = batch_views(&order, config.batch_size);

    let mut records = Vec::with_capacity(config.epochs);
    let mut best = (start_epoch, 0.0f64);
    let mut final_test = 0.0f64;
    for e in 0..config.epochs {
        let epoch = start_epoch + e as u64 + 1;
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, ids) in batches.iter().enumerate() {
            let (clouds, labels) = batch_inputs(&train_set, ids, per_point);
            let seed = mix_seed(net.config.seed, 0x5A00 + bi as u64);
            let stats = if per_point {
                net.seg_train_step(&clouds, &labels, config.lr, config.momentum, seed)?
            } else {
                net.train_step(&clouds, &labels, config.lr, config.momentum, seed)?
            };
            loss_sum += stats.loss * labels.len() as f64;
            correct += stats.correct;
            seen += labels.len();
        }
        let train_loss = loss_sum / seen as f64;
        let train_acc = correct as f64 / seen as f64;

        let mut test_correct = 0usize;
        let mut test_seen = 0usize;
        let test_ids: Vec<usize> = (0..test_set.len()).collect();
        for (bi, ids) in batch_views(&test_ids, config.batch_size).iter().enumerate() {
            let (clouds, labels) = batch_inputs(&test_set, ids, per_point);
            let seed = mix_seed(net.config.seed, 0xE7A100 + bi as u64);
            let (_, acc) = if per_point {
                net.seg_evaluate(&clouds, &labels, seed)?
            } else {
                net.evaluate(&clouds, &labels, seed)?
            };
            test_correct += (acc * labels.len() as f64).round() as usize;
            test_seen += labels.len();
        }
        let test_acc = test_correct as f64 / test_seen as f64;
        final_test = test_acc;
        if test_acc > best.1 {
            best = (epoch, test_acc);
        }
        let record = EpochRecord {
            epoch,
            loss: train_loss,
            train_acc,
            test_acc,
        };
        on_epoch(net, &record)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        best_epoch: best.0,
        best_test_acc: best.1,
        final_test_acc: final_test,
    })
}
