//! Residual networks over the convolution layer: a classification
//! encoder and a segmentation encoder-decoder, at configurable scale.
//!
//! The encoder is a full-resolution stem convolution followed by
//! residual blocks; blocks whose target support is smaller than their
//! input downsample with the space-quantization sampler. A residual
//! block is a linear layer into half the output width, the convolution,
//! and a linear layer back out, each followed by batch norm, with a
//! shortcut that max-pools over the new neighborhoods when the
//! resolution drops and passes through a projection when the widths
//! differ. The segmentation decoder walks back up the recorded scales
//! with nearest-neighbor upsampling, concatenating encoder skips.

mod train;

pub use train::{train, DatasetConfig, EpochRecord, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Graph, NodeId, ParamRegistry, Real, Shape, Tensor};
use crate::checkpoint::{self, NamedArray};
use crate::conv::{uniform_weight, ConvConfig, FkaConv, Gating, Normalization};
use crate::error::{Error, Result};
use crate::geometry::{nearest_indices, PointCloud};
use crate::sampling::quantized_sampling;
use crate::synth::mix_seed;

pub const CHECKPOINT_VERSION: u32 = 1;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// One residual block: output width and per-cloud support count after
/// the block (equal to the previous count means no downsampling).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Points per input cloud.
    pub n_points: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_k")]
    pub k_kernel: usize,
    #[serde(default = "default_momentum")]
    pub ema_momentum: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub gating: Gating,
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: usize,
    pub seed: u64,
}

fn default_in_channels() -> usize {
    1
}

fn default_k() -> usize {
    16
}

fn default_momentum() -> f64 {
    0.1
}

fn default_decoder_channels() -> usize {
    64
}

impl NetworkConfig {
    /// Desk-scale classification defaults: widths 32 -> 64 -> 128 with a
    /// support schedule scaled down proportionally from the paper-scale
    /// tail.
    pub fn desk_classification(n_points: usize, num_classes: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            task: Task::Classification,
            num_classes,
            n_points,
            in_channels: 1,
            stem_channels: 32,
            blocks: vec![
                BlockConfig {
                    channels: 64,
                    support: (n_points / 4).max(16),
                },
                BlockConfig {
                    channels: 128,
                    support: (n_points / 16).max(8),
                },
                BlockConfig {
                    channels: 128,
                    support: (n_points / 32).max(8),
                },
            ],
            k: 16,
            k_kernel: 16,
            ema_momentum: 0.1,
            normalization: Normalization::Ema,
            gating: Gating::Learned,
            decoder_channels: 64,
            seed,
        }
    }

    /// Desk-scale segmentation defaults.
    pub fn desk_segmentation(n_points: usize, num_classes: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            task: Task::Segmentation,
            ..NetworkConfig::desk_classification(n_points, num_classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if self.num_classes < 2 {
            return Err(fail("num_classes", "need at least 2 classes".into()));
        }
        if self.n_points < 8 {
            return Err(fail("n_points", "need at least 8 points".into()));
        }
        if self.stem_channels == 0 {
            return Err(fail("stem_channels", "must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(fail("blocks", "need at least one block".into()));
        }
        let mut prev = self.n_points;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.channels == 0 || block.channels % 2 != 0 {
                return Err(fail(
                    "blocks",
                    format!("block {i}: channels must be positive and even"),
                ));
            }
            if block.support == 0 || block.support > prev {
                return Err(fail(
                    "blocks",
                    format!(
                        "block {i}: support {} must stay in [1, {prev}] (non-increasing schedule)",
                        block.support
                    ),
                ));
            }
            prev = block.support;
        }
        if !(0.0 < self.ema_momentum && self.ema_momentum <= 1.0) {
            return Err(fail("ema_momentum", "must be in (0, 1]".into()));
        }
        for (name, v) in [("k", self.k), ("k_kernel", self.k_kernel)] {
            if v == 0 {
                return Err(fail(name, "must be positive".into()));
            }
        }
        Ok(())
    }

    fn conv_config(&self, in_channels: usize, out_channels: usize) -> ConvConfig {
        ConvConfig {
            in_channels,
            out_channels,
            k: self.k,
            k_kernel: self.k_kernel,
            ema_momentum: self.ema_momentum,
            normalization: self.normalization,
            gating: self.gating,
        }
    }
}

struct LinearLayer {
    w: NodeId,
    b: NodeId,
}

struct BnLayer<F: Real> {
    gamma: NodeId,
    beta: NodeId,
    state: BnState<F>,
}

fn register_linear<F: Real>(
    graph: &mut Graph<F>,
    registry: &mut ParamRegistry<F>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LinearLayer> {
    let w = registry.register(
        graph,
        format!("{prefix}.weight"),
        uniform_weight(rng, fan_in, fan_out, &[fan_in, fan_out]),
    )?;
    let b = registry.register(
        graph,
        format!("{prefix}.bias"),
        Tensor::zeros(Shape::new(&[fan_out])?),
    )?;
    Ok(LinearLayer { w, b })
}

fn register_bn<F: Real>(
    graph: &mut Graph<F>,
    registry: &mut ParamRegistry<F>,
    prefix: &str,
    width: usize,
) -> Result<BnLayer<F>> {
    let gamma = registry.register(
        graph,
        format!("{prefix}.gamma"),
        Tensor::full(Shape::new(&[width])?, F::one()),
    )?;
    let beta = registry.register(
        graph,
        format!("{prefix}.beta"),
        Tensor::zeros(Shape::new(&[width])?),
    )?;
    Ok(BnLayer {
        gamma,
        beta,
        state: BnState::new(width, BN_MOMENTUM),
    })
}

struct ResidualBlock<F: Real> {
    lin1: LinearLayer,
    bn1: BnLayer<F>,
    conv: FkaConv,
    bn2: BnLayer<F>,
    lin2: LinearLayer,
    bn3: BnLayer<F>,
    shortcut: Option<(LinearLayer, BnLayer<F>)>,
    in_channels: usize,
    out_channels: usize,
    support: usize,
}

struct DecoderLayer<F: Real> {
    lin: LinearLayer,
    bn: BnLayer<F>,
}

/// Per-batch geometry and features at one encoder scale.
struct Stage {
    clouds: Vec<PointCloud>,
    feats: NodeId,
}

/// Loss and correct-prediction count of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

fn row_bases(clouds: &[PointCloud]) -> Vec<u32> {
    let mut bases = Vec::with_capacity(clouds.len());
    let mut acc = 0u32;
    for c in clouds {
        bases.push(acc);
        acc += c.len() as u32;
    }
    bases
}

/// The trainable network: graph, parameters, and layer state.
pub struct Network<F: Real> {
    pub config: NetworkConfig,
    graph: Graph<F>,
    registry: ParamRegistry<F>,
    stem: FkaConv,
    stem_bn: BnLayer<F>,
    blocks: Vec<ResidualBlock<F>>,
    decoder: Vec<DecoderLayer<F>>,
    head: LinearLayer,
    watermark: usize,
    frozen: bool,
}

impl<F: Real> Network<F> {
    pub fn new(config: NetworkConfig) -> Result<Network<F>> {
        config.validate()?;
        let mut graph = Graph::new();
        let mut registry = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x1217));

        let stem = FkaConv::new(
            &mut graph,
            &mut registry,
            "stem.conv",
            config.conv_config(config.in_channels, config.stem_channels),
            &mut rng,
        )?;
        let stem_bn = register_bn(&mut graph, &mut registry, "stem.bn", config.stem_channels)?;

        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut in_ch = config.stem_channels;
        for (i, bc) in config.blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            let mid = bc.channels / 2;
            let lin1 = register_linear(
                &mut graph,
                &mut registry,
                &format!("{prefix}.lin1"),
                in_ch,
                mid,
                &mut rng,
            )?;
            let bn1 = register_bn(&mut graph, &mut registry, &format!("{prefix}.bn1"), mid)?;
            let conv = FkaConv::new(
                &mut graph,
                &mut registry,
                &format!("{prefix}.conv"),
                config.conv_config(mid, mid),
                &mut rng,
            )?;
            let bn2 = register_bn(&mut graph, &mut registry, &format!("{prefix}.bn2"), mid)?;
            let lin2 = register_linear(
                &mut graph,
                &mut registry,
                &format!("{prefix}.lin2"),
                mid,
                bc.channels,
                &mut rng,
            )?;
            let bn3 = register_bn(
                &mut graph,
                &mut registry,
                &format!("{prefix}.bn3"),
                bc.channels,
            )?;
            let shortcut = if in_ch != bc.channels {
                let lin = register_linear(
                    &mut graph,
                    &mut registry,
                    &format!("{prefix}.shortcut.lin"),
                    in_ch,
                    bc.channels,
                    &mut rng,
                )?;
                let bn = register_bn(
                    &mut graph,
                    &mut registry,
                    &format!("{prefix}.shortcut.bn"),
                    bc.channels,
                )?;
                Some((lin, bn))
            } else {
                None
            };
            blocks.push(ResidualBlock {
                lin1,
                bn1,
                conv,
                bn2,
                lin2,
                bn3,
                shortcut,
                in_channels: in_ch,
                out_channels: bc.channels,
                support: bc.support,
            });
            in_ch = bc.channels;
        }

        let mut decoder = Vec::new();
        if config.task == Task::Segmentation {
            // one unary layer per upsampling step: blocks map back to the
            // stem scale, each concatenating the encoder skip features
            let mut current = in_ch;
            let skips: Vec<usize> = std::iter::once(config.stem_channels)
                .chain(config.blocks.iter().map(|b| b.channels))
                .collect();
            for (j, skip_ch) in skips[..skips.len() - 1].iter().enumerate().rev() {
                let lin = register_linear(
                    &mut graph,
                    &mut registry,
                    &format!("decoder{j}.lin"),
                    current + skip_ch,
                    config.decoder_channels,
                    &mut rng,
                )?;
                let bn = register_bn(
                    &mut graph,
                    &mut registry,
                    &format!("decoder{j}.bn"),
                    config.decoder_channels,
                )?;
                decoder.push(DecoderLayer { lin, bn });
                current = config.decoder_channels;
            }
        }
        let head_in = match config.task {
            Task::Classification => in_ch,
            Task::Segmentation => config.decoder_channels,
        };
        let head = register_linear(
            &mut graph,
            &mut registry,
            "head",
            head_in,
            config.num_classes,
            &mut rng,
        )?;

        let watermark = graph.watermark();
        Ok(Network {
            config,
            graph,
            registry,
            stem,
            stem_bn,
            blocks,
            decoder,
            head,
            watermark,
            frozen: false,
        })
    }

    pub fn registry(&self) -> &ParamRegistry<F> {
        &self.registry
    }

    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    /// Drop all per-batch nodes, keeping parameters.
    pub fn reclaim(&mut self) {
        self.graph.truncate(self.watermark);
    }

    /// Mean over all convolution layers of (last batch radius) /
    /// (EMA radius), after at least one forward pass.
    pub fn ema_ratio_mean(&self) -> Option<f64> {
        let mut ratios = Vec::new();
        let mut push = |layer: &FkaConv| {
            if let (Some(batch), Some(ema)) = (layer.last_batch_radius(), layer.ema_radius()) {
                ratios.push(batch / ema);
            }
        };
        push(&self.stem);
        for block in &self.blocks {
            push(&block.conv);
        }
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }

    /// Multiply every layer's EMA radius by `factor` (tests of the
    /// fixed-point behavior start from a deliberately offset state).
    pub fn scale_ema_radii(&mut self, factor: f64) {
        let scale = |layer: &mut FkaConv| {
            if let Some(r) = layer.ema_radius() {
                layer.set_ema_radius(Some(r * factor));
            }
        };
        scale(&mut self.stem);
        for block in &mut self.blocks {
            scale(&mut block.conv);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.stem.freeze();
        for b in &mut self.blocks {
            b.conv.freeze();
        }
    }

    fn initial_features(&mut self, clouds: &[PointCloud]) -> Result<NodeId> {
        let total: usize = clouds.iter().map(|c| c.len()).sum();
        let fin = self.config.in_channels;
        if fin == 1 {
            return Ok(self
                .graph
                .constant(Tensor::full(Shape::new(&[total, 1])?, F::one())));
        }
        let mut data = Vec::with_capacity(total * fin);
        for cloud in clouds {
            let feats = cloud.features().ok_or_else(|| Error::Config {
                field: "in_channels".into(),
                message: format!("network expects {fin}-channel features on input clouds"),
            })?;
            if feats.width() != fin {
                return Err(Error::dims("input features", &[feats.width()], &[fin]));
            }
            data.extend(feats.data().iter().map(|&v| F::from_f64(v)));
        }
        Ok(self
            .graph
            .constant(Tensor::from_slice(&[total, fin], &data)?))
    }

    fn batch_norm(
        graph: &mut Graph<F>,
        bn: &mut BnLayer<F>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        graph.batch_norm(x, bn.gamma, bn.beta, &mut bn.state, training)
    }

    /// Encoder over a batch of clouds; returns the per-stage geometry and
    /// features (stage 0 is the stem output at full resolution).
    fn encode(
        &mut self,
        clouds: &[PointCloud],
        training: bool,
        sample_seed: u64,
    ) -> Result<Vec<Stage>> {
        if clouds.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        for cloud in clouds {
            if cloud.len() < self.config.n_points.min(self.blocks[0].support) {
                return Err(Error::EmptyInput(format!(
                    "cloud with {} points is below the schedule minimum",
                    cloud.len()
                )));
            }
        }
        if training && self.frozen {
            return Err(Error::Frozen("training forward on a frozen network".into()));
        }
        let feats0 = self.initial_features(clouds)?;

        // stem at full resolution
        let supports: Vec<Vec<u32>> = clouds
            .iter()
            .map(|c| (0..c.len() as u32).collect())
            .collect();
        let cloud_refs: Vec<&PointCloud> = clouds.iter().collect();
        let packed = crate::conv::pack_neighborhoods(&cloud_refs, &supports, self.config.k)?;
        let x = self
            .stem
            .forward_batch(&mut self.graph, &packed, feats0, training)?;
        let x = Self::batch_norm(&mut self.graph, &mut self.stem_bn, x, training)?;
        let x = self.graph.relu(x);

        let mut stages = vec![Stage {
            clouds: clouds.to_vec(),
            feats: x,
        }];

        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let current = &stages[bi];
            let x = current.feats;

            // supports for this block, sampled per cloud when downsampling
            let mut new_clouds = Vec::with_capacity(current.clouds.len());
            let mut supports = Vec::with_capacity(current.clouds.len());
            for (ci, cloud) in current.clouds.iter().enumerate() {
                let ids: Vec<u32> = if block.support < cloud.len() {
                    quantized_sampling(
                        cloud,
                        block.support,
                        mix_seed(sample_seed, ((bi as u64) << 32) | ci as u64),
                    )?
                    .selected
                } else {
                    (0..cloud.len() as u32).collect()
                };
                new_clouds.push(cloud.select(&ids)?);
                supports.push(ids);
            }
            let cloud_refs: Vec<&PointCloud> = current.clouds.iter().collect();
            let packed =
                crate::conv::pack_neighborhoods(&cloud_refs, &supports, block.conv.config().k)?;

            // main path: lin1 at input resolution, conv to the supports,
            // lin2 at the new resolution
            let graph = &mut self.graph;
            let main = graph.linear(x, block.lin1.w, block.lin1.b)?;
            let main = Self::batch_norm(graph, &mut block.bn1, main, training)?;
            let main = graph.relu(main);
            let main = block.conv.forward_batch(graph, &packed, main, training)?;
            let main = Self::batch_norm(graph, &mut block.bn2, main, training)?;
            let main = graph.relu(main);
            let main = graph.linear(main, block.lin2.w, block.lin2.b)?;
            let main = Self::batch_norm(graph, &mut block.bn3, main, training)?;

            // shortcut: neighborhood max-pool when the resolution drops,
            // projection when the widths differ
            let total_support: usize = supports.iter().map(|s| s.len()).sum();
            let total_points: usize = current.clouds.iter().map(|c| c.len()).sum();
            let mut shortcut = if total_support != total_points {
                let gathered = graph.gather(
                    x,
                    &packed.feat_indices,
                    &[total_support, block.conv.config().k],
                )?;
                let (pooled, _) = graph.max_axis(gathered, 1)?;
                pooled
            } else {
                x
            };
            if let Some((lin, bn)) = &mut block.shortcut {
                shortcut = graph.linear(shortcut, lin.w, lin.b)?;
                shortcut = graph.batch_norm(shortcut, bn.gamma, bn.beta, &mut bn.state, training)?;
            }
            debug_assert_eq!(block.in_channels != block.out_channels, {
                let _ = &block.shortcut;
                block.shortcut.is_some()
            });

            let summed = graph.add(main, shortcut)?;
            let out = graph.relu(summed);
            stages.push(Stage {
                clouds: new_clouds,
                feats: out,
            });
        }
        Ok(stages)
    }

    /// Classification logits for a batch: encoder, per-point head, mean
    /// over the final support points of each cloud.
    pub fn classification_logits(
        &mut self,
        clouds: &[PointCloud],
        training: bool,
        sample_seed: u64,
    ) -> Result<NodeId> {
        if self.config.task != Task::Classification {
            return Err(Error::Config {
                field: "task".into(),
                message: "classification_logits on a segmentation network".into(),
            });
        }
        let stages = self.encode(clouds, training, sample_seed)?;
        let last = stages.last().unwrap();
        let b = last.clouds.len();
        let s = last.clouds[0].len();
        let scores = self
            .graph
            .linear(last.feats, self.head.w, self.head.b)?;
        let grouped = self
            .graph
            .reshape(scores, &[b, s, self.config.num_classes])?;
        self.graph.mean_axis(grouped, 1)
    }

    /// Per-point segmentation logits for a batch (rows packed
    /// cloud-major at full resolution).
    pub fn segmentation_logits(
        &mut self,
        clouds: &[PointCloud],
        training: bool,
        sample_seed: u64,
    ) -> Result<NodeId> {
        if self.config.task != Task::Segmentation {
            return Err(Error::Config {
                field: "task".into(),
                message: "segmentation_logits on a classification network".into(),
            });
        }
        let stages = self.encode(clouds, training, sample_seed)?;
        let mut current = stages.last().unwrap().feats;
        // walk back up the scales: upsample, concatenate the skip, unary
        for (di, target) in (0..stages.len() - 1).rev().enumerate() {
            let coarse = &stages[target + 1];
            let fine = &stages[target];
            let coarse_bases = row_bases(&coarse.clouds);
            let mut idx: Vec<u32> = Vec::new();
            for (ci, fine_cloud) in fine.clouds.iter().enumerate() {
                let local =
                    nearest_indices(coarse.clouds[ci].coords(), fine_cloud.coords())?;
                idx.extend(local.iter().map(|&i| coarse_bases[ci] + i));
            }
            let rows = idx.len();
            let up = self.graph.gather(current, &idx, &[rows])?;
            let cat = self.graph.concat(&[up, fine.feats], 1)?;
            let layer = &mut self.decoder[di];
            let lin = self.graph.linear(cat, layer.lin.w, layer.lin.b)?;
            let bn = Self::batch_norm(&mut self.graph, &mut layer.bn, lin, training)?;
            current = self.graph.relu(bn);
        }
        self.graph.linear(current, self.head.w, self.head.b)
    }

    /// One optimizer step on a classification batch.
    pub fn train_step(
        &mut self,
        clouds: &[PointCloud],
        labels: &[u32],
        lr: f64,
        momentum: f64,
        sample_seed: u64,
    ) -> Result<StepStats> {
        let logits = self.classification_logits(clouds, true, sample_seed)?;
        self.step_on(logits, labels, lr, momentum)
    }

    /// One optimizer step on a segmentation batch (per-point labels,
    /// packed cloud-major).
    pub fn seg_train_step(
        &mut self,
        clouds: &[PointCloud],
        labels: &[u32],
        lr: f64,
        momentum: f64,
        sample_seed: u64,
    ) -> Result<StepStats> {
        let logits = self.segmentation_logits(clouds, true, sample_seed)?;
        self.step_on(logits, labels, lr, momentum)
    }

    fn step_on(
        &mut self,
        logits: NodeId,
        labels: &[u32],
        lr: f64,
        momentum: f64,
    ) -> Result<StepStats> {
        let loss = self.graph.cross_entropy(logits, labels)?;
        let value = self.graph.value(loss).item().as_f64();
        let correct = argmax_rows(self.graph.value(logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == **l)
            .count();
        self.graph.backward(loss)?;
        self.registry
            .sgd_step(&mut self.graph, F::from_f64(lr), F::from_f64(momentum))?;
        self.reclaim();
        Ok(StepStats {
            loss: value,
            correct,
        })
    }

    /// Mean loss and accuracy of a classification batch in eval mode.
    pub fn evaluate(
        &mut self,
        clouds: &[PointCloud],
        labels: &[u32],
        sample_seed: u64,
    ) -> Result<(f64, f64)> {
        let logits = self.classification_logits(clouds, false, sample_seed)?;
        self.eval_on(logits, labels)
    }

    /// Mean loss and per-point accuracy of a segmentation batch in eval
    /// mode.
    pub fn seg_evaluate(
        &mut self,
        clouds: &[PointCloud],
        labels: &[u32],
        sample_seed: u64,
    ) -> Result<(f64, f64)> {
        let logits = self.segmentation_logits(clouds, false, sample_seed)?;
        self.eval_on(logits, labels)
    }

    fn eval_on(&mut self, logits: NodeId, labels: &[u32]) -> Result<(f64, f64)> {
        let loss = self.graph.cross_entropy(logits, labels)?;
        let loss_value = self.graph.value(loss).item().as_f64();
        let correct = argmax_rows(self.graph.value(logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == **l)
            .count();
        let acc = correct as f64 / labels.len() as f64;
        self.reclaim();
        Ok((loss_value, acc))
    }

    /// Predicted label and mean scores over `n_votes` stochastic passes;
    /// the label is the majority of per-vote argmaxes (ties to the lowest
    /// class index).
    pub fn classify(
        &mut self,
        cloud: &PointCloud,
        n_votes: usize,
        seed: u64,
    ) -> Result<(u32, Vec<f64>)> {
        if n_votes == 0 {
            return Err(Error::Parameter("n_votes must be at least 1".into()));
        }
        let clouds = [cloud.clone()];
        let mut votes = vec![0usize; self.config.num_classes];
        let mut mean_scores = vec![0.0f64; self.config.num_classes];
        for vote in 0..n_votes {
            let logits = self.classification_logits(&clouds, false, mix_seed(seed, vote as u64))?;
            let row: Vec<f64> = self
                .graph
                .value(logits)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let label = argmax_f64(&row);
            votes[label as usize] += 1;
            for (m, v) in mean_scores.iter_mut().zip(&row) {
                *m += v / n_votes as f64;
            }
            self.reclaim();
        }
        let label = argmax_usize(&votes);
        Ok((label, mean_scores))
    }

    /// Per-point labels for one cloud (segmentation).
    pub fn segment(&mut self, cloud: &PointCloud, sample_seed: u64) -> Result<Vec<u32>> {
        let clouds = [cloud.clone()];
        let logits = self.segmentation_logits(&clouds, false, sample_seed)?;
        let out = argmax_rows(self.graph.value(logits));
        self.reclaim();
        Ok(out)
    }

    /// The selected filter's activation at `layer_index` (0 = stem
    /// output, i = block i output), upsampled to full resolution by
    /// nearest neighbor and min-max scaled to [0, 1] (a degenerate range
    /// maps to 0).
    pub fn filter_response(
        &mut self,
        cloud: &PointCloud,
        layer_index: usize,
        filter_index: usize,
        sample_seed: u64,
    ) -> Result<Vec<f64>> {
        let clouds = [cloud.clone()];
        let stages = self.encode(&clouds, false, sample_seed)?;
        if layer_index >= stages.len() {
            self.reclaim();
            return Err(Error::Parameter(format!(
                "layer index {layer_index} out of range ({} stages)",
                stages.len()
            )));
        }
        let stage = &stages[layer_index];
        let width = self.graph.value(stage.feats).dims()[1];
        if filter_index >= width {
            self.reclaim();
            return Err(Error::Parameter(format!(
                "filter index {filter_index} out of range ({width} channels)"
            )));
        }
        let feats = self.graph.value(stage.feats);
        let channel: Vec<f64> = (0..stage.clouds[0].len())
            .map(|r| feats.data()[r * width + filter_index].as_f64())
            .collect();
        let response = nearest_upsample(
            stage.clouds[0].coords(),
            &channel,
            1,
            cloud.coords(),
        )?;
        self.reclaim();
        Ok(min_max_scale(&response))
    }

    /// Run one training forward/backward and report, per parameter,
    /// whether any gradient entry is nonzero. Gradients are zeroed
    /// afterwards.
    pub fn gradient_presence(
        &mut self,
        clouds: &[PointCloud],
        labels: &[u32],
        sample_seed: u64,
    ) -> Result<Vec<(String, bool)>> {
        let logits = match self.config.task {
            Task::Classification => self.classification_logits(clouds, true, sample_seed)?,
            Task::Segmentation => self.segmentation_logits(clouds, true, sample_seed)?,
        };
        let loss = self.graph.cross_entropy(logits, labels)?;
        self.graph.backward(loss)?;
        let out = self
            .registry
            .iter()
            .map(|(name, node)| {
                let nonzero = self
                    .graph
                    .grad(node)
                    .map(|g| g.iter().any(|v| *v != F::zero()))
                    .unwrap_or(false);
                (name.to_string(), nonzero)
            })
            .collect();
        self.graph.zero_all_grads();
        self.reclaim();
        Ok(out)
    }

    // ---- persistence ----

    fn state_arrays(&self) -> Vec<NamedArray> {
        let mut arrays: Vec<NamedArray> = self
            .registry
            .iter()
            .map(|(name, node)| NamedArray::from_tensor(name, self.graph.value(node)))
            .collect();
        let mut push_bn = |prefix: &str, bn: &BnLayer<F>| {
            arrays.push(NamedArray {
                name: format!("{prefix}.running_mean"),
                dims: vec![bn.state.running_mean.len()],
                data: crate::checkpoint::ArrayData::F64(
                    bn.state.running_mean.iter().map(|v| v.as_f64()).collect(),
                ),
            });
            arrays.push(NamedArray {
                name: format!("{prefix}.running_var"),
                dims: vec![bn.state.running_var.len()],
                data: crate::checkpoint::ArrayData::F64(
                    bn.state.running_var.iter().map(|v| v.as_f64()).collect(),
                ),
            });
        };
        push_bn("stem.bn", &self.stem_bn);
        for (i, block) in self.blocks.iter().enumerate() {
            push_bn(&format!("block{i}.bn1"), &block.bn1);
            push_bn(&format!("block{i}.bn2"), &block.bn2);
            push_bn(&format!("block{i}.bn3"), &block.bn3);
            if let Some((_, bn)) = &block.shortcut {
                push_bn(&format!("block{i}.shortcut.bn"), bn);
            }
        }
        for (j, layer) in self.decoder.iter().enumerate() {
            push_bn(&format!("decoder{j}.bn"), &layer.bn);
        }
        if let Some(r) = self.stem.ema_radius() {
            arrays.push(NamedArray::scalar_f64("stem.conv.ema_radius", r));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(r) = block.conv.ema_radius() {
                arrays.push(NamedArray::scalar_f64(format!("block{i}.conv.ema_radius"), r));
            }
        }
        arrays
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, epoch: u64) -> Result<()> {
        let meta = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "epoch": epoch,
            "iteration": self.registry.iteration,
        });
        checkpoint::save_to_path(path, Some(&meta.to_string()), &self.state_arrays())
    }

    /// Load a network and its epoch counter from a checkpoint produced by
    /// [`Network::save`].
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Network<F>, u64)> {
        let (meta, arrays) = checkpoint::load_from_path(path)?;
        let meta = meta.ok_or_else(|| Error::Checkpoint("missing config metadata".into()))?;
        let meta: serde_json::Value = serde_json::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let config: NetworkConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let epoch = meta["epoch"].as_u64().unwrap_or(0);
        let iteration = meta["iteration"].as_u64().unwrap_or(0);
        let mut net = Network::new(config)?;
        net.registry.iteration = iteration;

        let by_name: std::collections::HashMap<String, &NamedArray> =
            arrays.iter().map(|a| (a.name.clone(), a)).collect();
        let mut values = std::collections::HashMap::new();
        for (name, _) in net.registry.iter() {
            let array = by_name.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter `{name}`"))
            })?;
            values.insert(name.to_string(), array.to_tensor::<F>()?);
        }
        net.registry.import(&mut net.graph, &values)?;

        let load_bn = |bn: &mut BnLayer<F>, prefix: &str| -> Result<()> {
            if let Some(a) = by_name.get(&format!("{prefix}.running_mean")) {
                bn.state.running_mean =
                    a.data.to_f64_vec().iter().map(|&v| F::from_f64(v)).collect();
            }
            if let Some(a) = by_name.get(&format!("{prefix}.running_var")) {
                bn.state.running_var =
                    a.data.to_f64_vec().iter().map(|&v| F::from_f64(v)).collect();
            }
            Ok(())
        };
        load_bn(&mut net.stem_bn, "stem.bn")?;
        for (i, block) in net.blocks.iter_mut().enumerate() {
            load_bn(&mut block.bn1, &format!("block{i}.bn1"))?;
            load_bn(&mut block.bn2, &format!("block{i}.bn2"))?;
            load_bn(&mut block.bn3, &format!("block{i}.bn3"))?;
            if let Some((_, bn)) = &mut block.shortcut {
                load_bn(bn, &format!("block{i}.shortcut.bn"))?;
            }
        }
        for (j, layer) in net.decoder.iter_mut().enumerate() {
            load_bn(&mut layer.bn, &format!("decoder{j}.bn"))?;
        }
        if let Some(a) = by_name.get("stem.conv.ema_radius") {
            net.stem.set_ema_radius(Some(a.data.to_f64_vec()[0]));
        }
        for (i, block) in net.blocks.iter_mut().enumerate() {
            if let Some(a) = by_name.get(&format!("block{i}.conv.ema_radius")) {
                block.conv.set_ema_radius(Some(a.data.to_f64_vec()[0]));
            }
        }
        Ok((net, epoch))
    }
}

/// Copy each fine point's feature row from its nearest coarse point
/// (ties to the lowest index).
pub fn nearest_upsample(
    coarse_coords: &[[f64; 3]],
    coarse_feats: &[f64],
    width: usize,
    fine_coords: &[[f64; 3]],
) -> Result<Vec<f64>> {
    if coarse_coords.is_empty() {
        return Err(Error::EmptyInput("nearest_upsample with no coarse points".into()));
    }
    if coarse_feats.len() != coarse_coords.len() * width {
        return Err(Error::dims(
            "nearest_upsample features",
            &[coarse_feats.len()],
            &[coarse_coords.len() * width],
        ));
    }
    let idx = nearest_indices(coarse_coords, fine_coords)?;
    let mut out = Vec::with_capacity(fine_coords.len() * width);
    for &i in &idx {
        out.extend_from_slice(&coarse_feats[i as usize * width..(i as usize + 1) * width]);
    }
    Ok(out)
}

/// Min-max scale to [0, 1]; a degenerate range maps everything to 0.
pub fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn argmax_f64(row: &[f64]) -> u32 {
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i as u32);
        }
    }
    best.1
}

fn argmax_usize(row: &[usize]) -> u32 {
    let mut best = (0usize, 0u32);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i as u32);
        }
    }
    best.1
}

fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<u32> {
    let c = t.dims()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = (row[0], 0u32);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best.0 {
                    best = (v, j as u32);
                }
            }
            best.1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, make_toy_classification, SceneKind, SceneSpec};

    fn tiny_cls_config(n_points: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            task: Task::Classification,
            num_classes: 3,
            n_points,
            in_channels: 1,
            stem_channels: 8,
            blocks: vec![
                BlockConfig { channels: 16, support: n_points / 4 },
                BlockConfig { channels: 16, support: n_points / 8 },
            ],
            k: 8,
            k_kernel: 8,
            ema_momentum: 0.1,
            normalization: Normalization::Ema,
            gating: Gating::Learned,
            decoder_channels: 16,
            seed,
        }
    }

    fn tiny_seg_config(n_points: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            task: Task::Segmentation,
            ..tiny_cls_config(n_points, seed)
        }
    }

    fn toy_batch(n: usize, n_points: usize, seed: u64) -> (Vec<PointCloud>, Vec<u32>) {
        let data = make_toy_classification(n, n_points, seed).unwrap();
        let clouds: Vec<PointCloud> = data.iter().map(|(c, _)| c.clone()).collect();
        let labels: Vec<u32> = data.iter().map(|(_, l)| *l).collect();
        (clouds, labels)
    }

    #[test]
    fn classification_logits_shape() {
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 0)).unwrap();
        let (clouds, _) = toy_batch(2, 64, 0);
        let logits = net.classification_logits(&clouds, true, 0).unwrap();
        assert_eq!(net.graph().value(logits).dims(), &[6, 3]);
    }

    #[test]
    fn segmentation_logits_full_resolution() {
        let mut net: Network<f32> = Network::new(tiny_seg_config(64, 0)).unwrap();
        let cloud = generate(&SceneSpec::new(SceneKind::PlanarRoom, 200, 0.0, 1)).unwrap();
        let logits = net.segmentation_logits(&[cloud.clone()], true, 0).unwrap();
        assert_eq!(net.graph().value(logits).dims(), &[200, 3]);
    }

    #[test]
    fn residual_identity_when_main_path_zeroed() {
        // One block with in == out channels and no downsampling: zeroing
        // lin2 makes the block output relu(shortcut) = relu(x).
        let config = NetworkConfig {
            task: Task::Classification,
            num_classes: 2,
            n_points: 32,
            in_channels: 1,
            stem_channels: 16,
            blocks: vec![BlockConfig { channels: 16, support: 32 }],
            k: 8,
            k_kernel: 8,
            ema_momentum: 0.1,
            normalization: Normalization::Ema,
            gating: Gating::Learned,
            decoder_channels: 8,
            seed: 3,
        };
        let mut net: Network<f32> = Network::new(config).unwrap();
        let w = net.registry.node("block0.lin2.weight").unwrap();
        let n = net.graph.value(w).numel();
        net.graph.set_leaf_value(w, &vec![0.0f32; n]).unwrap();
        let cloud = generate(&SceneSpec::new(SceneKind::Sphere, 32, 0.02, 5)).unwrap();
        let stages = net.encode(&[cloud], true, 0).unwrap();
        let stem_out = net.graph.value(stages[0].feats).clone();
        let block_out = net.graph.value(stages[1].feats).clone();
        // relu is idempotent on the already-relu'd stem output
        for (a, b) in stem_out.data().iter().zip(block_out.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 1)).unwrap();
        let (clouds, labels) = toy_batch(2, 64, 3);
        let presence = net.gradient_presence(&clouds, &labels, 0).unwrap();
        let dead: Vec<&str> = presence
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(n, _)| n.as_str())
            .collect();
        assert!(dead.is_empty(), "zero-gradient parameters: {dead:?}");
        // alpha and beta explicitly among the live ones
        assert!(presence.iter().any(|(n, ok)| n == "stem.conv.alpha" && *ok));
        assert!(presence.iter().any(|(n, ok)| n == "stem.conv.beta" && *ok));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 7)).unwrap();
        let (clouds, labels) = toy_batch(2, 64, 11);
        net.train_step(&clouds, &labels, 1e-3, 0.9, 0).unwrap();
        let probe = generate(&SceneSpec::new(SceneKind::Cube, 64, 0.01, 9)).unwrap();
        let before = {
            let logits = net.classification_logits(&[probe.clone()], false, 42).unwrap();
            let bits: Vec<u32> = net
                .graph()
                .value(logits)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            net.reclaim();
            bits
        };
        let path = std::env::temp_dir().join(format!("fkaconv-net-{}.ckpt", std::process::id()));
        net.save(&path, 1).unwrap();
        let (mut restored, epoch) = Network::<f32>::load(&path).unwrap();
        assert_eq!(epoch, 1);
        let after = {
            let logits = restored
                .classification_logits(&[probe], false, 42)
                .unwrap();
            let bits: Vec<u32> = restored
                .graph()
                .value(logits)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            bits
        };
        assert_eq!(before, after);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn classify_deterministic_single_vote() {
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 2)).unwrap();
        let (clouds, labels) = toy_batch(2, 64, 5);
        net.train_step(&clouds, &labels, 1e-3, 0.9, 0).unwrap();
        let probe = clouds[0].clone();
        let (l1, s1) = net.classify(&probe, 1, 9).unwrap();
        let (l2, s2) = net.classify(&probe, 1, 9).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn duplicated_cloud_same_support_positions_and_label() {
        // Duplicating every point leaves the sampler's selected
        // positions identical (ties resolve to the first copy); the
        // k-NN neighborhoods change multiplicity, so only the label is
        // asserted stable, not the raw scores.
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 4)).unwrap();
        let (clouds, labels) = toy_batch(2, 64, 6);
        net.train_step(&clouds, &labels, 1e-3, 0.9, 0).unwrap();
        let cloud = clouds[0].clone();
        let doubled = {
            let mut coords = cloud.coords().to_vec();
            coords.extend_from_slice(cloud.coords());
            PointCloud::new(coords).unwrap()
        };
        let report = quantized_sampling(&cloud, 16, 3).unwrap();
        let report2 = quantized_sampling(&doubled, 16, 3).unwrap();
        let pos = |c: &PointCloud, ids: &[u32]| {
            let mut v: Vec<[f64; 3]> = ids.iter().map(|&i| c.point(i as usize)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        assert_eq!(pos(&cloud, &report.selected), pos(&doubled, &report2.selected));
        let (l1, _) = net.classify(&cloud, 1, 5).unwrap();
        let (l2, _) = net.classify(&doubled, 1, 5).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn nearest_upsample_contracts() {
        // single coarse point: every fine point copies it
        let coarse = [[0.0, 0.0, 0.0]];
        let fine = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let up = nearest_upsample(&coarse, &[7.5], 1, &fine).unwrap();
        assert_eq!(up, vec![7.5, 7.5]);

        // coincident fine point copies exactly that coarse point
        let coarse = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let feats = [1.0, 2.0];
        let up = nearest_upsample(&coarse, &feats, 1, &[[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(up, vec![2.0]);

        // random instance against a brute-force scan
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let coarse: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let feats: Vec<f64> = (0..20).map(|_| rng.gen()).collect();
        let fine: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let up = nearest_upsample(&coarse, &feats, 1, &fine).unwrap();
        for (f, u) in fine.iter().zip(&up) {
            let mut best = (f64::INFINITY, 0usize);
            for (i, c) in coarse.iter().enumerate() {
                let d = (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2) + (f[2] - c[2]).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(*u, feats[best.1]);
        }
    }

    #[test]
    fn filter_response_full_length_and_range() {
        let mut net: Network<f32> = Network::new(tiny_cls_config(64, 5)).unwrap();
        let (clouds, labels) = toy_batch(2, 64, 8);
        net.train_step(&clouds, &labels, 1e-3, 0.9, 0).unwrap();
        let cloud = clouds[0].clone();
        let response = net.filter_response(&cloud, 1, 3, 0).unwrap();
        assert_eq!(response.len(), cloud.len());
        assert!(response.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(net.filter_response(&cloud, 9, 0, 0).is_err());
        assert!(net.filter_response(&cloud, 0, 99, 0).is_err());
    }

    #[test]
    fn min_max_scale_degenerate_maps_to_zero() {
        assert_eq!(min_max_scale(&[2.5, 2.5, 2.5]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation_rejects_growing_schedule() {
        let mut config = tiny_cls_config(64, 0);
        config.blocks[1].support = 64; // grows past block 0's support
        let err = config.validate().unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn zero_lr_training_loss_constant() {
        // One batch per epoch keeps every stochastic input (sampling,
        // batch statistics, EMA radius) identical across epochs, so a
        // zero learning rate reproduces the loss bit for bit.
        let config = TrainConfig {
            network: tiny_cls_config(48, 6),
            dataset: DatasetConfig::ToyClassification {
                n_per_class_train: 2,
                n_per_class_test: 1,
                n_points: 48,
                train_seed: 100,
                test_seed: 200,
            },
            epochs: 3,
            batch_size: 6,
            lr: 0.0,
            momentum: 0.9,
        };
        let mut net: Network<f32> = Network::new(config.network.clone()).unwrap();
        let outcome = train(&mut net, &config, 0, |_, _| Ok(())).unwrap();
        let losses: Vec<f64> = outcome.records.iter().map(|r| r.loss).collect();
        for w in losses.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-6, "losses varied: {losses:?}");
        }
    }

    #[test]
    fn single_class_segmentation_saturates() {
        let config = TrainConfig {
            network: tiny_seg_config(64, 9),
            dataset: DatasetConfig::SingleClassPlanes {
                n_train: 6,
                n_test: 2,
                n_points: 64,
                train_seed: 300,
                test_seed: 400,
            },
            epochs: 5,
            batch_size: 3,
            lr: 1e-2,
            momentum: 0.9,
        };
        let mut net: Network<f32> = Network::new(config.network.clone()).unwrap();
        let outcome = train(&mut net, &config, 0, |_, _| Ok(())).unwrap();
        assert!(
            outcome.final_test_acc >= 0.99,
            "single-class accuracy {}",
            outcome.final_test_acc
        );
        // and a fresh single-class scene is labeled that class
        let fresh = generate(&SceneSpec::new(SceneKind::Plane, 64, 0.01, 500)).unwrap();
        let labels = net.segment(&fresh, 1).unwrap();
        let frac = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
        assert!(frac >= 0.99, "fraction labeled class 0: {frac}");
    }

    #[test]
    fn resumed_epoch_numbering_continues() {
        let config = TrainConfig {
            network: tiny_cls_config(48, 12),
            dataset: DatasetConfig::ToyClassification {
                n_per_class_train: 2,
                n_per_class_test: 1,
                n_points: 48,
                train_seed: 1,
                test_seed: 2,
            },
            epochs: 2,
            batch_size: 6,
            lr: 1e-3,
            momentum: 0.9,
        };
        let mut net: Network<f32> = Network::new(config.network.clone()).unwrap();
        let first = train(&mut net, &config, 0, |_, _| Ok(())).unwrap();
        assert_eq!(first.records.last().unwrap().epoch, 2);
        let resumed = train(&mut net, &config, 2, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.records.first().unwrap().epoch, 3);
    }
}
