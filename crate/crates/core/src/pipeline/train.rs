//! Dataset construction and two-stage training.
//!
//! Stage 1 updates only the pose tokenizer (projector MLP and unknown token).
//! Stage 2 additionally updates the attention blocks and the camera head.
//! The encoder embeddings stay frozen throughout. Each stage runs its own
//! learning-rate schedule: linear warmup followed by cosine decay.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{lower_median, AbsPoseErrors};
use crate::pose::{Pose, Quaternion};
use crate::sim::scene::Scene;

use super::assemble::{assemble, Placement, TokenMode};
use super::loss::DEFAULT_BETA;
use super::model::{Model, ModelConfig, SequenceInput};
use super::recover::recover_absolute;
use super::retrieval::retrieve_topk;

/// Training losses above this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// One supervised sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: SequenceInput,
    /// Anchor-relative targets per frame, translations in scale units.
    pub targets: Vec<[f64; 9]>,
    pub query_world: Pose,
}

/// Builds one sample per query of every scene.
pub fn build_samples(
    scenes: &[Scene],
    config: &ModelConfig,
    k: usize,
    placement: Placement,
    mode: TokenMode,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for scene in scenes {
        for q in &scene.queries {
            let ids = retrieve_topk(&q.pose, &scene.db, k)?;
            let seq = assemble(q.fov, &ids, &scene.db, placement, mode)?;
            let targets = seq.targets(&q.pose).iter().map(|c| c.to_array()).collect();
            out.push(Sample {
                input: SequenceInput::synthesize(seq, scene, &q.pose, config),
                targets,
                query_world: q.pose,
            });
        }
    }
    Ok(out)
}

/// Which parameter groups a stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage: u8,
    pub encoder: bool,
    pub tokenizer: bool,
    pub blocks: bool,
    pub head: bool,
}

impl TrainSchedule {
    pub fn stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Self {
                stage,
                encoder: false,
                tokenizer: true,
                blocks: false,
                head: false,
            }),
            2 => Ok(Self {
                stage,
                encoder: false,
                tokenizer: true,
                blocks: true,
                head: true,
            }),
            other => Err(Error::Config(format!("no training stage {other}"))),
        }
    }

    pub fn trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Tokenizer => self.tokenizer,
            ParamGroup::Blocks => self.blocks,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// Plain gradient descent without momentum.
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the stage's steps spent in linear warmup.
    pub warmup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub batch_size: usize,
    pub beta: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                epochs: 4,
                lr: 1e-2,
                warmup: 0.1,
            },
            stage2: StageConfig {
                epochs: 20,
                lr: 1e-2,
                warmup: 0.1,
            },
            batch_size: 8,
            beta: DEFAULT_BETA,
            optimizer: Optimizer::Sgd,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for s in [&self.stage1, &self.stage2] {
            if !(s.lr >= 0.0 && s.lr.is_finite()) || !(0.0..=1.0).contains(&s.warmup) {
                return Err(Error::Config("stage lr must be finite and nonnegative, warmup in [0, 1]".into()));
            }
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear warmup to `lr`, then cosine
/// decay to zero.
pub fn learning_rate(stage: &StageConfig, step: usize, total: usize) -> f64 {
    let warmup = (stage.warmup * total as f64).ceil() as usize;
    if step < warmup {
        return stage.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * stage.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `L_pose + β·L_R` summed over the frames of one sample.
pub fn sequence_loss(model: &Model, g: &mut Graph<'_>, sample: &Sample, beta: f64) -> Result<NodeId> {
    let pred = model.forward(g, &sample.input)?;
    let pose = g.pose_loss(pred, sample.targets.clone());
    let rotations = sample.targets.iter().map(|t| Quaternion::from_slice(&t[0..4])).collect();
    let rot = g.rotation_loss(pred, rotations);
    let rot = g.scale(rot, beta);
    Ok(g.add(pose, rot))
}

/// Mean per-sample loss.
pub fn mean_loss(model: &Model, samples: &[Sample], beta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new(&model.store);
        let loss = sequence_loss(model, &mut g, s, beta)?;
        total += g.value(loss).get(0, 0);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    /// Mean sample loss over the epoch's updates.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of the untrained model over the training set.
    pub initial_loss: f64,
    pub curve: Vec<EpochLoss>,
    /// Mean loss of the trained model over the training set.
    pub final_loss: f64,
}

struct AdamState {
    m: Tensor,
    v: Tensor,
}

/// Runs one stage, appending per-epoch mean losses (averaged over the
/// epoch's updates) to `curve`.
pub fn train_stage(
    model: &mut Model,
    samples: &[Sample],
    schedule: TrainSchedule,
    stage: &StageConfig,
    config: &TrainConfig,
    curve: &mut Vec<EpochLoss>,
) -> Result<()> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let trainable: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| schedule.trainable(p.group))
        .map(|(id, _)| id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (u64::from(schedule.stage) << 32));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * stage.epochs;
    let mut adam: HashMap<ParamId, AdamState> = HashMap::new();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut g = Graph::new(&model.store);
                let loss = sequence_loss(model, &mut g, &samples[i], config.beta)?;
                let value = g.value(loss).get(0, 0);
                if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: value,
                    });
                }
                batch_loss += value;
                let back = g.backward(loss)?;
                for &id in &trainable {
                    if let Some(gr) = back.param(id) {
                        match &mut grads[id.0] {
                            Some(acc) => acc.add_assign(gr),
                            slot => *slot = Some(gr.clone()),
                        }
                    }
                }
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            let mut sq = 0.0;
            for gr in grads.iter_mut().flatten() {
                gr.scale_assign(inv);
                sq += gr.data().iter().map(|x| x * x).sum::<f64>();
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: norm,
                });
            }
            let clip = match config.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let lr = learning_rate(stage, step, total_steps);
            step += 1;
            for (index, gr) in grads.iter().enumerate() {
                let Some(gr) = gr else { continue };
                let id = ParamId(index);
                let value = model.store.value_mut(id);
                match config.optimizer {
                    Optimizer::Sgd => {
                        for (w, d) in value.data_mut().iter_mut().zip(gr.data()) {
                            *w -= lr * clip * d;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let state = adam.entry(id).or_insert_with(|| AdamState {
                            m: Tensor::zeros(gr.rows(), gr.cols()),
                            v: Tensor::zeros(gr.rows(), gr.cols()),
                        });
                        let t = step as i32;
                        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                        let (m, v) = (state.m.data_mut(), state.v.data_mut());
                        for (j, w) in value.data_mut().iter_mut().enumerate() {
                            let d = clip * gr.data()[j];
                            m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                            v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        log::info!("stage {} epoch {epoch}: mean loss {mean:.4}", schedule.stage);
        curve.push(EpochLoss {
            stage: schedule.stage,
            epoch,
            mean_loss: mean,
        });
    }
    Ok(())
}

/// Stage 1 then stage 2, with full evaluations before and after.
pub fn train_toy(model: &mut Model, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let initial_loss = mean_loss(model, samples, config.beta)?;
    let mut curve = Vec::new();
    train_stage(model, samples, TrainSchedule::stage(1)?, &config.stage1, config, &mut curve)?;
    train_stage(model, samples, TrainSchedule::stage(2)?, &config.stage2, config, &mut curve)?;
    Ok(TrainReport {
        initial_loss,
        curve,
        final_loss: mean_loss(model, samples, config.beta)?,
    })
}

/// Recovered absolute query poses and their errors against ground truth.
pub fn relocalize_samples(model: &Model, samples: &[Sample]) -> Result<Vec<(Pose, AbsPoseErrors)>> {
    samples
        .iter()
        .map(|s| {
            let pred = model.predict(&s.input)?;
            let pose = recover_absolute(&pred, &s.input.seq)?;
            Ok((pose, AbsPoseErrors::between(&pose, &s.query_world)))
        })
        .collect()
}

/// Median translation (m) and rotation (degrees) errors over samples.
pub fn median_pose_errors(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let errs = relocalize_samples(model, samples)?;
    let t: Vec<f64> = errs.iter().map(|(_, e)| e.trans_err).collect();
    let r: Vec<f64> = errs.iter().map(|(_, e)| e.rot_err).collect();
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    Ok((lower_median(t), lower_median(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{generate_scene, SceneSpec};
    use crate::tokenizer::FourierSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            registers: 1,
            grid: 2,
            projector_hidden: 16,
            fourier: FourierSpec {
                translation_levels: 3,
                rotation_levels: 2,
                fov_levels: 1,
                learnable_frequencies: false,
            },
            ..ModelConfig::default()
        }
    }

    fn samples(config: &ModelConfig, scenes: u64) -> Vec<Sample> {
        let scenes: Vec<Scene> = (0..scenes)
            .map(|seed| {
                generate_scene(&SceneSpec {
                    seed,
                    n_queries: 5,
                    ..SceneSpec::default()
                })
                .unwrap()
            })
            .collect();
        build_samples(&scenes, config, 3, Placement::QueryLast, TokenMode::Inject).unwrap()
    }

    #[test]
    fn schedule_flags() {
        let s1 = TrainSchedule::stage(1).unwrap();
        assert!(s1.trainable(ParamGroup::Tokenizer));
        assert!(!s1.trainable(ParamGroup::Blocks) && !s1.trainable(ParamGroup::Head));
        let s2 = TrainSchedule::stage(2).unwrap();
        assert!(s2.trainable(ParamGroup::Blocks) && s2.trainable(ParamGroup::Head));
        assert!(!s2.trainable(ParamGroup::Encoder));
        assert!(TrainSchedule::stage(3).is_err());
    }

    #[test]
    fn warmup_then_cosine() {
        let stage = StageConfig {
            epochs: 1,
            lr: 1.0,
            warmup: 0.2,
        };
        assert!((learning_rate(&stage, 0, 10) - 0.5).abs() < 1e-12);
        assert!((learning_rate(&stage, 1, 10) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&stage, 2, 10) - 1.0).abs() < 1e-12);
        assert!(learning_rate(&stage, 9, 10) < learning_rate(&stage, 5, 10));
        assert!(learning_rate(&stage, 9, 10) > 0.0);
    }

    #[test]
    fn stage_one_leaves_frozen_groups_bitwise_unchanged() {
        let config = tiny();
        let data = samples(&config, 2);
        let mut model = Model::new(config, 1).unwrap();
        let before = model.store.clone();
        let train = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        let stage = StageConfig {
            epochs: 1,
            lr: 0.05,
            warmup: 0.0,
        };
        let mut curve = Vec::new();
        train_stage(&mut model, &data, TrainSchedule::stage(1).unwrap(), &stage, &train, &mut curve).unwrap();
        assert_eq!(data.len(), 10);
        let mut tokenizer_moved = false;
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            if a.group == ParamGroup::Tokenizer {
                tokenizer_moved |= a.value != b.value;
            } else {
                assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
            }
        }
        assert!(tokenizer_moved);
    }

    #[test]
    fn same_seed_same_curve() {
        let config = tiny();
        let data = samples(&config, 1);
        let train = TrainConfig {
            stage1: StageConfig {
                epochs: 1,
                lr: 0.01,
                warmup: 0.5,
            },
            stage2: StageConfig {
                epochs: 2,
                lr: 0.01,
                warmup: 0.5,
            },
            batch_size: 2,
            optimizer: Optimizer::adam(),
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(config.clone(), 4).unwrap();
            train_toy(&mut m, &data, &train).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_aborts() {
        let config = tiny();
        let data = samples(&config, 1);
        let mut model = Model::new(config, 2).unwrap();
        let train = TrainConfig {
            stage2: StageConfig {
                epochs: 3,
                lr: 1e9,
                warmup: 0.0,
            },
            clip_norm: None,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let err = train_toy(&mut model, &data, &train).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite { .. }), "{err:?}");
    }
}
