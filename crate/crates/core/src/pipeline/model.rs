//! The toy relocalization network.
//!
//! Each frame contributes one camera token, `R` register tokens and `P`
//! patch tokens. The camera token is a frozen base embedding (one for the
//! anchor, one for every other frame) plus the frame's pose token when one
//! is injected. `L` alternating frame/global blocks follow, then a final
//! norm and a linear head that reads every camera token into a 9-vector:
//! quaternion, scale-normalized translation and field of view, all relative
//! to the anchor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use nalgebra::Vector3;

use crate::attention::block::{alternating_block, BlockLayouts, BlockParams, LinearParams, NormParams};
use crate::attention::mask::{build_mask, MaskStrategy, DEFAULT_DILATION};
use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::pose::{CameraVector, Pose};
use crate::sim::features::synth_features;
use crate::sim::scene::Scene;
use crate::tokenizer::{FourierSpec, PoseTokenizer, DEFAULT_PROJECTOR_HIDDEN};

use super::assemble::{AssembledSequence, FrameToken};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub registers: usize,
    /// Patch grid side; `P = grid²`.
    pub grid: usize,
    pub projector_hidden: usize,
    #[serde(default)]
    pub fourier: FourierSpec,
    pub mask_strategy: MaskStrategy,
    pub dilation: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            registers: 1,
            grid: 3,
            projector_hidden: DEFAULT_PROJECTOR_HIDDEN,
            fourier: FourierSpec::default(),
            mask_strategy: MaskStrategy::Sparse,
            dilation: DEFAULT_DILATION,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.registers + self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("grid", self.grid),
            ("projector_hidden", self.projector_hidden),
            ("dilation", self.dilation),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let f = &self.fourier;
        if f.translation_levels == 0 || f.rotation_levels == 0 || f.fov_levels == 0 {
            return Err(Error::Config("every Fourier band needs at least one level".into()));
        }
        Ok(())
    }
}

/// An assembled sequence with its patch tokens (`grid² × d_model` per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput {
    pub seq: AssembledSequence,
    pub patches: Vec<Tensor>,
}

impl SequenceInput {
    /// Synthesizes patch features for every frame. The query frame is
    /// imaged from `query_world`.
    pub fn synthesize(seq: AssembledSequence, scene: &Scene, query_world: &Pose, config: &ModelConfig) -> Self {
        let patches = seq
            .frames
            .iter()
            .map(|f| {
                let pose = f.world_pose.unwrap_or(*query_world);
                synth_features(&pose, f.fov, &scene.landmarks, config.d_model, config.grid).tokens
            })
            .collect();
        Self { seq, patches }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: PoseTokenizer,
    pub anchor_camera: ParamId,
    pub other_camera: ParamId,
    pub register_tokens: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: NormParams,
    pub head: LinearParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let anchor_camera = store.insert("encoder.camera_anchor", ParamGroup::Encoder, Tensor::randn(&mut rng, 1, d, 1.0));
        let other_camera = store.insert("encoder.camera_other", ParamGroup::Encoder, Tensor::randn(&mut rng, 1, d, 1.0));
        let register_tokens = store.insert(
            "encoder.registers",
            ParamGroup::Encoder,
            Tensor::randn(&mut rng, config.registers, d, 1.0),
        );
        let tokenizer = PoseTokenizer::init(&mut store, config.fourier, config.projector_hidden, d, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| BlockParams::init(&mut store, &format!("blocks.{l}"), d, &mut rng))
            .collect();
        let final_norm = NormParams::init(&mut store, "head.norm", ParamGroup::Head, d);
        let head = LinearParams::init(&mut store, "head.camera", ParamGroup::Head, d, CameraVector::DIM, &mut rng);
        Ok(Self {
            config,
            store,
            tokenizer,
            anchor_camera,
            other_camera,
            register_tokens,
            blocks,
            final_norm,
            head,
        })
    }

    fn check_input(&self, input: &SequenceInput) -> Result<()> {
        let n = input.seq.len();
        if n == 0 {
            return Err(Error::Empty("sequence"));
        }
        if input.patches.len() != n {
            return Err(Error::DimensionMismatch {
                context: "patch sets per frame",
                expected: n,
                actual: input.patches.len(),
            });
        }
        for p in &input.patches {
            if p.shape() != (self.config.patches(), self.config.d_model) {
                return Err(Error::DimensionMismatch {
                    context: "patch token count",
                    expected: self.config.patches(),
                    actual: p.rows(),
                });
            }
        }
        Ok(())
    }

    /// Records the forward pass and returns the `n × 9` raw prediction node.
    pub fn forward(&self, g: &mut Graph<'_>, input: &SequenceInput) -> Result<NodeId> {
        self.check_input(input)?;
        let seq = &input.seq;
        let n = seq.len();
        let known: Vec<(usize, (Pose, [f64; 2]))> = seq
            .frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| match f.token {
                FrameToken::Known { rel, fov } => Some((i, (rel, fov))),
                _ => None,
            })
            .collect();
        let pose_tokens = if known.is_empty() {
            None
        } else {
            let poses: Vec<(Pose, [f64; 2])> = known.iter().map(|(_, p)| *p).collect();
            Some(self.tokenizer.tokens(g, &poses)?)
        };
        let registers = g.param(self.register_tokens);
        let mut parts = Vec::with_capacity(3 * n);
        for (i, frame) in seq.frames.iter().enumerate() {
            let base = g.param(if i == seq.anchor { self.anchor_camera } else { self.other_camera });
            let camera = match frame.token {
                FrameToken::Known { .. } => {
                    let row = known.iter().position(|(j, _)| *j == i).expect("known frame listed");
                    let token = g.select_rows(pose_tokens.expect("tokens recorded"), vec![row]);
                    g.add(base, token)
                }
                FrameToken::Unknown => {
                    let token = self.tokenizer.unknown_node(g);
                    g.add(base, token)
                }
                FrameToken::Omitted => base,
            };
            parts.push(camera);
            parts.push(registers);
            parts.push(g.input(input.patches[i].clone()));
        }
        let mut x = g.concat_rows(&parts);
        let mask = build_mask(self.config.mask_strategy, n, seq.anchor, seq.query, self.config.dilation)?;
        let t = self.config.tokens_per_frame();
        let layouts = BlockLayouts::new(&mask, t);
        for (layer, block) in self.blocks.iter().enumerate() {
            x = alternating_block(g, x, &layouts, block, self.config.heads);
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite { layer });
            }
        }
        let cameras = g.select_rows(x, (0..n).map(|i| i * t).collect());
        let h = self.final_norm.apply(g, cameras);
        let out = self.head.apply(g, h);
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite { layer: self.blocks.len() });
        }
        Ok(out)
    }

    /// Raw `n × 9` outputs (quaternion unnormalized, translation in scale units).
    pub fn raw_predictions(&self, input: &SequenceInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).clone())
    }

    /// Anchor-relative camera vectors with unit quaternions and translations
    /// in meters.
    pub fn predict(&self, input: &SequenceInput) -> Result<Vec<CameraVector>> {
        let raw = self.raw_predictions(input)?;
        Ok((0..raw.rows()).map(|r| decode_prediction(raw.row(r), input.seq.scale)).collect())
    }
}

/// Normalizes the quaternion (floor 1e-12 on its norm) and rescales the
/// translation to meters.
pub fn decode_prediction(row: &[f64], scale: f64) -> CameraVector {
    let norm = row[0..4].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    CameraVector {
        q: crate::pose::Quaternion::new(row[0] / norm, row[1] / norm, row[2] / norm, row[3] / norm),
        t: Vector3::new(row[4], row[5], row[6]) * scale,
        fov: [row[7], row[8]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::assemble::{assemble, Placement, TokenMode};
    use crate::pipeline::retrieval::retrieve_topk;
    use crate::sim::scene::{generate_scene, SceneSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            registers: 1,
            grid: 2,
            projector_hidden: 16,
            fourier: FourierSpec {
                translation_levels: 2,
                rotation_levels: 2,
                fov_levels: 1,
                learnable_frequencies: false,
            },
            ..ModelConfig::default()
        }
    }

    fn input(config: &ModelConfig, placement: Placement, k: usize) -> SequenceInput {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let q = &scene.queries[0];
        let ids = retrieve_topk(&q.pose, &scene.db, k).unwrap();
        let seq = assemble(q.fov, &ids, &scene.db, placement, TokenMode::Inject).unwrap();
        SequenceInput::synthesize(seq, &scene, &q.pose, config)
    }

    #[test]
    fn untrained_outputs_are_finite_unit_quaternions() {
        for strategy in MaskStrategy::ALL {
            let config = ModelConfig {
                mask_strategy: strategy,
                ..tiny_config()
            };
            let model = Model::new(config.clone(), 3).unwrap();
            for placement in [Placement::QueryLast, Placement::QueryAsAnchor] {
                let preds = model.predict(&input(&config, placement, 4)).unwrap();
                assert_eq!(preds.len(), 5);
                for p in preds {
                    assert!(p.to_array().iter().all(|x| x.is_finite()));
                    assert!((p.q.norm() - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            heads: 3,
            ..tiny_config()
        };
        assert!(Model::new(bad, 0).is_err());
        let bad = ModelConfig {
            layers: 0,
            ..tiny_config()
        };
        assert!(Model::new(bad, 0).is_err());
    }

    #[test]
    fn wrong_patch_shape_rejected() {
        let config = tiny_config();
        let model = Model::new(config.clone(), 0).unwrap();
        let mut inp = input(&config, Placement::QueryLast, 3);
        inp.patches[1] = Tensor::zeros(3, config.d_model);
        assert!(model.predict(&inp).is_err());
        inp.patches.pop();
        assert!(model.predict(&inp).is_err());
    }

    #[test]
    fn exploding_weights_report_layer() {
        let config = tiny_config();
        let mut model = Model::new(config.clone(), 0).unwrap();
        let w = model.blocks[1].frame_ffn.expand.weight;
        model.store.value_mut(w).data_mut()[0] = f64::INFINITY;
        let err = model.predict(&input(&config, Placement::QueryLast, 3)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1 }), "{err:?}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(), 9).unwrap();
        let b = Model::new(tiny_config(), 9).unwrap();
        assert_eq!(a.store, b.store);
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::tests::tiny_config;
    use super::*;
    use crate::pipeline::assemble::{assemble, Placement, TokenMode};
    use crate::pipeline::retrieval::retrieve_topk;
    use crate::pipeline::train::{build_samples, sequence_loss};
    use crate::sim::scene::{generate_scene, SceneSpec};

    #[test]
    fn query_output_depends_on_query_patches() {
        let config = tiny_config();
        let model = Model::new(config.clone(), 5).unwrap();
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let q = &scene.queries[0];
        let ids = retrieve_topk(&q.pose, &scene.db, 3).unwrap();
        let seq = assemble(q.fov, &ids, &scene.db, Placement::QueryLast, TokenMode::Inject).unwrap();
        let mut input = SequenceInput::synthesize(seq, &scene, &q.pose, &config);
        let before = model.raw_predictions(&input).unwrap();
        input.patches[3].data_mut()[0] += 1.0;
        let after = model.raw_predictions(&input).unwrap();
        assert!(before.row(3).iter().zip(after.row(3)).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn every_group_matches_finite_differences() {
        let config = tiny_config();
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let samples = build_samples(&[scene], &config, 3, Placement::QueryLast, TokenMode::Inject).unwrap();
        let model = Model::new(config, 11).unwrap();
        let sample = &samples[0];
        let mut g = Graph::new(&model.store);
        let loss = sequence_loss(&model, &mut g, sample, 1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        let eval = |store: &ParamStore| {
            let m = Model {
                store: store.clone(),
                ..model.clone()
            };
            let mut g = Graph::new(&m.store);
            let l = sequence_loss(&m, &mut g, sample, 1.0).unwrap();
            g.value(l).get(0, 0)
        };
        let mut checked = 0;
        for (id, p) in model.store.iter() {
            if p.group == ParamGroup::Encoder {
                continue;
            }
            let n = p.value.data().len();
            for j in [0, n / 2, n - 1] {
                let h = 1e-5;
                let mut plus = model.store.clone();
                plus.value_mut(id).data_mut()[j] += h;
                let mut minus = model.store.clone();
                minus.value_mut(id).data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.param(id).map_or(0.0, |t| t.data()[j]);
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3),
                    "{}[{j}]: fd {fd} analytic {an}",
                    p.name
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
