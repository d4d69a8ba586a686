//! Pose tokenizer: sinusoidal Fourier embeddings of a relative pose and field
//! of view, projected to model width by a two-layer MLP.
//!
//! The embedding of one pose is `γ(t) ‖ γ(q) ‖ γ(f)`, where for each level
//! `l` in ascending order `γ` emits `[sin(2^l π v₁..v_k), cos(2^l π v₁..v_k)]`.
//! The quaternion enters as `(w, x, y, z)` in canonical sign.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::block::LinearParams;
use crate::autodiff::{fourier_with_scales, Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::pose::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub translation_levels: usize,
    pub rotation_levels: usize,
    pub fov_levels: usize,
    /// Learn a multiplicative frequency factor per level (off: fixed `2^l π`).
    #[serde(default)]
    pub learnable_frequencies: bool,
}

impl Default for FourierSpec {
    fn default() -> Self {
        Self {
            translation_levels: 10,
            rotation_levels: 4,
            fov_levels: 4,
            learnable_frequencies: false,
        }
    }
}

impl FourierSpec {
    /// `3·2·L_t + 4·2·L_d + 2·2·L_f`; 108 for the defaults.
    pub fn embed_dim(&self) -> usize {
        6 * self.translation_levels + 8 * self.rotation_levels + 4 * self.fov_levels
    }

    /// Concatenated fixed-frequency embedding of one pose.
    pub fn embed(&self, rel: &Pose, fov: [f64; 2]) -> Vec<f64> {
        let q = rel.rotation.normalize().canonical();
        let mut out = Vec::with_capacity(self.embed_dim());
        out.extend(embed_fixed(rel.translation.as_slice(), self.translation_levels));
        out.extend(embed_fixed(&q.as_array(), self.rotation_levels));
        out.extend(embed_fixed(&fov, self.fov_levels));
        out
    }
}

fn embed_fixed(v: &[f64], levels: usize) -> Vec<f64> {
    fourier_with_scales(v, levels, &vec![1.0; levels])
}

/// `2kL`-dim embedding of a `k`-vector.
pub fn fourier_embed(v: &[f64], levels: usize) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(Error::Precondition("fourier_embed needs at least one level".into()));
    }
    Ok(embed_fixed(v, levels))
}

/// A model-width token.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseToken(pub Vec<f64>);

impl PoseToken {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoseTokenizer {
    pub spec: FourierSpec,
    pub hidden: LinearParams,
    pub output: LinearParams,
    /// Learned token for frames whose relative pose is unknown.
    pub unknown: ParamId,
    /// Per-group frequency factors (translation, rotation, fov) when learnable.
    pub frequency_scales: Option<[ParamId; 3]>,
    pub d_model: usize,
}

pub const DEFAULT_PROJECTOR_HIDDEN: usize = 256;

impl PoseTokenizer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: FourierSpec,
        hidden: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let group = ParamGroup::Tokenizer;
        let hidden_layer = LinearParams::init(store, "tokenizer.fc1", group, spec.embed_dim(), hidden, rng);
        let output = LinearParams::init(store, "tokenizer.fc2", group, hidden, d_model, rng);
        let unknown = store.insert("tokenizer.unknown", group, Tensor::randn(rng, 1, d_model, 0.02));
        let frequency_scales = spec.learnable_frequencies.then(|| {
            [
                ("translation", spec.translation_levels),
                ("rotation", spec.rotation_levels),
                ("fov", spec.fov_levels),
            ]
            .map(|(name, levels)| {
                store.insert(
                    format!("tokenizer.freq_scale.{name}"),
                    group,
                    Tensor::from_vec(1, levels, vec![1.0; levels]),
                )
            })
        });
        Self {
            spec,
            hidden: hidden_layer,
            output,
            unknown,
            frequency_scales,
            d_model,
        }
    }

    fn check_dims(&self, store: &ParamStore) -> Result<()> {
        let width = store.value(self.hidden.weight).rows();
        if width != self.spec.embed_dim() {
            return Err(Error::DimensionMismatch {
                context: "projector input width",
                expected: self.spec.embed_dim(),
                actual: width,
            });
        }
        Ok(())
    }

    /// Records the tokens of several `(relative pose, fov)` pairs as an
    /// `n × d_model` node. Translations must already be scale-normalized.
    pub fn tokens(&self, g: &mut Graph<'_>, poses: &[(Pose, [f64; 2])]) -> Result<NodeId> {
        self.check_dims(g.params())?;
        let embedding = match self.frequency_scales {
            None => {
                let data: Vec<f64> = poses.iter().flat_map(|(p, f)| self.spec.embed(p, *f)).collect();
                g.input(Tensor::from_vec(poses.len(), self.spec.embed_dim(), data))
            }
            Some([st, sq, sf]) => {
                let rows: Vec<NodeId> = poses
                    .iter()
                    .map(|(p, f)| {
                        let q = p.rotation.normalize().canonical().as_array();
                        let (st, sq, sf) = (g.param(st), g.param(sq), g.param(sf));
                        let a = g.fourier(p.translation.as_slice(), self.spec.translation_levels, Some(st));
                        let b = g.fourier(&q, self.spec.rotation_levels, Some(sq));
                        let c = g.fourier(f, self.spec.fov_levels, Some(sf));
                        g.concat_cols(&[a, b, c])
                    })
                    .collect();
                g.concat_rows(&rows)
            }
        };
        let h = self.hidden.apply(g, embedding);
        let h = g.gelu(h);
        Ok(self.output.apply(g, h))
    }

    pub fn unknown_node(&self, g: &mut Graph<'_>) -> NodeId {
        g.param(self.unknown)
    }

    pub fn make_pose_token(&self, store: &ParamStore, rel: &Pose, fov: [f64; 2]) -> Result<PoseToken> {
        let mut g = Graph::new(store);
        let node = self.tokens(&mut g, &[(*rel, fov)])?;
        Ok(PoseToken(g.value(node).data().to_vec()))
    }

    pub fn unknown_pose_token(&self, store: &ParamStore) -> PoseToken {
        PoseToken(store.value(self.unknown).data().to_vec())
    }
}
