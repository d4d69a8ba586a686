//! Ordering retrieved frames and the query into a model input sequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{relative_pose, CameraVector, Pose};
use crate::sim::scene::{mean_distance_to_centroid, FrameId, SceneDatabase};

/// Where the query sits in the sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Query first and used as the anchor; no pose tokens can be formed.
    #[serde(alias = "anchor")]
    QueryAsAnchor,
    /// Top-1 retrieved frame first as the anchor, query last.
    #[default]
    #[serde(alias = "last")]
    QueryLast,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::QueryAsAnchor => "anchor",
            Placement::QueryLast => "last",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" | "query_as_anchor" => Ok(Placement::QueryAsAnchor),
            "last" | "query_last" => Ok(Placement::QueryLast),
            other => Err(Error::Config(format!("unknown placement '{other}' (expected anchor|last)"))),
        }
    }
}

/// How source frames are tokenized under query-last placement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Known relative poses become pose tokens; the query gets the unknown token.
    #[default]
    Inject,
    /// Every frame gets the unknown token (pose-token ablation).
    UnknownEverywhere,
}

/// Pose information attached to a frame's camera token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameToken {
    /// Anchor-relative pose with translation divided by the sequence scale.
    Known { rel: Pose, fov: [f64; 2] },
    Unknown,
    /// Nothing is added to the camera token.
    Omitted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    /// Database id, `None` for the query.
    pub source: Option<FrameId>,
    /// World pose of database frames; `None` for the query.
    pub world_pose: Option<Pose>,
    pub fov: [f64; 2],
    pub token: FrameToken,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub frames: Vec<SequenceFrame>,
    pub anchor: usize,
    pub query: usize,
    pub placement: Placement,
    /// Translation normalizer: mean distance of the source camera centers to
    /// their centroid (1 when they coincide).
    pub scale: f64,
}

/// Below this the source centers are treated as coincident.
pub const MIN_SCALE: f64 = 1e-9;

pub fn source_scale<'a>(poses: impl Iterator<Item = &'a Pose> + Clone) -> f64 {
    let s = mean_distance_to_centroid(poses.map(|p| p.translation));
    if s > MIN_SCALE {
        s
    } else {
        1.0
    }
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Indices of the database frames.
    pub fn source_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames.len()).filter(move |&i| i != self.query)
    }

    pub fn pose_token_count(&self) -> usize {
        self.frames.iter().filter(|f| matches!(f.token, FrameToken::Known { .. })).count()
    }

    /// Anchor-relative ground-truth camera vectors with scale-normalized
    /// translations, given the query's true world pose.
    pub fn targets(&self, query_world: &Pose) -> Vec<CameraVector> {
        let world = |i: usize| self.frames[i].world_pose.unwrap_or(*query_world);
        let anchor = world(self.anchor);
        (0..self.frames.len())
            .map(|i| {
                let mut rel = if i == self.anchor {
                    Pose::identity()
                } else {
                    relative_pose(&anchor, &world(i))
                };
                rel.translation /= self.scale;
                CameraVector::from_pose(&rel, self.frames[i].fov)
            })
            .collect()
    }

    /// Anchor-relative relative poses in meters read off the true world
    /// poses, as a perfect network would predict them.
    pub fn oracle_predictions(&self, query_world: &Pose) -> Vec<CameraVector> {
        self.targets(query_world)
            .into_iter()
            .map(|mut c| {
                c.t *= self.scale;
                c
            })
            .collect()
    }
}

/// Builds the sequence for a query from its retrieved database ids (best
/// first). The top-1 frame is the anchor under query-last placement.
pub fn assemble(
    query_fov: [f64; 2],
    retrieved: &[FrameId],
    db: &SceneDatabase,
    placement: Placement,
    mode: TokenMode,
) -> Result<AssembledSequence> {
    if retrieved.is_empty() {
        return Err(Error::Empty("retrieved frames"));
    }
    let sources = retrieved
        .iter()
        .map(|&id| {
            db.get(id)
                .ok_or_else(|| Error::Precondition(format!("frame {id} is not in the database")))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = source_scale(sources.iter().map(|f| &f.pose));
    let query_frame = SequenceFrame {
        source: None,
        world_pose: None,
        fov: query_fov,
        token: FrameToken::Omitted,
    };
    let frames = match placement {
        Placement::QueryAsAnchor => std::iter::once(query_frame)
            .chain(sources.iter().map(|f| SequenceFrame {
                source: Some(f.id),
                world_pose: Some(f.pose),
                fov: f.fov,
                token: FrameToken::Omitted,
            }))
            .collect(),
        Placement::QueryLast => {
            let anchor = sources[0].pose;
            let mut frames: Vec<SequenceFrame> = sources
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let token = match mode {
                        TokenMode::Inject => {
                            let mut rel = if i == 0 {
                                Pose::identity()
                            } else {
                                relative_pose(&anchor, &f.pose)
                            };
                            rel.translation /= scale;
                            FrameToken::Known { rel, fov: f.fov }
                        }
                        TokenMode::UnknownEverywhere => FrameToken::Unknown,
                    };
                    SequenceFrame {
                        source: Some(f.id),
                        world_pose: Some(f.pose),
                        fov: f.fov,
                        token,
                    }
                })
                .collect();
            frames.push(SequenceFrame {
                token: FrameToken::Unknown,
                ..query_frame
            });
            frames
        }
    };
    let query = match placement {
        Placement::QueryAsAnchor => 0,
        Placement::QueryLast => retrieved.len(),
    };
    Ok(AssembledSequence {
        frames,
        anchor: 0,
        query,
        placement,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::retrieval::retrieve_topk;
    use crate::sim::scene::{generate_scene, SceneSpec};

    fn setup(placement: Placement) -> AssembledSequence {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let q = &scene.queries[0];
        let ids = retrieve_topk(&q.pose, &scene.db, 3).unwrap();
        let seq = assemble(q.fov, &ids, &scene.db, placement, TokenMode::Inject).unwrap();
        assert_eq!(seq.frames[if placement == Placement::QueryLast { 0 } else { 1 }].source, Some(ids[0]));
        seq
    }

    #[test]
    fn query_last_layout() {
        let seq = setup(Placement::QueryLast);
        assert_eq!((seq.len(), seq.query, seq.anchor), (4, 3, 0));
        assert_eq!(seq.pose_token_count(), 3);
        assert_eq!(seq.frames[3].token, FrameToken::Unknown);
        match seq.frames[0].token {
            FrameToken::Known { rel, .. } => assert_eq!(rel, Pose::identity()),
            _ => panic!("anchor needs a pose token"),
        }
    }

    #[test]
    fn query_as_anchor_layout() {
        let seq = setup(Placement::QueryAsAnchor);
        assert_eq!((seq.len(), seq.query, seq.anchor), (4, 0, 0));
        assert_eq!(seq.pose_token_count(), 0);
        assert!(seq.frames.iter().all(|f| f.token == FrameToken::Omitted));
    }

    #[test]
    fn ablation_mode_uses_unknown_tokens() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let q = &scene.queries[1];
        let ids = retrieve_topk(&q.pose, &scene.db, 5).unwrap();
        let seq = assemble(q.fov, &ids, &scene.db, Placement::QueryLast, TokenMode::UnknownEverywhere).unwrap();
        assert!(seq.frames.iter().all(|f| f.token == FrameToken::Unknown));
    }

    #[test]
    fn anchor_target_is_identity() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let q = &scene.queries[2];
        let ids = retrieve_topk(&q.pose, &scene.db, 4).unwrap();
        for placement in [Placement::QueryLast, Placement::QueryAsAnchor] {
            let seq = assemble(q.fov, &ids, &scene.db, placement, TokenMode::Inject).unwrap();
            let t = seq.targets(&q.pose);
            assert_eq!(t[seq.anchor].pose(), Pose::identity());
        }
    }

    #[test]
    fn bad_inputs() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        assert!(assemble([1.0, 1.0], &[], &scene.db, Placement::QueryLast, TokenMode::Inject).is_err());
        assert!(assemble([1.0, 1.0], &[999], &scene.db, Placement::QueryLast, TokenMode::Inject).is_err());
        assert!("sideways".parse::<Placement>().is_err());
        assert_eq!("anchor".parse::<Placement>().unwrap(), Placement::QueryAsAnchor);
    }

    #[test]
    fn single_source_falls_back_to_unit_scale() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let seq = assemble([1.0, 0.8], &[4], &scene.db, Placement::QueryLast, TokenMode::Inject).unwrap();
        assert_eq!(seq.scale, 1.0);
    }
}
