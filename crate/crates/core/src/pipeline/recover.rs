//! Absolute query pose from anchor-relative predictions.

use crate::error::{Error, Result};
use crate::pose::{motion_average, CameraVector, Pose, TranslationAverage};

use super::assemble::{AssembledSequence, Placement};

/// One absolute-pose candidate per database frame. Predictions are
/// anchor-relative with translations in meters.
pub fn pose_candidates(pred: &[CameraVector], seq: &AssembledSequence) -> Result<Vec<Pose>> {
    if pred.len() != seq.len() {
        return Err(Error::DimensionMismatch {
            context: "predictions per sequence frame",
            expected: seq.len(),
            actual: pred.len(),
        });
    }
    let rel = |i: usize| pred[i].pose();
    seq.source_indices()
        .map(|k| {
            let world = seq.frames[k]
                .world_pose
                .ok_or_else(|| Error::Precondition(format!("frame {k} has no world pose")))?;
            Ok(match seq.placement {
                Placement::QueryLast => world.compose(&rel(k).inverse().compose(&rel(seq.query))),
                Placement::QueryAsAnchor => world.compose(&rel(k).inverse()),
            })
        })
        .collect()
}

pub fn recover_absolute(pred: &[CameraVector], seq: &AssembledSequence) -> Result<Pose> {
    let candidates = pose_candidates(pred, seq)?;
    motion_average(&candidates, None, TranslationAverage::Median)
}
