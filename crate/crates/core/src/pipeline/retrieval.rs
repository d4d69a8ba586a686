//! Top-K database retrieval by a view-similarity score.
//!
//! There is no image model here: the score compares camera geometry, using
//! the query's ground-truth pose as a proxy for appearance similarity.

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::sim::scene::{FrameId, SceneDatabase};

/// Weight of the normalized center distance in the score.
pub const DISTANCE_WEIGHT: f64 = 0.5;

/// `cos(angle between optical axes) − λ·‖Δc‖ / scene_scale`.
pub fn view_similarity(query: &Pose, frame: &Pose, scene_scale: f64) -> f64 {
    let cos = query.optical_axis().dot(&frame.optical_axis()).clamp(-1.0, 1.0);
    cos - DISTANCE_WEIGHT * (query.translation - frame.translation).norm() / scene_scale
}

/// Scale used to normalize center distances; 1 when the database is a
/// single point.
pub fn retrieval_scale(db: &SceneDatabase) -> f64 {
    let s = db.scene_scale();
    if s > 1e-9 {
        s
    } else {
        1.0
    }
}

/// Ids of the `k` highest-scoring database frames, best first. Ties go to
/// the smaller id. Asking for more frames than the database holds returns
/// all of them with a warning.
pub fn retrieve_topk(query: &Pose, db: &SceneDatabase, k: usize) -> Result<Vec<FrameId>> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    if db.is_empty() {
        return Err(Error::Empty("database"));
    }
    if k > db.len() {
        log::warn!("requested {k} frames from a database of {}; returning all", db.len());
    }
    let scale = retrieval_scale(db);
    let mut scored: Vec<(f64, FrameId)> = db
        .frames
        .iter()
        .map(|f| (view_similarity(query, &f.pose, scale), f.id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}
