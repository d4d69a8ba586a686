//! Relocalization and relative-pose evaluation metrics.
//!
//! Angular quantities are reported in degrees, translations in meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{relative_pose, rotation_geodesic_error, translation_angular_error, Pose};

/// Angular errors of one evaluated image pair, degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairErrors {
    pub rot_err: f64,
    pub trans_ang_err: f64,
}

impl PairErrors {
    /// Errors of an estimated relative pose against the ground-truth one.
    pub fn between(estimate: &Pose, truth: &Pose) -> Self {
        Self {
            rot_err: rotation_geodesic_error(&estimate.rotation_matrix(), &truth.rotation_matrix())
                .to_degrees(),
            trans_ang_err: translation_angular_error(&estimate.translation, &truth.translation)
                .to_degrees(),
        }
    }

    pub fn aggregate(&self, aggregator: Aggregator) -> f64 {
        match aggregator {
            Aggregator::Max => self.rot_err.max(self.trans_ang_err),
            Aggregator::Min => self.rot_err.min(self.trans_ang_err),
        }
    }
}

/// Absolute-pose errors of one query: camera-center distance and geodesic
/// rotation error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbsPoseErrors {
    pub trans_err: f64,
    pub rot_err: f64,
}

impl AbsPoseErrors {
    pub fn between(estimate: &Pose, truth: &Pose) -> Self {
        Self {
            trans_err: (estimate.translation - truth.translation).norm(),
            rot_err: rotation_geodesic_error(&estimate.rotation_matrix(), &truth.rotation_matrix())
                .to_degrees(),
        }
    }
}

/// How the rotation and translation errors of a pair are combined before
/// thresholding. `Max` is the usual convention; `Min` follows the literal
/// "minimum of rotation and translation angular errors" reading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Max,
    Min,
}

/// AUC for each threshold `τ`: mean over integer `t = 1..=τ` of the fraction
/// of pairs with aggregated error strictly below `t` degrees.
pub fn pose_auc(errors: &[PairErrors], thresholds: &[u32], aggregator: Aggregator) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Empty("pose_auc errors"));
    }
    if thresholds.contains(&0) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(
            "thresholds must be positive and ascending".into(),
        ));
    }
    let mut aggregated: Vec<f64> = errors.iter().map(|e| e.aggregate(aggregator)).collect();
    aggregated.sort_by(f64::total_cmp);
    let n = aggregated.len();
    // Integer hit counts keep the result exact and monotone in τ.
    let hits = |t: u32| aggregated.partition_point(|&e| e < t as f64);
    let max_tau = thresholds.last().copied().unwrap_or(0);
    let mut cumulative = Vec::with_capacity(max_tau as usize + 1);
    cumulative.push(0usize);
    for t in 1..=max_tau {
        let prev = cumulative[t as usize - 1];
        cumulative.push(prev + hits(t));
    }
    Ok(thresholds
        .iter()
        .map(|&tau| cumulative[tau as usize] as f64 / (n as f64 * tau as f64))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiviewMetrics {
    pub rra15: f64,
    pub rta15: f64,
    pub maa30: f64,
}

/// Relative-pose errors over all unordered frame pairs `i < j`.
pub fn pairwise_errors(pred: &[Pose], gt: &[Pose]) -> Result<Vec<PairErrors>> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            context: "multiview predictions",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if gt.len() < 2 {
        return Err(Error::Precondition("need at least two frames".into()));
    }
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1) / 2);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            out.push(PairErrors::between(
                &relative_pose(&pred[i], &pred[j]),
                &relative_pose(&gt[i], &gt[j]),
            ));
        }
    }
    Ok(out)
}

/// RRA@15, RTA@15 and mAA@30 (the latter requires both errors below each
/// integer threshold `t = 1..=30`).
pub fn multiview_metrics(pred: &[Pose], gt: &[Pose]) -> Result<MultiviewMetrics> {
    let errors = pairwise_errors(pred, gt)?;
    let n = errors.len() as f64;
    let frac = |f: &dyn Fn(&PairErrors) -> bool| errors.iter().filter(|e| f(e)).count() as f64 / n;
    Ok(MultiviewMetrics {
        rra15: frac(&|e| e.rot_err < 15.0),
        rta15: frac(&|e| e.trans_ang_err < 15.0),
        maa30: pose_auc(&errors, &[30], Aggregator::Max)?[0],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianErrors {
    pub median_trans: f64,
    pub median_rot: f64,
}

/// Per-component medians; even lengths take the lower median.
pub fn median_errors(samples: &[AbsPoseErrors]) -> Result<MedianErrors> {
    if samples.is_empty() {
        return Err(Error::Empty("median_errors samples"));
    }
    let trans: Vec<f64> = samples.iter().map(|s| s.trans_err).collect();
    let rot: Vec<f64> = samples.iter().map(|s| s.rot_err).collect();
    Ok(MedianErrors {
        median_trans: lower_median(trans),
        median_rot: lower_median(rot),
    })
}

pub(crate) fn lower_median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// One JSON metrics record per evaluated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub n_pairs: usize,
    pub auc5: f64,
    pub auc10: f64,
    pub auc20: f64,
    pub rra15: f64,
    pub rta15: f64,
    pub maa30: f64,
    pub median_trans_m: f64,
    pub median_rot_deg: f64,
}

impl MetricsReport {
    /// Scores predicted absolute poses against ground truth: AUC over the
    /// pairwise relative errors, multiview accuracies, and absolute medians.
    pub fn evaluate(scene: &str, pred: &[Pose], gt: &[Pose], aggregator: Aggregator) -> Result<Self> {
        let pairs = pairwise_errors(pred, gt)?;
        let auc = pose_auc(&pairs, &[5, 10, 20], aggregator)?;
        let mv = multiview_metrics(pred, gt)?;
        let abs: Vec<AbsPoseErrors> = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| AbsPoseErrors::between(p, g))
            .collect();
        let med = median_errors(&abs)?;
        Ok(Self {
            scene: scene.to_string(),
            n_pairs: pairs.len(),
            auc5: auc[0],
            auc10: auc[1],
            auc20: auc[2],
            rra15: mv.rra15,
            rta15: mv.rta15,
            maa30: mv.maa30,
            median_trans_m: med.median_trans,
            median_rot_deg: med.median_rot,
        })
    }
}
