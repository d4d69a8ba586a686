//! Cost accounting for masked global attention.

use std::time::Duration;

use super::mask::FrameMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnStats {
    pub kept_pairs: usize,
    /// `N²`.
    pub dense_pairs: usize,
    /// Query-key multiply-adds of one layer: `kept_pairs · T² · d_model`
    /// (summed over heads, since head widths add up to `d_model`).
    pub token_dot_products: usize,
    pub wall_time: Duration,
}

impl AttnStats {
    pub fn kept_ratio(&self) -> f64 {
        self.kept_pairs as f64 / self.dense_pairs as f64
    }
}

pub fn attn_stats(mask: &FrameMask, tokens_per_frame: usize, d_model: usize) -> AttnStats {
    let kept_pairs = mask.kept_pairs();
    AttnStats {
        kept_pairs,
        dense_pairs: mask.dense_pairs(),
        token_dot_products: kept_pairs * tokens_per_frame * tokens_per_frame * d_model,
        wall_time: Duration::ZERO,
    }
}
