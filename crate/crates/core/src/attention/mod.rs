//! Frame-level attention masks, masked multi-head attention with a sparse
//! block path, and the alternating frame/global transformer block.

pub mod block;
pub mod kernel;
pub mod mask;
pub mod stats;

pub use block::{
    alternating_block, apply_alternating_block, apply_frame_attention, frame_attention, BlockLayouts,
    BlockParams, TokenSequence,
};
pub use kernel::{dense_reference_attention, layout_attention, masked_attention, AttentionLayout};
pub use mask::{build_mask, expected_kept_pairs, FrameMask, MaskStrategy, DEFAULT_DILATION};
pub use stats::{attn_stats, AttnStats};
