//! Pre-norm transformer sublayers and the alternating frame/global block.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

use super::kernel::AttentionLayout;
use super::mask::FrameMask;

pub const FFN_EXPANSION: usize = 4;

/// Per-frame token groups at model width: one camera token, `registers`
/// register tokens and `patches` patch tokens, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub n_frames: usize,
    pub registers: usize,
    pub patches: usize,
    pub tokens: Tensor,
    /// Scene normalization factor carried alongside the tokens.
    pub scale: f64,
}

impl TokenSequence {
    pub fn new(n_frames: usize, registers: usize, patches: usize, tokens: Tensor, scale: f64) -> Result<Self> {
        let seq = Self {
            n_frames,
            registers,
            patches,
            tokens,
            scale,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.registers + self.patches
    }

    pub fn d_model(&self) -> usize {
        self.tokens.cols()
    }

    /// Row of frame `i`'s camera token.
    pub fn camera_row(&self, i: usize) -> usize {
        i * self.tokens_per_frame()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.n_frames * self.tokens_per_frame();
        if self.tokens.rows() != expected {
            return Err(Error::DimensionMismatch {
                context: "token sequence rows",
                expected,
                actual: self.tokens.rows(),
            });
        }
        if !self.tokens.is_finite() {
            return Err(Error::Precondition("token sequence has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Self {
        Self {
            tokens,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.insert(format!("{name}.weight"), group, Tensor::randn(rng, fan_in, fan_out, std)),
            bias: store.insert(format!("{name}.bias"), group, Tensor::zeros(1, fan_out)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), group, Tensor::from_vec(1, width, vec![1.0; width])),
            beta: store.insert(format!("{name}.beta"), group, Tensor::zeros(1, width)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub norm: NormParams,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let group = ParamGroup::Blocks;
        Self {
            norm: NormParams::init(store, &format!("{name}.norm"), group, d),
            query: LinearParams::init(store, &format!("{name}.q"), group, d, d, rng),
            key: LinearParams::init(store, &format!("{name}.k"), group, d, d, rng),
            value: LinearParams::init(store, &format!("{name}.v"), group, d, d, rng),
            output: LinearParams::init(store, &format!("{name}.out"), group, d, d, rng),
        }
    }

    pub fn linear_ids(&self) -> [LinearParams; 4] {
        [self.query, self.key, self.value, self.output]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub norm: NormParams,
    pub expand: LinearParams,
    pub contract: LinearParams,
}

impl FeedForwardParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let group = ParamGroup::Blocks;
        Self {
            norm: NormParams::init(store, &format!("{name}.norm"), group, d),
            expand: LinearParams::init(store, &format!("{name}.fc1"), group, d, FFN_EXPANSION * d, rng),
            contract: LinearParams::init(store, &format!("{name}.fc2"), group, FFN_EXPANSION * d, d, rng),
        }
    }
}

/// One frame-attention sublayer, one global sublayer, each followed by a
/// feed-forward sublayer.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub frame_attn: AttentionParams,
    pub frame_ffn: FeedForwardParams,
    pub global_attn: AttentionParams,
    pub global_ffn: FeedForwardParams,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            frame_attn: AttentionParams::init(store, &format!("{name}.frame_attn"), d, rng),
            frame_ffn: FeedForwardParams::init(store, &format!("{name}.frame_ffn"), d, rng),
            global_attn: AttentionParams::init(store, &format!("{name}.global_attn"), d, rng),
            global_ffn: FeedForwardParams::init(store, &format!("{name}.global_ffn"), d, rng),
        }
    }
}

/// `x + Wo·Attn(LN(x))` under the given frame layout.
pub fn attention_sublayer(
    g: &mut Graph<'_>,
    x: NodeId,
    p: &AttentionParams,
    layout: &Arc<AttentionLayout>,
    heads: usize,
) -> NodeId {
    let h = p.norm.apply(g, x);
    let q = p.query.apply(g, h);
    let k = p.key.apply(g, h);
    let v = p.value.apply(g, h);
    let a = g.attention(q, k, v, Arc::clone(layout), heads);
    let o = p.output.apply(g, a);
    g.add(x, o)
}

/// `x + W2·gelu(W1·LN(x))`.
pub fn feed_forward_sublayer(g: &mut Graph<'_>, x: NodeId, p: &FeedForwardParams) -> NodeId {
    let h = p.norm.apply(g, x);
    let h = p.expand.apply(g, h);
    let h = g.gelu(h);
    let o = p.contract.apply(g, h);
    g.add(x, o)
}

/// Attention restricted to each frame's own tokens (block diagonal).
pub fn frame_attention(
    g: &mut Graph<'_>,
    x: NodeId,
    p: &AttentionParams,
    n_frames: usize,
    tokens_per_frame: usize,
    heads: usize,
) -> NodeId {
    let layout = Arc::new(AttentionLayout::block_diagonal(n_frames, tokens_per_frame));
    attention_sublayer(g, x, p, &layout, heads)
}

/// Layouts for the two attention sublayers of every block in a sequence.
#[derive(Clone, Debug)]
pub struct BlockLayouts {
    pub frame: Arc<AttentionLayout>,
    pub global: Arc<AttentionLayout>,
}

impl BlockLayouts {
    pub fn new(mask: &FrameMask, tokens_per_frame: usize) -> Self {
        Self {
            frame: Arc::new(AttentionLayout::block_diagonal(mask.n_frames, tokens_per_frame)),
            global: Arc::new(AttentionLayout::from_mask(mask, tokens_per_frame)),
        }
    }
}

pub fn alternating_block(
    g: &mut Graph<'_>,
    x: NodeId,
    layouts: &BlockLayouts,
    p: &BlockParams,
    heads: usize,
) -> NodeId {
    let x = attention_sublayer(g, x, &p.frame_attn, &layouts.frame, heads);
    let x = feed_forward_sublayer(g, x, &p.frame_ffn);
    let x = attention_sublayer(g, x, &p.global_attn, &layouts.global, heads);
    feed_forward_sublayer(g, x, &p.global_ffn)
}

/// Inference-only frame attention sublayer over a token sequence.
pub fn apply_frame_attention(
    seq: &TokenSequence,
    store: &ParamStore,
    p: &AttentionParams,
    heads: usize,
) -> Result<TokenSequence> {
    seq.validate()?;
    let mut g = Graph::new(store);
    let x = g.input(seq.tokens.clone());
    let y = frame_attention(&mut g, x, p, seq.n_frames, seq.tokens_per_frame(), heads);
    Ok(seq.with_tokens(g.value(y).clone()))
}

/// Inference-only alternating block over a token sequence.
pub fn apply_alternating_block(
    seq: &TokenSequence,
    mask: &FrameMask,
    store: &ParamStore,
    p: &BlockParams,
    heads: usize,
) -> Result<TokenSequence> {
    seq.validate()?;
    if mask.n_frames != seq.n_frames {
        return Err(Error::DimensionMismatch {
            context: "mask frames",
            expected: seq.n_frames,
            actual: mask.n_frames,
        });
    }
    let layouts = BlockLayouts::new(mask, seq.tokens_per_frame());
    let mut g = Graph::new(store);
    let x = g.input(seq.tokens.clone());
    let y = alternating_block(&mut g, x, &layouts, p, heads);
    Ok(seq.with_tokens(g.value(y).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mask::{build_mask, MaskStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, BlockParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = BlockParams::init(&mut store, "block0", d, &mut rng);
        (store, p, rng)
    }

    fn sequence(rng: &mut ChaCha8Rng, n: usize, d: usize, magnitude: f64) -> TokenSequence {
        TokenSequence::new(n, 1, 2, Tensor::from_fn(n * 4, d, |_, _| rng.random_range(-magnitude..magnitude)), 1.0)
            .unwrap()
    }

    use rand::Rng;

    #[test]
    fn zeroed_block_is_identity() {
        let (mut store, p, mut rng) = setup(8);
        for lin in [p.frame_attn.output, p.global_attn.output, p.frame_ffn.contract, p.global_ffn.contract] {
            store.value_mut(lin.weight).data_mut().fill(0.0);
        }
        let seq = sequence(&mut rng, 3, 8, 1.0);
        let mask = build_mask(MaskStrategy::Sparse, 3, 0, 2, 1).unwrap();
        let out = apply_alternating_block(&seq, &mask, &store, &p, 2).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn finite_for_large_inputs() {
        let (store, p, mut rng) = setup(8);
        let mask = build_mask(MaskStrategy::Sparse, 4, 0, 3, 1).unwrap();
        for _ in 0..100 {
            let seq = sequence(&mut rng, 4, 8, 10.0);
            let out = apply_alternating_block(&seq, &mask, &store, &p, 2).unwrap();
            assert!(out.tokens.is_finite());
        }
    }

    #[test]
    fn frame_attention_isolates_frames() {
        let (store, p, mut rng) = setup(8);
        let seq = sequence(&mut rng, 3, 8, 1.0);
        let base = apply_frame_attention(&seq, &store, &p.frame_attn, 2).unwrap();
        let mut zeroed = seq.clone();
        for r in 4..8 {
            zeroed.tokens.row_mut(r).fill(0.0);
        }
        let probe = apply_frame_attention(&zeroed, &store, &p.frame_attn, 2).unwrap();
        for r in (0..4).chain(8..12) {
            assert_eq!(base.tokens.row(r), probe.tokens.row(r));
        }
    }

    #[test]
    fn frame_attention_is_frame_equivariant() {
        let (store, p, mut rng) = setup(8);
        let seq = sequence(&mut rng, 3, 8, 1.0);
        let order = [2usize, 0, 1];
        let permuted = Tensor::from_fn(12, 8, |r, c| seq.tokens.get(order[r / 4] * 4 + r % 4, c));
        let a = apply_frame_attention(&seq, &store, &p.frame_attn, 2).unwrap();
        let b = apply_frame_attention(&seq.with_tokens(permuted), &store, &p.frame_attn, 2).unwrap();
        for r in 0..12 {
            let src = order[r / 4] * 4 + r % 4;
            for c in 0..8 {
                assert!((b.tokens.get(r, c) - a.tokens.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_matches_plain_self_attention() {
        let (store, p, mut rng) = setup(8);
        let seq = sequence(&mut rng, 1, 8, 1.0);
        let framed = apply_frame_attention(&seq, &store, &p.frame_attn, 2).unwrap();
        let mask = build_mask(MaskStrategy::Global, 1, 0, 0, 1).unwrap();
        let layout = Arc::new(AttentionLayout::from_mask(&mask, 4));
        let mut g = Graph::new(&store);
        let x = g.input(seq.tokens.clone());
        let y = attention_sublayer(&mut g, x, &p.frame_attn, &layout, 2);
        assert_eq!(&framed.tokens, g.value(y));
    }
}
