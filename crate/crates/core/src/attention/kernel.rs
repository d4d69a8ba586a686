//! Multi-head scaled dot-product attention over frame blocks.
//!
//! Tokens are laid out frame-major: frame `i` owns rows `i·T .. (i+1)·T`.
//! The sparse path only ever computes logits for kept frame blocks; the
//! probabilities of one query frame are a `T × (|row|·T)` matrix whose column
//! blocks follow the kept frames in ascending order.

use crate::autodiff::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

use super::mask::FrameMask;

/// Kept frame blocks for each query frame plus the token geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    rows: Vec<Vec<usize>>,
}

impl AttentionLayout {
    pub fn from_mask(mask: &FrameMask, tokens_per_frame: usize) -> Self {
        Self {
            n_frames: mask.n_frames,
            tokens_per_frame,
            rows: mask.rows().to_vec(),
        }
    }

    /// Each frame attends only to itself (frame attention).
    pub fn block_diagonal(n_frames: usize, tokens_per_frame: usize) -> Self {
        Self {
            n_frames,
            tokens_per_frame,
            rows: (0..n_frames).map(|i| vec![i]).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn n_tokens(&self) -> usize {
        self.n_frames * self.tokens_per_frame
    }

    pub fn kept_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }
}

fn validate(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttentionLayout, heads: usize) -> Result<()> {
    let n = layout.n_tokens();
    for (name, t) in [("queries", q), ("keys", k), ("values", v)] {
        if t.rows() != n {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: n,
                actual: t.rows(),
            });
        }
        if t.cols() != q.cols() {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: q.cols(),
                actual: t.cols(),
            });
        }
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::Precondition(format!(
            "width {} not divisible by {heads} heads",
            q.cols()
        )));
    }
    Ok(())
}

/// Masked multi-head attention through the sparse block path.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &FrameMask, heads: usize) -> Result<Tensor> {
    let tokens_per_frame = if mask.n_frames == 0 { 0 } else { q.rows() / mask.n_frames };
    let layout = AttentionLayout::from_mask(mask, tokens_per_frame);
    validate(q, k, v, &layout, heads)?;
    Ok(attention_forward(q, k, v, &layout, heads, false).0)
}

/// Same as [`masked_attention`] for a prebuilt layout.
pub fn layout_attention(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttentionLayout, heads: usize) -> Result<Tensor> {
    validate(q, k, v, layout, heads)?;
    Ok(attention_forward(q, k, v, layout, heads, false).0)
}

fn softmax_rows(p: &mut [f64], width: usize) {
    for row in p.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
}

/// Sparse forward pass. Returns the output and, when `keep_probs`, the
/// probability block of every `(head, frame)` in `head·N + frame` order.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
    heads: usize,
    keep_probs: bool,
) -> (Tensor, Vec<Vec<f64>>) {
    let t = layout.tokens_per_frame;
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(layout.n_tokens(), d);
    let mut kept = Vec::with_capacity(if keep_probs { heads * layout.n_frames } else { 0 });
    let mut scratch = Vec::new();

    for h in 0..heads {
        for i in 0..layout.n_frames {
            let cols = layout.row(i);
            let width = cols.len() * t;
            scratch.clear();
            scratch.resize(t * width, 0.0);
            let q_block = MatRef::row_major(&q.data()[i * t * d + h * dh..], d);
            for (b, &j) in cols.iter().enumerate() {
                let k_block = MatRef::row_major(&k.data()[j * t * d + h * dh..], d).transposed();
                gemm(t, dh, t, scale, q_block, k_block, 0.0, &mut scratch[b * t..], width);
            }
            softmax_rows(&mut scratch, width);
            let dst = &mut out.data_mut()[i * t * d + h * dh..];
            for (b, &j) in cols.iter().enumerate() {
                let p_block = MatRef::row_major(&scratch[b * t..], width);
                let v_block = MatRef::row_major(&v.data()[j * t * d + h * dh..], d);
                let beta = if b == 0 { 0.0 } else { 1.0 };
                gemm(t, t, dh, 1.0, p_block, v_block, beta, dst, d);
            }
            if keep_probs {
                kept.push(scratch.clone());
            }
        }
    }
    (out, kept)
}

/// Reverse pass of [`attention_forward`]. Excluded frame blocks are never
/// visited, so they receive no gradient through the logits.
pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
    heads: usize,
    probs: &[Vec<f64>],
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let t = layout.tokens_per_frame;
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = layout.n_tokens();
    let (mut gq, mut gk, mut gv) = (Tensor::zeros(n, d), Tensor::zeros(n, d), Tensor::zeros(n, d));
    let mut dp = Vec::new();

    for h in 0..heads {
        for i in 0..layout.n_frames {
            let cols = layout.row(i);
            let width = cols.len() * t;
            let p = &probs[h * layout.n_frames + i];
            let go_block = MatRef::row_major(&grad_out.data()[i * t * d + h * dh..], d);
            dp.clear();
            dp.resize(t * width, 0.0);
            for (b, &j) in cols.iter().enumerate() {
                let v_block = MatRef::row_major(&v.data()[j * t * d + h * dh..], d).transposed();
                gemm(t, dh, t, 1.0, go_block, v_block, 0.0, &mut dp[b * t..], width);
            }
            // dS = P ∘ (dP − rowsum(dP ∘ P))
            for (drow, prow) in dp.chunks_mut(width).zip(p.chunks(width)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, pp) in drow.iter_mut().zip(prow) {
                    *x = pp * (*x - dot);
                }
            }
            let q_block = MatRef::row_major(&q.data()[i * t * d + h * dh..], d);
            for (b, &j) in cols.iter().enumerate() {
                let ds_block = MatRef::row_major(&dp[b * t..], width);
                let p_block = MatRef::row_major(&p[b * t..], width);
                let k_block = MatRef::row_major(&k.data()[j * t * d + h * dh..], d);
                gemm(t, t, dh, scale, ds_block, k_block, 1.0, &mut gq.data_mut()[i * t * d + h * dh..], d);
                gemm(
                    t,
                    t,
                    dh,
                    scale,
                    ds_block.transposed(),
                    q_block,
                    1.0,
                    &mut gk.data_mut()[j * t * d + h * dh..],
                    d,
                );
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    p_block.transposed(),
                    go_block,
                    1.0,
                    &mut gv.data_mut()[j * t * d + h * dh..],
                    d,
                );
            }
        }
    }
    (gq, gk, gv)
}

/// Dense reference: full token-by-token logits with `−∞` on excluded frame
/// pairs, softmax, weighted sum. Plain loops, no shared code with the sparse
/// path.
pub fn dense_reference_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &FrameMask,
    heads: usize,
) -> Result<Tensor> {
    let tokens_per_frame = q.rows() / mask.n_frames.max(1);
    let layout = AttentionLayout::from_mask(mask, tokens_per_frame);
    validate(q, k, v, &layout, heads)?;
    let n = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(n, d);
    let mut logits = vec![0.0; n];
    for h in 0..heads {
        let c0 = h * dh;
        for r in 0..n {
            let fi = r / tokens_per_frame;
            for (s, logit) in logits.iter_mut().enumerate() {
                let fj = s / tokens_per_frame;
                *logit = if mask.contains(fi, fj) {
                    (0..dh).map(|c| q.get(r, c0 + c) * k.get(s, c0 + c)).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let row = out.row_mut(r);
            for (s, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    row[c0 + c] += w / total * v.get(s, c0 + c);
                }
            }
        }
    }
    Ok(out)
}
