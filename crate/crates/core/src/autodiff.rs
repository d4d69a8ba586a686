//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records one forward pass. Parameter leaves borrow their values
//! from a [`ParamStore`]; [`Graph::backward`] walks the tape in reverse and
//! returns exact gradients for every node.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::kernel::{self, AttentionLayout};
use crate::error::{Error, Result};
use crate::pose::{CameraVector, Quaternion};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            1.0,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&rhs.data, rhs.cols),
            0.0,
            &mut out.data,
            rhs.cols,
        );
        out
    }
}

/// Strided read-only matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn transposed(self) -> Self {
        Self {
            data: self.data,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha·a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n row-major with
/// row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: &MatRef<'_>, rows: usize, cols: usize| {
        (rows.saturating_sub(1) as isize * r.row_stride + cols.saturating_sub(1) as isize * r.col_stride)
            as usize
    };
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm lhs bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm rhs bounds");
    assert!((m - 1) * ldc + n - 1 < c.len(), "gemm output bounds");
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Stand-in image encoder: register and camera base tokens.
    Encoder,
    /// Pose tokenizer, projector and the unknown-pose token.
    Tokenizer,
    /// Alternating attention blocks.
    Blocks,
    /// Output normalization and camera head.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named parameter registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn group_scalar_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.data.len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `x·w + b` with `b` broadcast over rows.
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttentionLayout>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Fourier {
        input: Vec<f64>,
        levels: usize,
        scales: Option<NodeId>,
    },
    PoseLoss {
        pred: NodeId,
        targets: Vec<[f64; 9]>,
    },
    RotationLoss {
        pred: NodeId,
        targets: Vec<Quaternion>,
    },
    Opaque(String),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "masked_attention",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::Sum(_) => "sum",
            Op::Fourier { .. } => "fourier",
            Op::PoseLoss { .. } => "pose_loss",
            Op::RotationLoss { .. } => "rotation_loss",
            Op::Opaque(name) => name,
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scale below which a predicted quaternion counts as zero in the losses.
const QUAT_NORM_FLOOR: f64 = 1e-12;

/// One recorded forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a value with no backward rule; differentiating through it fails.
    pub fn opaque(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(value, Op::Opaque(name.into()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols), "linear bias shape");
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, out.cols), "add_row shape");
        for i in 0..out.rows {
            for (o, x) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| gelu(x)).collect();
        let out = Tensor::from_vec(v.rows, v.cols, data);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cols = v.cols;
        let mut out = Tensor::zeros(v.rows, cols);
        let mut means = Vec::with_capacity(v.rows);
        let mut rstds = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g.data[c] + b.data[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        )
    }

    /// Multi-head attention over frame blocks; see [`kernel::attention_forward`].
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> NodeId {
        let (out, probs) = kernel::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            &layout,
            heads,
            true,
        );
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols height");
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
                offset += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * v.cols);
        for &r in &rows {
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::from_vec(rows.len(), v.cols, data);
        self.push(out, Op::SelectRows(a, rows))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Sinusoidal embedding of a constant vector as a `1×2kL` row; with
    /// `scales` (`1×L`) each level's frequency is multiplied by a learned factor.
    pub fn fourier(&mut self, input: &[f64], levels: usize, scales: Option<NodeId>) -> NodeId {
        let factors: Vec<f64> = match scales {
            Some(s) => {
                let s = self.value(s);
                assert_eq!(s.shape(), (1, levels), "fourier scale shape");
                s.data.clone()
            }
            None => vec![1.0; levels],
        };
        let out = Tensor::row_vector(fourier_with_scales(input, levels, &factors));
        self.push(
            out,
            Op::Fourier {
                input: input.to_vec(),
                levels,
                scales,
            },
        )
    }

    /// Summed L1 pose loss over rows of `pred` (`n×9`), see
    /// [`crate::pipeline::loss::pose_loss`]. Targets are already divided by
    /// the scene scale, as are the predicted translations.
    pub fn pose_loss(&mut self, pred: NodeId, targets: Vec<[f64; 9]>) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), (targets.len(), CameraVector::DIM), "pose_loss shape");
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, t)| pose_loss_row(p.row(r), t).0)
            .sum();
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::PoseLoss { pred, targets })
    }

    /// Summed geodesic rotation loss of the quaternions in columns 0..4 of
    /// `pred` against `targets`.
    pub fn rotation_loss(&mut self, pred: NodeId, targets: Vec<Quaternion>) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.rows, targets.len(), "rotation_loss rows");
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, t)| rotation_loss_row(&p.row(r)[0..4], t).0)
            .sum();
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::RotationLoss { pred, targets },
        )
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Precondition(format!(
                "backward needs a scalar, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut param_grads: HashMap<ParamId, Tensor> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match param_grads.get_mut(p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        param_grads.insert(*p, g.clone());
                    }
                },
                Op::Opaque(name) => return Err(Error::UnsupportedOp(name.clone())),
                op => {
                    for (target, contribution) in self.local_backward(op, &g)? {
                        accumulate(&mut grads[target.0], contribution);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn local_backward(&self, op: &Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = match op {
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, matmul_bt(g, vb)), (*b, matmul_at(va, g))]
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut v = vec![(*x, matmul_bt(g, vw)), (*w, matmul_at(vx, g))];
                if let Some(b) = b {
                    v.push((*b, column_sums(g)));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, column_sums(g))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = elementwise(g, vb, |x, y| x * y);
                let gb = elementwise(g, va, |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale_assign(*s);
                vec![(*a, ga)]
            }
            Op::Gelu(a) => vec![(*a, elementwise(g, self.value(*a), |gg, x| gg * gelu_grad(x)))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let cols = vx.cols;
                let n = cols as f64;
                let mut gx = Tensor::zeros(vx.rows, cols);
                let mut ggamma = Tensor::zeros(1, cols);
                let mut gbeta = Tensor::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..vx.rows {
                    let (row, grow) = (vx.row(r), g.row(r));
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean[r]) * rstd[r];
                        dxhat[c] = grow[c] * vg.data[c];
                        ggamma.data[c] += grow[c] * xhat[c];
                        gbeta.data[c] += grow[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] / n * (n * dxhat[c] - sum_d - xhat[c] * sum_dx);
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = kernel::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    layout,
                    *heads,
                    probs,
                    g,
                );
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let rows = self.value(p).rows;
                        let slice = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        offset += rows;
                        (p, Tensor::from_vec(rows, g.cols, slice))
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let cols = self.value(p).cols;
                        let part = Tensor::from_fn(g.rows, cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        (p, part)
                    })
                    .collect()
            }
            Op::SelectRows(a, rows) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let s = g.data[0];
                vec![(*a, Tensor::from_vec(va.rows, va.cols, vec![s; va.data.len()]))]
            }
            Op::Fourier {
                input,
                levels,
                scales,
            } => match scales {
                None => vec![],
                Some(s) => {
                    let factors = self.value(*s).data.clone();
                    let k = input.len();
                    let mut gs = Tensor::zeros(1, *levels);
                    for l in 0..*levels {
                        let base = (1u64 << l) as f64 * std::f64::consts::PI;
                        let off = 2 * k * l;
                        for (i, &x) in input.iter().enumerate() {
                            let arg = factors[l] * base * x;
                            // d sin = cos·base·x, d cos = −sin·base·x
                            gs.data[l] += g.data[off + i] * arg.cos() * base * x
                                - g.data[off + k + i] * arg.sin() * base * x;
                        }
                    }
                    vec![(*s, gs)]
                }
            },
            Op::PoseLoss { pred, targets } => {
                let p = self.value(*pred);
                let mut gp = Tensor::zeros(p.rows, p.cols);
                for (r, t) in targets.iter().enumerate() {
                    let (_, row_grad) = pose_loss_row(p.row(r), t);
                    for (o, x) in gp.row_mut(r).iter_mut().zip(row_grad) {
                        *o = g.data[0] * x;
                    }
                }
                vec![(*pred, gp)]
            }
            Op::RotationLoss { pred, targets } => {
                let p = self.value(*pred);
                let mut gp = Tensor::zeros(p.rows, p.cols);
                for (r, t) in targets.iter().enumerate() {
                    let (_, qg) = rotation_loss_row(&p.row(r)[0..4], t);
                    for c in 0..4 {
                        gp.row_mut(r)[c] = g.data[0] * qg[c];
                    }
                }
                vec![(*pred, gp)]
            }
            Op::Input | Op::Param(_) | Op::Opaque(_) => {
                return Err(Error::UnsupportedOp(op.name().to_string()))
            }
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

/// Gradients of one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. a parameter; `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

/// `a · bᵀ`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    gemm(
        a.rows,
        a.cols,
        b.rows,
        1.0,
        MatRef::row_major(&a.data, a.cols),
        MatRef::row_major(&b.data, b.cols).transposed(),
        0.0,
        &mut out.data,
        b.rows,
    );
    out
}

/// `aᵀ · b`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, b.cols);
    gemm(
        a.cols,
        a.rows,
        b.cols,
        1.0,
        MatRef::row_major(&a.data, a.cols).transposed(),
        MatRef::row_major(&b.data, b.cols),
        0.0,
        &mut out.data,
        b.cols,
    );
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, x) in out.data.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Frozen layout: for each level `l`, `[sin(s_l 2^l π v), cos(s_l 2^l π v)]`.
pub(crate) fn fourier_with_scales(input: &[f64], levels: usize, factors: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * input.len() * levels);
    for (l, factor) in factors.iter().enumerate().take(levels) {
        let freq = factor * (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(input.iter().map(|x| (freq * x).sin()));
        out.extend(input.iter().map(|x| (freq * x).cos()));
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalized quaternion and the Jacobian-vector product helper
/// `d(q/|q|)ᵀ·u = (u − n(n·u))/|q|`.
fn normalize_with_norm(raw: &[f64]) -> ([f64; 4], f64) {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(QUAT_NORM_FLOOR);
    (std::array::from_fn(|i| raw[i] / norm), norm)
}

fn normalize_vjp(n: &[f64; 4], norm: f64, u: &[f64; 4]) -> [f64; 4] {
    let nu: f64 = n.iter().zip(u).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (u[i] - n[i] * nu) / norm)
}

/// L1 loss of one 9-vector row: normalized quaternion sign-aligned to the
/// target, then `|Δq|₁ + |Δt|₁ + |Δf|₁`. Returns the value and its gradient.
pub(crate) fn pose_loss_row(pred: &[f64], target: &[f64; 9]) -> (f64, [f64; 9]) {
    let (n, norm) = normalize_with_norm(&pred[0..4]);
    // same normalization on both sides, so pred == target gives exactly 0
    let (tq, _) = normalize_with_norm(&target[0..4]);
    let dot: f64 = n.iter().zip(&tq).map(|(a, b)| a * b).sum();
    let flip = if dot < 0.0 { -1.0 } else { 1.0 };
    let mut loss = 0.0;
    let mut dq = [0.0; 4];
    for i in 0..4 {
        let d = flip * n[i] - tq[i];
        loss += d.abs();
        dq[i] = flip * sign(d);
    }
    let mut grad = [0.0; 9];
    grad[0..4].copy_from_slice(&normalize_vjp(&n, norm, &dq));
    for i in 4..9 {
        let d = pred[i] - target[i];
        loss += d.abs();
        grad[i] = sign(d);
    }
    (loss, grad)
}

/// Geodesic angle between the normalized predicted quaternion and the target,
/// `arccos((tr(R̂ᵀR) − 1)/2)`. Gradient via `tr = 4c² − 1`, `c = n·target`;
/// zero inside the clamp zone.
pub(crate) fn rotation_loss_row(pred: &[f64], target: &Quaternion) -> (f64, [f64; 4]) {
    let (n, norm) = normalize_with_norm(pred);
    let nq = Quaternion::from_slice(&n);
    let value = crate::pose::rotation_geodesic_error(
        &nq.matrix_unchecked(),
        &target.matrix_unchecked(),
    );
    let t = target.as_array();
    let c: f64 = n.iter().zip(&t).map(|(a, b)| a * b).sum();
    let arg = 2.0 * c * c - 1.0;
    let one_minus = 1.0 - c * c;
    if arg >= 1.0 || arg <= -1.0 || one_minus <= 1e-15 {
        return (value, [0.0; 4]);
    }
    // d/dc arccos(2c² − 1) = −4c / sqrt(1 − (2c² − 1)²) = −2·sign(c)/sqrt(1 − c²)
    let dc = -2.0 * sign(c) / one_minus.sqrt();
    let u: [f64; 4] = std::array::from_fn(|i| dc * t[i]);
    (value, normalize_vjp(&n, norm, &u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn half_squared_norm_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamGroup::Blocks, random_tensor(&mut rng, 3, 4));
        let x = random_tensor(&mut rng, 4, 1);

        let mut g = Graph::new(&store);
        let wn = g.param(w);
        let xn = g.input(x.clone());
        let y = g.matmul(wn, xn);
        let yy = g.mul(y, y);
        let s = g.sum(yy);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();

        let wx = store.value(w).matmul(&x);
        let expected = Tensor::from_fn(3, 4, |i, j| wx.get(i, 0) * x.get(j, 0));
        assert!(grads.param(w).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn opaque_op_is_reported_by_name() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let b = g.opaque("median_filter", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let c = g.add(a, b);
        let s = g.sum(c);
        match g.backward(s) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "median_filter"),
            other => panic!("expected unsupported op, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(2, 2));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamGroup::Head, Tensor::from_vec(1, 1, vec![3.0]));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let p = g.mul(a, b);
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gemm_transposed_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 3, 5);
        let b = random_tensor(&mut rng, 4, 5);
        let abt = matmul_bt(&a, &b);
        let naive = Tensor::from_fn(3, 4, |i, j| (0..5).map(|k| a.get(i, k) * b.get(j, k)).sum());
        assert!(abt.max_abs_diff(&naive) < 1e-12);
        let c = random_tensor(&mut rng, 3, 2);
        let atc = matmul_at(&a, &c);
        let naive = Tensor::from_fn(5, 2, |i, j| (0..3).map(|k| a.get(k, i) * c.get(k, j)).sum());
        assert!(atc.max_abs_diff(&naive) < 1e-12);
    }
}
