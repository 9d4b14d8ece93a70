//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every operation appends a node holding its output value plus whatever
//! the backward pass needs. `backward` walks the tape in reverse creation
//! order (a valid topological order, since ops only reference earlier
//! nodes) and accumulates gradients with a fixed summation order, so a
//! given graph always produces bit-identical gradients on one platform.

use std::collections::BTreeMap;

use crate::error::NumericsError;
use crate::params::ParamSet;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

pub type NodeId = usize;

/// Additive constant used to mask attention scores before softmax.
/// Large enough that `exp(x - max)` underflows to exactly 0.0 in f32.
pub const MASK_NEG: f32 = -1.0e30;

/// Floor applied to probabilities before `ln` in the sequence loss.
pub const PROB_FLOOR: f32 = 1e-9;

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRowVec {
        x: NodeId,
        v: NodeId,
    },
    AddChannelBias {
        x: NodeId,
        v: NodeId,
    },
    ScalarMul {
        x: NodeId,
        c: f32,
    },
    Relu {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        relu: bool,
        cols: Tensor,
        in_hw: (usize, usize),
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    CausalMask {
        x: NodeId,
    },
    EmbedRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    PermuteToSeq {
        x: NodeId,
    },
    AddPosEnc {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    NllFromProbs {
        probs: NodeId,
        targets: Vec<usize>,
        counted: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    /// Number of probabilities clamped to `PROB_FLOOR` inside the loss.
    pub clamp_events: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            clamp_events: 0,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NumericalError(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Insert a constant/input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Insert (or reuse) a leaf bound to a named parameter. Gradients for
    /// bound leaves can be harvested with [`Tape::param_grads`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(value, Op::Leaf, "param")?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        self.push(out, Op::Matmul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "transpose expects rank 2, got {:?}",
                xv.shape()
            )));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = xv.data()[i * n + j];
            }
        }
        self.push(out, Op::Transpose { x }, "transpose")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b }, "add")
    }

    /// Broadcast-add a length-n vector to every row of an (m, n) matrix.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, vv) = (&self.nodes[x].value, &self.nodes[v].value);
        if xv.rank() != 2 || vv.rank() != 1 || xv.shape()[1] != vv.shape()[0] {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_row_vec {:?} + {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let n = vv.shape()[0];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowVec { x, v }, "add_row_vec")
    }

    /// Add a per-channel bias to a (C, H, W) tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, vv) = (&self.nodes[x].value, &self.nodes[v].value);
        if xv.rank() != 3 || vv.rank() != 1 || xv.shape()[0] != vv.shape()[0] {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_channel_bias {:?} + {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let hw = xv.shape()[1] * xv.shape()[2];
        let mut out = xv.clone();
        for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = vv.data()[c];
            for o in plane {
                *o += b;
            }
        }
        self.push(out, Op::AddChannelBias { x, v }, "add_channel_bias")
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f32) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        let data = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::ScalarMul { x, c }, "scalar_mul")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Relu { x }, "relu")
    }

    /// 2-D cross-correlation with zero padding over a (C_in, H, W) input
    /// and (C_out, C_in, kh, kw) kernel stack, optionally fused with relu.
    ///
    /// A stride that does not divide the padded extent evenly is rejected
    /// rather than truncated.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<NodeId, NumericsError> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if xv.rank() != 3 || wv.rank() != 4 || xv.shape()[0] != wv.shape()[1] {
            return Err(NumericsError::ShapeMismatch(format!(
                "conv2d input {:?} kernels {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if stride == 0 {
            return Err(NumericsError::BadStride("stride must be positive".into()));
        }
        let (c_in, h, w_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let (ph, pw) = (h + 2 * pad, w_in + 2 * pad);
        if kh > ph || kw > pw {
            return Err(NumericsError::ShapeMismatch(format!(
                "kernel {}x{} exceeds padded input {}x{}",
                kh, kw, ph, pw
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(NumericsError::BadStride(format!(
                "stride {} does not evenly cover padded {}x{} with kernel {}x{}",
                stride, ph, pw, kh, kw
            )));
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;

        let cols = im2col(xv, kh, kw, stride, pad, oh, ow);
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        matmul_acc(
            wv.data(),
            cols.data(),
            out.data_mut(),
            c_out,
            c_in * kh * kw,
            oh * ow,
        );
        if relu {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                relu,
                cols,
                in_hw: (h, w_in),
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Max pooling over non-overlapping-or-strided windows. The gradient
    /// routes to the argmax; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        k: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 3 {
            return Err(NumericsError::ShapeMismatch(format!(
                "max_pool2d expects rank 3, got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw) = k;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return Err(NumericsError::ShapeMismatch(format!(
                "pool window {}x{} stride {}x{} on {}x{}",
                kh, kw, sh, sw, h, w
            )));
        }
        if (h - kh) % sh != 0 || (w - kw) % sw != 0 {
            return Err(NumericsError::ShapeMismatch(format!(
                "pool window {}x{} stride {}x{} does not tile {}x{}",
                kh, kw, sh, sw, h, w
            )));
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0u32; c * oh * ow];
        let xd = xv.data();
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = oy * sh + dy;
                            let ix = ox * sw + dx;
                            let idx = (ci * h + iy) * w + ix;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2d { x, argmax }, "max_pool2d")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        let n = *xv.shape().last().ok_or_else(|| {
            NumericsError::ShapeMismatch("softmax on rank-0 tensor".to_string())
        })?;
        if !xv.all_finite() {
            return Err(NumericsError::NumericalError("softmax input".into()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax { x }, "softmax")
    }

    /// Per-row normalization over the last axis with learned gain/bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    ) -> Result<NodeId, NumericsError> {
        let (xv, gv, bv) = (
            &self.nodes[x].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        let d = *xv.shape().last().unwrap_or(&0);
        if d < 2 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(NumericsError::ShapeMismatch(format!(
                "layer_norm x {:?} gain {:?} bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / d;
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f32>() / d as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (src[j] - mean) * inv;
                xhat.data_mut()[r * d + j] = xh;
                out.data_mut()[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Replace entries above the diagonal of a (T, T) score matrix with a
    /// large negative constant, so softmax assigns them exactly zero.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 2 || xv.shape()[0] != xv.shape()[1] {
            return Err(NumericsError::ShapeMismatch(format!(
                "causal_mask expects square matrix, got {:?}",
                xv.shape()
            )));
        }
        let t = xv.shape()[0];
        let mut out = xv.clone();
        for i in 0..t {
            for j in (i + 1)..t {
                out.data_mut()[i * t + j] = MASK_NEG;
            }
        }
        self.push(out, Op::CausalMask { x }, "causal_mask")
    }

    /// Gather rows of an embedding table: out[t] = table[ids[t]].
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let tv = &self.nodes[table].value;
        if tv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "embed_rows table {:?}",
                tv.shape()
            )));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::ShapeMismatch(format!(
                "embedding id {} out of range {}",
                bad, v
            )));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (t, &id) in ids.iter().enumerate() {
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        self.push(
            out,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            "embed_rows",
        )
    }

    /// (C, h, w) feature map to a (w, h*C) sequence: row j concatenates
    /// column j over height, then channels — out[j, y*C + c] = x[c, y, j].
    pub fn permute_to_seq(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 3 {
            return Err(NumericsError::ShapeMismatch(format!(
                "permute_to_seq expects rank 3, got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[w, h * c]);
        for ci in 0..c {
            for y in 0..h {
                for j in 0..w {
                    out.data_mut()[j * (h * c) + y * c + ci] = xv.data()[(ci * h + y) * w + j];
                }
            }
        }
        self.push(out, Op::PermuteToSeq { x }, "permute_to_seq")
    }

    /// Add the parameter-free sinusoidal positional table to a (J, d) input.
    pub fn add_pos_enc(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_pos_enc expects rank 2, got {:?}",
                xv.shape()
            )));
        }
        let (rows, d) = (xv.shape()[0], xv.shape()[1]);
        if d % 2 != 0 {
            return Err(NumericsError::OddDim(d));
        }
        let pe = positional_encoding(rows, d);
        let data = xv
            .data()
            .iter()
            .zip(pe.data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::new(vec![rows, d], data)?;
        self.push(out, Op::AddPosEnc { x }, "add_pos_enc")
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let xv = &self.nodes[x].value;
        if xv.rank() != 2 || start + len > xv.shape()[1] {
            return Err(NumericsError::ShapeMismatch(format!(
                "slice_cols [{}, {}) of {:?}",
                start,
                start + len,
                xv.shape()
            )));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch("concat_cols of nothing".into()));
        }
        let m = self.nodes[parts[0]].value.shape()[0];
        let mut total = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.rank() != 2 || pv.shape()[0] != m {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat_cols row mismatch {:?}",
                    pv.shape()
                )));
            }
            total += pv.shape()[1];
        }
        let mut out = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let n = pv.shape()[1];
            for i in 0..m {
                out.data_mut()[i * total + off..i * total + off + n]
                    .copy_from_slice(&pv.data()[i * n..(i + 1) * n]);
            }
            off += n;
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            "concat_cols",
        )
    }

    /// Negative log-likelihood of target ids under per-step probability
    /// rows: `-sum_t ln(probs[t, targets[t]])` over counted steps.
    ///
    /// Probabilities below [`PROB_FLOOR`] are clamped before the log and
    /// recorded in [`Tape::clamp_events`].
    pub fn nll_from_probs(
        &mut self,
        probs: NodeId,
        targets: &[usize],
        pad_mask: &[bool],
    ) -> Result<NodeId, NumericsError> {
        let pv = &self.nodes[probs].value;
        if pv.rank() != 2 || pv.shape()[0] != targets.len() || pad_mask.len() != targets.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "nll probs {:?} targets {} mask {}",
                pv.shape(),
                targets.len(),
                pad_mask.len()
            )));
        }
        let v = pv.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::ShapeMismatch(format!(
                "target id {} out of vocab {}",
                bad, v
            )));
        }
        let counted: Vec<bool> = pad_mask.iter().map(|&pad| !pad).collect();
        let mut loss = 0.0f32;
        for (t, &tgt) in targets.iter().enumerate() {
            if !counted[t] {
                continue;
            }
            let p = pv.data()[t * v + tgt];
            if p < PROB_FLOOR {
                self.clamp_events += 1;
            }
            loss -= p.max(PROB_FLOOR).ln();
        }
        self.push(
            Tensor::scalar(loss),
            Op::NllFromProbs {
                probs,
                targets: targets.to_vec(),
                counted,
            },
            "nll_from_probs",
        )
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per
    /// tape node (None where the node does not influence the loss).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>, NumericsError> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(NumericsError::ShapeMismatch(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    {
                        let da = slot(&mut grads, *a, av.shape());
                        matmul_bt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                    }
                    let db = slot(&mut grads, *b, bv.shape());
                    matmul_at_acc(av.data(), g.data(), db.data_mut(), k, m, n);
                }
                Op::Transpose { x } => {
                    let xv = &self.nodes[*x].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let dx = slot(&mut grads, *x, xv.shape());
                    for i in 0..m {
                        for j in 0..n {
                            dx.data_mut()[i * n + j] += g.data()[j * m + i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(slot(&mut grads, *a, self.nodes[*a].value.shape()), &g);
                    add_into(slot(&mut grads, *b, self.nodes[*b].value.shape()), &g);
                }
                Op::AddRowVec { x, v } => {
                    add_into(slot(&mut grads, *x, self.nodes[*x].value.shape()), &g);
                    let n = self.nodes[*v].value.shape()[0];
                    let dv = slot(&mut grads, *v, &[n]);
                    for row in g.data().chunks(n) {
                        for (d, gv) in dv.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
                Op::AddChannelBias { x, v } => {
                    add_into(slot(&mut grads, *x, self.nodes[*x].value.shape()), &g);
                    let c = self.nodes[*v].value.shape()[0];
                    let hw = g.numel() / c;
                    let dv = slot(&mut grads, *v, &[c]);
                    for (ci, plane) in g.data().chunks(hw).enumerate() {
                        dv.data_mut()[ci] += plane.iter().sum::<f32>();
                    }
                }
                Op::ScalarMul { x, c } => {
                    let dx = slot(&mut grads, *x, self.nodes[*x].value.shape());
                    for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                }
                Op::Relu { x } => {
                    let out = &node.value;
                    let dx = slot(&mut grads, *x, self.nodes[*x].value.shape());
                    for ((d, gv), o) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    relu,
                    cols,
                    in_hw,
                    stride,
                    pad,
                } => {
                    let wv = &self.nodes[*w].value;
                    let (c_out, c_in, kh, kw) =
                        (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                    let positions = node.value.numel() / c_out;
                    // Gate the incoming gradient by the fused relu.
                    let mut gy = g.clone();
                    if *relu {
                        for (gv, o) in gy.data_mut().iter_mut().zip(node.value.data()) {
                            if *o <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let kdim = c_in * kh * kw;
                    {
                        let dw = slot(&mut grads, *w, wv.shape());
                        matmul_bt_acc(
                            gy.data(),
                            cols.data(),
                            dw.data_mut(),
                            c_out,
                            positions,
                            kdim,
                        );
                    }
                    let mut dcols = Tensor::zeros(&[kdim, positions]);
                    matmul_at_acc(
                        wv.data(),
                        gy.data(),
                        dcols.data_mut(),
                        kdim,
                        c_out,
                        positions,
                    );
                    let (h, w_in) = *in_hw;
                    let ow = (w_in + 2 * pad - kw) / stride + 1;
                    let dx = slot(&mut grads, *x, self.nodes[*x].value.shape());
                    col2im_acc(&dcols, dx, h, w_in, kh, kw, *stride, *pad, ow);
                }
                Op::MaxPool2d { x, argmax } => {
                    let dx = slot(&mut grads, *x, self.nodes[*x].value.shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src as usize] += g.data()[o];
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let dx = slot(&mut grads, *x, y.shape());
                    for ((drow, yrow), grow) in dx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot: f32 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = *xhat.shape().last().unwrap();
                    let gv = &self.nodes[*gain].value;
                    {
                        let dgain = slot(&mut grads, *gain, &[d]);
                        for (grow, xrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                            for j in 0..d {
                                dgain.data_mut()[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    {
                        let dbias = slot(&mut grads, *bias, &[d]);
                        for grow in g.data().chunks(d) {
                            for j in 0..d {
                                dbias.data_mut()[j] += grow[j];
                            }
                        }
                    }
                    let dx = slot(&mut grads, *x, xhat.shape());
                    for (r, ((drow, grow), xrow)) in dx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(xhat.data().chunks(d))
                        .enumerate()
                    {
                        let mut mean_dxhat = 0.0f32;
                        let mut mean_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            let dxh = grow[j] * gv.data()[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xrow[j];
                        }
                        mean_dxhat /= d as f32;
                        mean_dxhat_xhat /= d as f32;
                        for j in 0..d {
                            let dxh = grow[j] * gv.data()[j];
                            drow[j] += inv_std[r] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                        }
                    }
                }
                Op::CausalMask { x } => {
                    let t = node.value.shape()[0];
                    let dx = slot(&mut grads, *x, &[t, t]);
                    for i in 0..t {
                        for j in 0..=i {
                            dx.data_mut()[i * t + j] += g.data()[i * t + j];
                        }
                    }
                }
                Op::EmbedRows { table, ids } => {
                    let d = node.value.shape()[1];
                    let dt = slot(&mut grads, *table, self.nodes[*table].value.shape());
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[id * d + j] += g.data()[t * d + j];
                        }
                    }
                }
                Op::PermuteToSeq { x } => {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let dx = slot(&mut grads, *x, xv.shape());
                    for ci in 0..c {
                        for y in 0..h {
                            for j in 0..w {
                                dx.data_mut()[(ci * h + y) * w + j] +=
                                    g.data()[j * (h * c) + y * c + ci];
                            }
                        }
                    }
                }
                Op::AddPosEnc { x } => {
                    add_into(slot(&mut grads, *x, self.nodes[*x].value.shape()), &g);
                }
                Op::SliceCols { x, start, len } => {
                    let n = self.nodes[*x].value.shape()[1];
                    let m = self.nodes[*x].value.shape()[0];
                    let dx = slot(&mut grads, *x, &[m, n]);
                    for i in 0..m {
                        for j in 0..*len {
                            dx.data_mut()[i * n + start + j] += g.data()[i * len + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.shape()[1];
                    let m = node.value.shape()[0];
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.shape()[1];
                        let dp = slot(&mut grads, p, &[m, n]);
                        for i in 0..m {
                            for j in 0..n {
                                dp.data_mut()[i * n + j] += g.data()[i * total + off + j];
                            }
                        }
                        off += n;
                    }
                }
                Op::NllFromProbs {
                    probs,
                    targets,
                    counted,
                } => {
                    let pv = &self.nodes[*probs].value;
                    let v = pv.shape()[1];
                    let g0 = g.item();
                    let dp = slot(&mut grads, *probs, pv.shape());
                    for (t, &tgt) in targets.iter().enumerate() {
                        if !counted[t] {
                            continue;
                        }
                        let p = pv.data()[t * v + tgt];
                        if p >= PROB_FLOOR {
                            dp.data_mut()[t * v + tgt] -= g0 / p;
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// (name, gradient) pairs for bound parameters, in name order.
    pub fn param_grads<'g>(
        &self,
        grads: &'g [Option<Tensor>],
    ) -> Vec<(&str, &'g Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, &id)| grads[id].as_ref().map(|g| (name.as_str(), g)))
            .collect()
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Tensor::zeros(&[c_in * kh * kw, oh * ow]);
    let xd = x.data();
    let cd = cols.data_mut();
    for r in 0..c_in * kh * kw {
        let c = r / (kh * kw);
        let dy = (r / kw) % kh;
        let dx = r % kw;
        let row = &mut cd[r * oh * ow..(r + 1) * oh * ow];
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let base = (c * h + iy as usize) * w;
            for ox in 0..ow {
                let ix = (ox * stride + dx) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    row[oy * ow + ox] = xd[base + ix as usize];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcols: &Tensor,
    dx: &mut Tensor,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ow: usize,
) {
    let kdim = dcols.shape()[0];
    let positions = dcols.shape()[1];
    let oh = positions / ow;
    let dd = dcols.data();
    let xd = dx.data_mut();
    for r in 0..kdim {
        let c = r / (kh * kw);
        let dy = (r / kw) % kh;
        let dxo = r % kw;
        let row = &dd[r * positions..(r + 1) * positions];
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let base = (c * h + iy as usize) * w;
            for ox in 0..ow {
                let ix = (ox * stride + dxo) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    xd[base + ix as usize] += row[oy * ow + ox];
                }
            }
        }
    }
}

/// Sinusoidal positional table: PE[p, 2i] = sin(p / 10000^(2i/d)),
/// PE[p, 2i+1] = cos(p / 10000^(2i/d)).
pub fn positional_encoding(rows: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[rows, d]);
    for pos in 0..rows {
        for i in 0..d / 2 {
            let denom = 10000f64.powf(2.0 * i as f64 / d as f64);
            let arg = pos as f64 / denom;
            pe.data_mut()[pos * d + 2 * i] = arg.sin() as f32;
            pe.data_mut()[pos * d + 2 * i + 1] = arg.cos() as f32;
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let eye = tape.leaf(Tensor::eye(2)).unwrap();
        let ai = tape.matmul(a, eye).unwrap();
        assert!(tape.value(ai).bit_eq(tape.value(a)));

        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[3.0, 7.0]);

        let bad = tape.leaf(t(&[3, 1], &[0.0; 3])).unwrap();
        assert!(matches!(
            tape.matmul(a, bad),
            Err(NumericsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_one_by_one_identity() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, w, 1, 0, false).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }

    #[test]
    fn conv_hand_case_and_bad_stride() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4])).unwrap();
        let y = tape.conv2d(x, w, 1, 0, false).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);

        // 3-wide input, 2-wide kernel, stride 2: (3-2) % 2 != 0
        let x3 = tape.leaf(t(&[1, 2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(
            tape.conv2d(x3, w, 2, 0, false),
            Err(NumericsError::BadStride(_))
        ));
    }

    #[test]
    fn conv_fused_relu_clamps() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[1.0, -3.0])).unwrap();
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, w, 1, 0, true).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_pool_basics_and_tie_gradient() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[1, 4, 4], 2.5)).unwrap();
        let pc = tape.max_pool2d(c, (2, 2), (2, 2)).unwrap();
        assert!(tape.value(pc).data().iter().all(|&v| v == 2.5));

        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = tape.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);

        // tie: gradient goes to the first element in row-major order
        let mut tape2 = Tape::new();
        let tie = tape2.leaf(Tensor::full(&[1, 2, 2], 5.0)).unwrap();
        let pt = tape2.max_pool2d(tie, (2, 2), (2, 2)).unwrap();
        let grads = tape2.backward(pt).unwrap();
        let g = grads[tie].as_ref().unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_shift_and_oracle() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-7);
        }

        let logits = [0.3f32, -1.2, 2.0, 0.0, 0.7];
        let a = tape.leaf(t(&[1, 5], &logits)).unwrap();
        let sa = tape.softmax(a).unwrap();
        let shifted: Vec<f32> = logits.iter().map(|v| v + 3.7).collect();
        let b = tape.leaf(t(&[1, 5], &shifted)).unwrap();
        let sb = tape.softmax(b).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-6);

        // independent oracle: naive exp / sum(exp)
        let exp: Vec<f32> = logits.iter().map(|v| v.exp()).collect();
        let total: f32 = exp.iter().sum();
        for (got, want) in tape.value(sa).data().iter().zip(exp.iter().map(|e| e / total)) {
            assert!((got - want).abs() < 1e-6);
        }
        let sum: f32 = tape.value(sa).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let nan = Tensor::new(vec![2], vec![f32::NAN, 0.0]);
        assert!(nan.is_ok());
        assert!(tape.leaf(nan.unwrap()).is_err());
    }

    #[test]
    fn layer_norm_constant_row_and_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 6], 3.3)).unwrap();
        let gain = tape.leaf(Tensor::full(&[6], 1.0)).unwrap();
        let bias = tape.leaf(Tensor::zeros(&[6])).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-6));

        let vals: Vec<f32> = (0..8).map(|i| (i as f32 * 1.7).sin() * 2.0 + 0.3).collect();
        let xr = tape.leaf(t(&[1, 8], &vals)).unwrap();
        let g8 = tape.leaf(Tensor::full(&[8], 1.0)).unwrap();
        let b8 = tape.leaf(Tensor::zeros(&[8])).unwrap();
        let yr = tape.layer_norm(xr, g8, b8, 1e-5).unwrap();
        let row = tape.value(yr).data();
        let mean: f32 = row.iter().sum::<f32>() / 8.0;
        let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-3);
    }

    #[test]
    fn causal_mask_zeroes_upper_attention() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, 9.0, -0.2, 0.4])).unwrap();
        let masked = tape.causal_mask(x).unwrap();
        let att = tape.softmax(masked).unwrap();
        let a = tape.value(att).data();
        assert_eq!(a[1], 0.0); // exp underflows to exactly zero
        assert!((a[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(2, 128);
        // position 0: sin terms 0, cos terms 1
        for i in 0..64 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        // PE(1, 0) = sin(1)
        assert!((pe.data()[128] - 0.841471).abs() < 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[0.5; 8])).unwrap();
        let y = tape.add_pos_enc(x).unwrap();
        let zero = tape.leaf(Tensor::zeros(&[2, 4])).unwrap();
        let pe_only = tape.add_pos_enc(zero).unwrap();
        // additivity: add_pos_enc(x) - add_pos_enc(0) recovers x (up to
        // one rounding of the f32 addition)
        for ((a, b), orig) in tape
            .value(y)
            .data()
            .iter()
            .zip(tape.value(pe_only).data())
            .zip(tape.value(x).data())
        {
            assert!((a - b - orig).abs() < 1e-6);
        }

        let odd = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            tape.add_pos_enc(odd),
            Err(NumericsError::OddDim(3))
        ));
    }

    #[test]
    fn permute_to_seq_shapes_and_index_oracle() {
        let (c, h, w) = (3usize, 2usize, 4usize);
        let data: Vec<f32> = (0..c * h * w).map(|i| i as f32).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[c, h, w], &data)).unwrap();
        let q = tape.permute_to_seq(x).unwrap();
        assert_eq!(tape.value(q).shape(), &[4, 6]);
        // brute-force index oracle over every element
        for ci in 0..c {
            for y in 0..h {
                for j in 0..w {
                    let got = tape.value(q).data()[j * (h * c) + y * c + ci];
                    let want = data[(ci * h + y) * w + j];
                    assert_eq!(got, want);
                }
            }
        }
        // h = 1: row j equals the channel vector at width j
        let mut tape2 = Tape::new();
        let d2: Vec<f32> = (0..6).map(|i| i as f32 * 10.0).collect();
        let x2 = tape2.leaf(t(&[3, 1, 2], &d2)).unwrap();
        let q2 = tape2.permute_to_seq(x2).unwrap();
        assert_eq!(tape2.value(q2).data(), &[0.0, 20.0, 40.0, 10.0, 30.0, 50.0]);
    }

    #[test]
    fn nll_one_hot_uniform_and_loop_oracle() {
        // probabilities exactly one-hot on the labels: loss 0
        let mut tape = Tape::new();
        let mut onehot = Tensor::zeros(&[3, 4]);
        for (tstep, &tgt) in [1usize, 0, 3].iter().enumerate() {
            onehot.data_mut()[tstep * 4 + tgt] = 1.0;
        }
        let p = tape.leaf(onehot).unwrap();
        let loss = tape.nll_from_probs(p, &[1, 0, 3], &[false; 3]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // uniform over 43 classes, 4 unmasked steps: 4 ln 43
        let u = tape.leaf(Tensor::full(&[4, 43], 1.0 / 43.0)).unwrap();
        let lu = tape.nll_from_probs(u, &[0, 1, 2, 3], &[false; 4]).unwrap();
        let want = 4.0 * (43.0f64).ln();
        assert!((tape.value(lu).item() as f64 - want).abs() < 1e-4);

        // random case vs a scalar-loop oracle, with one masked step
        let probs: Vec<f32> = (0..3 * 5)
            .map(|i| 0.01 + ((i as f32 * 0.7).sin().abs()))
            .collect();
        let pr = tape.leaf(t(&[3, 5], &probs)).unwrap();
        let targets = [2usize, 4, 0];
        let mask = [false, true, false];
        let lr = tape.nll_from_probs(pr, &targets, &mask).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..3 {
            if !mask[i] {
                oracle -= (probs[i * 5 + targets[i]] as f64).ln();
            }
        }
        assert!((tape.value(lr).item() as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn nll_clamps_zero_probability_and_counts_it() {
        let mut tape = Tape::new();
        let mut probs = Tensor::zeros(&[1, 3]);
        probs.data_mut()[1] = 1.0; // target 0 has probability exactly 0
        let p = tape.leaf(probs).unwrap();
        let loss = tape.nll_from_probs(p, &[0], &[false]).unwrap();
        assert!((tape.value(loss).item() - (-PROB_FLOOR.ln())).abs() < 1e-3);
        assert_eq!(tape.clamp_events, 1);
        // clamped entries contribute no gradient
        let grads = tape.backward(loss).unwrap();
        assert!(grads[p].as_ref().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        // loss = sum over both uses of x: d/dx = 2 * ones
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let doubled = tape.add(x, x).unwrap();
        let w = tape.leaf(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let loss = tape.matmul(doubled, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[x].as_ref().unwrap().data(), &[2.0, 2.0]);
    }
}
