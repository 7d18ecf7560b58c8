//! Fused multi-head scaled dot-product attention over arbitrary row blocks.
//!
//! A single op covers causal self-attention over one long sequence, per-frame
//! attention over a stack of frames, and cross-attention with custom masks:
//! each [`AttnBlock`] names a query row range, a key row range and a mask
//! pattern. Query rows not covered by any block produce zeros.

use std::sync::Arc;

use crate::tensor::{gemm, MatMut, MatRef, Tensor};

#[derive(Clone, Debug)]
pub enum MaskPattern {
    Full,
    /// Query `i` sees keys `0..=i` (block-relative); requires `q_len <= k_len`.
    Causal,
    /// Row-major `q_len × k_len` table, `true` = may attend.
    Custom(Arc<Vec<bool>>),
}

#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub pattern: MaskPattern,
}

impl AttnBlock {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            k_start,
            k_len,
            pattern: MaskPattern::Full,
        }
    }

    pub fn causal(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            pattern: MaskPattern::Causal,
        }
    }
}

/// Head layout plus the list of attention blocks.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    /// Model width; each head reads `width / heads` columns.
    pub width: usize,
    pub blocks: Vec<AttnBlock>,
}

impl AttnSpec {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `n` independent blocks of `q_len` queries against `k_len` keys each,
    /// stacked row-wise in both operands.
    pub fn stacked(heads: usize, width: usize, n: usize, q_len: usize, k_len: usize) -> Self {
        let blocks = (0..n)
            .map(|i| AttnBlock::full(i * q_len, q_len, i * k_len, k_len))
            .collect();
        Self {
            heads,
            width,
            blocks,
        }
    }
}

/// Column window into a matrix: columns `offset..offset + width`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ColView<'a> {
    pub t: &'a Tensor,
    pub offset: usize,
}

impl<'a> ColView<'a> {
    fn block(&self, row_start: usize, col: usize) -> MatRef<'a> {
        let start = row_start * self.t.cols + self.offset + col;
        MatRef::new(&self.t.data[start..], self.t.cols as isize, 1)
    }
}

const CAUSAL_CHUNK: usize = 64;

/// Query row chunks; causal blocks are split so each chunk only touches the
/// keys it can see.
fn chunks(b: &AttnBlock) -> Vec<(usize, usize)> {
    match b.pattern {
        MaskPattern::Causal => (0..b.q_len)
            .step_by(CAUSAL_CHUNK)
            .map(|s| (s, (s + CAUSAL_CHUNK).min(b.q_len)))
            .collect(),
        _ => vec![(0, b.q_len)],
    }
}

fn chunk_key_extent(b: &AttnBlock, q1: usize) -> usize {
    match b.pattern {
        MaskPattern::Causal => q1.min(b.k_len),
        _ => b.k_len,
    }
}

/// In-place masked softmax of one score row; fully masked rows become zero.
fn softmax_row(row: &mut [f64], qi: usize, b: &AttnBlock) {
    match &b.pattern {
        MaskPattern::Full => softmax_prefix(row, b.k_len),
        MaskPattern::Causal => {
            let ext = (qi + 1).min(b.k_len);
            softmax_prefix(row, ext);
            row[ext..].iter_mut().for_each(|s| *s = 0.0);
        }
        MaskPattern::Custom(m) => {
            let allowed = &m[qi * b.k_len..(qi + 1) * b.k_len];
            let mut max = f64::NEG_INFINITY;
            for (s, &ok) in row.iter().zip(allowed) {
                if ok && *s > max {
                    max = *s;
                }
            }
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|s| *s = 0.0);
                return;
            }
            let mut sum = 0.0;
            for (s, &ok) in row.iter_mut().zip(allowed) {
                *s = if ok { (*s - max).exp() } else { 0.0 };
                sum += *s;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|s| *s *= inv);
        }
    }
}

fn softmax_prefix(row: &mut [f64], ext: usize) {
    let head = &mut row[..ext];
    let max = head.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in head.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    head.iter_mut().for_each(|s| *s *= inv);
}

/// Forward pass. Returns the output and the attention probabilities per
/// `(block, head)` in block-major order.
pub(crate) fn forward(
    q: ColView<'_>,
    k: ColView<'_>,
    v: ColView<'_>,
    q_rows: usize,
    spec: &AttnSpec,
) -> (Tensor, Vec<Vec<f64>>) {
    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q_rows, spec.width);
    let mut saved = Vec::with_capacity(spec.blocks.len() * spec.heads);
    for b in &spec.blocks {
        for h in 0..spec.heads {
            let col = h * dh;
            let mut p = vec![0.0; b.q_len * b.k_len];
            if b.q_len == 0 || b.k_len == 0 {
                saved.push(p);
                continue;
            }
            for (q0, q1) in chunks(b) {
                let kext = chunk_key_extent(b, q1);
                let rows = &mut p[q0 * b.k_len..q1 * b.k_len];
                gemm(
                    q1 - q0,
                    dh,
                    kext,
                    scale,
                    q.block(b.q_start + q0, col),
                    k.block(b.k_start, col).t(),
                    0.0,
                    MatMut::new(rows, b.k_len as isize, 1),
                );
                for qi in q0..q1 {
                    let row = &mut p[qi * b.k_len..(qi + 1) * b.k_len];
                    softmax_row(row, qi, b);
                }
                let out_start = (b.q_start + q0) * spec.width + col;
                gemm(
                    q1 - q0,
                    kext,
                    dh,
                    1.0,
                    MatRef::new(&p[q0 * b.k_len..], b.k_len as isize, 1),
                    v.block(b.k_start, col),
                    0.0,
                    MatMut::new(&mut out.data[out_start..], spec.width as isize, 1),
                );
            }
            saved.push(p);
        }
    }
    (out, saved)
}

/// Gradient buffers for the three operands; any of them may alias the same
/// underlying variable, so the caller passes distinct tensors and merges.
pub(crate) struct AttnGrads<'a> {
    pub dq: &'a mut Tensor,
    pub dk: &'a mut Tensor,
    pub dv: &'a mut Tensor,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: ColView<'_>,
    k: ColView<'_>,
    v: ColView<'_>,
    spec: &AttnSpec,
    probs: &[Vec<f64>],
    dout: &Tensor,
    grads: AttnGrads<'_>,
    offsets: (usize, usize, usize),
) {
    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (q_off, k_off, v_off) = offsets;
    let AttnGrads { dq, dk, dv } = grads;
    let mut idx = 0;
    for b in &spec.blocks {
        for h in 0..spec.heads {
            let p = &probs[idx];
            idx += 1;
            if b.q_len == 0 || b.k_len == 0 {
                continue;
            }
            let col = h * dh;
            for (q0, q1) in chunks(b) {
                let kext = chunk_key_extent(b, q1);
                let qn = q1 - q0;
                let pc = &p[q0 * b.k_len..q1 * b.k_len];
                let dout_view = MatRef::new(
                    &dout.data[(b.q_start + q0) * spec.width + col..],
                    spec.width as isize,
                    1,
                );
                // dV += P^T dO
                {
                    let start = b.k_start * dv.cols + v_off + col;
                    let cols = dv.cols as isize;
                    gemm(
                        kext,
                        qn,
                        dh,
                        1.0,
                        MatRef::new(pc, b.k_len as isize, 1).t(),
                        dout_view,
                        1.0,
                        MatMut::new(&mut dv.data[start..], cols, 1),
                    );
                }
                // dP = dO V^T, then the softmax Jacobian.
                let mut ds = vec![0.0; qn * kext];
                gemm(
                    qn,
                    dh,
                    kext,
                    1.0,
                    dout_view,
                    v.block(b.k_start, col).t(),
                    0.0,
                    MatMut::new(&mut ds, kext as isize, 1),
                );
                for r in 0..qn {
                    let pr = &pc[r * b.k_len..r * b.k_len + kext];
                    let dr = &mut ds[r * kext..(r + 1) * kext];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // dQ += dS K
                {
                    let start = (b.q_start + q0) * dq.cols + q_off + col;
                    let cols = dq.cols as isize;
                    gemm(
                        qn,
                        kext,
                        dh,
                        1.0,
                        MatRef::new(&ds, kext as isize, 1),
                        k.block(b.k_start, col),
                        1.0,
                        MatMut::new(&mut dq.data[start..], cols, 1),
                    );
                }
                // dK += dS^T Q
                {
                    let start = b.k_start * dk.cols + k_off + col;
                    let cols = dk.cols as isize;
                    gemm(
                        kext,
                        qn,
                        dh,
                        1.0,
                        MatRef::new(&ds, kext as isize, 1).t(),
                        q.block(b.q_start + q0, col),
                        1.0,
                        MatMut::new(&mut dk.data[start..], cols, 1),
                    );
                }
            }
        }
    }
}
