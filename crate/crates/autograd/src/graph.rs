//! The tape: every op appends a node holding its value and enough saved
//! state to run its vector-Jacobian product during [`Graph::backward`].

use std::collections::HashMap;

use crate::attention::{self, AttnGrads, AttnSpec, ColView};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention operand: columns `offset..offset + width` of `var`.
#[derive(Clone, Copy, Debug)]
pub struct AttnInput {
    pub var: Var,
    pub offset: usize,
}

impl AttnInput {
    pub fn new(var: Var, offset: usize) -> Self {
        Self { var, offset }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: AttnInput,
        k: AttnInput,
        v: AttnInput,
        spec: Box<AttnSpec>,
        probs: Vec<Vec<f64>>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    Giou {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    CosineRows(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode tape. Build a fresh graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const COS_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, !store.is_frozen(id));
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Parameter looked up by name. Panics if absent.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols, tb.rows,
            "matmul {}x{} @ {}x{}",
            ta.rows, ta.cols, tb.rows, tb.cols
        );
        let value = ta.matmul(tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + row` where `row` is `1 × cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1, "add_row expects a row vector");
        assert_eq!(ta.cols, tr.cols, "add_row column mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `a * s` with `s` a `1 × 1` var.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let mut v = self.value(a).clone();
        v.scale_assign(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|x| f(*x)).collect())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = tx.shape();
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head attention; see [`AttnSpec`] for the block layout.
    pub fn attention(&mut self, q: AttnInput, k: AttnInput, v: AttnInput, spec: AttnSpec) -> Var {
        assert!(spec.heads > 0 && spec.width.is_multiple_of(spec.heads));
        for inp in [q, k, v] {
            assert!(
                inp.offset + spec.width <= self.value(inp.var).cols,
                "attention operand too narrow"
            );
        }
        for b in &spec.blocks {
            assert!(b.q_start + b.q_len <= self.value(q.var).rows);
            assert!(b.k_start + b.k_len <= self.value(k.var).rows);
            assert!(b.k_start + b.k_len <= self.value(v.var).rows);
            if let attention::MaskPattern::Custom(m) = &b.pattern {
                assert_eq!(m.len(), b.q_len * b.k_len);
            }
        }
        let q_rows = self.value(q.var).rows;
        let (out, probs) = attention::forward(
            ColView {
                t: self.value(q.var),
                offset: q.offset,
            },
            ColView {
                t: self.value(k.var),
                offset: k.offset,
            },
            ColView {
                t: self.value(v.var),
                offset: v.offset,
            },
            q_rows,
            &spec,
        );
        let rg = self.rg(q.var) || self.rg(k.var) || self.rg(v.var);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec),
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities saved by an attention node, per `(block, head)`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            assert!(i < t.rows, "gather_rows index {i} out of {} rows", t.rows);
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols, data);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&tensors);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let v = Tensor::from_vec(rows, cols, t.data.clone());
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rows > 0, "mean_rows of empty matrix");
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), rg)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows, targets.len());
        assert_eq!(t.rows, weights.len());
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for r in 0..t.rows {
            let row = t.row(r);
            assert!(targets[r] < t.cols, "target id out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..t.cols {
                probs[r * t.cols + c] = (row[c] - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `Σ_i w_i · BCE(sigmoid(z_i), y_i)` over an `n × 1` logit column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), targets.len());
        assert_eq!(t.len(), weights.len());
        let loss = t
            .data
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((z, y), w)| w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()))
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// `Σ_i w_i Σ_c |pred_ic − target_ic|`.
    pub fn l1(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Var {
        let t = self.value(pred);
        assert_eq!(t.shape(), target.shape());
        assert_eq!(t.rows, weights.len());
        let mut loss = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let s: f64 = t
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, q)| (p - q).abs())
                .sum();
            loss += w * s;
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// `Σ_i w_i (1 − GIoU(pred_i, target_i))` for center-form `(cx, cy, w, h)` rows.
    pub fn giou_loss(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Var {
        let t = self.value(pred);
        assert_eq!(t.cols, 4);
        assert_eq!(t.shape(), target.shape());
        assert_eq!(t.rows, weights.len());
        let mut loss = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let (g, _) = giou_and_grad(t.row(r), target.row(r));
            loss += w * (1.0 - g);
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Giou {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Cosine similarity of every row of `a` with the single row of `b`;
    /// zero-norm rows give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows, 1);
        assert_eq!(ta.cols, tb.cols);
        let nb = tb.norm();
        let mut out = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            let row = ta.row(r);
            let na = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > COS_EPS && nb > COS_EPS {
                let dot: f64 = row.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
                out.data[r] = dot / (na * nb);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::CosineRows(a, b), rg)
    }

    /// Runs the reverse sweep from a `1 × 1` output.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter leaf that was reached.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        for (id, var) in &self.params {
            if let Some(g) = self.grad(*var) {
                out.set(*id, g.clone());
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(
                        ta.rows,
                        tb.cols,
                        ta.cols,
                        1.0,
                        MatRef::new(&g.data, g.cols as isize, 1),
                        MatRef::new(&tb.data, tb.cols as isize, 1).t(),
                        0.0,
                        MatMut::new(&mut da.data, ta.cols as isize, 1),
                    );
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(
                        tb.rows,
                        ta.rows,
                        tb.cols,
                        1.0,
                        MatRef::new(&ta.data, ta.cols as isize, 1).t(),
                        MatRef::new(&g.data, g.cols as isize, 1),
                        0.0,
                        MatMut::new(&mut db.data, tb.cols as isize, 1),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut nb = g.clone();
                nb.scale_assign(-1.0);
                self.acc(grads, *b, nb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.rg(*b) {
                    let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut dr = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for (d, x) in dr.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *row, Tensor::row_vector(dr));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                self.acc(grads, *a, d);
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                if self.rg(*a) {
                    let mut d = g.clone();
                    d.scale_assign(sv);
                    self.acc(grads, *a, d);
                }
                if self.rg(*s) {
                    let ta = self.value(*a);
                    let ds: f64 = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gv, x)| gv * gelu_grad(*x))
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Exp(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(gv, e)| gv * e)
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gm = self.value(*gamma);
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::row_vector(dg));
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *beta, Tensor::row_vector(db));
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gm.data[c];
                            m1 += dh;
                            m2 += dh * xhat[r * cols + c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gm.data[c];
                            dx.data[r * cols + c] =
                                rstd[r] * (dh - m1 - xhat[r * cols + c] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                // Operands may alias the same var; separate buffers are merged by `acc`.
                let zeros = |var: Var| {
                    let (r, c) = self.shape(var);
                    Tensor::zeros(r, c)
                };
                let (mut dq, mut dk, mut dv) = (zeros(q.var), zeros(k.var), zeros(v.var));
                attention::backward(
                    ColView {
                        t: self.value(q.var),
                        offset: q.offset,
                    },
                    ColView {
                        t: self.value(k.var),
                        offset: k.offset,
                    },
                    ColView {
                        t: self.value(v.var),
                        offset: v.offset,
                    },
                    spec,
                    probs,
                    g,
                    AttnGrads {
                        dq: &mut dq,
                        dk: &mut dk,
                        dv: &mut dv,
                    },
                    (q.offset, k.offset, v.offset),
                );
                self.acc(grads, q.var, dq);
                self.acc(grads, k.var, dk);
                self.acc(grads, v.var, dv);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (j, &src) in idx.iter().enumerate() {
                    for (x, gv) in d.row_mut(src).iter_mut().zip(g.row(j)) {
                        *x += gv;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let slice = g.data[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    self.acc(grads, *p, Tensor::from_vec(r, c, slice));
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Tensor::from_vec(r, c, g.data.clone()));
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                let inv = 1.0 / r as f64;
                for row in 0..r {
                    for (x, gv) in d.row_mut(row).iter_mut().zip(&g.data) {
                        *x = gv * inv;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                let gs = g.item();
                let mut d = Tensor::from_vec(r, c, probs.clone());
                for row in 0..r {
                    let w = weights[row] * gs;
                    let dr = d.row_mut(row);
                    dr[targets[row]] -= 1.0;
                    dr.iter_mut().for_each(|x| *x *= w);
                }
                self.acc(grads, *logits, d);
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let t = self.value(*logits);
                let gs = g.item();
                let d = t
                    .data
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((z, y), w)| gs * w * (sigmoid(*z) - y))
                    .collect();
                self.acc(grads, *logits, Tensor::from_vec(t.rows, t.cols, d));
            }
            Op::L1 {
                pred,
                target,
                weights,
            } => {
                let t = self.value(*pred);
                let gs = g.item();
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (r, w) in weights.iter().enumerate() {
                    for c in 0..t.cols {
                        let diff = t.get(r, c) - target.get(r, c);
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d.set(r, c, gs * w * s);
                    }
                }
                self.acc(grads, *pred, d);
            }
            Op::Giou {
                pred,
                target,
                weights,
            } => {
                let t = self.value(*pred);
                let gs = g.item();
                let mut d = Tensor::zeros(t.rows, 4);
                for (r, w) in weights.iter().enumerate() {
                    let (_, dg) = giou_and_grad(t.row(r), target.row(r));
                    for (c, dgc) in dg.iter().enumerate() {
                        d.set(r, c, -gs * w * dgc);
                    }
                }
                self.acc(grads, *pred, d);
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.norm();
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                let mut db = vec![0.0; tb.cols];
                for r in 0..ta.rows {
                    let row = ta.row(r);
                    let na = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na <= COS_EPS || nb <= COS_EPS {
                        continue;
                    }
                    let cosv = node.value.data[r];
                    let gv = g.data[r];
                    let inv = 1.0 / (na * nb);
                    for c in 0..ta.cols {
                        da.data[r * ta.cols + c] =
                            gv * (tb.data[c] * inv - cosv * row[c] / (na * na));
                        db[c] += gv * (row[c] * inv - cosv * tb.data[c] / (nb * nb));
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, Tensor::row_vector(db));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// GIoU of two center-form boxes and its gradient with respect to the first.
///
/// Degenerate unions fall back to the identity rule (1 when equal, else 0)
/// with a zero gradient.
pub fn giou_and_grad(a: &[f64], b: &[f64]) -> (f64, [f64; 4]) {
    let (ax1, ax2) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay1, ay2) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, bx2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by1, by2) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);

    let ix = ax2.min(bx2) - ax1.max(bx1);
    let iy = ay2.min(by2) - ay1.max(by1);
    let (iw, ih) = (ix.max(0.0), iy.max(0.0));
    let inter = iw * ih;
    let aw = ax2 - ax1;
    let ah = ay2 - ay1;
    let area_a = aw * ah;
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclose = cw * ch;
    if union <= 0.0 || enclose <= 0.0 {
        let same = a.iter().zip(b).all(|(x, y)| x == y);
        return (if same { 1.0 } else { 0.0 }, [0.0; 4]);
    }
    let giou = inter / union - (enclose - union) / enclose;

    // Partials with respect to the corners (x1, y1, x2, y2) of `a`.
    let mut d_inter = [0.0; 4];
    if ix > 0.0 && iy > 0.0 {
        if ax1 >= bx1 {
            d_inter[0] = -ih;
        }
        if ax2 <= bx2 {
            d_inter[2] = ih;
        }
        if ay1 >= by1 {
            d_inter[1] = -iw;
        }
        if ay2 <= by2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ah, -aw, ah, aw];
    let mut d_enc = [0.0; 4];
    if ax1 <= bx1 {
        d_enc[0] = -ch;
    }
    if ax2 >= bx2 {
        d_enc[2] = ch;
    }
    if ay1 <= by1 {
        d_enc[1] = -cw;
    }
    if ay2 >= by2 {
        d_enc[3] = cw;
    }
    let mut dc = [0.0; 4];
    for i in 0..4 {
        let du = d_area[i] - d_inter[i];
        dc[i] = (d_inter[i] * union - inter * du) / (union * union)
            + (du * enclose - union * d_enc[i]) / (enclose * enclose);
    }
    // Chain from corners to (cx, cy, w, h).
    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        (dc[2] - dc[0]) / 2.0,
        (dc[3] - dc[1]) / 2.0,
    ];
    (giou, grad)
}
