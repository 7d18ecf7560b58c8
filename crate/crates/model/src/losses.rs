//! Training objective: answer cross-entropy, matched detection losses,
//! denoising, contrastive alignment and their weighted sums.

use groundkit_autograd::{giou_and_grad, sigmoid, Graph, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::spatial::{CandidateSet, DenoisingInput, EncoderFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the answer cross-entropy in the total.
    pub token: f64,
    /// Weight of the spatial loss in the total.
    pub spatial: f64,
    pub objectness: f64,
    pub bbox: f64,
    pub giou: f64,
    pub denoising: f64,
    pub alignment: f64,
    pub dn_cls: f64,
    pub dn_box: f64,
    pub dn_giou: f64,
    /// Relative weight of unmatched predictions in the objectness loss.
    pub no_object: f64,
    /// Matching cost weights `(objectness, L1, GIoU)`.
    pub match_cost: [f64; 3],
    /// Negatives drawn per positive in the alignment loss.
    pub negatives: usize,
    /// Draw one negative set per layer instead of one per positive.
    pub share_negatives: bool,
    pub align_positives: AlignPositives,
    /// Box jitter scale of the denoising queries, relative to box size.
    pub dn_noise: f64,
    pub dn_groups: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            token: 1.0,
            spatial: 0.02,
            objectness: 1.0,
            bbox: 0.5,
            giou: 2.0,
            denoising: 1.0,
            alignment: 1.0,
            dn_cls: 1.0,
            dn_box: 5.0,
            dn_giou: 2.0,
            no_object: 0.1,
            match_cost: [1.0, 5.0, 2.0],
            negatives: 16,
            share_negatives: false,
            align_positives: AlignPositives::Target,
            dn_noise: 0.4,
            dn_groups: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.token,
            self.spatial,
            self.objectness,
            self.bbox,
            self.giou,
            self.denoising,
            self.alignment,
            self.dn_cls,
            self.dn_box,
            self.dn_giou,
            self.dn_noise,
        ];
        if all.iter().chain(&self.match_cost).any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        if !(self.no_object.is_finite() && self.no_object > 0.0) {
            return Err("no_object weight must be positive".into());
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits[rows[i]]` against `targets[i]`.
pub fn token_loss(g: &mut Graph, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if rows.len() != targets.len() {
        return Err(ModelError::CountMismatch {
            what: "token targets",
            expected: rows.len(),
            got: targets.len(),
        });
    }
    let picked = g.gather_rows(logits, rows);
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    Ok(g.cross_entropy(picked, targets, &w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

/// Costs are clamped to this magnitude and NaN counts as the maximum, so the
/// potentials stay finite and the search always terminates.
const COST_CAP: f64 = 1e12;

/// Minimum-cost assignment of the smaller side of a rectangular cost
/// matrix (`rows × cols`). Returns `(row, col)` pairs sorted by row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if cost.iter().flatten().any(|c| c.is_nan() || c.abs() > COST_CAP) {
        let capped: Vec<Vec<f64>> = cost
            .iter()
            .map(|r| r.iter().map(|&c| if c.is_nan() { COST_CAP } else { c.clamp(-COST_CAP, COST_CAP) }).collect())
            .collect();
        return min_cost_assignment(&capped);
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut out: Vec<(usize, usize)> = min_cost_assignment(&t).into_iter().map(|(c, r)| (r, c)).collect();
        out.sort_unstable();
        return out;
    }
    // Shortest augmenting paths with row/column potentials, 1-based.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

/// `w_cls·(1 − p) + w_box·L1 + w_giou·(1 − GIoU)` for every prediction
/// (rows) against every ground truth (columns). L1 is the mean over the
/// four center-form coordinates.
pub fn match_costs(boxes: &[[f64; 4]], objectness: &[f64], gts: &[[f64; 4]], w: [f64; 3]) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .zip(objectness)
        .map(|(b, p)| {
            gts.iter()
                .map(|t| {
                    let l1 = b.iter().zip(t).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
                    let (giou, _) = giou_and_grad(b, t);
                    w[0] * (1.0 - p) + w[1] * l1 + w[2] * (1.0 - giou)
                })
                .collect()
        })
        .collect()
}

pub fn hungarian_match(boxes: &[[f64; 4]], objectness: &[f64], gts: &[[f64; 4]], w: [f64; 3]) -> MatchResult {
    let cost = match_costs(boxes, objectness, gts, w);
    let pairs = if gts.is_empty() { Vec::new() } else { min_cost_assignment(&cost) };
    let total = pairs.iter().map(|&(p, g)| cost[p][g]).sum();
    let unmatched = (0..boxes.len()).filter(|i| !pairs.iter().any(|(p, _)| p == i)).collect();
    MatchResult {
        pairs,
        unmatched,
        cost: total,
    }
}

fn rows_of(t: &Tensor, rows: std::ops::Range<usize>) -> Vec<[f64; 4]> {
    rows.map(|r| {
        let s = t.row(r);
        [s[0], s[1], s[2], s[3]]
    })
    .collect()
}

/// Matches the predictions in `rows` of a decoder output against `gts`.
pub fn match_rows(
    g: &Graph,
    boxes: Var,
    logits: Var,
    rows: std::ops::Range<usize>,
    gts: &[[f64; 4]],
    w: [f64; 3],
) -> MatchResult {
    let b = rows_of(g.value(boxes), rows.clone());
    let p: Vec<f64> = rows.map(|r| sigmoid(g.value(logits).data[r])).collect();
    hungarian_match(&b, &p, gts, w)
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLosses {
    pub objectness: Var,
    pub bbox: Var,
    pub giou: Var,
}

fn boxes_tensor(b: &[[f64; 4]]) -> Tensor {
    Tensor::from_vec(b.len(), 4, b.iter().flat_map(|x| x.iter().copied()).collect())
}

/// Objectness BCE over all predictions in `rows` (matched = 1), a weighted
/// mean where unmatched rows count `no_object` times a matched one, plus
/// mean L1 (over coordinates) and mean `1 − GIoU` over matched pairs.
/// Box terms are exactly 0 without ground truth.
pub fn detection_losses(
    g: &mut Graph,
    boxes: Var,
    logits: Var,
    rows: std::ops::Range<usize>,
    gts: &[[f64; 4]],
    m: &MatchResult,
    no_object: f64,
) -> DetectionLosses {
    let idx: Vec<usize> = rows.clone().collect();
    let mut targets = vec![0.0; idx.len()];
    for &(p, _) in &m.pairs {
        targets[p] = 1.0;
    }
    let z = g.gather_rows(logits, &idx);
    let raw: Vec<f64> = targets.iter().map(|&t| if t > 0.0 { 1.0 } else { no_object }).collect();
    let norm: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let objectness = g.bce_with_logits(z, &targets, &w);
    if m.pairs.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return DetectionLosses {
            objectness,
            bbox: zero,
            giou: zero,
        };
    }
    let k = m.pairs.len() as f64;
    let pred_rows: Vec<usize> = m.pairs.iter().map(|&(p, _)| rows.start + p).collect();
    let target = boxes_tensor(&m.pairs.iter().map(|&(_, t)| gts[t]).collect::<Vec<_>>());
    let pred = g.gather_rows(boxes, &pred_rows);
    let bbox = g.l1(pred, &target, &vec![1.0 / (4.0 * k); pred_rows.len()]);
    let giou = g.giou_loss(pred, &target, &vec![1.0 / k; pred_rows.len()]);
    DetectionLosses { objectness, bbox, giou }
}

/// `mean_i −log softmax([s_i⁺, s_i1⁻, …] / τ)[0]`, one row of `scores`
/// (an `R × 1` column) per index. Every group of a call must have the same
/// number of negatives.
pub fn info_nce(g: &mut Graph, scores: Var, groups: &[(usize, Vec<usize>)], inv_tau: Var) -> Var {
    assert!(!groups.is_empty());
    let width = 1 + groups[0].1.len();
    let mut idx = Vec::with_capacity(groups.len() * width);
    for (p, negs) in groups {
        assert_eq!(negs.len() + 1, width, "uneven negative sets");
        idx.push(*p);
        idx.extend_from_slice(negs);
    }
    let picked = g.gather_rows(scores, &idx);
    let logits = g.reshape(picked, groups.len(), width);
    let logits = g.mul_scalar(logits, inv_tau);
    let w = vec![1.0 / groups.len() as f64; groups.len()];
    g.cross_entropy(logits, &vec![0; groups.len()], &w)
}

/// Which tokens act as positives in the alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPositives {
    /// Tokens covered by the ground-truth box.
    #[default]
    Target,
    /// The top-K selected tokens themselves.
    Selected,
}

/// Positive tokens of one (frame, layer), and the tokens negatives must
/// avoid.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignSet {
    pub frame: usize,
    pub layer: usize,
    pub positives: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// One set per considered layer of `cands`.
pub fn align_sets(frame: usize, cands: &CandidateSet, mode: AlignPositives, target: &[usize]) -> Vec<AlignSet> {
    cands
        .scores
        .iter()
        .map(|(l, _)| {
            let positives = match mode {
                AlignPositives::Selected => cands.tokens_of_layer(*l),
                AlignPositives::Target => target.to_vec(),
            };
            AlignSet {
                frame,
                layer: *l,
                excluded: positives.clone(),
                positives,
            }
        })
        .collect()
}

/// For each positive, `n` negatives drawn uniformly from the tokens outside
/// `set.excluded` (all of them if fewer remain). With `share`, one draw
/// serves the whole set.
pub fn sample_negatives(set: &AlignSet, tokens: usize, n: usize, share: bool, rng: &mut impl Rng) -> Vec<(usize, Vec<usize>)> {
    let pool: Vec<usize> = (0..tokens).filter(|t| !set.excluded.contains(t)).collect();
    let k = n.min(pool.len());
    let mut draw = || {
        let mut v: Vec<usize> = sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        v.sort_unstable();
        v
    };
    let shared = if share { Some(draw()) } else { None };
    set.positives
        .iter()
        .map(|&t| (t, shared.clone().unwrap_or_else(&mut draw)))
        .collect()
}

/// Contrastive alignment of the positive tokens of every set with the
/// mean bridging query, averaged over all positives.
#[allow(clippy::too_many_arguments)]
pub fn alignment_loss(
    g: &mut Graph,
    feats: &EncoderFeatures,
    sets: &[AlignSet],
    bridge: Var,
    inv_tau: Var,
    negatives: usize,
    share: bool,
    rng: &mut impl Rng,
) -> Var {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    let rows_per_layer = feats.frames * feats.tokens;
    for set in sets {
        let at = |t: usize| set.layer * rows_per_layer + set.frame * feats.tokens + t;
        for (token, negs) in sample_negatives(set, feats.tokens, negatives, share, rng) {
            groups.push((at(token), negs.into_iter().map(at).collect()));
        }
    }
    if groups.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let q = g.mean_rows(bridge);
    let cos: Vec<Var> = feats.layers.iter().map(|l| g.cosine_rows(*l, q)).collect();
    let scores = g.concat_rows(&cos);
    // Negative counts only differ when a layer runs short of tokens.
    let mut by_width: std::collections::BTreeMap<usize, Vec<(usize, Vec<usize>)>> = Default::default();
    for gr in groups {
        by_width.entry(gr.1.len()).or_default().push(gr);
    }
    let total: usize = by_width.values().map(Vec::len).sum();
    let mut parts = Vec::new();
    for gs in by_width.values() {
        let l = info_nce(g, scores, gs, inv_tau);
        parts.push(g.scale(l, gs.len() as f64 / total as f64));
    }
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    acc
}

/// One perturbed copy of a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoisingQuery {
    pub bbox: [f64; 4],
    /// Relative offsets applied to `(cx, cy, w, h)`.
    pub noise: [f64; 4],
    /// Largest absolute relative offset.
    pub magnitude: f64,
    pub positive: bool,
}

/// `groups` pairs of (positive, negative) jittered copies of `gt`. Offsets
/// are drawn with their largest component in `[0, λ/2)` for positives and
/// `[λ/2, λ]` for negatives; centers move by offset × size, sizes scale by
/// `1 + offset`. Results are clipped into `(0, 1)`.
pub fn build_denoising_queries(gt: [f64; 4], noise: f64, groups: usize, rng: &mut impl Rng) -> Vec<DenoisingQuery> {
    let mut out = Vec::with_capacity(2 * groups);
    for _ in 0..groups {
        for positive in [true, false] {
            let magnitude = if noise == 0.0 {
                0.0
            } else if positive {
                rng.random_range(0.0..noise / 2.0)
            } else {
                rng.random_range(noise / 2.0..=noise)
            };
            let mut dir = [0.0; 4];
            for d in &mut dir {
                *d = rng.random_range(-1.0..=1.0);
            }
            let lead = rng.random_range(0..4);
            dir[lead] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let n = dir.map(|d| d * magnitude);
            let b = [
                (gt[0] + n[0] * gt[2]).clamp(1e-3, 1.0 - 1e-3),
                (gt[1] + n[1] * gt[3]).clamp(1e-3, 1.0 - 1e-3),
                (gt[2] * (1.0 + n[2])).clamp(1e-3, 1.0 - 1e-3),
                (gt[3] * (1.0 + n[3])).clamp(1e-3, 1.0 - 1e-3),
            ];
            out.push(DenoisingQuery {
                bbox: if noise == 0.0 { gt } else { b },
                noise: n,
                magnitude,
                positive,
            });
        }
    }
    out
}

pub fn denoising_input(queries: &[DenoisingQuery], groups: usize) -> DenoisingInput {
    DenoisingInput {
        boxes: queries.iter().map(|q| q.bbox).collect(),
        groups: if queries.is_empty() { 0 } else { groups },
    }
}

/// `w_cls·BCE + w_box·L1 + w_giou·(1 − GIoU)`: classification over every
/// denoising query, box terms over the positives reconstructing `gt`.
pub fn denoising_loss(
    g: &mut Graph,
    boxes: Var,
    logits: Var,
    rows: std::ops::Range<usize>,
    queries: &[DenoisingQuery],
    gt: [f64; 4],
    w: &LossWeights,
) -> Var {
    assert_eq!(rows.len(), queries.len());
    if queries.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let idx: Vec<usize> = rows.clone().collect();
    let targets: Vec<f64> = queries.iter().map(|q| if q.positive { 1.0 } else { 0.0 }).collect();
    let z = g.gather_rows(logits, &idx);
    let cls = g.bce_with_logits(z, &targets, &vec![w.dn_cls / idx.len() as f64; idx.len()]);
    let pos: Vec<usize> = queries
        .iter()
        .enumerate()
        .filter(|(_, q)| q.positive)
        .map(|(i, _)| rows.start + i)
        .collect();
    if pos.is_empty() {
        return cls;
    }
    let k = pos.len() as f64;
    let target = boxes_tensor(&vec![gt; pos.len()]);
    let pred = g.gather_rows(boxes, &pos);
    let l1 = g.l1(pred, &target, &vec![w.dn_box / (4.0 * k); pos.len()]);
    let gi = g.giou_loss(pred, &target, &vec![w.dn_giou / k; pos.len()]);
    let s = g.add(cls, l1);
    g.add(s, gi)
}

/// The five spatial components, as graph values or plain numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTerms<T> {
    pub objectness: T,
    pub bbox: T,
    pub giou: T,
    pub denoising: T,
    pub alignment: T,
}

pub fn spatial_value(t: &SpatialTerms<f64>, w: &LossWeights) -> f64 {
    w.objectness * t.objectness + w.bbox * t.bbox + w.giou * t.giou + w.denoising * t.denoising + w.alignment * t.alignment
}

pub fn spatial_loss(g: &mut Graph, t: &SpatialTerms<Var>, w: &LossWeights) -> Var {
    let parts = [
        (t.objectness, w.objectness),
        (t.bbox, w.bbox),
        (t.giou, w.giou),
        (t.denoising, w.denoising),
        (t.alignment, w.alignment),
    ];
    let mut acc = g.scale(parts[0].0, parts[0].1);
    for (v, s) in &parts[1..] {
        let x = g.scale(*v, *s);
        acc = g.add(acc, x);
    }
    acc
}

pub fn total_value(token: f64, spatial: f64, w: &LossWeights) -> f64 {
    w.token * token + w.spatial * spatial
}

pub fn total_loss(g: &mut Graph, token: Var, spatial: Var, w: &LossWeights) -> Var {
    let a = g.scale(token, w.token);
    let b = g.scale(spatial, w.spatial);
    g.add(a, b)
}
