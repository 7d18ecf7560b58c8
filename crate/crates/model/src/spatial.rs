//! Query-guided spatial localization: a per-frame image encoder, top-K
//! candidate selection against the bridging queries, and a decoder turning
//! candidates into boxes with objectness.
//!
//! Every function works on a stack of frames at once. Frame `f` owns rows
//! `f·HW .. (f+1)·HW` of each encoder layer.

use std::sync::Arc;

use groundkit_autograd::{AttnBlock, AttnSpec, Graph, MaskPattern, ParamStore, Tensor, Var};
use groundkit_core::BoundingBox;
use rand_chacha::ChaCha8Rng;

use crate::blocks;
use crate::config::{ModelConfig, Relevance};
use crate::error::ModelError;
use crate::model::Model;
use crate::posenc::pos_table;

/// Anchor side of a candidate query, in grid cells.
pub const ANCHOR_CELLS: f64 = 2.5;

pub(crate) fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    let ff = cfg.spatial_ff_dim;
    blocks::add_linear(store, "spatial.lift", cfg.feature_dim, d, (1.0 / cfg.feature_dim as f64).sqrt(), rng);
    for l in 0..cfg.encoder_layers {
        blocks::add_layer(store, &format!("spatial.enc{l}"), d, ff, cfg.encoder_layers, rng);
    }
    blocks::add_norm(store, "spatial.bridge_norm", d);
    blocks::add_linear(store, "spatial.dn_embed.fc1", 4, d, 1.0, rng);
    blocks::add_linear(store, "spatial.dn_embed.fc2", d, d, (1.0 / d as f64).sqrt(), rng);
    for l in 0..cfg.decoder_layers {
        let name = format!("spatial.dec{l}");
        blocks::add_layer(store, &name, d, ff, cfg.decoder_layers, rng);
        blocks::add_cross(store, &format!("{name}.bridge"), d, cfg.decoder_layers, rng);
        blocks::add_cross(store, &format!("{name}.memory"), d, cfg.decoder_layers, rng);
    }
    blocks::add_norm(store, "spatial.dec_norm", d);
    blocks::add_linear(store, "spatial.box.fc1", d, d, (1.0 / d as f64).sqrt(), rng);
    blocks::add_linear(store, "spatial.box.fc2", d, 4, 1e-3, rng);
    blocks::add_linear(store, "spatial.obj", d, 1, (1.0 / d as f64).sqrt(), rng);
}

/// Encoder outputs for a stack of frames.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    /// One `frames·tokens × dim` variable per encoder layer.
    pub layers: Vec<Var>,
    pub frames: usize,
    pub tokens: usize,
}

impl EncoderFeatures {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }

    /// Values of every layer for frame `f`, each `tokens × dim`.
    pub fn frame_values(&self, g: &Graph, f: usize) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| {
                let t = g.value(*l);
                let d = t.cols;
                let rows = &t.data[f * self.tokens * d..(f + 1) * self.tokens * d];
                Tensor::from_vec(self.tokens, d, rows.to_vec())
            })
            .collect()
    }
}

/// `frames·HW × D_v` matrix of raw cell features.
pub fn stack_frames(cfg: &ModelConfig, frames: &[&[f32]]) -> Result<Tensor, ModelError> {
    let want = cfg.cells() * cfg.feature_dim;
    let mut data = Vec::with_capacity(frames.len() * want);
    for (i, f) in frames.iter().enumerate() {
        if f.len() != want {
            return Err(ModelError::Shape(format!("frame {i} has {} values, grid needs {want}", f.len())));
        }
        data.extend(f.iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(frames.len() * cfg.cells(), cfg.feature_dim, data))
}

/// Lifts cell features to the model width, adds 2D positions and runs the
/// encoder layers; frames attend only within themselves.
pub fn encode_image(model: &Model, g: &mut Graph, frames: &Tensor) -> Result<EncoderFeatures, ModelError> {
    let cfg = &model.config;
    let hw = cfg.cells();
    if frames.cols != cfg.feature_dim || frames.rows == 0 || !frames.rows.is_multiple_of(hw) {
        return Err(ModelError::Shape(format!(
            "frame stack {}×{} does not fit {hw} cells of {} channels",
            frames.rows, frames.cols, cfg.feature_dim
        )));
    }
    let n = frames.rows / hw;
    let x = g.constant(frames.clone());
    let x = blocks::linear(g, &model.params, "spatial.lift", x);
    let positions: Vec<[f64; 3]> = (0..n * hw)
        .map(|r| {
            let c = r % hw;
            [0.0, (c % cfg.grid_w) as f64, (c / cfg.grid_w) as f64]
        })
        .collect();
    let pos = g.constant(pos_table(&positions, cfg.dim, cfg.pos_base));
    let mut x = g.add(x, pos);
    let mut layers = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let name = format!("spatial.enc{l}");
        let spec = AttnSpec::stacked(cfg.spatial_heads, cfg.dim, n, hw, hw);
        x = blocks::self_attention(g, &model.params, &name, x, spec);
        x = blocks::feed_forward(g, &model.params, &name, x);
        layers.push(x);
    }
    Ok(EncoderFeatures {
        layers,
        frames: n,
        tokens: hw,
    })
}

/// Cosine similarity with the convention that a zero-norm side gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Row-wise mean of the bridging queries.
pub fn mean_query(bridge: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; bridge.cols];
    for r in 0..bridge.rows {
        for (o, x) in m.iter_mut().zip(bridge.row(r)) {
            *o += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= bridge.rows as f64);
    m
}

/// Relevance of every row of `features` to the bridging queries.
pub fn relevance(features: &Tensor, bridge: &Tensor, mode: Relevance) -> Vec<f64> {
    match mode {
        Relevance::Mean => {
            let q = mean_query(bridge);
            (0..features.rows).map(|r| cosine(features.row(r), &q)).collect()
        }
        Relevance::PerQueryMax => (0..features.rows)
            .map(|r| {
                (0..bridge.rows)
                    .map(|m| cosine(features.row(r), bridge.row(m)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
    }
}

/// Indices of the `k` largest scores, best first; equal scores go to the
/// lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub layer: usize,
    pub token: usize,
    pub score: f64,
}

/// Selected tokens of one frame, grouped by layer in ascending layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Relevance of every token, per considered layer.
    pub scores: Vec<(usize, Vec<f64>)>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn tokens_of_layer(&self, layer: usize) -> Vec<usize> {
        self.candidates.iter().filter(|c| c.layer == layer).map(|c| c.token).collect()
    }
}

/// Top-`k` tokens of each layer (or only the last with `single_layer`).
pub fn select_topk_multilayer(
    layers: &[Tensor],
    bridge: &Tensor,
    k: usize,
    mode: Relevance,
    single_layer: bool,
) -> Result<CandidateSet, ModelError> {
    let tokens = layers.first().map(|t| t.rows).unwrap_or(0);
    if k > tokens || k == 0 {
        return Err(ModelError::SelectK { k, tokens });
    }
    let first = if single_layer { layers.len() - 1 } else { 0 };
    let mut set = CandidateSet::default();
    for (l, feats) in layers.iter().enumerate().skip(first) {
        let s = relevance(feats, bridge, mode);
        for t in top_k(&s, k) {
            set.candidates.push(Candidate {
                layer: l,
                token: t,
                score: s[t],
            });
        }
        set.scores.push((l, s));
    }
    Ok(set)
}

/// Denoising queries attached to one frame: `boxes` hold `groups` equal
/// runs of center-form boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenoisingInput {
    pub boxes: Vec<[f64; 4]>,
    pub groups: usize,
}

/// Row layout of the decoder's query stack.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryLayout {
    /// First row of each frame's queries.
    pub offsets: Vec<usize>,
    pub matching: Vec<usize>,
    pub denoising: Vec<usize>,
}

impl QueryLayout {
    pub fn matching_rows(&self, f: usize) -> std::ops::Range<usize> {
        self.offsets[f]..self.offsets[f] + self.matching[f]
    }

    pub fn denoising_rows(&self, f: usize) -> std::ops::Range<usize> {
        let s = self.offsets[f] + self.matching[f];
        s..s + self.denoising[f]
    }

    pub fn total(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.matching.last().unwrap() + self.denoising.last().unwrap())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Center-form boxes in `(0, 1)`, `rows × 4`.
    pub boxes: Var,
    /// Objectness logits, `rows × 1`.
    pub logits: Var,
    pub layout: QueryLayout,
}

fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-4, 1.0 - 1e-4);
    (x / (1.0 - x)).ln()
}

/// Center-form anchor of a grid token.
pub fn token_anchor(cfg: &ModelConfig, token: usize) -> [f64; 4] {
    let (r, c) = (token / cfg.grid_w, token % cfg.grid_w);
    [
        (c as f64 + 0.5) / cfg.grid_w as f64,
        (r as f64 + 0.5) / cfg.grid_h as f64,
        ANCHOR_CELLS / cfg.grid_w as f64,
        ANCHOR_CELLS / cfg.grid_h as f64,
    ]
}

/// Grid tokens whose cell centers lie inside `bbox`; the cell under the
/// box center when none do.
pub fn covered_tokens(cfg: &ModelConfig, bbox: &BoundingBox) -> Vec<usize> {
    let [x1, y1, x2, y2] = bbox.corners();
    let mut out = Vec::new();
    for r in 0..cfg.grid_h {
        for c in 0..cfg.grid_w {
            let (cx, cy) = ((c as f64 + 0.5) / cfg.grid_w as f64, (r as f64 + 0.5) / cfg.grid_h as f64);
            if (x1..=x2).contains(&cx) && (y1..=y2).contains(&cy) {
                out.push(r * cfg.grid_w + c);
            }
        }
    }
    if out.is_empty() {
        let [cx, cy, _, _] = bbox.center_form();
        let c = ((cx * cfg.grid_w as f64) as usize).min(cfg.grid_w - 1);
        let r = ((cy * cfg.grid_h as f64) as usize).min(cfg.grid_h - 1);
        out.push(r * cfg.grid_w + c);
    }
    out
}

/// Self-attention mask of one frame: matching queries see each other;
/// each denoising group sees only itself.
pub fn denoising_mask(matching: usize, groups: usize, per_group: usize) -> Vec<bool> {
    let n = matching + groups * per_group;
    let group_of = |i: usize| if i < matching { None } else { Some((i - matching) / per_group) };
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = group_of(i) == group_of(j);
        }
    }
    m
}

/// Runs the decoder over the candidates of every frame, plus optional
/// denoising queries.
pub fn decode(
    model: &Model,
    g: &mut Graph,
    feats: &EncoderFeatures,
    candidates: &[CandidateSet],
    bridge: Var,
    denoising: Option<&[DenoisingInput]>,
) -> Result<DecoderOutput, ModelError> {
    let cfg = &model.config;
    let n = feats.frames;
    if candidates.len() != n {
        return Err(ModelError::CountMismatch {
            what: "candidate sets",
            expected: n,
            got: candidates.len(),
        });
    }
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(ModelError::Shape("empty candidate set".into()));
    }
    let empty = DenoisingInput::default();
    let dn: Vec<&DenoisingInput> = match denoising {
        Some(d) if d.len() != n => {
            return Err(ModelError::CountMismatch {
                what: "denoising inputs",
                expected: n,
                got: d.len(),
            })
        }
        Some(d) => d.iter().collect(),
        None => vec![&empty; n],
    };
    for d in &dn {
        if (d.groups == 0) != d.boxes.is_empty() || (d.groups > 0 && d.boxes.len() % d.groups != 0) {
            return Err(ModelError::Shape("denoising boxes do not split into equal groups".into()));
        }
    }

    let mut offsets = Vec::with_capacity(n);
    let mut total = 0;
    for f in 0..n {
        offsets.push(total);
        total += candidates[f].len() + dn[f].boxes.len();
    }
    let layout = QueryLayout {
        offsets,
        matching: candidates.iter().map(|c| c.len()).collect(),
        denoising: dn.iter().map(|d| d.boxes.len()).collect(),
    };

    // Source rows: every encoder layer stacked, then the embedded dn boxes.
    let enc_rows = n * feats.tokens;
    let dn_boxes: Vec<[f64; 4]> = dn.iter().flat_map(|d| d.boxes.iter().copied()).collect();
    let mut sources = feats.layers.clone();
    if !dn_boxes.is_empty() {
        let b = g.constant(Tensor::from_vec(
            dn_boxes.len(),
            4,
            dn_boxes.iter().flat_map(|b| b.iter().copied()).collect(),
        ));
        let h = blocks::linear(g, &model.params, "spatial.dn_embed.fc1", b);
        let h = g.gelu(h);
        sources.push(blocks::linear(g, &model.params, "spatial.dn_embed.fc2", h));
    }
    let all = g.concat_rows(&sources);
    let dn_base = feats.layers.len() * enc_rows;
    let mut idx = Vec::with_capacity(total);
    let mut anchors = Vec::with_capacity(total * 4);
    let mut dn_next = 0;
    for f in 0..n {
        for c in &candidates[f].candidates {
            idx.push(c.layer * enc_rows + f * feats.tokens + c.token);
            anchors.extend(token_anchor(cfg, c.token).map(inverse_sigmoid));
        }
        for b in &dn[f].boxes {
            idx.push(dn_base + dn_next);
            dn_next += 1;
            anchors.extend(b.map(inverse_sigmoid));
        }
    }
    let mut x = g.gather_rows(all, &idx);

    let self_blocks: Vec<AttnBlock> = (0..n)
        .map(|f| {
            let len = layout.matching[f] + layout.denoising[f];
            let mut b = AttnBlock::full(layout.offsets[f], len, layout.offsets[f], len);
            if let Some(per) = dn[f].boxes.len().checked_div(dn[f].groups) {
                b.pattern = MaskPattern::Custom(Arc::new(denoising_mask(layout.matching[f], dn[f].groups, per)));
            }
            b
        })
        .collect();
    let m = g.shape(bridge).0;
    let bridge_mem = blocks::norm(g, &model.params, "spatial.bridge_norm", bridge);
    let memory = feats.last();
    let spec = |blocks: Vec<AttnBlock>| AttnSpec {
        heads: cfg.spatial_heads,
        width: cfg.dim,
        blocks,
    };
    for l in 0..cfg.decoder_layers {
        let name = format!("spatial.dec{l}");
        x = blocks::self_attention(g, &model.params, &name, x, spec(self_blocks.clone()));
        let to_bridge = (0..n)
            .map(|f| {
                let len = layout.matching[f] + layout.denoising[f];
                AttnBlock::full(layout.offsets[f], len, 0, m)
            })
            .collect();
        x = blocks::cross_attention(g, &model.params, &format!("{name}.bridge"), x, bridge_mem, spec(to_bridge));
        let to_memory = (0..n)
            .map(|f| {
                let len = layout.matching[f] + layout.denoising[f];
                AttnBlock::full(layout.offsets[f], len, f * feats.tokens, feats.tokens)
            })
            .collect();
        x = blocks::cross_attention(g, &model.params, &format!("{name}.memory"), x, memory, spec(to_memory));
        x = blocks::feed_forward(g, &model.params, &name, x);
    }
    let x = blocks::norm(g, &model.params, "spatial.dec_norm", x);
    let h = blocks::linear(g, &model.params, "spatial.box.fc1", x);
    let h = g.gelu(h);
    let delta = blocks::linear(g, &model.params, "spatial.box.fc2", h);
    let anchor = g.constant(Tensor::from_vec(total, 4, anchors));
    let z = g.add(delta, anchor);
    let boxes = g.sigmoid(z);
    let logits = blocks::linear(g, &model.params, "spatial.obj", x);
    Ok(DecoderOutput { boxes, logits, layout })
}

/// Best box of one frame and its objectness probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialPrediction {
    pub bbox: BoundingBox,
    pub objectness: f64,
    /// Index of the winning query among the frame's candidates.
    pub query: usize,
}

/// Converts a sigmoid center-form row to a clipped box.
pub fn to_box(row: &[f64]) -> BoundingBox {
    BoundingBox::center(row[0], row[1], row[2], row[3])
        .expect("sigmoid outputs are finite and positive")
        .clipped()
}

/// Candidate sets for every frame of an encoded stack.
pub fn select_for_frames(
    model: &Model,
    g: &Graph,
    feats: &EncoderFeatures,
    bridge: &Tensor,
) -> Result<Vec<CandidateSet>, ModelError> {
    (0..feats.frames)
        .map(|f| {
            select_topk_multilayer(
                &feats.frame_values(g, f),
                bridge,
                model.config.select_k,
                model.variant.relevance,
                model.variant.single_layer_select,
            )
        })
        .collect()
}

/// Encode, select and decode each frame; returns the highest-objectness
/// prediction per frame.
pub fn predict_frames(model: &Model, frames: &[&[f32]], bridge: &Tensor) -> Result<Vec<SpatialPrediction>, ModelError> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let stack = stack_frames(&model.config, frames)?;
    let feats = encode_image(model, &mut g, &stack)?;
    let cands = select_for_frames(model, &g, &feats, bridge)?;
    let q = g.constant(bridge.clone());
    let out = decode(model, &mut g, &feats, &cands, q, None)?;
    let (boxes, logits) = (g.value(out.boxes), g.value(out.logits));
    Ok((0..frames.len())
        .map(|f| {
            let rows = out.layout.matching_rows(f);
            let best = rows
                .clone()
                .max_by(|&a, &b| logits.data[a].total_cmp(&logits.data[b]).then(b.cmp(&a)))
                .expect("non-empty candidate set");
            SpatialPrediction {
                bbox: to_box(boxes.row(best)),
                objectness: groundkit_autograd::sigmoid(logits.data[best]),
                query: best - rows.start,
            }
        })
        .collect())
}

pub fn predict_frame(model: &Model, frame: &[f32], bridge: &Tensor) -> Result<SpatialPrediction, ModelError> {
    Ok(predict_frames(model, &[frame], bridge)?[0])
}
