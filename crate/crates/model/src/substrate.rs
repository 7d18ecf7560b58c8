//! The causal multimodal transformer: patch embedding, token embedding,
//! 3D positions and the pre-norm decoder-only stack.

use groundkit_autograd::{AttnBlock, AttnSpec, Graph, ParamStore, Tensor, Var};
use groundkit_core::sampling::FramePair;
use groundkit_core::VideoSample;
use rand_chacha::ChaCha8Rng;

use crate::blocks;
use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::model::Model;
use crate::posenc::pos_table;

pub const TOKEN_EMBEDDING: &str = "substrate.tok_emb";
pub const PATCH: &str = "substrate.patch";

pub(crate) fn register(store: &mut ParamStore, cfg: &ModelConfig, vocab: usize, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    store.add_normal(TOKEN_EMBEDDING, vocab, d, 0.7, rng);
    blocks::add_linear(store, PATCH, 2 * cfg.feature_dim, d, 0.5, rng);
    for l in 0..cfg.layers {
        blocks::add_layer(store, &format!("substrate.layer{l}"), d, cfg.ff_dim, cfg.layers, rng);
    }
    blocks::add_norm(store, "substrate.ln_f", d);
    blocks::add_linear(store, "substrate.head", d, vocab, (1.0 / d as f64).sqrt(), rng);
}

/// What a sequence position holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Visual,
    Timestamp,
    Text,
    Det,
    BridgeQuery,
}

/// Where a position's embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Fused patch token of grid cell `cell` in frame pair `pair`.
    Patch { pair: usize, cell: usize },
    /// Row of the token embedding table.
    Token(usize),
    /// Row of the learnable bridging-query matrix.
    BridgeQuery(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub source: Source,
    /// `(temporal index, x, y)`.
    pub position: [f64; 3],
    pub role: Role,
}

/// Layout of an input sequence before it is embedded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequencePlan {
    pub slots: Vec<Slot>,
    /// Temporal index shared by every text token after the video.
    pub text_time: f64,
    /// Number of text tokens placed so far; the next goes at `x = cursor + 1`.
    pub text_cursor: usize,
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push(&mut self, source: Source, position: [f64; 3], role: Role) {
        self.slots.push(Slot { source, position, role });
    }

    /// Appends a text-side token at `(text_time, cursor + 1, 0)`.
    pub fn push_text(&mut self, id: usize, role: Role) {
        self.text_cursor += 1;
        let pos = [self.text_time, self.text_cursor as f64, 0.0];
        self.push(Source::Token(id), pos, role);
    }

    pub fn count(&self, role: Role) -> usize {
        self.slots.iter().filter(|s| s.role == role).count()
    }

    pub fn roles(&self) -> Vec<Role> {
        self.slots.iter().map(|s| s.role).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.slots.iter().map(|s| s.position).collect()
    }

    /// Token ids at each position, `None` for patches and bridging queries.
    pub fn token_ids(&self) -> Vec<Option<usize>> {
        self.slots
            .iter()
            .map(|s| match s.source {
                Source::Token(t) => Some(t),
                _ => None,
            })
            .collect()
    }
}

/// Embedded sequence ready for the transformer.
#[derive(Clone, Debug)]
pub struct TokenEmbeddingSequence {
    /// `len × dim`, without positional terms.
    pub embeddings: Var,
    pub positions: Vec<[f64; 3]>,
    pub roles: Vec<Role>,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// `[pairs·H·W × 2·D_v]` matrix: each row concatenates one cell's features
/// from the two frames of a pair.
pub fn pair_features(sample: &VideoSample, pairs: &[FramePair]) -> Tensor {
    let cells = sample.cells_per_frame();
    let d = sample.feature_dim;
    let mut data = Vec::with_capacity(pairs.len() * cells * 2 * d);
    for p in pairs {
        let (a, b) = (sample.frame(p.first), sample.frame(p.second));
        for c in 0..cells {
            data.extend(a[c * d..(c + 1) * d].iter().map(|&v| v as f64));
            data.extend(b[c * d..(c + 1) * d].iter().map(|&v| v as f64));
        }
    }
    Tensor::from_vec(pairs.len() * cells, 2 * d, data)
}

fn check_grid(cfg: &ModelConfig, rows: usize, cols: usize) -> Result<(), ModelError> {
    if cols != 2 * cfg.feature_dim || !rows.is_multiple_of(cfg.cells()) {
        return Err(ModelError::Shape(format!(
            "pair features {rows}×{cols} do not fit a {}×{} grid of {}-channel cells",
            cfg.grid_h, cfg.grid_w, cfg.feature_dim
        )));
    }
    Ok(())
}

/// Fuses one frame pair into `H·W` tokens; returns them with their
/// positions `(pair_index, x, y)`.
pub fn patch_embed(
    model: &Model,
    g: &mut Graph,
    first: &[f32],
    second: &[f32],
    pair_index: usize,
) -> Result<(Var, Vec<[f64; 3]>), ModelError> {
    let cfg = &model.config;
    let want = cfg.cells() * cfg.feature_dim;
    if first.len() != want || second.len() != want {
        return Err(ModelError::Shape(format!(
            "frames have {} and {} values, grid needs {want}",
            first.len(),
            second.len()
        )));
    }
    let d = cfg.feature_dim;
    let mut data = Vec::with_capacity(2 * want);
    for c in 0..cfg.cells() {
        data.extend(first[c * d..(c + 1) * d].iter().map(|&v| v as f64));
        data.extend(second[c * d..(c + 1) * d].iter().map(|&v| v as f64));
    }
    let x = g.constant(Tensor::from_vec(cfg.cells(), 2 * d, data));
    let out = blocks::linear(g, &model.params, PATCH, x);
    Ok((out, cell_positions(cfg, pair_index)))
}

/// Positions `(pair, x = column, y = row)` of every cell in row-major order.
pub fn cell_positions(cfg: &ModelConfig, pair: usize) -> Vec<[f64; 3]> {
    (0..cfg.cells())
        .map(|c| [pair as f64, (c % cfg.grid_w) as f64, (c / cfg.grid_w) as f64])
        .collect()
}

/// Materializes a plan: patch tokens come from `pairs` (see
/// [`pair_features`]), text tokens from the embedding table, bridging slots
/// from `bridge_rows` (an `M × dim` variable).
pub fn embed_plan(
    model: &Model,
    g: &mut Graph,
    plan: &SequencePlan,
    pairs: Option<&Tensor>,
    bridge_rows: Option<Var>,
) -> Result<TokenEmbeddingSequence, ModelError> {
    if plan.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let cfg = &model.config;
    let mut sources = Vec::new();
    let mut visual_rows = 0;
    if let Some(p) = pairs {
        check_grid(cfg, p.rows, p.cols)?;
        let x = g.constant(p.clone());
        sources.push(blocks::linear(g, &model.params, PATCH, x));
        visual_rows = p.rows;
    }
    let table = g.param_named(&model.params, TOKEN_EMBEDDING);
    let vocab = model.vocab.len();
    sources.push(table);
    let bridge_count = match bridge_rows {
        Some(b) => {
            sources.push(b);
            g.shape(b).0
        }
        None => 0,
    };
    let mut idx = Vec::with_capacity(plan.len());
    for s in &plan.slots {
        let i = match s.source {
            Source::Patch { pair, cell } => {
                let i = pair * cfg.cells() + cell;
                if cell >= cfg.cells() || i >= visual_rows {
                    return Err(ModelError::Shape(format!("patch slot ({pair}, {cell}) has no features")));
                }
                i
            }
            Source::Token(t) => {
                if t >= vocab {
                    return Err(ModelError::Shape(format!("token id {t} outside vocabulary")));
                }
                visual_rows + t
            }
            Source::BridgeQuery(m) => {
                if m >= bridge_count {
                    return Err(ModelError::CountMismatch {
                        what: "bridging query rows",
                        expected: m + 1,
                        got: bridge_count,
                    });
                }
                visual_rows + vocab + m
            }
        };
        idx.push(i);
    }
    let all = g.concat_rows(&sources);
    let embeddings = g.gather_rows(all, &idx);
    Ok(TokenEmbeddingSequence {
        embeddings,
        positions: plan.positions(),
        roles: plan.roles(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SubstrateOutput {
    /// Final-norm hidden states, `len × dim`.
    pub hidden: Var,
    /// Next-token logits, `len × vocab`.
    pub logits: Var,
}

/// Causal pre-norm transformer over `seq`; positional embeddings are added
/// to the input embeddings before the first layer.
pub fn forward(model: &Model, g: &mut Graph, seq: &TokenEmbeddingSequence) -> Result<SubstrateOutput, ModelError> {
    let t = seq.len();
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    let cfg = &model.config;
    if g.shape(seq.embeddings) != (t, cfg.dim) {
        return Err(ModelError::Shape(format!(
            "embeddings {:?} vs {t} positions of width {}",
            g.shape(seq.embeddings),
            cfg.dim
        )));
    }
    let pos = g.constant(pos_table(&seq.positions, cfg.dim, cfg.pos_base));
    let mut x = g.add(seq.embeddings, pos);
    for l in 0..cfg.layers {
        let name = format!("substrate.layer{l}");
        let spec = AttnSpec {
            heads: cfg.heads,
            width: cfg.dim,
            blocks: vec![AttnBlock::causal(0, t)],
        };
        x = blocks::self_attention(g, &model.params, &name, x, spec);
        x = blocks::feed_forward(g, &model.params, &name, x);
    }
    let hidden = blocks::norm(g, &model.params, "substrate.ln_f", x);
    let logits = blocks::linear(g, &model.params, "substrate.head", hidden);
    Ok(SubstrateOutput { hidden, logits })
}
