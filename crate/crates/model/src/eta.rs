//! Text timestamps placed at virtual coordinates outside the visual grid,
//! and assembly of the interleaved video/timestamp/query input.

use groundkit_autograd::{Graph, Var};
use groundkit_core::sampling::FramePair;

use crate::config::{ModelConfig, TimestampMode, Variant};
use crate::error::ModelError;
use crate::model::Model;
use crate::posenc::pos_table;
use crate::substrate::{self, Role, SequencePlan, Source};
use crate::vocab::Vocab;

/// `"<start>-<end>"` with one decimal place.
pub fn format_timestamp(start: f64, end: f64) -> String {
    format!("{start:.1}-{end:.1}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestampBlock {
    pub pair: usize,
    pub interval: [f64; 2],
    pub text: String,
    pub ids: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
}

impl TimestampBlock {
    /// Tokenizes `text` and places token `s` (1-based) at `(pair, W+s, H+s)`,
    /// or at `(pair, 0, 0)` in naive mode.
    pub fn new(
        vocab: &Vocab,
        cfg: &ModelConfig,
        pair: usize,
        interval: [f64; 2],
        text: String,
        naive: bool,
    ) -> Result<Self, ModelError> {
        let ids = vocab.tokenize(&text)?;
        let i = pair as f64;
        let positions = (1..=ids.len())
            .map(|s| {
                if naive {
                    [i, 0.0, 0.0]
                } else {
                    [i, (cfg.grid_w + s) as f64, (cfg.grid_h + s) as f64]
                }
            })
            .collect();
        Ok(Self {
            pair,
            interval,
            text,
            ids,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One block per pair under the variant's timestamp mode; empty when
/// timestamps are off. Padding appends spaces up to the longest text.
pub fn timestamp_blocks(
    vocab: &Vocab,
    cfg: &ModelConfig,
    variant: &Variant,
    pairs: &[FramePair],
) -> Result<Vec<TimestampBlock>, ModelError> {
    if variant.timestamps == TimestampMode::Off {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = pairs.iter().map(|p| format_timestamp(p.start, p.end)).collect();
    let width = texts.iter().map(|t| t.len()).max().unwrap_or(0);
    pairs
        .iter()
        .zip(texts)
        .map(|(p, mut t)| {
            if variant.pad_timestamps {
                while t.len() < width {
                    t.push(' ');
                }
            }
            let naive = variant.timestamps == TimestampMode::Naive;
            TimestampBlock::new(vocab, cfg, p.index, [p.start, p.end], t, naive)
        })
        .collect()
}

/// Token embeddings of a block plus their positional vectors, `S × dim`.
pub fn embed_timestamp(model: &Model, g: &mut Graph, block: &TimestampBlock) -> Var {
    let table = g.param_named(&model.params, substrate::TOKEN_EMBEDDING);
    let e = g.gather_rows(table, &block.ids);
    let p = g.constant(pos_table(&block.positions, model.config.dim, model.config.pos_base));
    g.add(e, p)
}

/// `[v_1, t_1, ..., v_n, t_n]` followed by the query tokens. `blocks` is
/// either empty (no timestamps) or holds exactly one block per pair.
pub fn assemble_sequence(
    cfg: &ModelConfig,
    pairs: usize,
    blocks: &[TimestampBlock],
    query: &[usize],
) -> Result<SequencePlan, ModelError> {
    if pairs == 0 {
        return Err(ModelError::EmptyVideo);
    }
    if !blocks.is_empty() && blocks.len() != pairs {
        return Err(ModelError::CountMismatch {
            what: "timestamp blocks",
            expected: pairs,
            got: blocks.len(),
        });
    }
    let mut plan = SequencePlan {
        text_time: pairs as f64,
        ..Default::default()
    };
    for i in 0..pairs {
        for (cell, pos) in substrate::cell_positions(cfg, i).into_iter().enumerate() {
            plan.push(Source::Patch { pair: i, cell }, pos, Role::Visual);
        }
        if let Some(b) = blocks.get(i) {
            for (id, pos) in b.ids.iter().zip(&b.positions) {
                plan.push(Source::Token(*id), *pos, Role::Timestamp);
            }
        }
    }
    for &id in query {
        plan.push_text(id, Role::Text);
    }
    Ok(plan)
}
