//! Model hyperparameters and architectural switches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of every token embedding; divisible by 6.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Channels per patch feature.
    pub feature_dim: usize,
    pub signature_count: usize,
    /// Number of bridging queries appended after `[DET]`.
    pub bridge_queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub spatial_heads: usize,
    pub spatial_ff_dim: usize,
    /// Candidates kept per encoder layer.
    pub select_k: usize,
    pub pos_base: f64,
    pub max_answer_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 48,
            layers: 4,
            heads: 4,
            ff_dim: 192,
            grid_h: 8,
            grid_w: 8,
            feature_dim: 32,
            signature_count: 8,
            bridge_queries: 8,
            encoder_layers: 6,
            decoder_layers: 2,
            spatial_heads: 4,
            spatial_ff_dim: 96,
            select_k: 8,
            pos_base: 100.0,
            max_answer_tokens: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.dim == 0 || !self.dim.is_multiple_of(6) {
            return fail(format!("dim {} is not a positive multiple of 6", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.spatial_heads == 0 || !self.dim.is_multiple_of(self.spatial_heads) {
            return fail("head counts must divide dim".into());
        }
        if self.layers == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.feature_dim == 0 {
            return fail("grid and feature sizes must be positive".into());
        }
        if self.select_k == 0 || self.select_k > self.grid_h * self.grid_w {
            return fail(format!("select_k {} outside 1..={}", self.select_k, self.grid_h * self.grid_w));
        }
        if self.pos_base.is_nan() || self.pos_base <= 1.0 {
            return fail("pos_base must exceed 1".into());
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// How timestamps enter the substrate's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    /// Text timestamps at virtual coordinates `(i, W+s, H+s)` outside the grid.
    Virtual,
    /// Text timestamps at the in-grid coordinate `(i, 0, 0)`.
    Naive,
    /// No timestamp tokens.
    Off,
}

/// Reduction of the bridging queries used to score encoder tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    /// Cosine to the mean bridging query.
    Mean,
    /// Largest cosine over the individual bridging queries.
    PerQueryMax,
}

/// Architectural switches used by the ablation studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    pub timestamps: TimestampMode,
    /// Pad every timestamp to the longest one with trailing spaces.
    pub pad_timestamps: bool,
    /// `false` replaces the bridging queries with fixed random queries.
    pub bridge: bool,
    /// Select candidates from the last encoder layer only.
    pub single_layer_select: bool,
    pub relevance: Relevance,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            timestamps: TimestampMode::Virtual,
            pad_timestamps: false,
            bridge: true,
            single_layer_select: false,
            relevance: Relevance::Mean,
        }
    }
}
