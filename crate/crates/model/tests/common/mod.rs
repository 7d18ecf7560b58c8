#![allow(dead_code)]

use groundkit_core::synth::{build_dataset, DatasetConfig, SceneConfig};
use groundkit_core::VideoSample;
use groundkit_model::pipeline::RunConfig;
use groundkit_model::{Model, ModelConfig, Variant};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 12,
        layers: 2,
        heads: 2,
        ff_dim: 24,
        grid_h: 4,
        grid_w: 4,
        feature_dim: 8,
        signature_count: 4,
        bridge_queries: 3,
        encoder_layers: 2,
        decoder_layers: 1,
        spatial_heads: 2,
        spatial_ff_dim: 16,
        select_k: 3,
        ..Default::default()
    }
}

pub fn tiny_scene() -> SceneConfig {
    SceneConfig {
        duration: 4.0,
        grid_h: 4,
        grid_w: 4,
        feature_dim: 8,
        signature_count: 4,
        distractors: 1,
        min_box_cells: 1,
        max_box_cells: 2,
        min_event_pairs: 1,
        ..Default::default()
    }
}

pub fn tiny_samples(count: usize, seed: u64) -> Vec<VideoSample> {
    // Over-generate so quality-filter drops never shorten the set.
    let cfg = DatasetConfig {
        count: 2 * count + 4,
        seed,
        scene: tiny_scene(),
        ..Default::default()
    };
    let mut out = build_dataset(&cfg).unwrap().0;
    assert!(out.len() >= count, "too many drops");
    out.truncate(count);
    out
}

pub fn tiny_model(variant: Variant) -> Model {
    Model::new(tiny_config(), variant).unwrap()
}

pub fn tiny_run(steps: usize) -> RunConfig {
    let mut c = RunConfig {
        model: tiny_config(),
        ..Default::default()
    };
    c.optim.steps = steps;
    c.losses.negatives = 4;
    c
}
