//! Grounding model: a causal multimodal transformer that answers with a
//! time window, bridging queries that carry its state to a query-guided
//! spatial decoder, the joint training objective and the train/infer/eval
//! pipeline.

pub mod blocks;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eta;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod posenc;
pub mod spatial;
pub mod substrate;
pub mod vocab;

pub use config::{ModelConfig, Relevance, TimestampMode, Variant};
pub use error::ModelError;
pub use model::Model;
pub use vocab::Vocab;
pub use pipeline::{Ablations, EvalMode, RunConfig};
