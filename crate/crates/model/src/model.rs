//! Parameter container tying together every learnable part.

use groundkit_autograd::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::ModelError;
use crate::vocab::Vocab;
use crate::{bridge, spatial, substrate};

/// Name of the learnable log-temperature of the alignment loss.
pub const LOG_TAU: &str = "loss.log_tau";
pub const INITIAL_TAU: f64 = 0.07;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn deterministically from `config.seed`.
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self, ModelError> {
        config.validate()?;
        let vocab = Vocab::new(config.signature_count);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        substrate::register(&mut params, &config, vocab.len(), &mut rng);
        bridge::register(&mut params, &config, &variant, &mut rng);
        spatial::register(&mut params, &config, &mut rng);
        params.add_filled(LOG_TAU, 1, 1, INITIAL_TAU.ln());
        Ok(Self {
            config,
            variant,
            vocab,
            params,
        })
    }

    /// Same architecture with a different parameter store (used when
    /// perturbing weights for finite differences).
    pub fn with_params(&self, params: &ParamStore) -> Model {
        Model {
            config: self.config.clone(),
            variant: self.variant.clone(),
            vocab: self.vocab.clone(),
            params: params.clone(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.params.by_name(LOG_TAU).map(|t| t.item().exp()).unwrap_or(INITIAL_TAU)
    }
}
