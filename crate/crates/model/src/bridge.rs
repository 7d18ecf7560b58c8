//! Bridging queries: learnable rows appended after `[DET]` whose final
//! hidden states, passed through a residual MLP, condition the spatial
//! decoder.

use groundkit_autograd::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::blocks;
use crate::config::{ModelConfig, Variant};
use crate::error::ModelError;
use crate::model::Model;
use crate::substrate::{Role, SequencePlan, Source};

pub const QUERY_INIT: &str = "bridge.q_init";
/// Frozen stand-in used when bridging is disabled.
pub const FIXED: &str = "bridge.fixed";

pub(crate) fn register(store: &mut ParamStore, cfg: &ModelConfig, variant: &Variant, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    if !variant.bridge {
        let id = store.add_normal(FIXED, cfg.bridge_queries.max(1), d, 1.0, rng);
        store.set_frozen(id, true);
        return;
    }
    if cfg.bridge_queries > 0 {
        store.add_normal(QUERY_INIT, cfg.bridge_queries, d, 0.02, rng);
    }
    blocks::add_linear(store, "bridge.mlp.fc1", d, d, (1.0 / d as f64).sqrt(), rng);
    // Zero output layer: the projection starts as the identity.
    store.add_zeros("bridge.mlp.fc2.w", d, d);
    store.add_zeros("bridge.mlp.fc2.b", 1, d);
}

/// Number of query rows the sequence carries for this model.
pub fn appended_queries(model: &Model) -> usize {
    if model.variant.bridge {
        model.config.bridge_queries
    } else {
        0
    }
}

/// The learnable query matrix as a graph variable, if the model has one.
pub fn query_rows(model: &Model, g: &mut Graph) -> Option<Var> {
    model.params.id(QUERY_INIT).map(|id| g.param(&model.params, id))
}

/// Appends the answer (which must end in `[DET]`) and `queries` bridging
/// slots at `(text_time, 0, m)`, `m = 1..=queries`.
pub fn extend_with_det_and_queries(
    mut plan: SequencePlan,
    answer: &[usize],
    det: usize,
    queries: usize,
) -> Result<SequencePlan, ModelError> {
    if answer.last() != Some(&det) {
        return Err(ModelError::MissingDet);
    }
    let (body, _) = answer.split_at(answer.len() - 1);
    for &id in body {
        plan.push_text(id, Role::Text);
    }
    plan.push_text(det, Role::Det);
    for m in 0..queries {
        plan.push(Source::BridgeQuery(m), [plan.text_time, 0.0, (m + 1) as f64], Role::BridgeQuery);
    }
    Ok(plan)
}

/// Residual projection `h + fc2(gelu(fc1(h)))`.
pub fn project(model: &Model, g: &mut Graph, h: Var) -> Var {
    let a = blocks::linear(g, &model.params, "bridge.mlp.fc1", h);
    let a = g.gelu(a);
    let a = blocks::linear(g, &model.params, "bridge.mlp.fc2", a);
    g.add(h, a)
}

/// Projected hidden states of the bridging slots, in order. With zero
/// queries the `[DET]` state stands in as a single row. Without bridging the
/// frozen random matrix is returned and `hidden` is ignored.
pub fn extract_bridging(model: &Model, g: &mut Graph, hidden: Var, roles: &[Role]) -> Result<Var, ModelError> {
    if !model.variant.bridge {
        return Ok(g.param_named(&model.params, FIXED));
    }
    let m = model.config.bridge_queries;
    let idx: Vec<usize> = if m == 0 {
        roles.iter().rposition(|r| *r == Role::Det).into_iter().collect()
    } else {
        roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::BridgeQuery)
            .map(|(i, _)| i)
            .collect()
    };
    let expected = m.max(1);
    if idx.len() != expected {
        return Err(ModelError::CountMismatch {
            what: "bridging positions",
            expected,
            got: idx.len(),
        });
    }
    if g.shape(hidden).0 != roles.len() {
        return Err(ModelError::Shape(format!(
            "{} hidden rows for {} tags",
            g.shape(hidden).0,
            roles.len()
        )));
    }
    let h = g.gather_rows(hidden, &idx);
    Ok(project(model, g, h))
}
