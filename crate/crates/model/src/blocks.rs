//! Pre-norm transformer pieces shared by the substrate and the spatial
//! encoder/decoder. Parameters are looked up by name under a prefix.

use groundkit_autograd::{AttnInput, AttnSpec, Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

pub(crate) fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) {
    store.add_normal(format!("{name}.w"), fan_in, fan_out, std, rng);
    store.add_zeros(format!("{name}.b"), 1, fan_out);
}

pub(crate) fn add_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.add_filled(format!("{name}.g"), 1, dim, 1.0);
    store.add_zeros(format!("{name}.b"), 1, dim);
}

/// Registers one self-attention + feed-forward layer.
pub(crate) fn add_layer(store: &mut ParamStore, name: &str, dim: usize, ff: usize, depth: usize, rng: &mut ChaCha8Rng) {
    let std = (1.0 / dim as f64).sqrt();
    let out_std = std / (2.0 * depth as f64).sqrt();
    add_norm(store, &format!("{name}.ln1"), dim);
    add_linear(store, &format!("{name}.qkv"), dim, 3 * dim, std, rng);
    add_linear(store, &format!("{name}.proj"), dim, dim, out_std, rng);
    add_ffn(store, name, dim, ff, depth, rng);
}

pub(crate) fn add_ffn(store: &mut ParamStore, name: &str, dim: usize, ff: usize, depth: usize, rng: &mut ChaCha8Rng) {
    let std = (1.0 / dim as f64).sqrt();
    add_norm(store, &format!("{name}.ln2"), dim);
    add_linear(store, &format!("{name}.fc1"), dim, ff, std, rng);
    add_linear(store, &format!("{name}.fc2"), ff, dim, (1.0 / ff as f64).sqrt() / (2.0 * depth as f64).sqrt(), rng);
}

/// Registers a cross-attention sublayer reading from a separate memory.
pub(crate) fn add_cross(store: &mut ParamStore, name: &str, dim: usize, depth: usize, rng: &mut ChaCha8Rng) {
    let std = (1.0 / dim as f64).sqrt();
    add_norm(store, &format!("{name}.ln"), dim);
    add_linear(store, &format!("{name}.q"), dim, dim, std, rng);
    add_linear(store, &format!("{name}.kv"), dim, 2 * dim, std, rng);
    add_linear(store, &format!("{name}.proj"), dim, dim, std / (2.0 * depth as f64).sqrt(), rng);
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param_named(store, &format!("{name}.w"));
    let b = g.param_named(store, &format!("{name}.b"));
    g.linear(x, w, b)
}

pub(crate) fn norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let gamma = g.param_named(store, &format!("{name}.g"));
    let beta = g.param_named(store, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

/// `x + proj(attn(qkv(ln1(x))))`, attention layout given by `spec`.
pub(crate) fn self_attention(g: &mut Graph, store: &ParamStore, name: &str, x: Var, spec: AttnSpec) -> Var {
    let d = spec.width;
    let h = norm(g, store, &format!("{name}.ln1"), x);
    let qkv = linear(g, store, &format!("{name}.qkv"), h);
    let a = g.attention(AttnInput::new(qkv, 0), AttnInput::new(qkv, d), AttnInput::new(qkv, 2 * d), spec);
    let o = linear(g, store, &format!("{name}.proj"), a);
    g.add(x, o)
}

/// `x + fc2(gelu(fc1(ln2(x))))`.
pub(crate) fn feed_forward(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let h = norm(g, store, &format!("{name}.ln2"), x);
    let h = linear(g, store, &format!("{name}.fc1"), h);
    let h = g.gelu(h);
    let o = linear(g, store, &format!("{name}.fc2"), h);
    g.add(x, o)
}

/// `x + proj(attn(q(ln(x)), kv(memory)))`.
pub(crate) fn cross_attention(g: &mut Graph, store: &ParamStore, name: &str, x: Var, memory: Var, spec: AttnSpec) -> Var {
    let d = spec.width;
    let h = norm(g, store, &format!("{name}.ln"), x);
    let q = linear(g, store, &format!("{name}.q"), h);
    let kv = linear(g, store, &format!("{name}.kv"), memory);
    let a = g.attention(AttnInput::new(q, 0), AttnInput::new(kv, 0), AttnInput::new(kv, d), spec);
    let o = linear(g, store, &format!("{name}.proj"), a);
    g.add(x, o)
}
