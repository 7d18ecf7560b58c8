//! Finite-difference checks for every differentiable op.

use std::sync::Arc;

use groundkit_autograd::{
    gradcheck, standard_normal, AttnBlock, AttnInput, AttnSpec, GradcheckConfig, Graph,
    MaskPattern, ParamSelector, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, r, c) in shapes {
        s.add_normal(*name, *r, *c, 0.7, &mut rng);
    }
    s
}

fn check(store: &mut ParamStore, f: impl Fn(&ParamStore, &mut Graph) -> Var) {
    let cfg = GradcheckConfig {
        coords: 40,
        seed: 7,
        ..Default::default()
    };
    let rep = gradcheck(store, &ParamSelector::All, &cfg, f).unwrap();
    assert!(
        rep.passed(),
        "max rel err {} ; worst {:?}",
        rep.max_rel_err,
        rep.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    );
}

/// Fixed random projection to a scalar so that every output element matters.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|_| standard_normal(&mut rng)).collect());
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

#[test]
fn dense_ops() {
    let mut s = store_with(&[("x", 5, 4), ("w", 4, 3), ("b", 1, 3), ("y", 5, 3)], 1);
    check(&mut s, |s, g| {
        let x = g.param_named(s, "x");
        let w = g.param_named(s, "w");
        let b = g.param_named(s, "b");
        let y = g.param_named(s, "y");
        let h = g.linear(x, w, b);
        let h = g.gelu(h);
        let h2 = g.mul(h, y);
        let h3 = g.sub(h2, y);
        let h4 = g.add(h3, h);
        let h5 = g.sigmoid(h4);
        let h6 = g.scale(h5, 1.7);
        let e = g.exp(h6);
        project(g, e, 3)
    });
}

#[test]
fn layer_norm() {
    let mut s = store_with(&[("x", 6, 8), ("g", 1, 8), ("b", 1, 8)], 2);
    check(&mut s, |s, g| {
        let x = g.param_named(s, "x");
        let gm = g.param_named(s, "g");
        let b = g.param_named(s, "b");
        let y = g.layer_norm(x, gm, b);
        project(g, y, 4)
    });
}

#[test]
fn structural_ops() {
    let mut s = store_with(&[("a", 4, 3), ("b", 2, 3), ("s", 1, 1)], 3);
    check(&mut s, |s, g| {
        let a = g.param_named(s, "a");
        let b = g.param_named(s, "b");
        let sc = g.param_named(s, "s");
        let c = g.concat_rows(&[a, b, a]);
        let d = g.gather_rows(c, &[0, 5, 5, 2, 9]);
        let e = g.reshape(d, 3, 5);
        let m = g.mean_rows(e);
        let f = g.mul_scalar(m, sc);
        let p = project(g, f, 5);
        let t = g.sum(c);
        let t = g.scale(t, 0.1);
        g.add(p, t)
    });
}

#[test]
fn self_attention_causal_and_full() {
    for pattern in [MaskPattern::Causal, MaskPattern::Full] {
        let mut s = store_with(&[("x", 7, 24)], 4);
        let pat = pattern.clone();
        check(&mut s, move |s, g| {
            let x = g.param_named(s, "x");
            let spec = AttnSpec {
                heads: 2,
                width: 8,
                blocks: vec![AttnBlock {
                    q_start: 0,
                    q_len: 7,
                    k_start: 0,
                    k_len: 7,
                    pattern: pat.clone(),
                }],
            };
            let o = g.attention(
                AttnInput::new(x, 0),
                AttnInput::new(x, 8),
                AttnInput::new(x, 16),
                spec,
            );
            project(g, o, 6)
        });
    }
}

#[test]
fn blocked_cross_attention_with_custom_mask() {
    let mut s = store_with(&[("q", 6, 8), ("kv", 8, 16)], 5);
    // query 2 sees nothing in the first block: output row must be zero.
    let mask: Vec<bool> = (0..3 * 4).map(|i| i / 4 != 2 && (i % 4) != 1).collect();
    let mask = Arc::new(mask);
    check(&mut s, move |s, g| {
        let q = g.param_named(s, "q");
        let kv = g.param_named(s, "kv");
        let spec = AttnSpec {
            heads: 4,
            width: 8,
            blocks: vec![
                AttnBlock {
                    q_start: 0,
                    q_len: 3,
                    k_start: 0,
                    k_len: 4,
                    pattern: MaskPattern::Custom(mask.clone()),
                },
                AttnBlock::full(3, 3, 4, 4),
            ],
        };
        let o = g.attention(AttnInput::new(q, 0), AttnInput::new(kv, 0), AttnInput::new(kv, 8), spec);
        assert!(g.value(o).row(2).iter().all(|v| *v == 0.0));
        project(g, o, 7)
    });
}

#[test]
fn losses() {
    let mut s = store_with(&[("z", 5, 6), ("o", 5, 1), ("bx", 4, 4), ("v", 6, 5), ("u", 1, 5)], 6);
    check(&mut s, |s, g| {
        let z = g.param_named(s, "z");
        let ce = g.cross_entropy(z, &[0, 3, 5, 1, 2], &[0.2, 0.2, 0.1, 0.3, 0.2]);
        let o = g.param_named(s, "o");
        let bce = g.bce_with_logits(o, &[1.0, 0.0, 1.0, 0.0, 0.0], &[0.2; 5]);
        let bx = g.param_named(s, "bx");
        let bs = g.sigmoid(bx);
        let target = Tensor::from_vec(
            4,
            4,
            vec![
                0.5, 0.5, 0.3, 0.2, 0.2, 0.7, 0.1, 0.3, 0.6, 0.4, 0.5, 0.5, 0.9, 0.1, 0.15, 0.2,
            ],
        );
        let l1 = g.l1(bs, &target, &[0.25; 4]);
        let gi = g.giou_loss(bs, &target, &[0.25; 4]);
        let v = g.param_named(s, "v");
        let u = g.param_named(s, "u");
        let cs = g.cosine_rows(v, u);
        let csp = project(g, cs, 9);
        let a = g.add(ce, bce);
        let b = g.add(l1, gi);
        let c = g.add(a, b);
        g.add(c, csp)
    });
}

#[test]
fn giou_gradient_on_overlapping_and_disjoint_pairs() {
    for target in [
        vec![0.45, 0.5, 0.3, 0.35],
        vec![0.9, 0.9, 0.1, 0.1],
        vec![0.52, 0.48, 0.05, 0.6],
    ] {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(1, 4, vec![0.5, 0.47, 0.25, 0.3]));
        let t = Tensor::from_vec(1, 4, target);
        check(&mut s, move |s, g| {
            let p = g.param_named(s, "p");
            g.giou_loss(p, &t, &[1.0])
        });
    }
}

#[test]
fn chunked_causal_matches_explicit_mask() {
    let t = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_vec(t, 24, (0..t * 24).map(|_| standard_normal(&mut rng)).collect());
    let tri: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
    let tri = Arc::new(tri);
    let run = |pattern: MaskPattern| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let spec = AttnSpec {
            heads: 2,
            width: 8,
            blocks: vec![AttnBlock {
                q_start: 0,
                q_len: t,
                k_start: 0,
                k_len: t,
                pattern,
            }],
        };
        let o = g.attention(AttnInput::new(xv, 0), AttnInput::new(xv, 8), AttnInput::new(xv, 16), spec);
        let l = project(&mut g, o, 12);
        g.backward(l);
        (g.value(o).clone(), g.grad(xv).unwrap().clone())
    };
    let (o1, g1) = run(MaskPattern::Causal);
    let (o2, g2) = run(MaskPattern::Custom(tri));
    for (a, b) in o1.data.iter().zip(&o2.data).chain(g1.data.iter().zip(&g2.data)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
