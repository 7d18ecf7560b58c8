mod common;

use common::{tiny_model, tiny_samples};
use groundkit_autograd::{gradcheck, Graph, GradcheckConfig, ParamSelector, Tensor};
use groundkit_model::losses;
use groundkit_model::spatial::{self, DenoisingInput};
use groundkit_core::synth::{build_dataset, DatasetConfig};
use groundkit_model::{Model, ModelConfig, Relevance, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random rows with the direction of `q`'s mean removed, so the pooled
/// query is orthogonal to the original one.
fn orthogonal_to(q: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mean = spatial::mean_query(q);
    let n2: f64 = mean.iter().map(|x| x * x).sum();
    let mut t = random_tensor(q.rows, q.cols, rng);
    for r in 0..t.rows {
        let dot: f64 = t.row(r).iter().zip(&mean).map(|(a, b)| a * b).sum();
        for (x, m) in t.row_mut(r).iter_mut().zip(&mean) {
            *x -= dot / n2 * m;
        }
    }
    t
}

#[test]
fn selection_is_an_exact_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let layers: Vec<Tensor> = (0..3).map(|_| random_tensor(20, 6, &mut rng)).collect();
        let q = random_tensor(2, 6, &mut rng);
        for mode in [Relevance::Mean, Relevance::PerQueryMax] {
            let set = spatial::select_topk_multilayer(&layers, &q, 5, mode, false).unwrap();
            assert_eq!(set.len(), 15);
            for (l, scores) in &set.scores {
                let chosen = set.tokens_of_layer(*l);
                let min_in = chosen.iter().map(|&t| scores[t]).fold(f64::INFINITY, f64::min);
                let max_out = (0..20)
                    .filter(|t| !chosen.contains(t))
                    .map(|t| scores[t])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(min_in >= max_out);
            }
        }
    }
}

#[test]
fn selection_follows_the_queries_and_ignores_their_scale() {
    let m = Model::new(ModelConfig::default(), Variant::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut changed = 0;
    let (samples, _) = build_dataset(&DatasetConfig {
        count: 100,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(samples.len(), 100);
    for s in &samples {
        let f = s.frame(0);
        let mut g = Graph::new();
        let stack = spatial::stack_frames(&m.config, &[f]).unwrap();
        let feats = spatial::encode_image(&m, &mut g, &stack).unwrap();
        let q = random_tensor(m.config.bridge_queries, m.config.dim, &mut rng);
        let base = spatial::select_for_frames(&m, &g, &feats, &q).unwrap();
        let other = orthogonal_to(&q, &mut rng);
        let alt = spatial::select_for_frames(&m, &g, &feats, &other).unwrap();
        let tokens = |c: &spatial::CandidateSet| c.candidates.iter().map(|x| (x.layer, x.token)).collect::<Vec<_>>();
        if tokens(&base[0]) != tokens(&alt[0]) {
            changed += 1;
        }
        let mut scaled = q.clone();
        scaled.scale_assign(3.5);
        let again = spatial::select_for_frames(&m, &g, &feats, &scaled).unwrap();
        assert_eq!(tokens(&base[0]), tokens(&again[0]));
        let p1 = spatial::predict_frame(&m, f, &q).unwrap();
        let p2 = spatial::predict_frame(&m, f, &scaled).unwrap();
        assert_eq!(p1.query, p2.query);
    }
    assert!(changed >= 90, "only {changed} of 100 scenes changed selection");
}

#[test]
fn zero_input_with_zero_lift_is_finite_and_constant() {
    let mut m = tiny_model(Variant::default());
    for n in ["spatial.lift.w", "spatial.lift.b"] {
        let id = m.params.id(n).unwrap();
        m.params.get_mut(id).scale_assign(0.0);
    }
    let mut g = Graph::new();
    let zero = vec![0.0f32; m.config.cells() * m.config.feature_dim];
    let stack = spatial::stack_frames(&m.config, &[&zero, &zero]).unwrap();
    let feats = spatial::encode_image(&m, &mut g, &stack).unwrap();
    let last = g.value(feats.last());
    assert!(last.is_finite());
    let hw = m.config.cells() * m.config.dim;
    assert_eq!(&last.data[..hw], &last.data[hw..]);
}

#[test]
fn encoder_and_decoder_gradients_match_finite_differences() {
    let m = tiny_model(Variant::default());
    let s = &tiny_samples(1, 13)[0];
    let frames: Vec<&[f32]> = vec![s.frame(0), s.frame(3)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random_tensor(3, m.config.dim, &mut rng);
    // Fix the candidate sets so the finite differences never cross a
    // selection boundary.
    let cands = {
        let mut g = Graph::new();
        let stack = spatial::stack_frames(&m.config, &frames).unwrap();
        let feats = spatial::encode_image(&m, &mut g, &stack).unwrap();
        spatial::select_for_frames(&m, &g, &feats, &q).unwrap()
    };
    let dn = vec![
        DenoisingInput {
            boxes: vec![[0.4, 0.5, 0.3, 0.2], [0.6, 0.3, 0.2, 0.4]],
            groups: 1,
        },
        DenoisingInput::default(),
    ];
    let mut store = m.params.clone();
    let report = gradcheck(
        &mut store,
        &ParamSelector::prefixes(&["spatial."]),
        &GradcheckConfig {
            coords: 40,
            ..Default::default()
        },
        |p, g| {
            let mm = m.with_params(p);
            let stack = spatial::stack_frames(&mm.config, &frames).unwrap();
            let feats = spatial::encode_image(&mm, g, &stack).unwrap();
            let qv = g.constant(q.clone());
            let out = spatial::decode(&mm, g, &feats, &cands, qv, Some(&dn)).unwrap();
            let target = Tensor::filled(out.layout.total(), 4, 0.4);
            let w = vec![1.0; out.layout.total()];
            let a = g.giou_loss(out.boxes, &target, &w);
            let b = g.bce_with_logits(out.logits, &vec![0.5; out.layout.total()], &w);
            g.add(a, b)
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn denoising_queries_cannot_see_each_other() {
    let m = tiny_model(Variant::default());
    let s = &tiny_samples(1, 14)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_tensor(3, m.config.dim, &mut rng);
    let gt = [0.5, 0.5, 0.3, 0.3];
    let run = |boxes: Vec<[f64; 4]>| {
        let mut g = Graph::new();
        let stack = spatial::stack_frames(&m.config, &[s.frame(0)]).unwrap();
        let feats = spatial::encode_image(&m, &mut g, &stack).unwrap();
        let cands = spatial::select_for_frames(&m, &g, &feats, &q).unwrap();
        let qv = g.constant(q.clone());
        let dn = [DenoisingInput { boxes, groups: 2 }];
        let out = spatial::decode(&m, &mut g, &feats, &cands, qv, Some(&dn)).unwrap();
        (g.value(out.boxes).clone(), out.layout)
    };
    let (a, layout) = run(vec![gt, [0.4, 0.4, 0.2, 0.2], gt, [0.3, 0.6, 0.2, 0.2]]);
    let (b, _) = run(vec![gt, [0.4, 0.4, 0.2, 0.2], gt, [0.7, 0.2, 0.5, 0.1]]);
    let m_rows = layout.matching_rows(0);
    let d_rows = layout.denoising_rows(0);
    let row = |t: &Tensor, r: usize| t.row(r).to_vec();
    for r in m_rows {
        assert_eq!(row(&a, r), row(&b, r));
    }
    // The first group is untouched by the second group's change.
    for r in d_rows.start..d_rows.start + 2 {
        assert_eq!(row(&a, r), row(&b, r));
    }
    assert_ne!(row(&a, d_rows.start + 3), row(&b, d_rows.start + 3));
}

#[test]
fn alignment_loss_falls_as_the_positive_improves() {
    let mut last = f64::INFINITY;
    for k in 0..=20 {
        let cos = -1.0 + 0.1 * k as f64;
        let mut g = Graph::new();
        let scores = g.constant(Tensor::from_vec(4, 1, vec![cos, 0.2, -0.3, 0.5]));
        let inv_tau = g.constant(Tensor::scalar(1.0 / 0.07));
        let l = losses::info_nce(&mut g, scores, &[(0, vec![1, 2, 3])], inv_tau);
        let v = g.value(l).item();
        assert!(v < last);
        last = v;
    }
}
