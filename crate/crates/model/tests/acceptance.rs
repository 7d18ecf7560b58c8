//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{tiny_config, tiny_run, tiny_samples};
use groundkit_autograd::{gradcheck, Graph, GradcheckConfig, ParamSelector, Tensor};
use groundkit_core::dataset::{read_dataset, write_dataset};
use groundkit_core::metrics::{mean_tiou, mean_viou, viou_at, EvalSample};
use groundkit_core::sampling::{pair_frames, pn_sample, FrameLabel, PnRatio, SamplingConfig};
use groundkit_core::synth::{
    annotate_from_masks, build_dataset, generate_scene, insert_irrelevant_clips, masks_to_boxes, quality_filter,
    random_scene, scene_masks, DatasetConfig, SceneConfig, VideoSample,
};
use groundkit_core::{BoundingBox, TemporalWindow, Tube};
use groundkit_model::eta::timestamp_blocks;
use groundkit_model::losses::{self, AlignSet, LossWeights, SpatialTerms};
use groundkit_model::pipeline::{self, Ablations, RunConfig};
use groundkit_model::spatial::{self, EncoderFeatures};
use groundkit_model::substrate::Role;
use groundkit_model::{bridge, Model, ModelConfig, Relevance, TimestampMode, Variant, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnOnce(&mut Option<Trained>) -> Outcome>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

const FPS: f64 = 2.0;
const FRAMES: usize = 60;

fn random_tube(rng: &mut ChaCha8Rng) -> Tube {
    let s = rng.random_range(0.0..25.0);
    let e = s + rng.random_range(0.0..8.0);
    let w = TemporalWindow::new(s, e).unwrap();
    let boxes: BTreeMap<usize, BoundingBox> = w
        .frame_span(FPS, FRAMES)
        .into_iter()
        .flatten()
        .map(|f| {
            let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
            let b = BoundingBox::corner(x, y, x + rng.random_range(0.01..0.3), y + rng.random_range(0.01..0.3));
            (f, b.unwrap())
        })
        .collect();
    Tube::new(w, FPS, FRAMES, boxes).unwrap()
}

fn area_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = iw * ih;
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Double loop over samples and over every frame of the clock.
fn brute_metrics(samples: &[EvalSample]) -> (f64, Vec<f64>) {
    let in_window = |t: &Tube, f: usize| {
        let (s, e) = (t.window().start(), t.window().end());
        (s * FPS + 1e-9).floor() as usize <= f && f <= (e * FPS + 1e-9).floor() as usize
    };
    let mut tsum = 0.0;
    let mut per = Vec::new();
    for s in samples {
        let (p, g) = (&s.predicted, &s.ground_truth);
        let (ps, pe, gs, ge) = (p.window().start(), p.window().end(), g.window().start(), g.window().end());
        let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
        let union = (pe - ps) + (ge - gs) - inter;
        tsum += if union > 0.0 {
            inter / union
        } else if (ps, pe) == (gs, ge) {
            1.0
        } else {
            0.0
        };
        let (mut frames, mut acc) = (0usize, 0.0);
        for f in 0..FRAMES {
            let (a, b) = (in_window(p, f), in_window(g, f));
            if a || b {
                frames += 1;
            }
            if a && b {
                acc += area_iou(p.box_at(f).unwrap().corners(), g.box_at(f).unwrap().corners());
            }
        }
        per.push(if frames > 0 { acc / frames as f64 } else { 0.0 });
    }
    (tsum / samples.len() as f64, per)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<EvalSample> = (0..100)
        .map(|i| {
            let g = random_tube(&mut rng);
            let p = if i % 2 == 0 {
                random_tube(&mut rng)
            } else {
                let mut b = g.boxes().clone();
                for v in b.values_mut() {
                    *v = v.translate(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                }
                Tube::new(*g.window(), FPS, FRAMES, b).unwrap()
            };
            EvalSample::new(format!("t{i}"), p, g).unwrap()
        })
        .collect();
    let (bt, per) = brute_metrics(&samples);
    let bv = per.iter().sum::<f64>() / per.len() as f64;
    let mut worst: f64 = 0.0;
    worst = worst.max((mean_tiou(&samples).unwrap() - bt).abs());
    worst = worst.max((mean_viou(&samples).unwrap() - bv).abs());
    for r in [0.1, 0.3, 0.5, 0.7] {
        let want = per.iter().filter(|&&v| v >= r).count() as f64 / per.len() as f64;
        worst = worst.max((viou_at(&samples, r).unwrap() - want).abs());
    }
    let el = t.elapsed();
    check(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    check(el < Duration::from_secs(5), || format!("took {el:?}"))?;
    Ok(format!("100 tubes, max deviation {worst:.1e}, {:.2}s", el.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let model = Model::new(tiny_config(), Variant::default()).unwrap();
    let sample = tiny_samples(1, 31).remove(0);
    let prep = pipeline::prepare(&model, &sample).unwrap();
    let weights = LossWeights {
        negatives: 4,
        ..Default::default()
    };
    let sampling = SamplingConfig::default();
    type Pick = fn(&pipeline::LossBreakdown) -> groundkit_autograd::Var;
    let spatial_side: &[&str] = &["spatial.", "substrate.", "bridge."];
    let components: [(&str, Pick, &[&str]); 7] = [
        ("L_token", |b| b.token, &["substrate."]),
        ("L_obj", |b| b.terms.objectness, spatial_side),
        ("L_box", |b| b.terms.bbox, spatial_side),
        ("L_giou", |b| b.terms.giou, spatial_side),
        ("L_align", |b| b.terms.alignment, &["spatial.lift", "spatial.enc", "substrate.", "bridge.", "loss."]),
        ("L_dn", |b| b.terms.denoising, spatial_side),
        ("composite", |b| b.total, &[""]),
    ];
    let mut parts = Vec::new();
    for (i, (name, pick, prefixes)) in components.into_iter().enumerate() {
        let mut store = model.params.clone();
        let report = gradcheck(
            &mut store,
            &ParamSelector::prefixes(prefixes),
            &GradcheckConfig {
                coords: 24,
                seed: i as u64,
                ..Default::default()
            },
            |p, g| {
                let m = model.with_params(p);
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let b = pipeline::training_loss(&m, g, &sample, &prep, &weights, &sampling, &mut rng).unwrap();
                pick(&b)
            },
        )
        .map_err(|e| format!("{name}: {e}"))?;
        check(report.loss > 0.0, || format!("{name} is zero on the fixture"))?;
        check(report.passed(), || format!("{name}: max rel err {:.2e}", report.max_rel_err))?;
        parts.push(format!("{name} {:.1e}", report.max_rel_err));
    }
    let el = t.elapsed();
    check(el < Duration::from_secs(120), || format!("took {el:?}"))?;
    Ok(format!("24 coords each; {}; {:.1}s", parts.join(", "), el.as_secs_f64()))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.losses.token = 0.0;
    let (samples, _) = build_dataset(&DatasetConfig {
        count: 1,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let model = pipeline::initial_model(&cfg).unwrap();
    let prep = pipeline::prepare(&model, &samples[0]).unwrap();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = pipeline::training_loss(&model, &mut g, &samples[0], &prep, &cfg.losses, &cfg.sampling, &mut rng)
        .map_err(|e| e.to_string())?;
    g.backward(b.total);
    let grads = g.param_grads(&model.params);
    let q = grads.norm_of(model.params.id(bridge::QUERY_INIT).unwrap());
    let attn = model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("substrate.layer") && n.ends_with(".qkv.w"))
        .map(|(id, _, _)| grads.norm_of(id))
        .fold(0.0, f64::max);
    check(q > 0.0 && attn > 0.0, || format!("|dQ_init| {q:e}, max |d attn| {attn:e}"))?;
    Ok(format!("|dQ_init| {q:.2e}, max substrate attention grad norm {attn:.2e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for trial in 0..1000 {
        let (n, d, layers) = (rng.random_range(2..30), rng.random_range(2..8), rng.random_range(1..4));
        let k = rng.random_range(1..=n);
        let mut feats: Vec<Tensor> = (0..layers)
            .map(|_| Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        // Duplicate rows make exact ties.
        for t in feats.iter_mut() {
            for _ in 0..rng.random_range(0..3) {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                let src = t.row(a).to_vec();
                t.row_mut(b).copy_from_slice(&src);
            }
        }
        let m = rng.random_range(1..4);
        let q = Tensor::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = spatial::select_topk_multilayer(&feats, &q, k, Relevance::Mean, false).map_err(|e| e.to_string())?;
        let mean: Vec<f64> = (0..d).map(|c| (0..m).map(|r| q.get(r, c)).sum::<f64>() / m as f64).collect();
        let qn = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (l, t) in feats.iter().enumerate() {
            let s: Vec<f64> = (0..n)
                .map(|r| {
                    let row = t.row(r);
                    let dot: f64 = row.iter().zip(&mean).map(|(a, b)| a * b).sum();
                    let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if rn == 0.0 || qn == 0.0 {
                        0.0
                    } else {
                        dot / (rn * qn)
                    }
                })
                .collect();
            // A token is in the top K iff fewer than K tokens beat it.
            let mut want = Vec::new();
            for j in 0..n {
                let beaten_by = (0..n).filter(|&i| s[i] > s[j] || (s[i] == s[j] && i < j)).count();
                if beaten_by < k {
                    want.push(j);
                }
                if (0..n).any(|i| i != j && s[i] == s[j]) {
                    ties += 1;
                }
            }
            let mut have = got.tokens_of_layer(l);
            have.sort_unstable();
            check(have == want, || format!("trial {trial} layer {l}: {have:?} != {want:?}"))?;
        }
    }
    check(ties > 0, || "no tie cases were generated".into())?;
    Ok(format!("1000 instances agree, {ties} tied tokens exercised"))
}

// ---------------------------------------------------------------- 5

fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, swap: bool) -> f64 {
        let rows = if swap { cost[0].len() } else { cost.len() };
        if row == rows {
            return 0.0;
        }
        let cols = if swap { cost.len() } else { cost[0].len() };
        let mut best = f64::INFINITY;
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                let v = if swap { cost[j][row] } else { cost[row][j] };
                best = best.min(v + rec(cost, row + 1, used, swap));
                used[j] = false;
            }
        }
        best
    }
    let swap = r > c;
    let mut used = vec![false; if swap { r } else { c }];
    rec(cost, 0, &mut used, swap)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..500 {
        let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let pairs = losses::min_cost_assignment(&cost);
        check(pairs.len() == r.min(c), || format!("trial {trial}: {} pairs for {r}x{c}", pairs.len()))?;
        let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        check(rows.len() == pairs.len() && cols.len() == pairs.len(), || format!("trial {trial}: not a matching"))?;
        let got: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        let want = brute_assignment(&cost);
        check((got - want).abs() < 1e-9, || format!("trial {trial} ({r}x{c}): {got} vs {want}"))?;
    }
    Ok("500 matrices up to 7x7 match the permutation optimum".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Every token equals the same vector, so every logit is equal.
    let (tokens, dim, n) = (20, 6, 7usize);
    let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let layer = g.constant(Tensor::from_vec(tokens, dim, row.repeat(tokens)));
    let feats = EncoderFeatures {
        layers: vec![layer],
        frames: 1,
        tokens,
    };
    let bridge = g.constant(Tensor::from_vec(2, dim, (0..2 * dim).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let inv_tau = g.constant(Tensor::scalar(1.0 / 0.07));
    let set = AlignSet {
        frame: 0,
        layer: 0,
        positives: vec![0, 1, 2],
        excluded: vec![0, 1, 2],
    };
    let l = losses::alignment_loss(&mut g, &feats, std::slice::from_ref(&set), bridge, inv_tau, n, false, &mut rng);
    let equal = g.value(l).item();
    let want = (1.0 + n as f64).ln();
    check((equal - want).abs() < 1e-9, || format!("equal logits gave {equal}, want {want}"))?;

    let none = AlignSet {
        excluded: (0..tokens).collect(),
        ..set
    };
    let l = losses::alignment_loss(&mut g, &feats, &[none], bridge, inv_tau, n, false, &mut rng);
    let zero = g.value(l).item();
    check(zero.abs() < 1e-12, || format!("no negatives gave {zero}"))?;

    let one = g.constant(Tensor::scalar(1.0));
    let terms = SpatialTerms {
        objectness: one,
        bbox: one,
        giou: one,
        denoising: one,
        alignment: one,
    };
    let s = losses::spatial_loss(&mut g, &terms, &LossWeights::default());
    let s = g.value(s).item();
    check((s - 5.5).abs() < 1e-12, || format!("unit components gave {s}"))?;
    Ok(format!("ln(1+{n}) = {equal:.6}, zero-negative loss {zero:.1e}, unit spatial loss {s}"))
}

// ---------------------------------------------------------------- 7 & 8

struct Trained {
    model: Model,
}

fn criterion_7(out: &mut Option<Trained>) -> Outcome {
    let (samples, _) = build_dataset(&DatasetConfig {
        count: 32,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    check(samples.len() == 32, || format!("only {} samples survived filtering", samples.len()))?;
    let scene = SceneConfig::default();
    check(scene.distractors > 0 && (scene.noise - 0.05).abs() < 1e-12, || "default scene lacks distractors or sigma".into())?;
    let cfg = RunConfig::default();
    let t = Instant::now();
    let run = pipeline::train(&cfg, &samples, |_| {}).map_err(|e| e.to_string())?;
    let train_time = t.elapsed();
    let (pred, oracle) = pipeline::evaluate_both(&run.model, &samples).map_err(|e| e.to_string())?;
    let total = t.elapsed();
    let m_tiou = pred.report.m_tiou.unwrap_or(0.0);
    let detail = format!(
        "{} steps in {:.0}s (+{:.0}s eval): m_tIoU {:.3}, oracle m_vIoU {:.3}, predicted m_vIoU {:.3}, parsed {:.0}%",
        cfg.optim.steps,
        train_time.as_secs_f64(),
        (total - train_time).as_secs_f64(),
        m_tiou,
        oracle.report.m_viou,
        pred.report.m_viou,
        100.0 * pred.parse_rate,
    );
    *out = Some(Trained { model: run.model });
    check(cfg.optim.steps <= 2000, || detail.clone())?;
    check(train_time < Duration::from_secs(600), || format!("too slow: {detail}"))?;
    check(
        m_tiou >= 0.90 && oracle.report.m_viou >= 0.80 && pred.report.m_viou >= 0.60,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn criterion_8(trained: &Option<Trained>) -> Outcome {
    let model = &trained.as_ref().ok_or("no trained model (criterion 7 did not finish)")?.model;
    let (held_out, _) = build_dataset(&DatasetConfig {
        count: 32,
        seed: 8_000,
        id_prefix: "h".into(),
        ..Default::default()
    })
    .unwrap();
    let (pred, oracle) = pipeline::evaluate_both(model, &held_out).map_err(|e| e.to_string())?;
    let detail = format!(
        "held-out {}: oracle m_vIoU {:.3} vs predicted {:.3} (m_tIoU {:.3})",
        held_out.len(),
        oracle.report.m_viou,
        pred.report.m_viou,
        pred.report.m_tiou.unwrap_or(0.0)
    );
    check(oracle.report.m_viou >= pred.report.m_viou, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let (samples, _) = build_dataset(&DatasetConfig {
        count: 32,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let levels = [0.0, 1.0, 2.0, 3.0, 4.0];
    let rows = pipeline::controlled_noise_study(&samples, &levels).map_err(|e| e.to_string())?;
    let vals: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.m_viou)).collect();
    check(rows.windows(2).all(|w| w[1].m_viou < w[0].m_viou), || format!("not strictly decreasing: {vals:?}"))?;
    Ok(format!("m_vIoU over shifts {levels:?} s: {}", vals.join(" > ")))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // P/N sampling: labels and budgets on 1000 draws.
    let scene = SceneConfig {
        duration: 12.0,
        ..Default::default()
    };
    let videos: Vec<VideoSample> = (0..10)
        .map(|s| {
            let spec = random_scene(&scene, format!("pn{s}"), 100 + s).unwrap();
            annotate_from_masks(generate_scene(&spec).unwrap(), &scene_masks(&spec)).unwrap()
        })
        .collect();
    for draw in 0..1000 {
        let v = &videos[draw % videos.len()];
        let ratio = PnRatio::ALL[rng.random_range(0..4)];
        let sc = SamplingConfig::from_ratio(ratio);
        let b = pn_sample(v, &sc, &mut rng).map_err(|e| e.to_string())?;
        let span = v.gt.frames().unwrap();
        let (p, n) = (b.positives().count(), b.negatives().count());
        let avail_neg = v.frame_count() - span.clone().count();
        check(p == sc.positives.min(span.clone().count()), || format!("draw {draw}: {p} positives"))?;
        check(n == sc.negatives.min(avail_neg), || format!("draw {draw}: {n} negatives"))?;
        for f in &b.frames {
            let inside = span.contains(&f.frame);
            check(inside == (f.label == FrameLabel::Positive) && f.gt_box.is_some() == inside, || {
                format!("draw {draw}: frame {} mislabeled", f.frame)
            })?;
        }
    }
    // Virtual coordinates never land on the visual grid.
    let vocab = Vocab::new(8);
    for draw in 0..1000 {
        let cfg = ModelConfig {
            grid_h: rng.random_range(2..12),
            grid_w: rng.random_range(2..12),
            ..Default::default()
        };
        let frames = rng.random_range(1..80);
        let pairs = pair_frames(frames, 2.0, frames as f64 / 2.0);
        let blocks = timestamp_blocks(&vocab, &cfg, &Variant::default(), &pairs).map_err(|e| e.to_string())?;
        for b in &blocks {
            for p in &b.positions {
                check(p[1] >= cfg.grid_w as f64 && p[2] >= cfg.grid_h as f64, || {
                    format!("draw {draw}: timestamp at {p:?} inside {}x{}", cfg.grid_w, cfg.grid_h)
                })?;
            }
        }
    }
    // Ablation switches, end to end, each altering what it should.
    let samples = tiny_samples(3, 10);
    let base = tiny_run(3);
    let mut flags: Vec<(&str, Ablations)> = vec![
        (
            "no_eta",
            Ablations {
                no_eta: true,
                ..Default::default()
            },
        ),
        (
            "naive_eta",
            Ablations {
                naive_eta: true,
                ..Default::default()
            },
        ),
        (
            "no_stsb",
            Ablations {
                no_stsb: true,
                ..Default::default()
            },
        ),
        (
            "single_layer_select",
            Ablations {
                single_layer_select: true,
                ..Default::default()
            },
        ),
        (
            "lambda 1:1",
            Ablations {
                equal_loss_weights: true,
                ..Default::default()
            },
        ),
    ];
    for r in PnRatio::ALL {
        flags.push((
            r.label(),
            Ablations {
                pn_ratio: Some(r),
                ..Default::default()
            },
        ));
    }
    for (name, a) in &flags {
        let mut cfg = base.clone();
        cfg.apply(a);
        let run = pipeline::train(&cfg, &samples, |_| {}).map_err(|e| format!("{name}: {e}"))?;
        let m = &run.model;
        pipeline::evaluate_both(m, &samples).map_err(|e| format!("{name}: {e}"))?;
        let prep = pipeline::prepare(m, &samples[0]).map_err(|e| e.to_string())?;
        let ts: Vec<[f64; 3]> = prep
            .prompt
            .slots
            .iter()
            .filter(|s| s.role == Role::Timestamp)
            .map(|s| s.position)
            .collect();
        let structural = match *name {
            "no_eta" => ts.is_empty(),
            "naive_eta" => !ts.is_empty() && ts.iter().all(|p| p[1] == 0.0 && p[2] == 0.0),
            "no_stsb" => {
                let fixed = m.params.id(bridge::FIXED);
                bridge::appended_queries(m) == 0
                    && m.params.id(bridge::QUERY_INIT).is_none()
                    && fixed.is_some_and(|id| m.params.is_frozen(id))
            }
            "single_layer_select" => {
                let d = pipeline::decode_answer(m, &samples[0]).map_err(|e| e.to_string())?;
                let mut g = Graph::new();
                let stack = spatial::stack_frames(&m.config, &[samples[0].frame(0)]).unwrap();
                let feats = spatial::encode_image(m, &mut g, &stack).unwrap();
                let c = spatial::select_for_frames(m, &g, &feats, &d.bridge).unwrap();
                let last = m.config.encoder_layers - 1;
                c[0].candidates.iter().all(|x| x.layer == last) && c[0].len() == m.config.select_k
            }
            "lambda 1:1" => {
                let e = &run.log[0];
                cfg.losses.spatial == cfg.losses.token && (e.total - (e.token + e.spatial)).abs() < 1e-9
            }
            label => {
                let r: PnRatio = label.parse().map_err(|e: String| e)?;
                let (p, n) = r.budgets();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let b = pn_sample(&samples[0], &cfg.sampling, &mut rng).map_err(|e| e.to_string())?;
                (cfg.sampling.positives, cfg.sampling.negatives) == (p, n)
                    && b.positives().count() <= p
                    && b.negatives().count() <= n
                    && (n > 0 || b.negatives().count() == 0)
            }
        };
        check(structural, || format!("{name} did not alter the expected structure"))?;
        check(ts.is_empty() == (cfg.variant.timestamps == TimestampMode::Off), || format!("{name}: timestamp slots"))?;
    }
    Ok(format!(
        "1000 P/N draws, 1000 virtual-coordinate draws, {} ablations ran end to end",
        flags.len()
    ))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut all = Vec::new();
    for seed in 0..200u64 {
        let spec = random_scene(&cfg, format!("d{seed}"), seed).map_err(|e| e.to_string())?;
        let video = generate_scene(&spec).map_err(|e| e.to_string())?;
        let masks = scene_masks(&spec);
        let boxes = masks_to_boxes(&masks);
        let video = annotate_from_masks(video, &masks).map_err(|e| e.to_string())?;
        check(video.gt.boxes() == &boxes, || format!("{}: boxes differ from masks", video.id))?;
        let (pre, post) = (rng.random_range(0.0..=4.0), rng.random_range(0.0..=4.0));
        all.push(insert_irrelevant_clips(&video, pre, post, seed).map_err(|e| e.to_string())?);
    }
    let (kept, dropped) = quality_filter(all);
    check(dropped.is_empty(), || format!("{} unexpected drops", dropped.len()))?;
    let violations = kept.iter().filter(|s| s.validate().is_err()).count();
    check(violations == 0, || format!("{violations} invariant violations"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let index = dir.path().join("set.jsonl");
    write_dataset(&kept, &index).map_err(|e| e.to_string())?;
    let back = read_dataset(&index).map_err(|e| e.to_string())?;
    check(back == kept, || "round trip changed the data".into())?;

    let long_spec = random_scene(
        &SceneConfig {
            duration: 200.0,
            ..Default::default()
        },
        "long",
        1,
    )
    .map_err(|e| e.to_string())?;
    let long = annotate_from_masks(generate_scene(&long_spec).unwrap(), &scene_masks(&long_spec)).unwrap();
    let mut short = kept[0].clone();
    short.id = "short".into();
    let first = *short.gt.frames().unwrap().start();
    let w = TemporalWindow::from_frames(first, first + 1, short.fps).unwrap();
    check((w.duration() - 0.5).abs() < 1e-12, || "fixture span is not 0.5 s".into())?;
    let boxes = (first..=first + 1).map(|f| (f, *short.gt.box_at(f).unwrap())).collect();
    short.gt = Tube::new(w, short.fps, short.frame_count(), boxes).unwrap();
    let (kept2, dropped) = quality_filter(vec![long, short, kept[1].clone()]);
    let reasons: Vec<(String, String)> = dropped.iter().map(|d| (d.id.clone(), d.reason.clone())).collect();
    let want = vec![
        ("long".to_string(), "duration>180s".to_string()),
        ("short".to_string(), "span<1s".to_string()),
    ];
    check(kept2.len() == 1 && reasons == want, || format!("drops {reasons:?}"))?;
    Ok(format!(
        "200 specs, 0 violations, lossless round trip of {} samples, drops {:?}",
        kept.len(),
        reasons.iter().map(|r| r.1.as_str()).collect::<Vec<_>>()
    ))
}

// ----------------------------------------------------------------

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &r {
        Ok(d) => println!("criterion {n}: PASS ({secs:.1}s) {d}"),
        Err(d) => println!("criterion {n}: FAIL ({secs:.1}s) {d}"),
    }
    r.is_ok()
}

/// Criterion numbers may be passed as arguments to run a subset.
fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut trained = None;
    let mut results = Vec::new();
    let criteria: Vec<(usize, Criterion)> = vec![
        (1, Box::new(|_| criterion_1())),
        (2, Box::new(|_| criterion_2())),
        (3, Box::new(|_| criterion_3())),
        (4, Box::new(|_| criterion_4())),
        (5, Box::new(|_| criterion_5())),
        (6, Box::new(|_| criterion_6())),
        (7, Box::new(criterion_7)),
        (8, Box::new(|t| criterion_8(t))),
        (9, Box::new(|_| criterion_9())),
        (10, Box::new(|_| criterion_10())),
        (11, Box::new(|_| criterion_11())),
    ];
    for (n, f) in criteria {
        if wanted(n) {
            results.push(run(n, || f(&mut trained)));
        }
    }
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
