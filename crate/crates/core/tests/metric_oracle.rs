//! Metrics against a brute-force reimplementation over random tubes.

use std::collections::BTreeMap;

use groundkit_core::metrics::{mean_tiou, mean_viou, viou_at, EvalSample};
use groundkit_core::{BoundingBox, TemporalWindow, Tube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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
            let x = rng.random_range(0.0..0.7);
            let y = rng.random_range(0.0..0.7);
            let b = BoundingBox::corner(x, y, x + rng.random_range(0.01..0.3), y + rng.random_range(0.01..0.3));
            (f, b.unwrap())
        })
        .collect();
    Tube::new(w, FPS, FRAMES, boxes).unwrap()
}

/// Plain area IoU on corner arrays.
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = iw * ih;
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i;
    if u > 0.0 { i / u } else { 0.0 }
}

fn frames_of(t: &Tube) -> Vec<usize> {
    let (s, e) = (t.window().start(), t.window().end());
    (0..FRAMES)
        .filter(|&f| (s * FPS + 1e-9).floor() as usize <= f && f <= (e * FPS + 1e-9).floor() as usize)
        .collect()
}

fn brute(samples: &[EvalSample]) -> (f64, f64, Vec<f64>) {
    let mut tsum = 0.0;
    let mut per = Vec::new();
    for s in samples {
        let (p, g) = (&s.predicted, &s.ground_truth);
        let (ps, pe, gs, ge) = (p.window().start(), p.window().end(), g.window().start(), g.window().end());
        let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
        let union = (pe - ps) + (ge - gs) - inter;
        tsum += if union > 0.0 { inter / union } else if (ps, pe) == (gs, ge) { 1.0 } else { 0.0 };
        let pf = frames_of(p);
        let gf = frames_of(g);
        let mut union_frames = 0usize;
        let mut acc = 0.0;
        for f in 0..FRAMES {
            let (inp, ing) = (pf.contains(&f), gf.contains(&f));
            if !(inp || ing) {
                continue;
            }
            union_frames += 1;
            if inp && ing {
                acc += iou(p.box_at(f).unwrap().corners(), g.box_at(f).unwrap().corners());
            }
        }
        per.push(if union_frames > 0 { acc / union_frames as f64 } else { 0.0 });
    }
    let n = samples.len() as f64;
    (tsum / n, per.iter().sum::<f64>() / n, per)
}

#[test]
fn matches_brute_force_on_random_tubes() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<EvalSample> = (0..100)
        .map(|i| {
            let g = random_tube(&mut rng);
            // Half the predictions overlap their ground truth heavily.
            let p = if i % 2 == 0 { random_tube(&mut rng) } else {
                let mut b = g.boxes().clone();
                for v in b.values_mut() {
                    *v = v.translate(rng.random_range(-0.05..0.05), 0.0);
                }
                Tube::new(*g.window(), FPS, FRAMES, b).unwrap()
            };
            EvalSample::new(format!("s{i}"), p, g).unwrap()
        })
        .collect();
    let (bt, bv, per) = brute(&samples);
    assert!((mean_tiou(&samples).unwrap() - bt).abs() < 1e-9);
    assert!((mean_viou(&samples).unwrap() - bv).abs() < 1e-9);
    for r in [0.1, 0.3, 0.5, 0.7] {
        let want = per.iter().filter(|&&v| v >= r).count() as f64 / per.len() as f64;
        assert!((viou_at(&samples, r).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn monotone_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut samples: Vec<EvalSample> = (0..40)
        .map(|i| EvalSample::new(i.to_string(), random_tube(&mut rng), random_tube(&mut rng)).unwrap())
        .collect();
    let rs = [0.0001, 0.05, 0.1, 0.2, 0.4, 0.8];
    let vals: Vec<f64> = rs.iter().map(|&r| viou_at(&samples, r).unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    let (t0, v0) = (mean_tiou(&samples).unwrap(), mean_viou(&samples).unwrap());
    samples.reverse();
    samples.swap(3, 17);
    assert!((mean_tiou(&samples).unwrap() - t0).abs() < 1e-12);
    assert!((mean_viou(&samples).unwrap() - v0).abs() < 1e-12);
}
