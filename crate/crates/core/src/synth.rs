//! Synthetic grounding videos.
//!
//! A frame is an `H × W` grid of `D_v`-dimensional patch features. Every cell
//! carries one of a small set of orthonormal signature vectors (or the
//! background vector) plus Gaussian noise. The query names a target
//! signature; the target is painted inside its box only during the event
//! window, while distractors with other signatures wander the grid.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError, TemporalWindow, Tube};

pub const DEFAULT_FPS: f64 = 2.0;
pub const MAX_DURATION: f64 = 180.0;
pub const MIN_SPAN: f64 = 1.0;

const BANK_SEED: u64 = 0x5eed_b00c;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene {id}: {msg}")]
    InvalidSpec { id: String, msg: String },
    #[error("scene {id}: {what} leaves the grid on frame {frame}")]
    OutOfGrid { id: String, what: String, frame: usize },
    #[error("sample {id}: no annotated frames")]
    EmptyAnnotation { id: String },
    #[error("sample {id}: {source}")]
    Geometry { id: String, source: GeometryError },
}

/// Fixed orthonormal signature vectors plus one background vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureBank {
    dim: usize,
    signatures: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl SignatureBank {
    /// Deterministic bank of `count` signatures in `dim` dimensions.
    /// Panics unless `dim > count`.
    pub fn new(count: usize, dim: usize) -> Self {
        assert!(dim > count, "need dim > count for orthonormal signatures");
        let mut rng = ChaCha8Rng::seed_from_u64(BANK_SEED ^ ((count as u64) << 32) ^ dim as u64);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count + 1);
        while basis.len() < count + 1 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let background = basis.pop().expect("bank has count + 1 vectors");
        Self {
            dim,
            signatures: basis,
            background,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn signature(&self, k: usize) -> &[f64] {
        &self.signatures[k]
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Index of the signature with the largest dot product, or `None` when
    /// the background vector wins.
    pub fn nearest(&self, feature: &[f32]) -> Option<usize> {
        let dot = |v: &[f64]| v.iter().zip(feature).map(|(a, b)| a * *b as f64).sum::<f64>();
        let mut best = (dot(&self.background), None);
        for (k, s) in self.signatures.iter().enumerate() {
            let d = dot(s);
            if d > best.0 {
                best = (d, Some(k));
            }
        }
        best.1
    }
}

/// Axis-aligned rectangle of whole grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl CellBox {
    pub fn fits(&self, grid_h: usize, grid_w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= grid_h && self.col + self.width <= grid_w
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    /// Normalized corner box covering exactly these cells.
    pub fn to_box(&self, grid_h: usize, grid_w: usize) -> BoundingBox {
        let (h, w) = (grid_h as f64, grid_w as f64);
        BoundingBox::corner(
            self.col as f64 / w,
            self.row as f64 / h,
            (self.col + self.width) as f64 / w,
            (self.row + self.height) as f64 / h,
        )
        .expect("cell boxes are ordered")
    }
}

/// A signature and where it sits on each frame (`None` = absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub signature: usize,
    pub cells: Vec<Option<CellBox>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    pub signature_count: usize,
    /// Target placement per frame; painted only on event frames.
    pub target: Track,
    pub distractors: Vec<Track>,
    pub event: TemporalWindow,
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        frame_count(self.duration, self.fps)
    }

    fn invalid(&self, msg: impl Into<String>) -> SynthError {
        SynthError::InvalidSpec {
            id: self.id.clone(),
            msg: msg.into(),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.duration > 0.0 && self.fps > 0.0 && self.noise >= 0.0) {
            return Err(self.invalid("duration, fps must be positive and noise non-negative"));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.feature_dim <= self.signature_count {
            return Err(self.invalid("grid must be non-empty and feature_dim > signature_count"));
        }
        if self.event.end() > self.duration {
            return Err(self.invalid(format!(
                "event ends at {} after the video ({})",
                self.event.end(),
                self.duration
            )));
        }
        let n = self.frame_count();
        if self.event.frame_span(self.fps, n).is_none() {
            return Err(self.invalid("event window covers no frame"));
        }
        let mut seen = vec![false; self.signature_count];
        for (i, t) in std::iter::once(&self.target).chain(&self.distractors).enumerate() {
            let what = if i == 0 { "target".to_string() } else { format!("distractor {}", i - 1) };
            if t.signature >= self.signature_count {
                return Err(self.invalid(format!("{what} uses unknown signature {}", t.signature)));
            }
            if std::mem::replace(&mut seen[t.signature], true) {
                return Err(self.invalid(format!("{what} reuses signature {}", t.signature)));
            }
            if t.cells.len() != n {
                return Err(self.invalid(format!("{what} track has {} frames, video has {n}", t.cells.len())));
            }
            for (f, c) in t.cells.iter().enumerate() {
                if let Some(c) = c {
                    if !c.fits(self.grid_h, self.grid_w) {
                        return Err(SynthError::OutOfGrid {
                            id: self.id.clone(),
                            what,
                            frame: f,
                        });
                    }
                }
            }
        }
        for f in self.event.frame_span(self.fps, n).into_iter().flatten() {
            if self.target.cells[f].is_none() {
                return Err(self.invalid(format!("target missing on event frame {f}")));
            }
        }
        Ok(())
    }
}

/// `floor(duration · fps)`, tolerant of representation error.
pub fn frame_count(duration: f64, fps: f64) -> usize {
    (duration * fps + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    /// Size of the signature bank the features were drawn from.
    pub signature_count: usize,
    pub noise: f64,
    /// `[frame][row][col][channel]`.
    pub features: Vec<f32>,
    pub query: String,
    pub target_signature: usize,
    pub gt: Tube,
}

/// A broken [`VideoSample`] invariant.
#[derive(Clone, Debug, Error, PartialEq)]
#[error("sample {id}: field {field}: {msg}")]
pub struct InvariantError {
    pub id: String,
    pub field: &'static str,
    pub msg: String,
}

pub fn query_text(signature: usize) -> String {
    format!("find sig_{signature}")
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        frame_count(self.duration, self.fps)
    }

    pub fn cells_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.cells_per_frame() * self.feature_dim;
        &self.features[f * n..(f + 1) * n]
    }

    pub fn cell(&self, f: usize, r: usize, c: usize) -> &[f32] {
        let d = self.feature_dim;
        let start = ((f * self.grid_h + r) * self.grid_w + c) * d;
        &self.features[start..start + d]
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        let bad = |field, msg: String| InvariantError {
            id: self.id.clone(),
            field,
            msg,
        };
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(bad("duration", format!("{} is not positive", self.duration)));
        }
        if self.fps.is_nan() || self.fps <= 0.0 {
            return Err(bad("fps", format!("{} is not positive", self.fps)));
        }
        let n = self.frame_count();
        let expect = n * self.cells_per_frame() * self.feature_dim;
        if self.features.len() != expect {
            return Err(bad(
                "features",
                format!("{} values, expected {expect} for {n} frames", self.features.len()),
            ));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(bad("features", "non-finite value".into()));
        }
        if self.target_signature >= self.signature_count {
            return Err(bad("target_signature", format!("{} out of range", self.target_signature)));
        }
        if self.query != query_text(self.target_signature) {
            return Err(bad("query", format!("{:?} does not name the target", self.query)));
        }
        if self.gt.fps() != self.fps || self.gt.frame_count() != n {
            return Err(bad("gt", "tube frame clock differs from the video".into()));
        }
        let w = self.gt.window();
        if w.end() > self.duration + 1e-9 {
            return Err(bad("gt", format!("window end {} beyond duration {}", w.end(), self.duration)));
        }
        if self.gt.frames().is_none() {
            return Err(bad("gt", "window covers no frame".into()));
        }
        if let Some((f, _)) = self.gt.boxes().iter().find(|(_, b)| !b.is_normalized()) {
            return Err(bad("gt", format!("box on frame {f} leaves the unit square")));
        }
        Ok(())
    }
}

fn paint(buf: &mut [f32], v: &[f64], noise: f64, rng: &mut ChaCha8Rng) {
    for (x, s) in buf.iter_mut().zip(v) {
        let e: f64 = if noise > 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        *x = (s + e) as f32;
    }
}

/// Frame features for one frame: background everywhere, then each listed
/// `(signature, cells)` in order, later entries on top.
fn render_frame(
    grid_h: usize,
    grid_w: usize,
    bank: &SignatureBank,
    layers: &[(usize, CellBox)],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let d = bank.dim();
    let mut out = vec![0.0f32; grid_h * grid_w * d];
    for r in 0..grid_h {
        for c in 0..grid_w {
            let v = layers
                .iter()
                .rev()
                .find(|(_, b)| b.contains(r, c))
                .map(|(s, _)| bank.signature(*s))
                .unwrap_or(bank.background());
            let at = (r * grid_w + c) * d;
            paint(&mut out[at..at + d], v, noise, rng);
        }
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<VideoSample, SynthError> {
    spec.validate()?;
    let bank = SignatureBank::new(spec.signature_count, spec.feature_dim);
    let n = spec.frame_count();
    let span = spec.event.frame_span(spec.fps, n).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(n * spec.grid_h * spec.grid_w * spec.feature_dim);
    let mut boxes = BTreeMap::new();
    for f in 0..n {
        let mut layers: Vec<(usize, CellBox)> = spec
            .distractors
            .iter()
            .filter_map(|t| t.cells[f].map(|c| (t.signature, c)))
            .collect();
        if span.contains(&f) {
            let c = spec.target.cells[f].expect("validated");
            layers.push((spec.target.signature, c));
            boxes.insert(f, c.to_box(spec.grid_h, spec.grid_w));
        }
        features.extend(render_frame(spec.grid_h, spec.grid_w, &bank, &layers, spec.noise, &mut rng));
    }
    let gt = Tube::new(spec.event, spec.fps, n, boxes).map_err(|source| SynthError::Geometry {
        id: spec.id.clone(),
        source,
    })?;
    Ok(VideoSample {
        id: spec.id.clone(),
        duration: spec.duration,
        fps: spec.fps,
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        feature_dim: spec.feature_dim,
        signature_count: spec.signature_count,
        noise: spec.noise,
        features,
        query: query_text(spec.target.signature),
        target_signature: spec.target.signature,
        gt,
    })
}

/// Knobs for drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub duration: f64,
    pub fps: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    pub signature_count: usize,
    pub distractors: usize,
    pub noise: f64,
    pub min_box_cells: usize,
    pub max_box_cells: usize,
    /// Minimum event length in frame pairs.
    pub min_event_pairs: usize,
    /// Frame pairs kept free of the event, so every video has negatives.
    pub min_free_pairs: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration: 6.0,
            fps: DEFAULT_FPS,
            grid_h: 8,
            grid_w: 8,
            feature_dim: 32,
            signature_count: 8,
            distractors: 2,
            noise: 0.05,
            min_box_cells: 2,
            max_box_cells: 3,
            min_event_pairs: 2,
            min_free_pairs: 1,
        }
    }
}

fn random_walk(cfg: &SceneConfig, frames: usize, rng: &mut ChaCha8Rng) -> Vec<CellBox> {
    let height = rng.random_range(cfg.min_box_cells..=cfg.max_box_cells).min(cfg.grid_h);
    let width = rng.random_range(cfg.min_box_cells..=cfg.max_box_cells).min(cfg.grid_w);
    let mut row = rng.random_range(0..=cfg.grid_h - height);
    let mut col = rng.random_range(0..=cfg.grid_w - width);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(CellBox { row, col, height, width });
        let step = |p: usize, hi: usize, rng: &mut ChaCha8Rng| {
            let d: i64 = rng.random_range(-1..=1);
            (p as i64 + d).clamp(0, hi as i64) as usize
        };
        row = step(row, cfg.grid_h - height, rng);
        col = step(col, cfg.grid_w - width, rng);
    }
    out
}

/// Random scene with a pair-aligned event: it starts on an even frame and
/// ends on an odd one, so it covers whole frame pairs.
pub fn random_scene(cfg: &SceneConfig, id: impl Into<String>, seed: u64) -> Result<SceneSpec, SynthError> {
    let id = id.into();
    let invalid = |msg: &str| SynthError::InvalidSpec {
        id: id.clone(),
        msg: msg.to_string(),
    };
    if cfg.distractors + 1 > cfg.signature_count {
        return Err(invalid("more tracks than signatures"));
    }
    if cfg.min_box_cells == 0 || cfg.min_box_cells > cfg.max_box_cells {
        return Err(invalid("box size range is empty"));
    }
    let n = frame_count(cfg.duration, cfg.fps);
    let pairs = n / 2;
    let max_event = pairs.saturating_sub(cfg.min_free_pairs);
    if cfg.min_event_pairs == 0 || max_event < cfg.min_event_pairs {
        return Err(invalid("video too short for the event length bounds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigs: Vec<usize> = (0..cfg.signature_count).collect();
    sigs.shuffle(&mut rng);
    let len = rng.random_range(cfg.min_event_pairs..=max_event);
    let first_pair = rng.random_range(0..=pairs - len);
    let event = TemporalWindow::from_frames(2 * first_pair, 2 * (first_pair + len) - 1, cfg.fps)
        .map_err(|e| invalid(&e.to_string()))?;
    let target = Track {
        signature: sigs[0],
        cells: random_walk(cfg, n, &mut rng).into_iter().map(Some).collect(),
    };
    let distractors = (0..cfg.distractors)
        .map(|i| Track {
            signature: sigs[i + 1],
            cells: random_walk(cfg, n, &mut rng).into_iter().map(Some).collect(),
        })
        .collect();
    Ok(SceneSpec {
        id,
        duration: cfg.duration,
        fps: cfg.fps,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        feature_dim: cfg.feature_dim,
        signature_count: cfg.signature_count,
        target,
        distractors,
        event,
        noise: cfg.noise,
        seed: rng.random(),
    })
}

/// Per-frame cell masks of one object plus its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAnnotation {
    pub id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Frame index → row-major `grid_h × grid_w` mask.
    pub masks: BTreeMap<usize, Vec<bool>>,
    pub caption: String,
}

/// The target's cells on every event frame of `spec`.
pub fn scene_masks(spec: &SceneSpec) -> MaskAnnotation {
    let n = spec.frame_count();
    let masks = spec
        .event
        .frame_span(spec.fps, n)
        .into_iter()
        .flatten()
        .filter_map(|f| spec.target.cells.get(f).copied().flatten().map(|c| (f, c)))
        .map(|(f, c)| {
            let m = (0..spec.grid_h * spec.grid_w)
                .map(|i| c.contains(i / spec.grid_w, i % spec.grid_w))
                .collect();
            (f, m)
        })
        .collect();
    MaskAnnotation {
        id: spec.id.clone(),
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        masks,
        caption: query_text(spec.target.signature),
    }
}

/// Tightest cell-aligned box around each frame's positive cells. Frames with
/// an empty mask are left out.
pub fn masks_to_boxes(ann: &MaskAnnotation) -> BTreeMap<usize, BoundingBox> {
    let w = ann.grid_w;
    ann.masks
        .iter()
        .filter_map(|(&f, m)| {
            let on = m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i / w, i % w));
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            let mut any = false;
            for (r, c) in on {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
            any.then(|| {
                let cb = CellBox {
                    row: r0,
                    col: c0,
                    height: r1 - r0 + 1,
                    width: c1 - c0 + 1,
                };
                (f, cb.to_box(ann.grid_h, ann.grid_w))
            })
        })
        .collect()
}

/// Replaces the sample's ground truth with the tube derived from `ann`: the
/// window runs from the first to the last annotated frame.
pub fn annotate_from_masks(mut sample: VideoSample, ann: &MaskAnnotation) -> Result<VideoSample, SynthError> {
    let boxes = masks_to_boxes(ann);
    let (Some(&first), Some(&last)) = (boxes.keys().next(), boxes.keys().next_back()) else {
        return Err(SynthError::EmptyAnnotation { id: sample.id });
    };
    let geo = |source| SynthError::Geometry {
        id: sample.id.clone(),
        source,
    };
    let window = TemporalWindow::from_frames(first, last, sample.fps).map_err(geo)?;
    sample.gt = Tube::new(window, sample.fps, sample.frame_count(), boxes).map_err(geo)?;
    Ok(sample)
}

/// Pads the video with `pre_seconds` / `post_seconds` of unrelated footage.
///
/// Lengths are rounded to whole frames. Inserted frames hold background and
/// one drifting box of a non-target signature; the ground truth shifts by the
/// inserted prefix.
pub fn insert_irrelevant_clips(
    sample: &VideoSample,
    pre_seconds: f64,
    post_seconds: f64,
    seed: u64,
) -> Result<VideoSample, SynthError> {
    if !(pre_seconds >= 0.0 && post_seconds >= 0.0) {
        return Err(SynthError::InvalidSpec {
            id: sample.id.clone(),
            msg: format!("negative insertion {pre_seconds}/{post_seconds}"),
        });
    }
    let pre = (pre_seconds * sample.fps).round() as usize;
    let post = (post_seconds * sample.fps).round() as usize;
    if pre == 0 && post == 0 {
        return Ok(sample.clone());
    }
    let bank = SignatureBank::new(sample.signature_count, sample.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<usize> = (0..sample.signature_count)
        .filter(|&s| s != sample.target_signature)
        .collect();
    let cfg = SceneConfig {
        grid_h: sample.grid_h,
        grid_w: sample.grid_w,
        min_box_cells: 1,
        max_box_cells: 3.min(sample.grid_h).min(sample.grid_w),
        ..SceneConfig::default()
    };
    let clip = |frames: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let sig = others.choose(rng).copied();
        let track = random_walk(&cfg, frames, rng);
        let mut out = Vec::new();
        for cells in track {
            let layers: Vec<(usize, CellBox)> = sig.map(|s| (s, cells)).into_iter().collect();
            out.extend(render_frame(sample.grid_h, sample.grid_w, &bank, &layers, sample.noise, rng));
        }
        out
    };
    let n = sample.frame_count();
    let mut features = clip(pre, &mut rng);
    features.extend_from_slice(&sample.features);
    features.extend(clip(post, &mut rng));
    let duration = sample.duration + (pre + post) as f64 / sample.fps;
    let new_n = n + pre + post;
    debug_assert_eq!(frame_count(duration, sample.fps), new_n);
    let gt = sample.gt.shifted(pre, new_n).map_err(|source| SynthError::Geometry {
        id: sample.id.clone(),
        source,
    })?;
    Ok(VideoSample {
        duration,
        features,
        gt,
        ..sample.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

/// Drops videos longer than 180 s and annotations shorter than 1 s.
pub fn quality_filter(samples: Vec<VideoSample>) -> (Vec<VideoSample>, Vec<Dropped>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for s in samples {
        let reason = if s.duration > MAX_DURATION {
            Some("duration>180s")
        } else if s.gt.window().duration() < MIN_SPAN {
            Some("span<1s")
        } else {
            None
        };
        match reason {
            Some(r) => dropped.push(Dropped {
                id: s.id,
                reason: r.to_string(),
            }),
            None => kept.push(s),
        }
    }
    (kept, dropped)
}

/// How a whole dataset is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub id_prefix: String,
    pub scene: SceneConfig,
    /// Pad each video with irrelevant clips of length `Uniform[0, duration/2]`
    /// before and after.
    pub insert_clips: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 32,
            seed: 0,
            id_prefix: "v".into(),
            scene: SceneConfig::default(),
            insert_clips: false,
        }
    }
}

/// Random scenes → masks → boxes → optional clip insertion → quality filter.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<(Vec<VideoSample>, Vec<Dropped>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let spec = random_scene(&cfg.scene, format!("{}{i:04}", cfg.id_prefix), rng.random())?;
        let sample = annotate_from_masks(generate_scene(&spec)?, &scene_masks(&spec))?;
        let sample = if cfg.insert_clips {
            let half = sample.duration / 2.0;
            let (pre, post) = (rng.random_range(0.0..=half), rng.random_range(0.0..=half));
            insert_irrelevant_clips(&sample, pre, post, rng.random())?
        } else {
            sample
        };
        out.push(sample);
    }
    Ok(quality_filter(out))
}
