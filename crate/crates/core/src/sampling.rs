//! Frame pairing and positive/negative frame sampling.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::synth::VideoSample;

/// Two consecutive frames sharing one timestamp slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub index: usize,
    pub first: usize,
    /// Equals `first` for a trailing odd frame.
    pub second: usize,
    pub start: f64,
    pub end: f64,
}

/// Groups frames two by two. An odd trailing frame is paired with itself.
/// Pair `i` covers `[2i/fps, 2(i+1)/fps)`, with the last pair ending at
/// `duration` so the pairs tile the video.
pub fn pair_frames(frame_count: usize, fps: f64, duration: f64) -> Vec<FramePair> {
    if frame_count == 0 {
        return Vec::new();
    }
    let n = frame_count.div_ceil(2);
    (0..n)
        .map(|i| {
            let first = 2 * i;
            let second = (first + 1).min(frame_count - 1);
            let end = if i + 1 == n { duration } else { (2 * (i + 1)) as f64 / fps };
            FramePair {
                index: i,
                first,
                second,
                start: (2 * i) as f64 / fps,
                end,
            }
        })
        .collect()
}

pub fn sample_pairs(sample: &VideoSample) -> Vec<FramePair> {
    pair_frames(sample.frame_count(), sample.fps, sample.duration)
}

/// Named positive:negative budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PnRatio {
    #[serde(rename = "10:0")]
    TenZero,
    #[serde(rename = "8:2")]
    EightTwo,
    #[serde(rename = "5:5")]
    FiveFive,
    #[serde(rename = "2:8")]
    TwoEight,
}

impl PnRatio {
    pub const ALL: [PnRatio; 4] = [PnRatio::TenZero, PnRatio::EightTwo, PnRatio::FiveFive, PnRatio::TwoEight];

    pub fn budgets(self) -> (usize, usize) {
        match self {
            PnRatio::TenZero => (10, 0),
            PnRatio::EightTwo => (8, 2),
            PnRatio::FiveFive => (5, 5),
            PnRatio::TwoEight => (2, 8),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PnRatio::TenZero => "10:0",
            PnRatio::EightTwo => "8:2",
            PnRatio::FiveFive => "5:5",
            PnRatio::TwoEight => "2:8",
        }
    }
}

impl std::str::FromStr for PnRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PnRatio::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| format!("unknown P/N ratio {s:?}; expected one of 10:0, 8:2, 5:5, 2:8"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub positives: usize,
    pub negatives: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::from_ratio(PnRatio::EightTwo)
    }
}

impl SamplingConfig {
    pub fn from_ratio(r: PnRatio) -> Self {
        let (positives, negatives) = r.budgets();
        Self {
            positives,
            negatives,
            fps: crate::synth::DEFAULT_FPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("sample {0}: no frame inside the ground-truth window")]
    NoPositives(String),
    #[error("at least one positive frame must be requested")]
    ZeroBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameLabel {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledFrame {
    pub frame: usize,
    pub label: FrameLabel,
    /// Ground-truth box, present exactly for positives.
    pub gt_box: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameBatch {
    pub frames: Vec<SampledFrame>,
}

impl FrameBatch {
    pub fn positives(&self) -> impl Iterator<Item = &SampledFrame> {
        self.frames.iter().filter(|f| f.label == FrameLabel::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &SampledFrame> {
        self.frames.iter().filter(|f| f.label == FrameLabel::Negative)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Draws up to `cfg.positives` in-window frames and up to `cfg.negatives`
/// out-of-window frames, each uniformly without replacement. Positives come
/// first, each group in ascending frame order.
pub fn pn_sample(sample: &VideoSample, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<FrameBatch, SamplingError> {
    if cfg.positives == 0 {
        return Err(SamplingError::ZeroBudget);
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..sample.frame_count()).partition(|f| sample.gt.box_at(*f).is_some());
    if pos.is_empty() {
        return Err(SamplingError::NoPositives(sample.id.clone()));
    }
    let mut draw = |pool: &[usize], k: usize| -> Vec<usize> {
        let k = k.min(pool.len());
        let mut v: Vec<usize> = sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        v.sort_unstable();
        v
    };
    let p = draw(&pos, cfg.positives);
    let n = draw(&neg, cfg.negatives);
    let frames = p
        .into_iter()
        .map(|f| SampledFrame {
            frame: f,
            label: FrameLabel::Positive,
            gt_box: sample.gt.box_at(f).copied(),
        })
        .chain(n.into_iter().map(|f| SampledFrame {
            frame: f,
            label: FrameLabel::Negative,
            gt_box: None,
        }))
        .collect();
    Ok(FrameBatch { frames })
}
