//! Spatio-temporal grounding metrics: m_tIoU, m_vIoU, vIoU@R, R@1@τ,
//! average overlap / success rate, and tIoU-binned breakdowns.
//!
//! Thresholds for vIoU@R and R@1 are inclusive (`≥`); success rate uses a
//! strict `>` as is customary for tracking benchmarks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_iou, temporal_iou, BoundingBox, GeometryError, TemporalWindow, Tube};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric is undefined on an empty sample list")]
    Empty,
    #[error("sample {id}: predicted and ground-truth tubes use different frame clocks")]
    ClockMismatch { id: String },
    #[error("bin edges must ascend from 0 to 1, got {0:?}")]
    BadEdges(Vec<f64>),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("record {id}: invalid {field}: {source}")]
    InvalidRecord {
        id: String,
        field: &'static str,
        source: GeometryError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One predicted tube paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub predicted: Tube,
    pub ground_truth: Tube,
}

impl EvalSample {
    pub fn new(id: impl Into<String>, predicted: Tube, ground_truth: Tube) -> Result<Self, MetricsError> {
        let id = id.into();
        if predicted.fps() != ground_truth.fps() || predicted.frame_count() != ground_truth.frame_count() {
            return Err(MetricsError::ClockMismatch { id });
        }
        Ok(Self {
            id,
            predicted,
            ground_truth,
        })
    }

    pub fn tiou(&self) -> f64 {
        temporal_iou(self.predicted.window(), self.ground_truth.window())
    }

    /// Per-frame box IoU over the union of both windows' frames, in frame
    /// order. A frame missing a box on either side scores 0.
    pub fn union_frame_ious(&self) -> Vec<f64> {
        let frames = frame_set(&self.predicted)
            .chain(frame_set(&self.ground_truth))
            .collect::<std::collections::BTreeSet<_>>();
        frames
            .into_iter()
            .map(|f| match (self.predicted.box_at(f), self.ground_truth.box_at(f)) {
                (Some(p), Some(g)) => box_iou(p, g),
                _ => 0.0,
            })
            .collect()
    }

    /// Per-sample vIoU: summed per-frame IoU divided by the union frame count.
    pub fn viou(&self) -> f64 {
        let ious = self.union_frame_ious();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    /// Per-frame IoU over the ground-truth frames, for tracking-style scores.
    pub fn gt_frame_ious(&self) -> Vec<f64> {
        frame_set(&self.ground_truth)
            .map(|f| match (self.predicted.box_at(f), self.ground_truth.box_at(f)) {
                (Some(p), Some(g)) => box_iou(p, g),
                _ => 0.0,
            })
            .collect()
    }
}

fn frame_set(t: &Tube) -> impl Iterator<Item = usize> {
    t.frames().into_iter().flatten()
}

fn non_empty<T>(s: &[T]) -> Result<(), MetricsError> {
    if s.is_empty() {
        Err(MetricsError::Empty)
    } else {
        Ok(())
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

pub fn mean_tiou(samples: &[EvalSample]) -> Result<f64, MetricsError> {
    non_empty(samples)?;
    Ok(mean(samples.iter().map(EvalSample::tiou)))
}

pub fn mean_viou(samples: &[EvalSample]) -> Result<f64, MetricsError> {
    non_empty(samples)?;
    Ok(mean(samples.iter().map(EvalSample::viou)))
}

/// Fraction of samples with per-sample vIoU `≥ r`.
pub fn viou_at(samples: &[EvalSample], r: f64) -> Result<f64, MetricsError> {
    non_empty(samples)?;
    Ok(fraction(samples.iter().map(EvalSample::viou), |v| v >= r))
}

/// Fraction of (predicted, ground-truth) window pairs with tIoU `≥ tau`.
pub fn recall_at_iou(pairs: &[(TemporalWindow, TemporalWindow)], tau: f64) -> Result<f64, MetricsError> {
    non_empty(pairs)?;
    Ok(fraction(pairs.iter().map(|(p, g)| temporal_iou(p, g)), |v| v >= tau))
}

fn fraction(xs: impl ExactSizeIterator<Item = f64>, pred: impl Fn(f64) -> bool) -> f64 {
    let n = xs.len() as f64;
    xs.filter(|&v| pred(v)).count() as f64 / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholded {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSuccess {
    pub ao: f64,
    pub success: Vec<Thresholded>,
}

/// Average overlap over every frame of every sequence, and the fraction of
/// frames whose IoU strictly exceeds each threshold.
pub fn average_overlap_and_success(
    sequences: &[Vec<f64>],
    thresholds: &[f64],
) -> Result<OverlapSuccess, MetricsError> {
    let all: Vec<f64> = sequences.iter().flatten().copied().collect();
    non_empty(&all)?;
    Ok(OverlapSuccess {
        ao: mean(all.iter().copied()),
        success: thresholds
            .iter()
            .map(|&t| Thresholded {
                threshold: t,
                value: fraction(all.iter().copied(), |v| v > t),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub viou_thresholds: Vec<f64>,
    pub recall_thresholds: Vec<f64>,
    pub success_thresholds: Vec<f64>,
    /// Ground-truth windows were substituted for predictions, so m_tIoU and
    /// temporal recall are not meaningful and are reported as null.
    pub oracle: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            viou_thresholds: vec![0.3, 0.5],
            recall_thresholds: vec![0.3, 0.5, 0.7],
            success_thresholds: vec![0.5, 0.75],
            oracle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub m_tiou: Option<f64>,
    pub m_viou: f64,
    pub viou_at: Vec<Thresholded>,
    pub recall_at: Vec<Thresholded>,
    pub tracking: OverlapSuccess,
}

impl MetricReport {
    pub fn compute(samples: &[EvalSample], opts: &ReportOptions) -> Result<Self, MetricsError> {
        non_empty(samples)?;
        let windows: Vec<_> = samples
            .iter()
            .map(|s| (*s.predicted.window(), *s.ground_truth.window()))
            .collect();
        let recall_at = if opts.oracle {
            Vec::new()
        } else {
            opts.recall_thresholds
                .iter()
                .map(|&t| Ok(Thresholded { threshold: t, value: recall_at_iou(&windows, t)? }))
                .collect::<Result<_, MetricsError>>()?
        };
        let frames: Vec<Vec<f64>> = samples.iter().map(EvalSample::gt_frame_ious).collect();
        let tracking = if frames.iter().all(Vec::is_empty) {
            OverlapSuccess {
                ao: 0.0,
                success: opts
                    .success_thresholds
                    .iter()
                    .map(|&t| Thresholded { threshold: t, value: 0.0 })
                    .collect(),
            }
        } else {
            average_overlap_and_success(&frames, &opts.success_thresholds)?
        };
        Ok(Self {
            n: samples.len(),
            m_tiou: if opts.oracle { None } else { Some(mean_tiou(samples)?) },
            m_viou: mean_viou(samples)?,
            viou_at: opts
                .viou_thresholds
                .iter()
                .map(|&r| Ok(Thresholded { threshold: r, value: viou_at(samples, r)? }))
                .collect::<Result<_, MetricsError>>()?,
            recall_at,
            tracking,
        })
    }

    /// Aligned two-column table with values as percentages.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("samples".into(), self.n.to_string())];
        rows.push(("m_tIoU".into(), pct_or_dash(self.m_tiou)));
        rows.push(("m_vIoU".into(), pct(self.m_viou)));
        for t in &self.viou_at {
            rows.push((format!("vIoU@{}", t.threshold), pct(t.value)));
        }
        for t in &self.recall_at {
            rows.push((format!("R@1,IoU={}", t.threshold), pct(t.value)));
        }
        rows.push(("AO".into(), pct(self.tracking.ao)));
        for t in &self.tracking.success {
            rows.push((format!("SR@{}", t.threshold), pct(t.value)));
        }
        render(&["metric", "value"], &rows.into_iter().map(|(a, b)| vec![a, b]).collect::<Vec<_>>())
    }
}

/// `0.6213` → `"62.1"`.
pub fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn pct_or_dash(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "---".into())
}

/// Left-aligned first column, right-aligned others.
pub fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                let _ = write!(out, "{:<w$}", c, w = width[0]);
            } else {
                let _ = write!(out, "  {:>w$}", c, w = width[i]);
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let total = width.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

pub const DEFAULT_BIN_EDGES: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_tiou: Option<f64>,
    pub m_viou: Option<f64>,
}

/// Groups samples by predicted tIoU into `[lo, hi)` bins, the last bin
/// closed on the right, and aggregates each bin.
pub fn tiou_bin_report(samples: &[EvalSample], edges: &[f64]) -> Result<Vec<BinRow>, MetricsError> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(MetricsError::BadEdges(edges.to_vec()));
    }
    let nb = edges.len() - 1;
    let mut members: Vec<Vec<&EvalSample>> = vec![Vec::new(); nb];
    for s in samples {
        let t = s.tiou();
        let b = (0..nb)
            .find(|&b| t >= edges[b] && (t < edges[b + 1] || b == nb - 1))
            .unwrap_or(nb - 1);
        members[b].push(s);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, m)| {
            let count = m.len();
            let agg = |f: fn(&EvalSample) -> f64| (count > 0).then(|| mean(m.iter().map(|s| f(s))));
            BinRow {
                lo: edges[b],
                hi: edges[b + 1],
                count,
                mean_tiou: agg(EvalSample::tiou),
                m_viou: agg(EvalSample::viou),
            }
        })
        .collect())
}

pub fn bin_table(rows: &[BinRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let close = if i + 1 == rows.len() { ']' } else { ')' };
            vec![
                format!("[{}, {}{close}", r.lo, r.hi),
                r.count.to_string(),
                pct_or_dash(r.mean_tiou),
                pct_or_dash(r.m_viou),
            ]
        })
        .collect();
    render(&["tIoU bin", "count", "m_tIoU", "m_vIoU"], &body)
}

/// One line of the prediction / ground-truth interchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub id: String,
    pub window: [f64; 2],
    /// Frame index → normalized corner box.
    pub boxes: BTreeMap<usize, [f64; 4]>,
}

impl TubeRecord {
    pub fn from_tube(id: impl Into<String>, tube: &Tube) -> Self {
        Self {
            id: id.into(),
            window: [tube.window().start(), tube.window().end()],
            boxes: tube.boxes().iter().map(|(f, b)| (*f, b.corners())).collect(),
        }
    }

    pub fn to_tube(&self, fps: f64, frame_count: usize) -> Result<Tube, MetricsError> {
        let err = |field, source| MetricsError::InvalidRecord {
            id: self.id.clone(),
            field,
            source,
        };
        let window = TemporalWindow::new(self.window[0], self.window[1]).map_err(|e| err("window", e))?;
        let boxes = self
            .boxes
            .iter()
            .map(|(f, c)| Ok((*f, BoundingBox::corner(c[0], c[1], c[2], c[3])?)))
            .collect::<Result<_, GeometryError>>()
            .map_err(|e| err("boxes", e))?;
        Tube::new(window, fps, frame_count, boxes).map_err(|e| err("boxes", e))
    }
}

pub fn write_records(mut w: impl Write, records: &[TubeRecord]) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<TubeRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
