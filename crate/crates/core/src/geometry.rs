//! Boxes, temporal windows and tubes.
//!
//! All box coordinates are normalized to `[0, 1]` relative to the frame.
//! Windows are in seconds; the frame clock maps a window to the inclusive
//! frame range `floor(start·fps) ..= floor(end·fps)`.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("corner box has x1 > x2 or y1 > y2: {0:?}")]
    InvertedCorners([f64; 4]),
    #[error("center box has negative size: {0:?}")]
    NegativeSize([f64; 4]),
    #[error("invalid window [{start}, {end}]")]
    InvalidWindow { start: f64, end: f64 },
    #[error("tube frame {frame} lies outside its window frames {lo}..={hi}")]
    BoxOutsideWindow { frame: usize, lo: usize, hi: usize },
    #[error("tube is missing a box for frame {0}")]
    MissingBox(usize),
    #[error("fps must be positive, got {0}")]
    BadFps(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFormat {
    /// `(x1, y1, x2, y2)`
    Corner,
    /// `(cx, cy, w, h)`
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    coords: [f64; 4],
    format: BoxFormat,
}

impl BoundingBox {
    pub fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let c = [x1, y1, x2, y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(c));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvertedCorners(c));
        }
        Ok(Self {
            coords: c,
            format: BoxFormat::Corner,
        })
    }

    pub fn center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let c = [cx, cy, w, h];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(c));
        }
        if w < 0.0 || h < 0.0 {
            return Err(GeometryError::NegativeSize(c));
        }
        Ok(Self {
            coords: c,
            format: BoxFormat::Center,
        })
    }

    pub fn from_array(coords: [f64; 4], format: BoxFormat) -> Result<Self, GeometryError> {
        match format {
            BoxFormat::Corner => Self::corner(coords[0], coords[1], coords[2], coords[3]),
            BoxFormat::Center => Self::center(coords[0], coords[1], coords[2], coords[3]),
        }
    }

    pub fn format(&self) -> BoxFormat {
        self.format
    }

    /// Raw coordinates in the box's own format.
    pub fn coords(&self) -> [f64; 4] {
        self.coords
    }

    /// `(x1, y1, x2, y2)` regardless of the stored format.
    pub fn corners(&self) -> [f64; 4] {
        match self.format {
            BoxFormat::Corner => self.coords,
            BoxFormat::Center => {
                let [cx, cy, w, h] = self.coords;
                [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
            }
        }
    }

    /// `(cx, cy, w, h)` regardless of the stored format.
    pub fn center_form(&self) -> [f64; 4] {
        match self.format {
            BoxFormat::Center => self.coords,
            BoxFormat::Corner => {
                let [x1, y1, x2, y2] = self.coords;
                [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
            }
        }
    }

    pub fn convert(&self, target: BoxFormat) -> BoundingBox {
        let coords = match target {
            BoxFormat::Corner => self.corners(),
            BoxFormat::Center => self.center_form(),
        };
        BoundingBox {
            coords,
            format: target,
        }
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        let mut c = self.coords;
        c[0] += dx;
        c[1] += dy;
        if self.format == BoxFormat::Corner {
            c[2] += dx;
            c[3] += dy;
        }
        BoundingBox {
            coords: c,
            format: self.format,
        }
    }

    /// True when every corner lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.corners().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Clamps corners into `[0, 1]`.
    pub fn clipped(&self) -> BoundingBox {
        let c = self.corners().map(|v| v.clamp(0.0, 1.0));
        BoundingBox {
            coords: c,
            format: BoxFormat::Corner,
        }
        .convert(self.format)
    }
}

/// Same region in `target` format.
pub fn box_convert(b: &BoundingBox, target: BoxFormat) -> BoundingBox {
    b.convert(target)
}

fn inter_union(a: &BoundingBox, b: &BoundingBox) -> (f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

fn same_region(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.corners() == b.corners()
}

/// Intersection over union. Two zero-area boxes give 1 when they coincide
/// and 0 otherwise.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        return if same_region(a, b) { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `IoU − (enclosing − union) / enclosing`.
pub fn box_giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iou = box_iou(a, b);
    let (_, union) = inter_union(a, b);
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if enclose <= 0.0 {
        return iou;
    }
    iou - (enclose - union.max(0.0)) / enclose
}

/// A closed time interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalWindow {
    start: f64,
    end: f64,
}

/// Guards `floor(t · fps)` against representation error such as `0.3 · 10`.
const FRAME_EPS: f64 = 1e-9;

impl TemporalWindow {
    pub fn new(start: f64, end: f64) -> Result<Self, GeometryError> {
        if !start.is_finite() || !end.is_finite() || start < 0.0 || end < start {
            return Err(GeometryError::InvalidWindow { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn shifted(&self, dt: f64) -> Result<Self, GeometryError> {
        Self::new(self.start + dt, self.end + dt)
    }

    /// Inclusive frame range of this window on a `frame_count`-frame clock,
    /// or `None` when no existing frame falls inside.
    pub fn frame_span(&self, fps: f64, frame_count: usize) -> Option<RangeInclusive<usize>> {
        if frame_count == 0 {
            return None;
        }
        let first = (self.start * fps + FRAME_EPS).floor() as usize;
        let last = ((self.end * fps + FRAME_EPS).floor() as usize).min(frame_count - 1);
        (first <= last).then_some(first..=last)
    }

    /// Window spanning frames `first..=last` exactly.
    pub fn from_frames(first: usize, last: usize, fps: f64) -> Result<Self, GeometryError> {
        Self::new(first as f64 / fps, last as f64 / fps)
    }
}

/// Interval IoU. Two zero-length windows give 1 when equal, else 0.
pub fn temporal_iou(a: &TemporalWindow, b: &TemporalWindow) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A temporal window plus one box per frame of that window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    window: TemporalWindow,
    fps: f64,
    /// Length of the underlying video in frames; bounds the window's frames.
    frame_count: usize,
    boxes: BTreeMap<usize, BoundingBox>,
}

impl Tube {
    pub fn new(
        window: TemporalWindow,
        fps: f64,
        frame_count: usize,
        boxes: BTreeMap<usize, BoundingBox>,
    ) -> Result<Self, GeometryError> {
        if fps.is_nan() || fps <= 0.0 {
            return Err(GeometryError::BadFps(fps));
        }
        let tube = Self {
            window,
            fps,
            frame_count,
            boxes,
        };
        tube.check()?;
        Ok(tube)
    }

    fn check(&self) -> Result<(), GeometryError> {
        let span = self.frames();
        let (lo, hi) = span
            .as_ref()
            .map(|r| (*r.start(), *r.end()))
            .unwrap_or((1, 0));
        for &f in self.boxes.keys() {
            if f < lo || f > hi {
                return Err(GeometryError::BoxOutsideWindow { frame: f, lo, hi });
            }
        }
        if let Some(r) = span {
            for f in r {
                if !self.boxes.contains_key(&f) {
                    return Err(GeometryError::MissingBox(f));
                }
            }
        }
        Ok(())
    }

    pub fn window(&self) -> &TemporalWindow {
        &self.window
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn boxes(&self) -> &BTreeMap<usize, BoundingBox> {
        &self.boxes
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        self.boxes.get(&frame)
    }

    pub fn frames(&self) -> Option<RangeInclusive<usize>> {
        self.window.frame_span(self.fps, self.frame_count)
    }

    /// Same boxes re-validated against a shifted window and longer clock.
    pub fn shifted(&self, frames: usize, new_frame_count: usize) -> Result<Tube, GeometryError> {
        let window = self.window.shifted(frames as f64 / self.fps)?;
        let boxes = self.boxes.iter().map(|(f, b)| (f + frames, *b)).collect();
        Tube::new(window, self.fps, new_frame_count, boxes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::corner(x1, y1, x2, y2).unwrap()
    }

    fn w(s: f64, e: f64) -> TemporalWindow {
        TemporalWindow::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(box_iou(&c(0., 0., 1., 1.), &c(0., 0., 1., 1.)), 1.0);
        assert_eq!(box_iou(&c(0., 0., 1., 1.), &c(2., 2., 3., 3.)), 0.0);
        // intersection 1, union 7
        assert!((box_iou(&c(0., 0., 2., 2.), &c(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let p = c(0.5, 0.5, 0.5, 0.5);
        assert_eq!(box_iou(&p, &p), 1.0);
        assert_eq!(box_iou(&p, &c(0.2, 0.2, 0.2, 0.2)), 0.0);
        assert_eq!(box_iou(&p, &c(0.0, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(box_giou(&p, &p), 1.0);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(box_giou(&c(0., 0., 1., 1.), &c(0., 0., 1., 1.)), 1.0);
        // enclosing [0,0,3,3] area 9, union 2
        let g = box_giou(&c(0., 0., 1., 1.), &c(2., 2., 3., 3.));
        assert!((g - (-7.0 / 9.0)).abs() < 1e-15);
    }

    /// Pixel-grid area estimate of GIoU, independent of the closed form.
    fn grid_giou(a: [f64; 4], b: [f64; 4], n: usize) -> f64 {
        let ex = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
        let (dx, dy) = ((ex[2] - ex[0]) / n as f64, (ex[3] - ex[1]) / n as f64);
        let inside = |bx: &[f64; 4], x: f64, y: f64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let x = ex[0] + (i as f64 + 0.5) * dx;
                let y = ex[1] + (j as f64 + 0.5) * dy;
                let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        let total = (n * n) as f64;
        inter as f64 / union as f64 - (total - union as f64) / total
    }

    #[test]
    fn giou_matches_grid_estimate() {
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [0.5, 0.0, 1.5, 1.0];
        let est = grid_giou(a, b, 2000);
        let exact = box_giou(&c(a[0], a[1], a[2], a[3]), &c(b[0], b[1], b[2], b[3]));
        assert!((est - exact).abs() < 1e-3, "{est} vs {exact}");
    }

    #[test]
    fn temporal_examples() {
        assert_eq!(temporal_iou(&w(2., 6.), &w(2., 6.)), 1.0);
        assert_eq!(temporal_iou(&w(0., 1.), &w(5., 6.)), 0.0);
        assert!((temporal_iou(&w(4., 8.), &w(2., 6.)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou(&w(1., 1.), &w(1., 1.)), 1.0);
        assert_eq!(temporal_iou(&w(1., 1.), &w(2., 2.)), 0.0);
    }

    #[test]
    fn conversion_examples() {
        let b = BoundingBox::center(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(box_convert(&b, BoxFormat::Corner).coords(), [0.0, 0.0, 1.0, 1.0]);
        let b = c(0., 0., 1., 1.);
        assert_eq!(box_convert(&b, BoxFormat::Center).coords(), [0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(BoundingBox::corner(1.0, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::center(0.5, 0.5, -0.1, 0.2).is_err());
        assert!(TemporalWindow::new(3.0, 2.0).is_err());
        assert!(TemporalWindow::new(-1.0, 2.0).is_err());
    }

    #[test]
    fn frame_span_is_inclusive_and_clamped() {
        assert_eq!(w(2.0, 6.0).frame_span(2.0, 20), Some(4..=12));
        assert_eq!(w(0.0, 10.0).frame_span(2.0, 20), Some(0..=19));
        assert_eq!(w(11.0, 12.0).frame_span(2.0, 20), None);
        assert_eq!(w(0.3, 0.3).frame_span(10.0, 20), Some(3..=3));
    }

    #[test]
    fn tube_invariants() {
        let win = w(1.0, 2.0);
        let mut boxes: BTreeMap<usize, BoundingBox> =
            (2..=4).map(|f| (f, c(0.1, 0.1, 0.2, 0.2))).collect();
        assert!(Tube::new(win, 2.0, 10, boxes.clone()).is_ok());
        boxes.insert(7, c(0.1, 0.1, 0.2, 0.2));
        assert!(matches!(
            Tube::new(win, 2.0, 10, boxes.clone()),
            Err(GeometryError::BoxOutsideWindow { frame: 7, .. })
        ));
        boxes.remove(&7);
        boxes.remove(&3);
        assert_eq!(Tube::new(win, 2.0, 10, boxes), Err(GeometryError::MissingBox(3)));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::corner(x, y, x + w, y + h).unwrap())
    }

    fn arb_window() -> impl Strategy<Value = TemporalWindow> {
        (0.0..50.0f64, 0.001..20.0f64).prop_map(|(s, d)| TemporalWindow::new(s, s + d).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let (x, y) = (box_iou(&a, &b), box_iou(&b, &a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(box_iou(&a, &a), 1.0);
        }

        #[test]
        fn tiou_symmetric_bounded(a in arb_window(), b in arb_window()) {
            let (x, y) = (temporal_iou(&a, &b), temporal_iou(&b, &a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(temporal_iou(&a, &a), 1.0);
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let g = box_giou(&a, &b);
            prop_assert!(g <= box_iou(&a, &b) + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn giou_translation_invariant(a in arb_box(), b in arb_box(), dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
            let g0 = box_giou(&a, &b);
            let g1 = box_giou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((g0 - g1).abs() < 1e-12);
        }

        #[test]
        fn convert_round_trip(a in arb_box()) {
            let back = a.convert(BoxFormat::Center).convert(BoxFormat::Corner);
            for (x, y) in a.coords().iter().zip(back.coords()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
