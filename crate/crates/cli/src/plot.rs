//! Minimal raster charts. No text: the numbers live in the table written
//! next to each image.

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for x in MARGIN..W - MARGIN / 2 {
            img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN / 2..=H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        }
        // light grid at 0.25 steps
        for k in 1..=4 {
            let y = Self::y(k as f64 / 4.0);
            for x in (MARGIN + 1..W - MARGIN / 2).step_by(4) {
                img.put_pixel(x, y, Rgb([200, 200, 200]));
            }
        }
        Self { img }
    }

    fn plot_w() -> f64 {
        (W - MARGIN - MARGIN / 2) as f64
    }

    /// Pixel row of a value in [0, 1].
    fn y(v: f64) -> u32 {
        let h = (H - MARGIN - MARGIN / 2) as f64;
        (H - MARGIN) - (v.clamp(0.0, 1.0) * h).round() as u32
    }

    fn rect(&mut self, x0: u32, x1: u32, y0: u32, y1: u32, c: [u8; 3]) {
        for x in x0.min(W - 1)..x1.min(W) {
            for y in y0.min(H - 1)..y1.min(H) {
                self.img.put_pixel(x, y, Rgb(c));
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            let (x, y) = (x.round() as u32, y.round() as u32);
            self.rect(x.saturating_sub(1), x + 1, y.saturating_sub(1), y + 1, c);
        }
    }
}

/// Grouped bars: one group per bin, one bar per series. `None` leaves a gap.
pub fn bars(series: &[Vec<Option<f64>>]) -> RgbImage {
    let mut cv = Canvas::new();
    let groups = series.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let group_w = Canvas::plot_w() / groups as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (s, values) in series.iter().enumerate() {
        for (g, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let x0 = MARGIN as f64 + g as f64 * group_w + group_w * 0.1 + s as f64 * bar_w;
            cv.rect(
                x0.round() as u32,
                (x0 + bar_w - 1.0).round() as u32,
                Canvas::y(*v),
                H - MARGIN,
                PALETTE[s % PALETTE.len()],
            );
        }
    }
    cv.img
}

/// Polylines over evenly spaced x positions, values in [0, 1].
pub fn lines(series: &[Vec<f64>]) -> RgbImage {
    let mut cv = Canvas::new();
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let x = |i: usize| MARGIN as f64 + 10.0 + (Canvas::plot_w() - 20.0) * i as f64 / (n.max(2) - 1) as f64;
    for (s, values) in series.iter().enumerate() {
        let c = PALETTE[s % PALETTE.len()];
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, v)| (x(i), Canvas::y(*v) as f64)).collect();
        for w in pts.windows(2) {
            cv.line(w[0], w[1], c);
        }
        for (px, py) in pts {
            let (px, py) = (px as u32, py as u32);
            cv.rect(px.saturating_sub(3), px + 4, py.saturating_sub(3), py + 4, c);
        }
    }
    cv.img
}
