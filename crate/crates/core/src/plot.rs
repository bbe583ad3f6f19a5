//! Minimal static line charts rendered straight into an RGB buffer.

use image::{Rgb, RgbImage};

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

#[derive(Clone, Debug)]
pub struct LinePlot {
    pub series: Vec<Series>,
    pub width: u32,
    pub height: u32,
}

const MARGIN: u32 = 24;
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

impl LinePlot {
    pub fn new(series: Vec<Series>) -> Self {
        Self {
            series,
            width: 480,
            height: 320,
        }
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x, y) = (widen(fold(|p| p.0)), widen(fold(|p| p.1)));
        (x, (y.0.min(0.0), y.1))
    }

    pub fn render(&self) -> RgbImage {
        let (w, h) = (self.width.max(2 * MARGIN + 2), self.height.max(2 * MARGIN + 2));
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let ((x0, x1), (y0, y1)) = self.bounds();
        let (pw, ph) = ((w - 2 * MARGIN) as f64, (h - 2 * MARGIN) as f64);
        let to_px = |x: f64, y: f64| {
            (
                MARGIN as f64 + (x - x0) / (x1 - x0) * pw,
                (h - MARGIN) as f64 - (y - y0) / (y1 - y0) * ph,
            )
        };
        for k in 0..=4 {
            let y = (h - MARGIN) as f64 - ph * k as f64 / 4.0;
            line(&mut img, (MARGIN as f64, y), ((w - MARGIN) as f64, y), GRID);
        }
        let (ox, oy) = (MARGIN as f64, (h - MARGIN) as f64);
        line(&mut img, (ox, oy), ((w - MARGIN) as f64, oy), AXIS);
        line(&mut img, (ox, oy), (ox, MARGIN as f64), AXIS);
        for s in &self.series {
            let c = Rgb(s.color);
            let pts: Vec<_> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
            for pair in pts.windows(2) {
                line(&mut img, pair[0], pair[1], c);
            }
            if let [only] = pts.as_slice() {
                line(&mut img, *only, *only, c);
            }
        }
        img
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (x, y) = (x.round(), y.round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}
