//! Minimal raster charts. No text rendering; the index document carries the
//! legends.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub fn color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

pub fn lighten(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| v + (255 - v) / 2)
}

pub struct Canvas {
    img: RgbImage,
}

/// A plotting area inside the canvas with data ranges on both axes.
#[derive(Clone, Copy, Debug)]
pub struct Panel {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub xr: (f64, f64),
    pub yr: (f64, f64),
}

impl Panel {
    pub fn px(&self, x: f64) -> i64 {
        let t = (x - self.xr.0) / (self.xr.1 - self.xr.0);
        self.x0 as i64 + (t * (self.w - 1) as f64).round() as i64
    }

    pub fn py(&self, y: f64) -> i64 {
        let t = (y - self.yr.0) / (self.yr.1 - self.yr.0);
        (self.y0 + self.h - 1) as i64 - (t * (self.h - 1) as f64).round() as i64
    }
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        Self { img: RgbImage::from_pixel(w, h, Rgb([255, 255, 255])) }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.rect(x0 - thick / 2, y0 - thick / 2, x0 + (thick - 1) / 2, y0 + (thick - 1) / 2, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn axes(&mut self, p: &Panel) {
        let grey = [60, 60, 60];
        let bottom = (p.y0 + p.h) as i64;
        self.line((p.x0 as i64 - 1, p.y0 as i64), (p.x0 as i64 - 1, bottom), grey, 1);
        self.line((p.x0 as i64 - 1, bottom), ((p.x0 + p.w) as i64, bottom), grey, 1);
        for k in 0..=4 {
            let y = p.py(p.yr.0 + (p.yr.1 - p.yr.0) * k as f64 / 4.0);
            self.line((p.x0 as i64 - 4, y), (p.x0 as i64 - 2, y), grey, 1);
            for x in (p.x0 as i64..(p.x0 + p.w) as i64).step_by(4) {
                self.put(x, y, [225, 225, 225]);
            }
        }
    }

    pub fn hline(&mut self, p: &Panel, y: f64, c: [u8; 3]) {
        let py = p.py(y);
        for x in (p.x0 as i64..(p.x0 + p.w) as i64).step_by(2) {
            self.put(x, py, c);
        }
    }

    pub fn polyline(&mut self, p: &Panel, pts: &[(f64, f64)], c: [u8; 3], thick: i64) {
        for w in pts.windows(2) {
            self.line((p.px(w[0].0), p.py(w[0].1)), (p.px(w[1].0), p.py(w[1].1)), c, thick);
        }
        for &(x, y) in pts {
            self.rect(p.px(x) - 2, p.py(y) - 2, p.px(x) + 2, p.py(y) + 2, c);
        }
    }

    /// Vertical bars of equal width filling the panel.
    pub fn bars(&mut self, p: &Panel, values: &[(f64, [u8; 3])]) {
        let n = values.len().max(1) as f64;
        let slot = p.w as f64 / n;
        for (i, &(v, c)) in values.iter().enumerate() {
            let x0 = p.x0 as f64 + slot * i as f64 + slot * 0.1;
            let x1 = p.x0 as f64 + slot * (i + 1) as f64 - slot * 0.1 - 1.0;
            self.rect(x0.round() as i64, p.py(p.yr.0.max(0.0)), x1.round().max(x0.round()) as i64, p.py(v.clamp(p.yr.0, p.yr.1)), c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.img.write_to(&mut buf, image::ImageFormat::Png)?;
        super::write_atomic(path, buf.get_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_maps_corners() {
        let p = Panel { x0: 10, y0: 20, w: 101, h: 51, xr: (0.0, 1.0), yr: (0.0, 1.0) };
        assert_eq!((p.px(0.0), p.py(0.0)), (10, 70));
        assert_eq!((p.px(1.0), p.py(1.0)), (110, 20));
    }

    #[test]
    fn drawing_is_clipped_and_saves_png() {
        let mut c = Canvas::new(20, 10);
        c.line((-5, -5), (30, 30), [0, 0, 0], 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        c.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
