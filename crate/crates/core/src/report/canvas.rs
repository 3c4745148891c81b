//! Minimal RGB raster drawing: rectangles, lines and 8×8 bitmap text.

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};

pub type Colour = Rgb<u8>;

pub const WHITE: Colour = Rgb([255, 255, 255]);
pub const BLACK: Colour = Rgb([0, 0, 0]);
pub const GREY: Colour = Rgb([160, 160, 160]);

/// Distinct series colours.
pub const PALETTE: [Colour; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

pub struct Canvas {
    pub image: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            image: RgbImage::from_pixel(width, height, WHITE),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Colour) {
        if x >= 0 && y >= 0 && (x as u32) < self.image.width() && (y as u32) < self.image.height() {
            self.image.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Colour) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    pub fn stroke_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Colour) {
        self.line(x, y, x + w - 1, y, c, 1);
        self.line(x, y + h - 1, x + w - 1, y + h - 1, c, 1);
        self.line(x, y, x, y + h - 1, c, 1);
        self.line(x + w - 1, y, x + w - 1, y + h - 1, c, 1);
    }

    /// Bresenham line with a square pen of side `width`.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Colour, width: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let half = width / 2;
        loop {
            self.fill_rect(x - half, y - half, width, width, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Dashed line: alternating `dash`-pixel segments.
    pub fn dashed_line(&mut self, from: (f64, f64), to: (f64, f64), c: Colour, dash: f64) {
        let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
        let steps = (len / dash).ceil().max(1.0) as usize;
        for i in (0..steps).step_by(2) {
            let t0 = i as f64 / steps as f64;
            let t1 = ((i + 1) as f64 / steps as f64).min(1.0);
            let p = |t: f64| (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1));
            let (a, b) = (p(t0), p(t1));
            self.line(a.0.round() as i64, a.1.round() as i64, b.0.round() as i64, b.1.round() as i64, c, 1);
        }
    }

    pub fn text_width(text: &str, scale: i64) -> i64 {
        text.chars().count() as i64 * 8 * scale
    }

    /// Draws `text` with its top-left corner at `(x, y)`.
    pub fn text(&mut self, x: i64, y: i64, text: &str, scale: i64, c: Colour) {
        for (i, ch) in text.chars().enumerate() {
            let glyph = font8x8::BASIC_FONTS.get(ch).or_else(|| font8x8::BASIC_FONTS.get('?'));
            let Some(rows) = glyph else { continue };
            let ox = x + i as i64 * 8 * scale;
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..8 {
                    if bits & (1 << rx) != 0 {
                        self.fill_rect(ox + rx * scale, y + ry as i64 * scale, scale, scale, c);
                    }
                }
            }
        }
    }

    pub fn text_centred(&mut self, cx: i64, cy: i64, text: &str, scale: i64, c: Colour) {
        self.text(cx - Self::text_width(text, scale) / 2, cy - 4 * scale, text, scale, c);
    }

    /// Text rotated a quarter turn anticlockwise, centred on `(cx, cy)`.
    pub fn text_vertical(&mut self, cx: i64, cy: i64, text: &str, scale: i64, c: Colour) {
        let w = Self::text_width(text, scale);
        let mut tmp = Canvas::new(w as u32, 8 * scale as u32);
        tmp.text(0, 0, text, scale, c);
        for (tx, ty, px) in tmp.image.enumerate_pixels() {
            if *px != WHITE {
                self.put(cx - 4 * scale + ty as i64, cy + w / 2 - tx as i64, *px);
            }
        }
    }
}

/// Truncates `s` to `max` characters, marking the cut with `~`.
pub fn fit(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(max.saturating_sub(1)).collect();
        t.push('~');
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_marks_pixels_inside_its_box() {
        let mut c = Canvas::new(40, 20);
        c.text(2, 2, "A1", 1, BLACK);
        let inked: Vec<(u32, u32)> = c
            .image
            .enumerate_pixels()
            .filter(|(_, _, p)| **p == BLACK)
            .map(|(x, y, _)| (x, y))
            .collect();
        assert!(!inked.is_empty());
        assert!(inked.iter().all(|&(x, y)| (2..18).contains(&x) && (2..10).contains(&y)));
    }

    #[test]
    fn lines_reach_both_ends() {
        let mut c = Canvas::new(10, 10);
        c.line(1, 8, 8, 1, BLACK, 1);
        assert_eq!(*c.image.get_pixel(1, 8), BLACK);
        assert_eq!(*c.image.get_pixel(8, 1), BLACK);
    }

    #[test]
    fn fit_truncates() {
        assert_eq!(fit("malignant", 5), "mali~");
        assert_eq!(fit("benign", 6), "benign");
    }
}
