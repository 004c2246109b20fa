//! Tiny deterministic line-plot renderer for sweep reports.
//!
//! Hand-rolled rather than bought: font rasterization crates want font files
//! a sealed build cannot fetch, and report images are digest-registered in
//! run manifests, so the bytes must be stable across machines. Geometry is
//! integer, colors come from a fixed palette, and text uses a 5x7 bitmap
//! face covering the ASCII the reports actually emit.

use image::{Rgb, RgbImage};
use std::path::Path;

pub const PLOT_WIDTH: u32 = 640;
pub const PLOT_HEIGHT: u32 = 440;

/// Series colors, cycled in order.
pub const PALETTE: [[u8; 3]; 6] = [
    [198, 58, 50],
    [31, 98, 166],
    [44, 134, 54],
    [222, 135, 20],
    [122, 83, 173],
    [96, 96, 96],
];

const BACKGROUND: [u8; 3] = [255, 255, 255];
const FRAME: [u8; 3] = [64, 64, 64];
const GRID: [u8; 3] = [224, 224, 224];
const TEXT: [u8; 3] = [32, 32, 32];

// Margins around the data rectangle, in pixels.
const LEFT: u32 = 64;
const RIGHT: u32 = 20;
const TOP: u32 = 36;
const BOTTOM: u32 = 48;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("no series to plot")]
    EmptySeries,
    #[error("series {0:?} has no points")]
    EmptyPoints(String),
    #[error("series {series:?} point {index} is not finite")]
    NonFinite { series: String, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

/// Data-space bounds after padding, plus the pixel rectangle they map onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Frame {
    /// Pads each axis by 5% of its span; a degenerate span opens to a unit
    /// window so flat series render mid-plot instead of dividing by zero.
    pub fn around(series: &[Series]) -> Frame {
        let mut x_lo = f64::INFINITY;
        let mut x_hi = f64::NEG_INFINITY;
        let mut y_lo = f64::INFINITY;
        let mut y_hi = f64::NEG_INFINITY;
        for s in series {
            for &(x, y) in &s.points {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
        let (x_lo, x_hi) = pad_span(x_lo, x_hi);
        let (y_lo, y_hi) = pad_span(y_lo, y_hi);
        Frame { x_lo, x_hi, y_lo, y_hi }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (u32, u32) {
        let plot_w = (PLOT_WIDTH - LEFT - RIGHT - 1) as f64;
        let plot_h = (PLOT_HEIGHT - TOP - BOTTOM - 1) as f64;
        let fx = (x - self.x_lo) / (self.x_hi - self.x_lo);
        let fy = (y - self.y_lo) / (self.y_hi - self.y_lo);
        let px = LEFT as f64 + fx * plot_w;
        let py = (PLOT_HEIGHT - BOTTOM - 1) as f64 - fy * plot_h;
        (px.round() as u32, py.round() as u32)
    }
}

fn pad_span(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        let center = (lo + hi) * 0.5;
        let half = center.abs().max(1.0) * 0.5;
        (center - half, center + half)
    }
}

/// Renders one image with every series as a polyline plus point markers.
pub fn render_curves(spec: &PlotSpec, series: &[Series]) -> Result<RgbImage, PlotError> {
    if series.is_empty() {
        return Err(PlotError::EmptySeries);
    }
    for s in series {
        if s.points.is_empty() {
            return Err(PlotError::EmptyPoints(s.name.clone()));
        }
        for (i, &(x, y)) in s.points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(PlotError::NonFinite {
                    series: s.name.clone(),
                    index: i,
                });
            }
        }
    }

    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, Rgb(BACKGROUND));
    let frame = Frame::around(series);

    // Gridlines and tick labels.
    for &x in &ticks(frame.x_lo, frame.x_hi) {
        let (px, _) = frame.to_pixel(x, frame.y_lo);
        vline(&mut img, px, TOP, PLOT_HEIGHT - BOTTOM - 1, GRID);
        let label = tick_label(x, frame.x_hi - frame.x_lo);
        let tw = text_width(&label);
        draw_text(
            &mut img,
            px.saturating_sub(tw / 2),
            PLOT_HEIGHT - BOTTOM + 6,
            &label,
            TEXT,
        );
    }
    for &y in &ticks(frame.y_lo, frame.y_hi) {
        let (_, py) = frame.to_pixel(frame.x_lo, y);
        hline(&mut img, LEFT, PLOT_WIDTH - RIGHT - 1, py, GRID);
        let label = tick_label(y, frame.y_hi - frame.y_lo);
        let tw = text_width(&label);
        draw_text(
            &mut img,
            LEFT.saturating_sub(tw + 6),
            py.saturating_sub(3),
            &label,
            TEXT,
        );
    }

    // Frame on top of the grid.
    hline(&mut img, LEFT, PLOT_WIDTH - RIGHT - 1, TOP, FRAME);
    hline(&mut img, LEFT, PLOT_WIDTH - RIGHT - 1, PLOT_HEIGHT - BOTTOM - 1, FRAME);
    vline(&mut img, LEFT, TOP, PLOT_HEIGHT - BOTTOM - 1, FRAME);
    vline(&mut img, PLOT_WIDTH - RIGHT - 1, TOP, PLOT_HEIGHT - BOTTOM - 1, FRAME);

    // Series, then markers so points survive overlapping lines.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pixels: Vec<(u32, u32)> = s
            .points
            .iter()
            .map(|&(x, y)| frame.to_pixel(x, y))
            .collect();
        for w in pixels.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        for &(px, py) in &pixels {
            marker(&mut img, px, py, color);
        }
    }

    // Legend inside the top-right corner of the data rectangle.
    let mut ly = TOP + 6;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let tw = text_width(&s.name);
        let lx = PLOT_WIDTH - RIGHT - tw - 24;
        hline(&mut img, lx, lx + 12, ly + 3, color);
        hline(&mut img, lx, lx + 12, ly + 4, color);
        draw_text(&mut img, lx + 16, ly, &s.name, TEXT);
        ly += 12;
    }

    draw_text(
        &mut img,
        PLOT_WIDTH / 2 - text_width(&spec.title).min(PLOT_WIDTH / 2) / 2,
        10,
        &spec.title,
        TEXT,
    );
    draw_text(
        &mut img,
        PLOT_WIDTH / 2 - text_width(&spec.x_label).min(PLOT_WIDTH / 2) / 2,
        PLOT_HEIGHT - BOTTOM + 24,
        &spec.x_label,
        TEXT,
    );
    draw_text(&mut img, 6, TOP.saturating_sub(14), &spec.y_label, TEXT);

    Ok(img)
}

/// Renders and writes a PNG.
pub fn save_curves(spec: &PlotSpec, series: &[Series], path: &Path) -> Result<(), PlotError> {
    let img = render_curves(spec, series)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// About five round-valued ticks covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + step * 1e-9 {
        // Snap near-zero ticks so the label prints 0 rather than 1e-17.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64, span: f64) -> String {
    let decimals = if span >= 5.0 {
        0
    } else {
        ((-(span / 4.0).log10()).ceil().max(0.0) as usize + 1).min(6)
    };
    let s = format!("{v:.decimals$}");
    // "-0.00" and friends read as a bug.
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn put(img: &mut RgbImage, x: u32, y: u32, c: [u8; 3]) {
    if x < img.width() && y < img.height() {
        img.put_pixel(x, y, Rgb(c));
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: [u8; 3]) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, c);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: [u8; 3]) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, c);
    }
}

/// Bresenham segment between two pixel centers.
fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), c: [u8; 3]) {
    let (mut x0, mut y0) = (x0 as i64, y0 as i64);
    let (x1, y1) = (x1 as i64, y1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 {
            put(img, x0 as u32, y0 as u32, c);
        }
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

/// 5x5 filled square centered on the point.
fn marker(img: &mut RgbImage, px: u32, py: u32, c: [u8; 3]) {
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let x = px as i64 + dx;
            let y = py as i64 + dy;
            if x >= 0 && y >= 0 {
                put(img, x as u32, y as u32, c);
            }
        }
    }
}

pub(crate) fn text_width(s: &str) -> u32 {
    (s.chars().count() as u32) * 6
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, s: &str, c: [u8; 3]) {
    let mut cx = x;
    for ch in s.chars() {
        let rows = glyph(ch.to_ascii_uppercase());
        for (ry, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0b10000 >> col) != 0 {
                    put(img, cx + col, y + ry as u32, c);
                }
            }
        }
        cx += 6;
    }
}

/// 5x7 bitmap face; bit 4 is the leftmost column. Unknown characters render
/// as a hollow box to stay visible instead of vanishing.
fn glyph(c: char) -> [u8; 7] {
    match c {
        ' ' => [0, 0, 0, 0, 0, 0, 0],
        '%' => [0b11001, 0b11001, 0b00010, 0b00100, 0b01000, 0b10011, 0b10011],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '+' => [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0],
        ',' => [0, 0, 0, 0, 0b01100, 0b00100, 0b01000],
        '-' => [0, 0, 0, 0b11111, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        '/' => [0b00001, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b10000],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        ':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        '=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        '@' => [0b01110, 0b10001, 0b00001, 0b01101, 0b10101, 0b10101, 0b01110],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '_' => [0, 0, 0, 0, 0, 0, 0b11111],
        _ => [0b11111, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11111],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sweep() -> Vec<Series> {
        vec![Series {
            name: "ASR".to_string(),
            points: vec![
                (4.0 / 255.0, 0.31),
                (8.0 / 255.0, 0.52),
                (10.0 / 255.0, 0.58),
                (16.0 / 255.0, 0.77),
            ],
        }]
    }

    fn spec() -> PlotSpec {
        PlotSpec {
            title: "EPSILON SWEEP".to_string(),
            x_label: "EPSILON".to_string(),
            y_label: "ASR".to_string(),
        }
    }

    #[test]
    fn four_point_sweep_marks_every_point() {
        let series = sweep();
        let img = render_curves(&spec(), &series).unwrap();
        let frame = Frame::around(&series);
        for &(x, y) in &series[0].points {
            let (px, py) = frame.to_pixel(x, y);
            assert_eq!(img.get_pixel(px, py).0, PALETTE[0], "marker at ({x}, {y})");
        }
    }

    #[test]
    fn png_round_trips_through_disk() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("curve.png");
        save_curves(&spec(), &sweep(), &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (PLOT_WIDTH, PLOT_HEIGHT));
        assert_eq!(back, render_curves(&spec(), &sweep()).unwrap());
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_curves(&spec(), &sweep()).unwrap();
        let b = render_curves(&spec(), &sweep()).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn flat_series_renders_mid_plot() {
        let series = vec![Series {
            name: "FLAT".to_string(),
            points: vec![(0.0, 0.5), (1.0, 0.5), (2.0, 0.5)],
        }];
        let img = render_curves(&spec(), &series).unwrap();
        let frame = Frame::around(&series);
        assert!(frame.y_hi > frame.y_lo);
        let (px, py) = frame.to_pixel(1.0, 0.5);
        assert_eq!(img.get_pixel(px, py).0, PALETTE[0]);
    }

    #[test]
    fn single_point_series_renders() {
        let series = vec![Series {
            name: "ONE".to_string(),
            points: vec![(0.3, 0.9)],
        }];
        let img = render_curves(&spec(), &series).unwrap();
        let frame = Frame::around(&series);
        let (px, py) = frame.to_pixel(0.3, 0.9);
        assert_eq!(img.get_pixel(px, py).0, PALETTE[0]);
    }

    #[test]
    fn second_series_takes_the_next_palette_slot() {
        let mut series = sweep();
        series.push(Series {
            name: "MA".to_string(),
            points: vec![(4.0 / 255.0, 0.69), (16.0 / 255.0, 0.23)],
        });
        let img = render_curves(&spec(), &series).unwrap();
        let frame = Frame::around(&series);
        let (px, py) = frame.to_pixel(16.0 / 255.0, 0.23);
        assert_eq!(img.get_pixel(px, py).0, PALETTE[1]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            render_curves(&spec(), &[]),
            Err(PlotError::EmptySeries)
        ));
        let empty = vec![Series {
            name: "E".to_string(),
            points: vec![],
        }];
        assert!(matches!(
            render_curves(&spec(), &empty),
            Err(PlotError::EmptyPoints(_))
        ));
        let nan = vec![Series {
            name: "N".to_string(),
            points: vec![(0.0, f64::NAN)],
        }];
        assert!(matches!(
            render_curves(&spec(), &nan),
            Err(PlotError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn ticks_are_round_and_cover_the_span() {
        let t = ticks(0.0, 1.0);
        assert!(t.len() >= 3 && t.len() <= 7, "{t:?}");
        assert!(t.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        assert!(t.contains(&0.0) && t.windows(2).all(|w| w[1] > w[0]));
        // A span crossing zero snaps the zero tick exactly.
        let t = ticks(-0.737, 1.27);
        assert!(t.contains(&0.0), "{t:?}");
    }

    #[test]
    fn tick_labels_carry_span_appropriate_precision() {
        assert_eq!(tick_label(0.5, 1.0), "0.50");
        assert_eq!(tick_label(10.0, 40.0), "10");
        assert_eq!(tick_label(-0.0, 1.0), "0.00");
    }

    #[test]
    fn every_emitted_character_has_a_real_glyph() {
        let box_glyph = glyph('\u{7f}');
        for c in "0123456789.-+/%(),:=_ ABCDEFGHIJKLMNOPQRSTUVWXYZ@".chars() {
            if c != ' ' {
                assert_ne!(glyph(c), box_glyph, "missing glyph for {c:?}");
            }
        }
    }
}
