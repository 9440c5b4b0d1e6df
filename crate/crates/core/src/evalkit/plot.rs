//! Minimal PNG rendering for confusion matrices and ROC overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::{ConfusionMatrix, EvalError, RocCurve};
use crate::{InteractionClass, NUM_CLASSES};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([160, 160, 160]);
pub(crate) const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
pub(crate) const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);

/// 3×5 glyphs, one row per 3-bit mask, top to bottom.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '_' => [0, 0, 0, 0, 7],
        'C' => [7, 4, 4, 4, 7],
        'E' => [7, 4, 6, 4, 7],
        'M' => [5, 7, 5, 5, 5],
        'N' => [5, 7, 7, 5, 5],
        'U' => [5, 5, 5, 5, 7],
        _ => return None,
    })
}

fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * 4 * scale
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let gx = x0 + i as u32 * 4 * scale;
        for (r, mask) in rows.iter().enumerate() {
            for col in 0..3u32 {
                if mask & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (x, y) = (gx + col * scale + dx, y0 + r as u32 * scale + dy);
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for oy in -(thick / 2)..=(thick / 2) {
            for ox in -(thick / 2)..=(thick / 2) {
                let (px, py) = (x + ox, y + oy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
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

fn save(img: &RgbImage, path: &Path) -> Result<(), EvalError> {
    img.save(path).map_err(|e| EvalError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

/// Heatmap of the normalized matrix, true class down, predicted across,
/// with each cell's value printed to two decimals.
pub fn confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<(), EvalError> {
    const CELL: u32 = 120;
    const MARGIN: u32 = 90;
    let side = MARGIN + CELL * NUM_CLASSES as u32 + 10;
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    for r in 0..NUM_CLASSES {
        for c in 0..NUM_CLASSES {
            let v = cm.values[r][c].clamp(0.0, 1.0);
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
            let fill = Rgb([shade(247.0, 8.0), shade(251.0, 48.0), shade(255.0, 107.0)]);
            let (x0, y0) = (MARGIN + c as u32 * CELL, MARGIN + r as u32 * CELL);
            for y in y0..y0 + CELL - 2 {
                for x in x0..x0 + CELL - 2 {
                    img.put_pixel(x, y, fill);
                }
            }
            let label = format!("{:.2}", cm.values[r][c]);
            let ink = if v > 0.5 { WHITE } else { BLACK };
            draw_text(&mut img, x0 + (CELL - text_width(&label, 5)) / 2, y0 + CELL / 2 - 12, &label, 5, ink);
        }
    }
    for (k, class) in InteractionClass::ALL.iter().enumerate() {
        let tag = class.tag();
        let off = k as u32 * CELL + (CELL - text_width(tag, 2)) / 2;
        draw_text(&mut img, MARGIN + off, MARGIN - 20, tag, 2, BLACK);
        draw_text(&mut img, 6, MARGIN + k as u32 * CELL + CELL / 2 - 5, tag, 2, BLACK);
    }
    save(&img, path)
}

/// Overlaid ROC curves on the unit square, first curve blue, second
/// orange, with the chance diagonal in grey.
pub fn roc_overlay_png(a: &RocCurve, b: &RocCurve, path: &Path) -> Result<(), EvalError> {
    const SIZE: u32 = 420;
    const PAD: i64 = 30;
    let span = SIZE as i64 - 2 * PAD;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, WHITE);
    let to_px = |fpr: f64, tpr: f64| (PAD + (fpr * span as f64).round() as i64, PAD + span - (tpr * span as f64).round() as i64);
    let corners = [to_px(0.0, 0.0), to_px(1.0, 0.0), to_px(1.0, 1.0), to_px(0.0, 1.0)];
    for i in 0..4 {
        draw_line(&mut img, corners[i], corners[(i + 1) % 4], BLACK, 1);
    }
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), GREY, 1);
    for (curve, color) in [(a, BLUE), (b, ORANGE)] {
        for i in 1..curve.fpr.len() {
            draw_line(&mut img, to_px(curve.fpr[i - 1], curve.tpr[i - 1]), to_px(curve.fpr[i], curve.tpr[i]), color, 3);
        }
    }
    draw_text(&mut img, PAD as u32, 8, a.class.tag(), 3, BLACK);
    save(&img, path)
}
