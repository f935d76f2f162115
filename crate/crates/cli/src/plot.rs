//! Line plot of expression channels over time, rendered to PNG.

use image::{Rgb, RgbImage};
use ndarray::Array2;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];
const MARGIN: u32 = 24;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment, two pixels thick.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
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

/// Plot `channels` of a `frames x dims` sequence. The caller validates
/// channel indices.
pub fn plot_channels(seq: &Array2<f64>, channels: &[usize], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (width - MARGIN) as f64);
    let (y0, y1) = (MARGIN as f64, (height - MARGIN) as f64);
    let values = channels.iter().flat_map(|&c| seq.column(c).to_vec());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let frames = seq.nrows().max(2);
    let px = |t: usize| (x0 + (x1 - x0) * t as f64 / (frames - 1) as f64).round() as i64;
    let py = |v: f64| (y1 - (y1 - y0) * (v - lo) / (hi - lo)).round() as i64;

    for k in 0..=4 {
        let y = (y0 + (y1 - y0) * k as f64 / 4.0).round() as i64;
        line(&mut img, (x0 as i64, y), (x1 as i64, y), GRID);
    }
    if lo < 0.0 && hi > 0.0 {
        line(&mut img, (x0 as i64, py(0.0)), (x1 as i64, py(0.0)), Rgb([170, 170, 170]));
    }
    line(&mut img, (x0 as i64, y1 as i64), (x1 as i64, y1 as i64), AXIS);
    line(&mut img, (x0 as i64, y0 as i64), (x0 as i64, y1 as i64), AXIS);

    for (i, &c) in channels.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let col = seq.column(c);
        for t in 1..seq.nrows() {
            line(&mut img, (px(t - 1), py(col[t - 1])), (px(t), py(col[t])), color);
        }
        // Legend swatch in the top margin.
        let sx = MARGIN as i64 + 14 * i as i64;
        for d in 0..10 {
            line(&mut img, (sx, 6 + d), (sx + 9, 6 + d), color);
        }
    }
    img
}
