//! Minimal raster plots: loss curves and metric bars as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{contract, Result};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
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

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
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

/// One polyline per series, each min-max scaled to the shared y range.
/// Series colors follow the order given.
pub fn loss_curves(series: &[(&str, Vec<f64>)], path: &Path) -> Result<()> {
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(contract("nothing to plot"));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = blank();
    let pw = (W - MARGIN - MARGIN / 2) as f64;
    let ph = (H - MARGIN - MARGIN / 2) as f64;
    for (k, (_, ys)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let n = ys.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            (
                MARGIN as i64 + (i as f64 / n as f64 * pw) as i64,
                (H - MARGIN) as i64 - ((v - lo) / span * ph) as i64,
            )
        };
        for i in 1..ys.len() {
            line(&mut img, pt(i - 1, ys[i - 1]), pt(i, ys[i]), c);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Grouped bars in [0, 1]: one group per row, one bar per value.
pub fn metric_bars(groups: &[(&str, Vec<f64>)], path: &Path) -> Result<()> {
    if groups.is_empty() {
        return Err(contract("nothing to plot"));
    }
    let mut img = blank();
    let per = groups.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1) as u32;
    let slot = (W - MARGIN - MARGIN / 2) / groups.len() as u32;
    let bar = (slot / (per + 1)).max(1);
    let ph = (H - MARGIN - MARGIN / 2) as f64;
    for (g, (_, vals)) in groups.iter().enumerate() {
        for (k, v) in vals.iter().enumerate() {
            let x0 = MARGIN + g as u32 * slot + k as u32 * bar + bar / 2;
            let top = H - MARGIN - (v.clamp(0.0, 1.0) * ph) as u32;
            for x in x0..x0 + bar.saturating_sub(1).max(1) {
                for y in top..H - MARGIN {
                    img.put_pixel(x.min(W - 1), y, Rgb(PALETTE[k % PALETTE.len()]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
