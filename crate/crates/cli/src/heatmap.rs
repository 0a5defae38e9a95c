//! PNG heatmap of a performance matrix.

use std::path::Path;

use gcta_core::PerformanceMatrix;
use image::{Rgb, RgbImage};

const CELL: u32 = 32;
const EMPTY: Rgb<u8> = Rgb([235, 235, 235]);

/// Linear ramp from dark blue (score 0) to yellow (score 1).
fn colour(score: f64) -> Rgb<u8> {
    let s = score.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * s).round() as u8;
    Rgb([lerp(30.0, 250.0), lerp(40.0, 220.0), lerp(110.0, 40.0)])
}

pub fn write_png(path: &Path, m: &PerformanceMatrix) -> Result<(), image::ImageError> {
    let t = m.size().max(1) as u32;
    let img = RgbImage::from_fn(t * CELL, t * CELL, |x, y| {
        let (i, j) = ((y / CELL) as usize, (x / CELL) as usize);
        m.get(i, j).filter(|_| j <= i).map(colour).unwrap_or(EMPTY)
    });
    img.save(path)
}
