use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub const PRED_ONLY: Rgb<u8> = Rgb([0, 255, 0]);
pub const GT_ONLY: Rgb<u8> = Rgb([255, 0, 0]);
pub const AGREE: Rgb<u8> = Rgb([255, 255, 0]);

/// Grey slice with prediction in green, ground truth in red and their
/// overlap in yellow. Background grey stays below 230 so it never collides
/// with a tint colour.
pub fn render_overlay(
    image: ArrayView2<'_, f32>,
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
) -> Result<RgbImage> {
    if image.dim() != pred.dim() || pred.dim() != gt.dim() {
        return Err(Error::shape(
            "overlay inputs",
            image.shape(),
            if image.dim() != pred.dim() { pred.shape() } else { gt.shape() },
        ));
    }
    let (h, w) = image.dim();
    let (lo, hi) = image
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in image.indexed_iter() {
        let px = match (pred[[r, c]] != 0, gt[[r, c]] != 0) {
            (true, true) => AGREE,
            (true, false) => PRED_ONLY,
            (false, true) => GT_ONLY,
            (false, false) => {
                let g = if v.is_finite() { ((v - lo) / range * 229.0).round() as u8 } else { 0 };
                Rgb([g, g, g])
            }
        };
        out.put_pixel(c as u32, r as u32, px);
    }
    Ok(out)
}

pub fn save_overlay(
    path: &Path,
    image: ArrayView2<'_, f32>,
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
) -> Result<()> {
    render_overlay(image, pred, gt)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Counts of (green, red, yellow) pixels.
pub fn tint_counts(img: &RgbImage) -> (usize, usize, usize) {
    img.pixels().fold((0, 0, 0), |(g, r, y), p| match *p {
        PRED_ONLY => (g + 1, r, y),
        GT_ONLY => (g, r + 1, y),
        AGREE => (g, r, y + 1),
        _ => (g, r, y),
    })
}
