//! Resampling kernels shared by the preprocessing paths and the
//! differentiable resize op.
//!
//! Bilinear uses half-pixel centres (`align_corners = false`) without
//! antialiasing; nearest uses `src = floor(dst * in / out)`.

use ndarray::{Array2, ArrayView2};

/// Two-tap linear interpolation weights for one output coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len).map(|o| o * in_len / out_len).collect()
}

pub fn resize_bilinear(img: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    // Horizontal pass first, then vertical.
    let mut tmp = Array2::<f64>::zeros((h, out_w));
    for r in 0..h {
        for (c, t) in tx.iter().enumerate() {
            let a = img[[r, t.lo]] as f64;
            let b = img[[r, t.hi]] as f64;
            tmp[[r, c]] = a + (b - a) * t.frac;
        }
    }
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for (r, t) in ty.iter().enumerate() {
        for c in 0..out_w {
            let a = tmp[[t.lo, c]];
            let b = tmp[[t.hi, c]];
            out[[r, c]] = (a + (b - a) * t.frac) as f32;
        }
    }
    out
}

pub fn resize_nearest<T: Copy>(img: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let iy = nearest_indices(h, out_h);
    let ix = nearest_indices(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| img[[iy[r], ix[c]]])
}

/// Symmetric padding to `(th, tw)`; the extra pixel of an odd margin goes
/// to the bottom/right.
pub fn pad_center<T: Copy>(img: ArrayView2<'_, T>, th: usize, tw: usize, fill: T) -> Array2<T> {
    let (h, w) = img.dim();
    assert!(h <= th && w <= tw, "pad target smaller than image");
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let mut out = Array2::from_elem((th, tw), fill);
    out.slice_mut(ndarray::s![top..top + h, left..left + w])
        .assign(&img);
    out
}

/// Centre crop to `(th, tw)`, the same offsets [`pad_center`] uses.
pub fn crop_center<T: Copy>(img: ArrayView2<'_, T>, th: usize, tw: usize) -> Array2<T> {
    let (h, w) = img.dim();
    assert!(th <= h && tw <= w, "crop target larger than image");
    let (top, left) = ((h - th) / 2, (w - tw) / 2);
    img.slice(ndarray::s![top..top + th, left..left + tw])
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn taps_match_half_pixel_convention() {
        // 2 -> 4 upsampling: src = (o + 0.5) / 2 - 0.5
        let t = linear_taps(2, 4);
        assert_eq!((t[0].lo, t[0].hi, t[0].frac), (0, 1, 0.0));
        assert_eq!((t[1].lo, t[1].hi), (0, 1));
        assert!((t[1].frac - 0.25).abs() < 1e-12);
        assert!((t[2].frac - 0.75).abs() < 1e-12);
        assert_eq!((t[3].lo, t[3].hi, t[3].frac), (1, 1, 0.0));
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let img = Array2::from_elem((7, 5), 0.7f32);
        let out = resize_bilinear(img.view(), 13, 9);
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let img = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(resize_bilinear(img.view(), 2, 2), img);
    }

    #[test]
    fn bilinear_two_to_four() {
        let img = array![[0.0f32, 4.0]];
        let out = resize_bilinear(img.view(), 1, 4);
        assert_eq!(out, array![[0.0f32, 1.0, 3.0, 4.0]]);
    }

    #[test]
    fn nearest_round_trips_integer_upsampling() {
        let m = array![[0u8, 1], [1, 0]];
        let up = resize_nearest(m.view(), 6, 6);
        assert_eq!(resize_nearest(up.view(), 2, 2), m);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as u8);
        let p = pad_center(m.view(), 8, 9, 0);
        assert_eq!(p.dim(), (8, 9));
        assert_eq!(crop_center(p.view(), 3, 4), m);
    }
}
