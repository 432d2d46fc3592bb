use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::resample::{crop_center, pad_center, resize_bilinear, resize_nearest};
use super::SliceSample;
use crate::error::{Error, Result};

/// Side length the transformer backbone consumes (32 patches of 14 px).
pub const VIT_INPUT_SIZE: usize = 448;

/// Channel statistics the published backbone weights were pretrained with.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Replicates a grayscale slice into a channel-first `(3, H, W)` array.
pub fn to_three_channel(image: ArrayView2<'_, f32>) -> Array3<f32> {
    let (h, w) = image.dim();
    let mut out = Array3::zeros((3, h, w));
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.assign(&image);
    }
    out
}

fn zscore(img: &mut Array2<f32>) {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    img.mapv_inplace(|v| ((v as f64 - mean) * scale) as f32);
}

/// What to do with slices larger than the padding target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OversizePolicy {
    #[default]
    Reject,
    CenterCrop,
}

/// CNN-baseline preprocessing: symmetric zero padding to the corpus-max
/// square, resize to `target`, per-slice z-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePreprocess {
    pub pad_target: usize,
    pub target: usize,
    #[serde(default)]
    pub oversize: OversizePolicy,
}

impl Default for BaselinePreprocess {
    fn default() -> Self {
        Self {
            pad_target: 640,
            target: 320,
            oversize: OversizePolicy::Reject,
        }
    }
}

impl BaselinePreprocess {
    pub fn new(pad_target: usize, target: usize) -> Self {
        Self {
            pad_target,
            target,
            oversize: OversizePolicy::Reject,
        }
    }

    fn fit<T: Copy + Default>(&self, img: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let (h, w) = img.dim();
        let p = self.pad_target;
        if (h > p || w > p) && self.oversize == OversizePolicy::Reject {
            return Err(Error::invalid(format!(
                "slice {h}x{w} exceeds pad target {p}"
            )));
        }
        let cropped = crop_center(img, h.min(p), w.min(p));
        Ok(pad_center(cropped.view(), p, p, T::default()))
    }

    pub fn apply(&self, s: &SliceSample) -> Result<(Array2<f32>, Array2<u8>)> {
        let t = self.target;
        let img = self.fit(s.image.view())?;
        let mask = self.fit(s.mask.view())?;
        let mut img = resize_bilinear(img.view(), t, t);
        zscore(&mut img);
        Ok((img, resize_nearest(mask.view(), t, t)))
    }

    /// Maps a model-resolution mask back onto the native `(h, w)` grid.
    pub fn restore(&self, pred: ArrayView2<'_, u8>, h: usize, w: usize) -> Array2<u8> {
        let p = self.pad_target;
        let padded = resize_nearest(pred, p, p);
        let inner = crop_center(padded.view(), h.min(p), w.min(p));
        if (h, w) == inner.dim() {
            inner
        } else {
            pad_center(inner.view(), h, w, 0)
        }
    }
}

/// Normalisation applied on the transformer path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VitNorm {
    /// Min-max rescale to `[0, 1]`, then per-channel `(x - mean) / std`.
    Channel { mean: [f32; 3], std: [f32; 3] },
    /// Per-slice z-score, identical for all three channels.
    SliceZScore,
}

impl Default for VitNorm {
    fn default() -> Self {
        VitNorm::Channel {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VitPreprocess {
    pub norm: VitNorm,
}

impl VitPreprocess {
    pub fn new(norm: VitNorm) -> Self {
        Self { norm }
    }

    /// Returns the `(3, 448, 448)` image and the `(448, 448)` mask.
    pub fn apply(&self, s: &SliceSample) -> (Array3<f32>, Array2<u8>) {
        let n = VIT_INPUT_SIZE;
        let mut img = resize_bilinear(s.image.view(), n, n);
        let mask = resize_nearest(s.mask.view(), n, n);
        match self.norm {
            VitNorm::SliceZScore => {
                zscore(&mut img);
                (to_three_channel(img.view()), mask)
            }
            VitNorm::Channel { mean, std } => {
                let (lo, hi) = img
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                let range = hi - lo;
                if range > 0.0 {
                    img.mapv_inplace(|v| (v - lo) / range);
                } else {
                    img.fill(0.0);
                }
                let mut out = to_three_channel(img.view());
                for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
                    ch.mapv_inplace(|v| (v - mean[c]) / std[c]);
                }
                (out, mask)
            }
        }
    }

    pub fn restore(&self, pred: ArrayView2<'_, u8>, h: usize, w: usize) -> Array2<u8> {
        resize_nearest(pred, h, w)
    }
}
